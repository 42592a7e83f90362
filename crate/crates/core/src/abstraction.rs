//! Uniform grids, per-class symbolic models and alternating-simulation checks.
//!
//! A grid `[S]_η` is the set of integer multiples of `η` inside a box union.
//! Points are stored by integer index; when `1/η` is an integer `m` the value
//! of index `k` is computed as `k / m`, which is the correctly rounded decimal
//! (so `73 / 10` is exactly the double nearest to 7.3).
//!
//! A symbolic model enumerates every (state, input, internal) triple and keeps
//! its successors as one contiguous index run plus an OUT flag.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gains::DeltaIssCertificate;
use crate::kfun::{KfnError, DEFAULT_INVERSE_TOL};
use crate::netspec::{BoxSet, InputSet, SubsystemClass};
use crate::num::reciprocal_integer;

/// Default cap on `|X̂|·|Û|·|Ŵ|`.
pub const DEFAULT_MAX_SIZE: u64 = 100_000_000;

const SUCCESSOR_REL_TOL: f64 = 1e-9;
const TIE_REL_TOL: f64 = 1e-12;
const OUT_BIT: u8 = 0x80;
const MAGIC: &[u8; 8] = b"INFNSYM1";

#[derive(Debug, Error)]
pub enum AbstractionError {
    #[error("grid pitch {eta} must lie in (0, {span}]")]
    BadPitch { eta: f64, span: f64 },
    #[error("{x} lies outside {set}")]
    OutsideDomain { x: f64, set: String },
    #[error("model for {class} needs {size} triples, above the cap {cap}")]
    TooLarge { class: String, size: u64, cap: u64 },
    #[error("input set of {0} is a continuum and needs a positive input pitch")]
    ContinuousInputs(String),
    #[error("{class}: expected {expected} internal slots, got {got}")]
    SlotMismatch {
        class: String,
        expected: usize,
        got: usize,
    },
    #[error("empty internal grid for slot {slot} of {class}")]
    EmptySlot { class: String, slot: usize },
    #[error("model dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kfn(#[from] KfnError),
}

/// `span(S)`: smallest side length over the boxes.
pub fn span(set: &BoxSet) -> f64 {
    set.span()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridSpec {
    eta: f64,
    set: BoxSet,
}

/// `[S]_η` with integer indices running through the boxes in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    eta: f64,
    recip: Option<f64>,
    set: BoxSet,
    /// Per box: first multiple index, last multiple index, first global index.
    runs: Vec<(i64, i64, usize)>,
    len: usize,
}

impl TryFrom<GridSpec> for Grid {
    type Error = AbstractionError;
    fn try_from(g: GridSpec) -> Result<Self, Self::Error> {
        Grid::new(g.eta, &g.set)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> Self {
        GridSpec {
            eta: g.eta,
            set: g.set,
        }
    }
}

impl Grid {
    pub fn new(eta: f64, set: &BoxSet) -> Result<Self, AbstractionError> {
        let span = set.span();
        if !(eta > 0.0 && eta <= span * (1.0 + 1e-12)) {
            return Err(AbstractionError::BadPitch { eta, span });
        }
        let recip = reciprocal_integer(eta);
        let scale = |x: f64| match recip {
            Some(m) => x * m,
            None => x / eta,
        };
        let mut runs = Vec::new();
        let mut len = 0usize;
        for b in set.boxes() {
            let guard = 1e-9;
            let mut k0 = (scale(b.lo) - guard).ceil() as i64;
            let mut k1 = (scale(b.hi) + guard).floor() as i64;
            // the guard may admit a multiple a rounding error outside the box
            let value = |k: i64| match recip {
                Some(m) => k as f64 / m,
                None => k as f64 * eta,
            };
            if value(k0) < b.lo && (b.lo - value(k0)) > 1e-9 * eta {
                k0 += 1;
            }
            if value(k1) > b.hi && (value(k1) - b.hi) > 1e-9 * eta {
                k1 -= 1;
            }
            if k1 < k0 {
                return Err(AbstractionError::BadPitch { eta, span });
            }
            runs.push((k0, k1, len));
            len += (k1 - k0 + 1) as usize;
        }
        Ok(Grid {
            eta,
            recip,
            set: set.clone(),
            runs,
            len,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn set(&self) -> &BoxSet {
        &self.set
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn at(&self, k: i64) -> f64 {
        match self.recip {
            Some(m) => k as f64 / m,
            None => k as f64 * self.eta,
        }
    }

    fn run_of(&self, idx: usize) -> usize {
        self.runs.partition_point(|r| r.2 <= idx) - 1
    }

    pub fn value(&self, idx: usize) -> f64 {
        let (k0, _, off) = self.runs[self.run_of(idx)];
        self.at(k0 + (idx - off) as i64)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.value(i)).collect()
    }

    /// Index of an exact grid value.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let q = self.quantize_index(x).ok()?;
        (self.value(q) == x).then_some(q)
    }

    /// Nearest grid point, ties toward the smaller one.
    pub fn quantize_index(&self, x: f64) -> Result<usize, AbstractionError> {
        let b = self
            .set
            .boxes()
            .iter()
            .position(|b| b.contains(x))
            .ok_or_else(|| AbstractionError::OutsideDomain {
                x,
                set: self.set.to_string(),
            })?;
        let (k0, k1, off) = self.runs[b];
        let approx = match self.recip {
            Some(m) => x * m,
            None => x / self.eta,
        };
        let kf = (approx.floor() as i64).clamp(k0, k1);
        let mut best = kf;
        let mut best_d = (x - self.at(kf)).abs();
        for k in [kf - 1, kf + 1] {
            if k < k0 || k > k1 {
                continue;
            }
            let d = (x - self.at(k)).abs();
            let tie = (d - best_d).abs() <= TIE_REL_TOL * self.eta;
            if (d < best_d && !tie) || (tie && k < best) {
                best = k;
                best_d = d;
            }
        }
        Ok(off + (best - k0) as usize)
    }

    pub fn quantize(&self, x: f64) -> Result<f64, AbstractionError> {
        Ok(self.value(self.quantize_index(x)?))
    }

    /// Inclusive index range of the grid points within the closed ball
    /// `|p - c| <= r`, with a relative guard of `1e-9·η`.
    pub fn ball_range(&self, c: f64, r: f64) -> Option<(usize, usize)> {
        let rr = r + SUCCESSOR_REL_TOL * self.eta;
        let mut first = None;
        let mut last = None;
        for &(k0, k1, off) in &self.runs {
            let (lo, hi) = match self.recip {
                Some(m) => ((c - rr) * m, (c + rr) * m),
                None => ((c - rr) / self.eta, (c + rr) / self.eta),
            };
            let a = (lo.floor() as i64 - 1).max(k0);
            let b = (hi.ceil() as i64 + 1).min(k1);
            for k in a..=b {
                if (self.at(k) - c).abs() <= rr {
                    let idx = off + (k - k0) as usize;
                    first.get_or_insert(idx);
                    last = Some(idx);
                }
            }
        }
        Some((first?, last?))
    }
}

/// Decides when a transition goes to the OUT sink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutRule {
    /// OUT iff the image leaves `X` or no grid point lies within `η˟` of it.
    #[default]
    ImageOutside,
    /// OUT iff the closed `η˟`-ball around the image is not inside one box of
    /// `X`. Concrete states then stay in `X` whenever their distance to the
    /// abstract image is below `η˟`.
    BallOutside,
}

/// Internal-input grid for one slot: the neighbor's output grid itself when
/// `phi = 0`, else the multiples of `phi` covering it.
pub fn slot_grid(neighbor_outputs: &[f64], phi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = neighbor_outputs.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if phi == 0.0 || v.is_empty() {
        return v;
    }
    let lo = (v[0] / phi).floor() as i64;
    let hi = (v[v.len() - 1] / phi).ceil() as i64;
    let at = |k: i64| match reciprocal_integer(phi) {
        Some(m) => k as f64 / m,
        None => k as f64 * phi,
    };
    (lo..=hi).map(at).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    class: String,
    out_rule: OutRule,
    eta_x: f64,
    eta_u: f64,
    phi: Vec<f64>,
    states: Grid,
    inputs: Vec<f64>,
    slots: Vec<Vec<f64>>,
}

/// Finite transition system of one subsystem profile.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicModel {
    pub class: String,
    pub out_rule: OutRule,
    pub eta_x: f64,
    pub eta_u: f64,
    pub phi: Vec<f64>,
    pub states: Grid,
    pub inputs: Vec<f64>,
    /// Internal grid per neighbor slot.
    pub slots: Vec<Vec<f64>>,
    combos: usize,
    lo: Vec<u32>,
    /// Successor count, with [`OUT_BIT`] marking the OUT sink.
    meta: Vec<u8>,
}

/// Successors of one triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Successors {
    Out,
    Range(usize, usize),
}

impl SymbolicModel {
    pub fn build(
        class: &SubsystemClass,
        eta_x: f64,
        eta_u: f64,
        slots: Vec<Vec<f64>>,
        phi: Vec<f64>,
        out_rule: OutRule,
        max_size: u64,
    ) -> Result<Self, AbstractionError> {
        let states = Grid::new(eta_x, &class.state_set)?;
        let inputs = match &class.input_set {
            InputSet::Finite(v) => v.clone(),
            InputSet::Boxes(b) if eta_u > 0.0 => Grid::new(eta_u, b)?.values(),
            InputSet::Boxes(_) => return Err(AbstractionError::ContinuousInputs(class.id.clone())),
        };
        if slots.len() != class.dynamics.slots() {
            return Err(AbstractionError::SlotMismatch {
                class: class.id.clone(),
                expected: class.dynamics.slots(),
                got: slots.len(),
            });
        }
        if let Some(s) = slots.iter().position(Vec::is_empty) {
            return Err(AbstractionError::EmptySlot {
                class: class.id.clone(),
                slot: s,
            });
        }
        let combos: u64 = slots.iter().map(|s| s.len() as u64).product();
        let size = states.len() as u64 * inputs.len() as u64 * combos;
        if size > max_size || size > u32::MAX as u64 {
            return Err(AbstractionError::TooLarge {
                class: class.id.clone(),
                size,
                cap: max_size,
            });
        }
        let combos = combos as usize;
        let mut lo = vec![0u32; size as usize];
        let mut meta = vec![0u8; size as usize];
        let mut w = vec![0.0; slots.len()];
        let mut t = 0usize;
        for xi in 0..states.len() {
            let x = states.value(xi);
            for &u in &inputs {
                for c in 0..combos {
                    decode_combo(c, &slots, &mut w);
                    let img = class.dynamics.eval(x, u, &w);
                    match successor_of(&states, img, out_rule) {
                        Successors::Out => meta[t] = OUT_BIT,
                        Successors::Range(a, b) => {
                            lo[t] = a as u32;
                            meta[t] = (b - a + 1) as u8;
                        }
                    }
                    t += 1;
                }
            }
        }
        Ok(SymbolicModel {
            class: class.id.clone(),
            out_rule,
            eta_x,
            eta_u,
            phi,
            states,
            inputs,
            slots,
            combos,
            lo,
            meta,
        })
    }

    pub fn combos(&self) -> usize {
        self.combos
    }

    pub fn triple_count(&self) -> usize {
        self.meta.len()
    }

    pub fn triple(&self, x: usize, u: usize, w: usize) -> usize {
        (x * self.inputs.len() + u) * self.combos + w
    }

    pub fn successors(&self, x: usize, u: usize, w: usize) -> Successors {
        let t = self.triple(x, u, w);
        if self.meta[t] & OUT_BIT != 0 {
            Successors::Out
        } else {
            let a = self.lo[t] as usize;
            Successors::Range(a, a + self.meta[t] as usize - 1)
        }
    }

    /// Internal input values of a slot combination.
    pub fn internal(&self, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.slots.len()];
        decode_combo(w, &self.slots, &mut out);
        out
    }

    /// Combination index of per-slot indices.
    pub fn combo_index(&self, per_slot: &[usize]) -> usize {
        per_slot
            .iter()
            .zip(&self.slots)
            .fold(0, |acc, (&i, s)| acc * s.len() + i)
    }

    pub fn out_count(&self) -> usize {
        self.meta.iter().filter(|&&m| m & OUT_BIT != 0).count()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), AbstractionError> {
        let header = serde_json::to_vec(&ModelHeader {
            class: self.class.clone(),
            out_rule: self.out_rule,
            eta_x: self.eta_x,
            eta_u: self.eta_u,
            phi: self.phi.clone(),
            states: self.states.clone(),
            inputs: self.inputs.clone(),
            slots: self.slots.clone(),
        })
        .map_err(|e| AbstractionError::Dump(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.meta.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.lo.len() * 4);
        for v in &self.lo {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.write_all(&self.meta)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, AbstractionError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AbstractionError::Dump("not a symbolic model dump".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: ModelHeader =
            serde_json::from_slice(&header).map_err(|e| AbstractionError::Dump(e.to_string()))?;
        r.read_exact(&mut len)?;
        let n = u64::from_le_bytes(len) as usize;
        let combos: usize = h.slots.iter().map(Vec::len).product();
        if n != h.states.len() * h.inputs.len() * combos {
            return Err(AbstractionError::Dump(format!("table length {n} does not match the grids")));
        }
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let lo = buf
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut meta = vec![0u8; n];
        r.read_exact(&mut meta)?;
        Ok(SymbolicModel {
            class: h.class,
            out_rule: h.out_rule,
            eta_x: h.eta_x,
            eta_u: h.eta_u,
            phi: h.phi,
            states: h.states,
            inputs: h.inputs,
            slots: h.slots,
            combos,
            lo,
            meta,
        })
    }
}

fn decode_combo(mut c: usize, slots: &[Vec<f64>], out: &mut [f64]) {
    for s in (0..slots.len()).rev() {
        let n = slots[s].len();
        out[s] = slots[s][c % n];
        c /= n;
    }
}

/// Successor rule for one abstract image.
pub fn successor_of(states: &Grid, img: f64, rule: OutRule) -> Successors {
    let eta = states.eta();
    let inside = match rule {
        OutRule::ImageOutside => states.set().contains(img),
        OutRule::BallOutside => states
            .set()
            .boxes()
            .iter()
            .any(|b| {
                let tol = SUCCESSOR_REL_TOL * eta;
                b.lo <= img - eta + tol && img + eta <= b.hi + tol
            }),
    };
    if !inside {
        return Successors::Out;
    }
    match states.ball_range(img, eta) {
        Some((a, b)) => Successors::Range(a, b),
        None => Successors::Out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsfParams {
    /// Local precision `ϖ_i`.
    pub varpi: f64,
    /// Internal-input tolerance `ϑ_i`.
    pub vartheta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsfCounterexample {
    pub x: f64,
    pub xhat: f64,
    pub u: f64,
    pub what: Vec<f64>,
    pub w: Vec<f64>,
    pub x_next: f64,
    /// Smallest `V(x⁺, x̂⁺)` over the abstract successors.
    pub best_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsfReport {
    pub class: String,
    pub params: AsfParams,
    /// Trials that met the premise and were checked.
    pub checked: usize,
    /// Draws discarded because `x`, `x⁺` or the abstract image left `X`.
    pub skipped: usize,
    pub max_v: f64,
    pub violations: usize,
    /// First few counterexamples.
    pub counterexamples: Vec<AsfCounterexample>,
}

impl AsfReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Randomized check of the one-step local ASF condition: for concrete and
/// abstract states within `ϖ_i`, `u = û` and `|w - ŵ| <= ϑ_i` per slot, some
/// abstract successor keeps `V_i(x⁺, x̂⁺) <= ϖ_i`.
///
/// `slot_domains` bounds the concrete internal inputs (the neighbors' output
/// ranges). Draws outside the premise are resampled, up to 100 attempts per
/// requested trial.
pub fn check_local_asf(
    class: &SubsystemClass,
    cert: &DeltaIssCertificate,
    model: &SymbolicModel,
    params: AsfParams,
    slot_domains: &[BoxSet],
    samples: usize,
    seed: u64,
) -> AsfReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = cert.lyapunov.radius(params.varpi);
    let nx = model.states.len();
    let nu = model.inputs.len();
    let mut report = AsfReport {
        class: model.class.clone(),
        params,
        checked: 0,
        skipped: 0,
        max_v: 0.0,
        violations: 0,
        counterexamples: Vec::new(),
    };
    let mut w_idx = vec![0usize; model.slots.len()];
    let mut w = vec![0.0; model.slots.len()];
    let mut attempts = 0usize;
    while report.checked < samples && attempts < samples.saturating_mul(100) {
        attempts += 1;
        let xi = rng.gen_range(0..nx);
        let xhat = model.states.value(xi);
        let x = xhat + rng.gen_range(-radius..=radius);
        let ui = rng.gen_range(0..nu);
        let mut premise = class.state_set.contains(x) && cert.lyapunov(x, xhat) <= params.varpi;
        for (s, slot) in model.slots.iter().enumerate() {
            w_idx[s] = rng.gen_range(0..slot.len());
            w[s] = slot[w_idx[s]] + rng.gen_range(-params.vartheta..=params.vartheta);
            if let Some(dom) = slot_domains.get(s) {
                premise &= dom.contains(w[s]);
            }
        }
        let u = model.inputs[ui];
        let x_next = class.dynamics.eval(x, u, &w);
        let combo = model.combo_index(&w_idx);
        let succ = model.successors(xi, ui, combo);
        premise &= class.state_set.contains(x_next);
        let Successors::Range(a, b) = succ else {
            report.skipped += 1;
            continue;
        };
        if !premise {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let best_v = (a..=b)
            .map(|k| cert.lyapunov(x_next, model.states.value(k)))
            .fold(f64::INFINITY, f64::min);
        report.max_v = report.max_v.max(best_v);
        if best_v > params.varpi {
            report.violations += 1;
            if report.counterexamples.len() < 8 {
                report.counterexamples.push(AsfCounterexample {
                    x,
                    xhat,
                    u,
                    what: model.internal(combo),
                    w: w.clone(),
                    x_next,
                    best_v,
                });
            }
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalAsf {
    /// `V̄ = sup_i (ϖ/ϖ_i)·V_i(x_i, x̂_i)`
    pub vbar: f64,
    /// `sup_i |h_i(x_i) - h_i(x̂_i)|`
    pub mismatch: f64,
    /// `max_i α̲_i⁻¹((ϖ_i/ϖ)·V̄)`, the mismatch bound implied by `V̄`.
    pub mismatch_bound: f64,
    pub consistent: bool,
}

/// Per-node data for [`eval_global_asf`].
#[derive(Debug, Clone)]
pub struct NodeAsf<'a> {
    pub cert: &'a DeltaIssCertificate,
    pub output: crate::netspec::OutputMap,
    pub varpi: f64,
}

/// Network-level ASF value and output mismatch over a truncation.
pub fn eval_global_asf(
    nodes: &[NodeAsf<'_>],
    varpi: f64,
    x: &[f64],
    xhat: &[f64],
) -> Result<GlobalAsf, AbstractionError> {
    assert_eq!(nodes.len(), x.len());
    assert_eq!(nodes.len(), xhat.len());
    let mut vbar = 0.0_f64;
    let mut mismatch = 0.0_f64;
    for ((n, &xi), &xh) in nodes.iter().zip(x).zip(xhat) {
        vbar = vbar.max(varpi / n.varpi * n.cert.lyapunov(xi, xh));
        mismatch = mismatch.max((n.output.eval(xi) - n.output.eval(xh)).abs());
    }
    let mut bound = 0.0_f64;
    for n in nodes {
        let alpha = n
            .cert
            .alpha_lo()
            .map_err(|e| KfnError::Malformed(e.to_string()))?;
        bound = bound.max(alpha.inverse(n.varpi / varpi * vbar, DEFAULT_INVERSE_TOL)?);
    }
    Ok(GlobalAsf {
        vbar,
        mismatch,
        mismatch_bound: bound,
        consistent: mismatch <= bound * (1.0 + 1e-9) + 1e-15,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{parse_network, OutputMap};
    use proptest::prelude::*;

    const TRAFFIC: &str = include_str!("../../../configs/traffic.cfg");

    fn low() -> Grid {
        Grid::new(0.1, &BoxSet::interval(5.0, 15.0)).unwrap()
    }

    #[test]
    fn span_examples() {
        assert_eq!(span(&BoxSet::interval(5.0, 15.0)), 10.0);
        assert_eq!(span(&BoxSet::new([(0.0, 1.0), (2.0, 2.5)]).unwrap()), 0.5);
    }

    #[test]
    fn traffic_grid() {
        let g = low();
        assert_eq!(g.len(), 101);
        assert_eq!(g.value(0), 5.0);
        assert_eq!(g.value(100), 15.0);
        assert_eq!(g.value(23), 7.3);
    }

    #[test]
    fn quantize_examples() {
        let g = low();
        assert_eq!(g.quantize(7.23).unwrap(), 7.2);
        assert_eq!(g.quantize(7.25).unwrap(), 7.2);
        assert_eq!(g.quantize(5.04).unwrap(), 5.0);
        assert!(matches!(g.quantize(4.2), Err(AbstractionError::OutsideDomain { .. })));
    }

    #[test]
    fn ball_examples() {
        let g = low();
        let vals = |r: Option<(usize, usize)>| {
            let (a, b) = r.unwrap();
            (a..=b).map(|k| g.value(k)).collect::<Vec<_>>()
        };
        assert_eq!(vals(g.ball_range(7.23, 0.1)), vec![7.2, 7.3]);
        assert_eq!(vals(g.ball_range(7.2, 0.1)), vec![7.1, 7.2, 7.3]);
        assert_eq!(successor_of(&g, 16.0, OutRule::ImageOutside), Successors::Out);
        assert_eq!(successor_of(&g, 15.0, OutRule::ImageOutside), Successors::Range(99, 100));
        assert_eq!(successor_of(&g, 14.95, OutRule::BallOutside), Successors::Out);
        assert_eq!(successor_of(&g, 14.9, OutRule::BallOutside), Successors::Range(98, 100));
    }

    #[test]
    fn pitch_bounds() {
        let s = BoxSet::interval(0.0, 1.0);
        assert!(Grid::new(1.0, &s).is_ok());
        assert!(Grid::new(1.5, &s).is_err());
        assert!(Grid::new(0.0, &s).is_err());
        let two = BoxSet::new([(0.0, 1.0), (2.0, 2.5)]).unwrap();
        let g = Grid::new(0.5, &two).unwrap();
        assert_eq!(g.values(), vec![0.0, 0.5, 1.0, 2.0, 2.5]);
        let odd = Grid::new(0.3, &BoxSet::interval(0.1, 1.0)).unwrap();
        assert_eq!(odd.len(), 3);
    }

    proptest! {
        #[test]
        fn grid_matches_enumeration(lo in -50i64..50, width in 1i64..40, pick in 0usize..3) {
            let eta = [0.1, 0.25, 0.5][pick];
            let set = BoxSet::interval(lo as f64 * 0.5, (lo + width) as f64 * 0.5);
            let g = Grid::new(eta, &set).unwrap();
            let mut naive = Vec::new();
            let mut k = (set.lo() / eta).ceil() as i64 - 2;
            while (k as f64) * eta <= set.hi() + 1e-9 {
                let v = k as f64 * eta;
                if v >= set.lo() - 1e-9 { naive.push(v); }
                k += 1;
            }
            prop_assert_eq!(g.len(), naive.len());
            for (i, v) in naive.iter().enumerate() {
                prop_assert!((g.value(i) - v).abs() < 1e-9);
                prop_assert!(set.contains(g.value(i)));
                prop_assert_eq!(g.quantize_index(g.value(i)).unwrap(), i);
            }
        }

        #[test]
        fn quantize_error_is_half_pitch(x in 5.0f64..15.0) {
            let g = low();
            let q = g.quantize(x).unwrap();
            prop_assert!((q - x).abs() <= 0.05 + 1e-12);
        }

        #[test]
        fn ball_is_sound_and_complete(c in 4.0f64..16.0) {
            let g = low();
            let r = g.ball_range(c, 0.1);
            for k in 0..g.len() {
                let inside = (g.value(k) - c).abs() <= 0.1;
                let listed = r.map_or(false, |(a, b)| a <= k && k <= b);
                if listed { prop_assert!((g.value(k) - c).abs() <= 0.1 + 1e-9); }
                if inside { prop_assert!(listed); }
            }
            if let Some((a, b)) = r { prop_assert!(b - a < 3); }
        }
    }

    fn traffic_class(id: &str) -> SubsystemClass {
        let spec = parse_network(TRAFFIC).unwrap().0;
        spec.classes[spec.class_index(id).unwrap()].clone()
    }

    fn single_model() -> (SubsystemClass, SymbolicModel) {
        let class = traffic_class("low_single");
        let slot = low().values();
        let m = SymbolicModel::build(&class, 0.1, 0.0, vec![slot], vec![0.0], OutRule::ImageOutside, DEFAULT_MAX_SIZE)
            .unwrap();
        (class, m)
    }

    #[test]
    fn model_transitions_recheck() {
        let (class, m) = single_model();
        assert_eq!(m.triple_count(), 101 * 2 * 101);
        for x in 0..m.states.len() {
            for u in 0..m.inputs.len() {
                for w in 0..m.combos() {
                    let img = class.dynamics.eval(m.states.value(x), m.inputs[u], &m.internal(w));
                    match m.successors(x, u, w) {
                        Successors::Out => assert!(!(5.0..=15.0).contains(&img)),
                        Successors::Range(a, b) => {
                            assert!(b - a < 3);
                            for k in 0..m.states.len() {
                                let near = (m.states.value(k) - img).abs() <= 0.1 + 1e-10;
                                assert_eq!(near, a <= k && k <= b);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn size_cap() {
        let class = traffic_class("low_pair");
        let slot = low().values();
        let err = SymbolicModel::build(&class, 0.1, 0.0, vec![slot.clone(), slot], vec![0.0; 2], OutRule::BallOutside, 1000)
            .unwrap_err();
        assert!(matches!(err, AbstractionError::TooLarge { size: 2_060_602, .. }));
    }

    #[test]
    fn dump_round_trip() {
        let (_, m) = single_model();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = SymbolicModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        buf[0] = b'X';
        assert!(SymbolicModel::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn slot_grids() {
        assert_eq!(slot_grid(&[1.0, 0.5, 1.0], 0.0), vec![0.5, 1.0]);
        assert_eq!(slot_grid(&[0.55, 0.75], 0.25), vec![0.5, 0.75]);
    }

    #[test]
    fn local_asf_holds_for_design() {
        let (class, m) = single_model();
        let cert = class.certificate().unwrap();
        let doms = vec![BoxSet::interval(5.0, 15.0)];
        let params = AsfParams { varpi: 0.8, vartheta: 0.8 };
        let r = check_local_asf(&class, &cert, &m, params, &doms, 1000, 7);
        assert_eq!(r.checked, 1000);
        assert!(r.passed(), "{:?}", r.counterexamples);
        assert!(r.max_v <= 0.8);
    }

    #[test]
    fn forged_precision_is_caught() {
        let (class, m) = single_model();
        let cert = class.certificate().unwrap();
        let doms = vec![BoxSet::interval(5.0, 15.0)];
        let params = AsfParams { varpi: 0.05, vartheta: 0.8 };
        let r = check_local_asf(&class, &cert, &m, params, &doms, 1000, 7);
        assert!(!r.passed());
        assert!(r.counterexamples[0].best_v > 0.05);
    }

    #[test]
    fn decoupled_one_step_bound() {
        let text = r#"{
          "classes": [{"id": "c", "state_set": [[0, 10]], "input_set": {"values": [0]},
                       "dynamics": {"kind": "affine", "a": 0.5, "b": 1, "d": []}}],
          "subnetworks": [{"id": "S", "strongly_connected": false,
                           "rules": [{"class": "c", "neighbors": []}]}]
        }"#;
        let spec = parse_network(text).unwrap().0;
        let class = &spec.classes[0];
        let cert = class.certificate().unwrap();
        let m = SymbolicModel::build(class, 0.5, 0.0, vec![], vec![], OutRule::ImageOutside, DEFAULT_MAX_SIZE).unwrap();
        let r = check_local_asf(class, &cert, &m, AsfParams { varpi: 1.0, vartheta: 0.0 }, &[], 2000, 1);
        assert!(r.passed());
        assert!(r.max_v <= 0.5 * 1.0 + 0.5);
    }

    #[test]
    fn global_asf_examples() {
        let cert = DeltaIssCertificate::affine(17.0 / 30.0, 0.3, 5.0, 1.0);
        let nodes: Vec<NodeAsf> = (0..4)
            .map(|_| NodeAsf { cert: &cert, output: OutputMap::Identity, varpi: 0.8 })
            .collect();
        let x = [7.0, 8.0, 9.0, 10.0];
        let g = eval_global_asf(&nodes, 0.8, &x, &x).unwrap();
        assert_eq!(g.vbar, 0.0);
        let xh = [7.0, 8.3, 9.0, 10.0];
        let g = eval_global_asf(&nodes, 0.8, &x, &xh).unwrap();
        assert!((g.vbar - 0.3).abs() < 1e-12);
        assert!((g.mismatch - 0.3).abs() < 1e-12);
        assert!(g.consistent);
    }
}
