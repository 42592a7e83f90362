//! δ-ISS certificates, the gain matrix and max-type small-gain checks.
//!
//! Gains are grouped in blocks, one per declared subnetwork; a block's
//! intra-block edges are the intra-SCC edges whenever the subnetwork is
//! strongly connected (which [`crate::netspec::decompose`] enforces when
//! declared). All decisions are taken on class-level data so they do not
//! depend on the truncation size; the truncation is only used to report and
//! re-check.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kfun::{KFn, KfnError};
use crate::netspec::{Dynamics, SccDecomposition, SubsystemClass, TruncatedNetwork};
use crate::num::real;

/// Largest block for which the node-level cycle mean is computed.
pub const CYCLE_MEAN_NODE_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum GainError {
    #[error(transparent)]
    Kfn(#[from] KfnError),
    #[error("class {class}: no δ-ISS certificate: {reason}")]
    NoCertificate { class: String, reason: String },
    #[error("unsupported gain representation: {what}; {hint}")]
    Unsupported { what: String, hint: String },
    #[error("certificate sandwich violated at r = {r}: lower bound {lower} exceeds upper bound {upper}")]
    Sandwich { r: f64, lower: f64, upper: f64 },
    #[error("uniformity bounds fail: {0}")]
    Assumption(String),
    #[error("small-gain condition fails on block {block}: cycle gain {estimate} >= 1 along {worst_cycle:?}")]
    SmallGainFailure {
        block: String,
        estimate: f64,
        worst_cycle: Vec<String>,
    },
    #[error("topology: {0}")]
    Topology(String),
    #[error("internal consistency: {0}")]
    Consistency(String),
}

/// Lyapunov function carried by a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lyapunov {
    /// `V(x, x̂) = |x - x̂|`
    #[default]
    AbsDiff,
    /// `V(x, x̂) = c·|x - x̂|`
    Scaled {
        #[serde(deserialize_with = "real")]
        c: f64,
    },
}

impl Lyapunov {
    pub fn eval(&self, x: f64, xh: f64) -> f64 {
        match self {
            Lyapunov::AbsDiff => (x - xh).abs(),
            Lyapunov::Scaled { c } => c * (x - xh).abs(),
        }
    }

    /// Largest `|x - x̂|` with `V(x, x̂) <= level`.
    pub fn radius(&self, level: f64) -> f64 {
        match self {
            Lyapunov::AbsDiff => level,
            Lyapunov::Scaled { c } => level / c,
        }
    }
}

/// δ-ISS Lyapunov certificate of a subsystem class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaIssCertificate {
    pub psi_lo: KFn,
    pub psi_hi: KFn,
    pub kappa: KFn,
    pub rho_w: KFn,
    pub rho_u: KFn,
    pub gamma_hat: KFn,
    /// Output Lipschitz gain.
    pub ell: KFn,
    #[serde(default)]
    pub lyapunov: Lyapunov,
}

impl DeltaIssCertificate {
    /// The certificate of `V = |x - x̂|` for scalar affine dynamics.
    pub fn affine(kappa: f64, rho_w: f64, rho_u: f64, ell: f64) -> Self {
        DeltaIssCertificate {
            psi_lo: KFn::identity(),
            psi_hi: KFn::identity(),
            kappa: KFn::linear(kappa),
            rho_w: KFn::linear(rho_w),
            rho_u: KFn::linear(rho_u),
            gamma_hat: KFn::identity(),
            ell: KFn::linear(ell),
            lyapunov: Lyapunov::AbsDiff,
        }
    }

    pub fn validate(&self) -> Result<(), GainError> {
        for (name, f) in self.named() {
            f.validate()?;
            let must_be_kinf = matches!(name, "psi_lo" | "psi_hi" | "gamma_hat" | "ell");
            if must_be_kinf && !f.is_class_k_inf() {
                return Err(KfnError::Malformed(format!("{name} = {f} is not class-K∞")).into());
            }
        }
        if let Lyapunov::Scaled { c } = self.lyapunov {
            if !(c > 0.0 && c.is_finite()) {
                return Err(KfnError::Malformed(format!("Lyapunov scale {c} must be positive")).into());
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, &KFn); 7] {
        [
            ("psi_lo", &self.psi_lo),
            ("psi_hi", &self.psi_hi),
            ("kappa", &self.kappa),
            ("rho_w", &self.rho_w),
            ("rho_u", &self.rho_u),
            ("gamma_hat", &self.gamma_hat),
            ("ell", &self.ell),
        ]
    }

    /// `α̲ = ψ̲ ∘ ℓ⁻¹`
    pub fn alpha_lo(&self) -> Result<KFn, GainError> {
        let ell_inv = self.ell.inverse_fn().ok_or_else(|| GainError::Unsupported {
            what: format!("output gain ell = {}", self.ell),
            hint: "use a linear or power output gain so its inverse is symbolic".into(),
        })?;
        Ok(KFn::compose(self.psi_lo.clone(), ell_inv))
    }

    /// `ᾱ = ψ̄`
    pub fn alpha_hi(&self) -> KFn {
        self.psi_hi.clone()
    }

    pub fn lyapunov(&self, x: f64, xh: f64) -> f64 {
        self.lyapunov.eval(x, xh)
    }

    /// Probes `ψ̲(r) <= V <= ψ̄(r)` and `α̲(r) <= ᾱ(r)` on span-scale samples.
    pub fn check_sandwich(&self, span: f64) -> Result<(), GainError> {
        let alpha_lo = self.alpha_lo()?;
        let slack = |a: f64, b: f64| a <= b * (1.0 + 1e-12) + 1e-300;
        for scale in [1e-3, 1e-2, 1e-1, 0.5, 1.0] {
            let r = scale * span;
            let v = self.lyapunov.eval(r, 0.0);
            let lo = self.psi_lo.eval(r)?;
            let hi = self.psi_hi.eval(r)?;
            if !slack(lo, v) || !slack(v, hi) {
                return Err(GainError::Sandwich {
                    r,
                    lower: lo.max(v),
                    upper: v.min(hi),
                });
            }
            let al = alpha_lo.eval(r)?;
            if !slack(al, hi) {
                return Err(GainError::Sandwich {
                    r,
                    lower: al,
                    upper: hi,
                });
            }
        }
        Ok(())
    }
}

/// Certificate of `V = |x - x̂|` for `x⁺ = a·x + Σ d_j·w_j + b·u`:
/// `κ = |a|`, `ρ_w = Σ|d_j|`, `ρ_u = |b|`, identities elsewhere.
pub fn derive_affine_certificate(class: &SubsystemClass) -> Result<DeltaIssCertificate, GainError> {
    let Dynamics::Affine { a, b, d } = &class.dynamics else {
        return Err(GainError::NoCertificate {
            class: class.id.clone(),
            reason: "dynamics given as an evaluator need a declared certificate".into(),
        });
    };
    if !(a.abs() < 1.0) {
        return Err(GainError::NoCertificate {
            class: class.id.clone(),
            reason: format!("|a| = {} is not below 1, so κ < I fails", a.abs()),
        });
    }
    let ell = class.output.lipschitz();
    if !(ell > 0.0) {
        return Err(GainError::NoCertificate {
            class: class.id.clone(),
            reason: "output map with zero slope".into(),
        });
    }
    let rho_w: f64 = d.iter().map(|v| v.abs()).sum();
    Ok(DeltaIssCertificate::affine(a.abs(), rho_w, b.abs(), ell))
}

/// Constants of the uniformity assumption, taken over classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionBounds {
    pub kappa_bar: f64,
    pub rho_w_bar: f64,
    /// Smallest `α̲` slope.
    pub alpha_lo: f64,
}

impl AssumptionBounds {
    pub fn from_certificates(certs: &[DeltaIssCertificate]) -> Result<Self, GainError> {
        let mut b = AssumptionBounds {
            kappa_bar: 0.0,
            rho_w_bar: 0.0,
            alpha_lo: f64::INFINITY,
        };
        for c in certs {
            let s = LinearSlopes::of(c)?;
            b.kappa_bar = b.kappa_bar.max(s.kappa);
            b.rho_w_bar = b.rho_w_bar.max(s.rho_w);
            b.alpha_lo = b.alpha_lo.min(s.alpha_lo);
        }
        if certs.is_empty() {
            b.alpha_lo = 1.0;
        }
        if !(b.kappa_bar < 1.0) {
            return Err(GainError::Assumption(format!("κ̄ = {} is not below 1", b.kappa_bar)));
        }
        if !(b.alpha_lo > 0.0) {
            return Err(GainError::Assumption("α̲ has zero slope".into()));
        }
        Ok(b)
    }
}

/// Linear slopes of the functions the gain formula needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSlopes {
    pub kappa: f64,
    pub rho_w: f64,
    pub alpha_lo: f64,
}

impl LinearSlopes {
    pub fn of(cert: &DeltaIssCertificate) -> Result<Self, GainError> {
        let slope = |name: &str, f: &KFn| {
            f.linear_slope().ok_or_else(|| GainError::Unsupported {
                what: format!("{name} = {f}"),
                hint: "gain matrices need linear kappa, rho_w, psi_lo and ell; \
                       express the certificate with linear functions"
                    .into(),
            })
        };
        Ok(LinearSlopes {
            kappa: slope("kappa", &cert.kappa)?,
            rho_w: slope("rho_w", &cert.rho_w)?,
            alpha_lo: slope("alpha_lo", &cert.alpha_lo()?)?,
        })
    }
}

/// `γ_ij = (1 - κ_i)⁻¹ · ρ_wi · α̲_j⁻¹` for linear gains.
pub fn linear_gain(receiver: &LinearSlopes, sender: &LinearSlopes) -> f64 {
    receiver.rho_w / ((1.0 - receiver.kappa) * sender.alpha_lo)
}

/// Gains of one block (declared subnetwork).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockGains {
    pub block: usize,
    pub id: String,
    pub nodes: Vec<usize>,
    /// `(i, j) ↦ γ_ij` for `j` an intra-block in-neighbor of `i`.
    pub entries: BTreeMap<(usize, usize), f64>,
    /// `(class_i, class_j) ↦ γ`, identical for every instance of the pair.
    pub class_gains: BTreeMap<(usize, usize), f64>,
    pub classes: BTreeSet<usize>,
}

impl BlockGains {
    pub fn sup_gain(&self) -> f64 {
        self.class_gains.values().fold(0.0, |a, &b| a.max(b))
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries
            .range((i, 0)..=(i, usize::MAX))
            .map(|(&(_, j), &g)| (j, g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainMatrix {
    pub blocks: Vec<BlockGains>,
    /// Class labels of the truncation's nodes.
    pub node_class: Vec<usize>,
    pub class_ids: Vec<String>,
}

impl GainMatrix {
    pub fn gain(&self, i: usize, j: usize) -> f64 {
        self.blocks
            .iter()
            .find_map(|b| b.entries.get(&(i, j)).copied())
            .unwrap_or(0.0)
    }
}

/// Builds `γ_ij` on every intra-block edge of the truncation.
pub fn build_gain_matrix(
    net: &TruncatedNetwork,
    sccs: &SccDecomposition,
    certs: &[DeltaIssCertificate],
    class_ids: &[String],
) -> Result<GainMatrix, GainError> {
    for comp in &sccs.components {
        let sub = net.nodes[comp[0]].subnetwork;
        if comp.iter().any(|&v| net.nodes[v].subnetwork != sub) {
            return Err(GainError::Topology(format!(
                "a strong component spans several subnetworks (node {})",
                comp[0]
            )));
        }
    }
    let slopes = certs.iter().map(LinearSlopes::of).collect::<Result<Vec<_>, _>>()?;
    let mut blocks = Vec::with_capacity(net.subnetwork_count());
    for k in 0..net.subnetwork_count() {
        let nodes: Vec<usize> = net.subnetwork_nodes(k).collect();
        let mut entries = BTreeMap::new();
        let mut class_gains = BTreeMap::new();
        let mut classes = BTreeSet::new();
        for &i in &nodes {
            let ci = net.nodes[i].class;
            classes.insert(ci);
            for &j in &net.intra_in[i] {
                let cj = net.nodes[j].class;
                let g = linear_gain(&slopes[ci], &slopes[cj]);
                match class_gains.insert((ci, cj), g) {
                    Some(prev) if prev.to_bits() != g.to_bits() => {
                        return Err(GainError::Consistency(format!(
                            "class pair ({}, {}) yields gains {prev} and {g}",
                            class_ids[ci], class_ids[cj]
                        )))
                    }
                    _ => {}
                }
                entries.insert((i, j), g);
            }
        }
        blocks.push(BlockGains {
            block: k,
            id: net.subnetwork_ids[k].clone(),
            nodes,
            entries,
            class_gains,
            classes,
        });
    }
    Ok(GainMatrix {
        blocks,
        node_class: net.nodes.iter().map(|n| n.class).collect(),
        class_ids: class_ids.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmallGainMethod {
    /// All gains below one: `σ = 1`, `λ = sup γ`.
    UniformGainShortcut,
    /// Max cycle mean below one; `σ` is a max-times sub-eigenvector.
    CycleMean,
}

/// Maximum cycle geometric mean of a weighted digraph and a cycle attaining it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleMean {
    /// Zero for acyclic graphs.
    pub value: f64,
    pub cycle: Vec<usize>,
}

/// Karp's algorithm on log-weights. Edges are `(from, to, weight > 0)`.
pub fn max_cycle_mean(n: usize, edges: &[(usize, usize, f64)]) -> CycleMean {
    const NONE: u32 = u32::MAX;
    if n == 0 || edges.is_empty() {
        return CycleMean {
            value: 0.0,
            cycle: Vec::new(),
        };
    }
    let logs: Vec<(usize, usize, f64)> = edges
        .iter()
        .filter(|e| e.2 > 0.0)
        .map(|&(u, v, w)| (u, v, w.ln()))
        .collect();
    // d[k][v]: heaviest walk with k edges ending at v, from any start
    let mut d = vec![f64::NEG_INFINITY; (n + 1) * n];
    let mut pred = vec![NONE; (n + 1) * n];
    d[..n].fill(0.0);
    for k in 1..=n {
        let (prev, cur) = d.split_at_mut(k * n);
        let prev = &prev[(k - 1) * n..];
        let cur = &mut cur[..n];
        for &(u, v, w) in &logs {
            if prev[u] > f64::NEG_INFINITY && prev[u] + w > cur[v] {
                cur[v] = prev[u] + w;
                pred[k * n + v] = u as u32;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_v = None;
    for v in 0..n {
        let dn = d[n * n + v];
        if dn == f64::NEG_INFINITY {
            continue;
        }
        let mut worst = f64::INFINITY;
        for k in 0..n {
            let dk = d[k * n + v];
            if dk > f64::NEG_INFINITY {
                worst = worst.min((dn - dk) / (n - k) as f64);
            }
        }
        if worst > best {
            best = worst;
            best_v = Some(v);
        }
    }
    let Some(v) = best_v else {
        return CycleMean {
            value: 0.0,
            cycle: Vec::new(),
        };
    };
    // the n-edge walk ending at v contains a cycle of maximum mean
    let mut walk = vec![v];
    let mut cur = v;
    for k in (1..=n).rev() {
        cur = pred[k * n + cur] as usize;
        walk.push(cur);
    }
    walk.reverse();
    let weight = |u: usize, v: usize| {
        logs.iter()
            .filter(|e| e.0 == u && e.1 == v)
            .map(|e| e.2)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut best_cycle = Vec::new();
    let mut best_mean = f64::NEG_INFINITY;
    let mut last_seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (pos, &u) in walk.iter().enumerate() {
        if let Some(&start) = last_seen.get(&u) {
            let cyc = &walk[start..pos];
            let total: f64 = (0..cyc.len())
                .map(|t| weight(cyc[t], cyc[(t + 1) % cyc.len()]))
                .sum();
            let mean = total / cyc.len() as f64;
            if mean > best_mean {
                best_mean = mean;
                best_cycle = cyc.to_vec();
            }
        }
        last_seen.insert(u, pos);
    }
    CycleMean {
        value: best.exp(),
        cycle: best_cycle,
    }
}

/// Small-gain certificate of one block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallGainCertificate {
    pub block: usize,
    pub id: String,
    /// Class-level `σ`, extended uniformly to every instance of the class.
    pub sigma: BTreeMap<usize, f64>,
    pub lambda: f64,
    pub method: SmallGainMethod,
    /// Max cycle mean on the class-level quotient graph.
    pub class_radius: f64,
    /// Max cycle mean on the truncated block; `None` above the node cap.
    pub spectral_radius_estimate: Option<f64>,
    /// Nodes of a truncated cycle attaining the estimate.
    pub worst_cycle: Vec<usize>,
}

impl SmallGainCertificate {
    pub fn sigma_of(&self, class: usize) -> f64 {
        self.sigma.get(&class).copied().unwrap_or(1.0)
    }

    pub fn sup_sigma(&self) -> f64 {
        self.sigma.values().fold(1.0_f64, |a, &b| a.max(b))
    }
}

/// Per-block small-gain check.
///
/// The decision uses class-level gains only: if every `γ` is below one the
/// uniform shortcut applies; otherwise the max cycle mean of the class
/// quotient graph (an upper bound for every truncation and for the infinite
/// pattern) must be below one. Each returned certificate is re-checked
/// entrywise on the truncation.
pub fn check_small_gain(
    gm: &GainMatrix,
    bounds: &AssumptionBounds,
) -> Result<Vec<SmallGainCertificate>, GainError> {
    if !(bounds.kappa_bar < 1.0 && bounds.alpha_lo > 0.0) {
        return Err(GainError::Assumption(format!("{bounds:?}")));
    }
    gm.blocks.iter().map(|b| check_block(gm, b)).collect()
}

fn check_block(gm: &GainMatrix, b: &BlockGains) -> Result<SmallGainCertificate, GainError> {
    let (estimate, worst_cycle) = if b.nodes.len() <= CYCLE_MEAN_NODE_CAP {
        let local: BTreeMap<usize, usize> = b.nodes.iter().enumerate().map(|(p, &v)| (v, p)).collect();
        let edges: Vec<(usize, usize, f64)> = b
            .entries
            .iter()
            .map(|(&(i, j), &g)| (local[&j], local[&i], g))
            .collect();
        let cm = max_cycle_mean(b.nodes.len(), &edges);
        (Some(cm.value), cm.cycle.iter().map(|&p| b.nodes[p]).collect())
    } else {
        (None, Vec::new())
    };

    let classes: Vec<usize> = b.classes.iter().copied().collect();
    let pos: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(p, &c)| (c, p)).collect();
    let qedges: Vec<(usize, usize, f64)> = b
        .class_gains
        .iter()
        .map(|(&(ci, cj), &g)| (pos[&cj], pos[&ci], g))
        .collect();
    let quotient = max_cycle_mean(classes.len(), &qedges);

    let sup = b.sup_gain();
    let (sigma, lambda, method) = if sup < 1.0 {
        let sigma = classes.iter().map(|&c| (c, 1.0)).collect();
        (sigma, sup, SmallGainMethod::UniformGainShortcut)
    } else {
        if quotient.value >= 1.0 {
            let names = if worst_cycle.is_empty() {
                quotient.cycle.iter().map(|&p| gm.class_ids[classes[p]].clone()).collect()
            } else {
                worst_cycle.iter().map(|v: &usize| format!("node {v}")).collect()
            };
            return Err(GainError::SmallGainFailure {
                block: b.id.clone(),
                estimate: estimate.unwrap_or(quotient.value).max(quotient.value),
                worst_cycle: names,
            });
        }
        let lambda = 0.5 * (quotient.value + 1.0);
        let sigma = sub_eigenvector(&classes, &b.class_gains, lambda)?;
        (sigma, lambda, SmallGainMethod::CycleMean)
    };

    let cert = SmallGainCertificate {
        block: b.block,
        id: b.id.clone(),
        sigma,
        lambda,
        method,
        class_radius: quotient.value,
        spectral_radius_estimate: estimate,
        worst_cycle,
    };
    recheck(gm, b, &cert)?;
    Ok(cert)
}

/// Least `σ >= 1` with `max_j γ_cj σ_j <= λ σ_c` (max-times Kleene star).
fn sub_eigenvector(
    classes: &[usize],
    gains: &BTreeMap<(usize, usize), f64>,
    lambda: f64,
) -> Result<BTreeMap<usize, f64>, GainError> {
    let mut sigma: BTreeMap<usize, f64> = classes.iter().map(|&c| (c, 1.0)).collect();
    for _ in 0..=classes.len() + 1 {
        let mut changed = false;
        for (&(ci, cj), &g) in gains {
            let need = g * sigma[&cj] / lambda;
            if need > sigma[&ci] {
                sigma.insert(ci, need);
                changed = true;
            }
        }
        if !changed {
            return Ok(sigma);
        }
    }
    Err(GainError::Consistency("σ iteration did not settle".into()))
}

/// `Γ(σ) <= λσ` entrywise on the truncated block.
fn recheck(gm: &GainMatrix, b: &BlockGains, cert: &SmallGainCertificate) -> Result<(), GainError> {
    for &i in &b.nodes {
        let si = cert.sigma_of(gm.node_class[i]);
        let lhs = b
            .row(i)
            .map(|(j, g)| g * cert.sigma_of(gm.node_class[j]))
            .fold(0.0, f64::max);
        if lhs > cert.lambda * si * (1.0 + 1e-12) {
            return Err(GainError::Consistency(format!(
                "block {}: Γ(σ) at node {i} is {lhs} > λσ = {}",
                b.id,
                cert.lambda * si
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCertificateEntry {
    pub class: String,
    pub kappa: KFn,
    pub rho_w: KFn,
    pub rho_u: KFn,
    pub alpha_lo: KFn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReportEntry {
    pub block: String,
    pub lambda: f64,
    pub sigma_method: SmallGainMethod,
    pub sup_gain: f64,
    pub spectral_radius_estimate: Option<f64>,
    pub worst_cycle: Vec<usize>,
}

/// JSON-friendly summary of certificates and small-gain results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub classes: Vec<ClassCertificateEntry>,
    pub blocks: Vec<BlockReportEntry>,
    pub bounds: AssumptionBounds,
}

impl CertificateReport {
    pub fn new(
        class_ids: &[String],
        certs: &[DeltaIssCertificate],
        gm: &GainMatrix,
        sg: &[SmallGainCertificate],
        bounds: AssumptionBounds,
    ) -> Result<Self, GainError> {
        let classes = class_ids
            .iter()
            .zip(certs)
            .map(|(id, c)| {
                Ok(ClassCertificateEntry {
                    class: id.clone(),
                    kappa: c.kappa.clone(),
                    rho_w: c.rho_w.clone(),
                    rho_u: c.rho_u.clone(),
                    alpha_lo: c.alpha_lo()?,
                })
            })
            .collect::<Result<_, GainError>>()?;
        let blocks = sg
            .iter()
            .map(|c| BlockReportEntry {
                block: c.id.clone(),
                lambda: c.lambda,
                sigma_method: c.method,
                sup_gain: gm.blocks[c.block].sup_gain(),
                spectral_radius_estimate: c.spectral_radius_estimate,
                worst_cycle: c.worst_cycle.clone(),
            })
            .collect();
        Ok(CertificateReport {
            classes,
            blocks,
            bounds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{instantiate, parse_network, decompose, NetworkSpec};

    const TRAFFIC: &str = include_str!("../../../configs/traffic.cfg");

    fn traffic() -> NetworkSpec {
        parse_network(TRAFFIC).unwrap().0
    }

    fn ids(spec: &NetworkSpec) -> Vec<String> {
        spec.classes.iter().map(|c| c.id.clone()).collect()
    }

    fn gains_for(spec: &NetworkSpec, n: usize) -> GainMatrix {
        let net = instantiate(spec, n).unwrap();
        let d = decompose(&net).unwrap();
        build_gain_matrix(&net, &d, &spec.certificates().unwrap(), &ids(spec)).unwrap()
    }

    #[test]
    fn traffic_certificate_values() {
        let spec = traffic();
        let c = derive_affine_certificate(&spec.classes[0]).unwrap();
        assert!((c.kappa.linear_slope().unwrap() - 0.56667).abs() < 1e-5);
        assert!((c.rho_w.linear_slope().unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(c.rho_u, KFn::linear(5.0));
        assert_eq!(c.alpha_lo().unwrap().linear_slope(), Some(1.0));
        let single = derive_affine_certificate(&spec.classes[1]).unwrap();
        assert!((single.rho_w.linear_slope().unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn memoryless_and_unstable_classes() {
        let mut class = traffic().classes[0].clone();
        class.dynamics = Dynamics::Affine { a: 0.0, b: 1.0, d: vec![] };
        assert_eq!(derive_affine_certificate(&class).unwrap().kappa, KFn::linear(0.0));
        class.dynamics = Dynamics::Affine { a: 1.0, b: 1.0, d: vec![] };
        assert!(matches!(
            derive_affine_certificate(&class),
            Err(GainError::NoCertificate { .. })
        ));
    }

    #[test]
    fn traffic_gains_are_uniform() {
        let spec = traffic();
        let gm = gains_for(&spec, 10);
        // oracle: 0.3 / (1 - 17/30) = 9/13
        let expected = 9.0 / 13.0;
        for b in &gm.blocks {
            assert!(!b.entries.is_empty());
            for &g in b.entries.values() {
                assert!((g - expected).abs() < 1e-12);
            }
        }
        assert!((expected - 0.69231).abs() < 1e-5);
    }

    #[test]
    fn sparsity_equals_intra_adjacency() {
        let spec = traffic();
        for n in [4, 10, 18] {
            let net = instantiate(&spec, n).unwrap();
            let gm = gains_for(&spec, n);
            let mut pattern = BTreeSet::new();
            for b in &gm.blocks {
                pattern.extend(b.entries.keys().copied());
            }
            let mut adjacency = BTreeSet::new();
            for i in 0..net.len() {
                for &j in &net.intra_in[i] {
                    adjacency.insert((i, j));
                }
            }
            assert_eq!(pattern, adjacency);
        }
    }

    #[test]
    fn gain_formula_example() {
        let recv = LinearSlopes { kappa: 0.5, rho_w: 0.25, alpha_lo: 1.0 };
        assert!((linear_gain(&recv, &recv) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn traffic_small_gain_uses_shortcut() {
        let spec = traffic();
        let certs = spec.certificates().unwrap();
        let bounds = AssumptionBounds::from_certificates(&certs).unwrap();
        for n in [10, 50] {
            let gm = gains_for(&spec, n);
            let sg = check_small_gain(&gm, &bounds).unwrap();
            assert_eq!(sg.len(), 4);
            for c in &sg {
                assert_eq!(c.method, SmallGainMethod::UniformGainShortcut);
                assert!(c.sigma.values().all(|&s| s == 1.0));
                assert!((c.lambda - 9.0 / 13.0).abs() < 1e-12);
                assert!((c.spectral_radius_estimate.unwrap() - c.lambda).abs() < 1e-9);
            }
        }
    }

    /// Enumerates simple cycles by DFS from each smallest vertex.
    fn brute_cycle_mean(n: usize, w: &BTreeMap<(usize, usize), f64>) -> f64 {
        fn dfs(
            start: usize,
            u: usize,
            n: usize,
            w: &BTreeMap<(usize, usize), f64>,
            path: &mut Vec<usize>,
            best: &mut f64,
        ) {
            for v in start..n {
                let Some(&g) = w.get(&(u, v)) else { continue };
                if v == start {
                    let mut prod = g;
                    for t in 0..path.len() - 1 {
                        prod *= w[&(path[t], path[t + 1])];
                    }
                    *best = best.max(prod.powf(1.0 / path.len() as f64));
                } else if !path.contains(&v) {
                    path.push(v);
                    dfs(start, v, n, w, path, best);
                    path.pop();
                }
            }
        }
        let mut best = 0.0;
        for s in 0..n {
            dfs(s, s, n, w, &mut vec![s], &mut best);
        }
        best
    }

    #[test]
    fn two_cycle_mean() {
        let cm = max_cycle_mean(2, &[(0, 1, 2.0), (1, 0, 0.4)]);
        assert!((cm.value - 0.8_f64.sqrt()).abs() < 1e-12);
        assert_eq!(cm.cycle.len(), 2);
    }

    #[test]
    fn karp_matches_cycle_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.gen_range(1..7);
            let mut w = BTreeMap::new();
            for u in 0..n {
                for v in 0..n {
                    if rng.gen_bool(0.35) {
                        w.insert((u, v), rng.gen_range(0.05..3.0));
                    }
                }
            }
            let edges: Vec<_> = w.iter().map(|(&(u, v), &g)| (u, v, g)).collect();
            let cm = max_cycle_mean(n, &edges);
            let oracle = brute_cycle_mean(n, &w);
            assert!((cm.value - oracle).abs() <= 1e-9 * oracle.max(1.0), "{} vs {oracle}", cm.value);
            if !cm.cycle.is_empty() {
                let k = cm.cycle.len();
                let prod: f64 = (0..k).map(|t| w[&(cm.cycle[t], cm.cycle[(t + 1) % k])]).product();
                assert!((prod.powf(1.0 / k as f64) - oracle).abs() <= 1e-9 * oracle.max(1.0));
            }
        }
    }

    fn ring_gm(gains: &[((usize, usize), f64)], n: usize) -> GainMatrix {
        let entries: BTreeMap<(usize, usize), f64> = gains.iter().copied().collect();
        let classes: BTreeSet<usize> = (0..n).collect();
        GainMatrix {
            blocks: vec![BlockGains {
                block: 0,
                id: "B".into(),
                nodes: (0..n).collect(),
                class_gains: entries.clone(),
                entries,
                classes,
            }],
            node_class: (0..n).collect(),
            class_ids: (0..n).map(|c| format!("c{c}")).collect(),
        }
    }

    const UNIT: AssumptionBounds = AssumptionBounds { kappa_bar: 0.5, rho_w_bar: 1.0, alpha_lo: 1.0 };

    #[test]
    fn nonuniform_two_cycle_passes_with_sigma() {
        // γ_12 = 2 (node 0 reads node 1), γ_21 = 0.4
        let gm = ring_gm(&[((0, 1), 2.0), ((1, 0), 0.4)], 2);
        let sg = check_small_gain(&gm, &UNIT).unwrap();
        let c = &sg[0];
        assert_eq!(c.method, SmallGainMethod::CycleMean);
        assert!((c.class_radius - 0.8_f64.sqrt()).abs() < 1e-12);
        assert!(c.lambda < 1.0);
        // independent re-check of Γσ <= λσ
        let s = |k| c.sigma_of(k);
        assert!(2.0 * s(1) <= c.lambda * s(0) * (1.0 + 1e-12));
        assert!(0.4 * s(0) <= c.lambda * s(1) * (1.0 + 1e-12));
    }

    #[test]
    fn unit_self_loop_fails() {
        let gm = ring_gm(&[((0, 0), 1.0)], 1);
        match check_small_gain(&gm, &UNIT) {
            Err(GainError::SmallGainFailure { worst_cycle, estimate, .. }) => {
                assert_eq!(worst_cycle, vec!["node 0".to_string()]);
                assert!((estimate - 1.0).abs() < 1e-12);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn isolated_node_has_empty_row() {
        let gm = ring_gm(&[], 1);
        assert_eq!(gm.blocks[0].row(0).count(), 0);
        let sg = check_small_gain(&gm, &UNIT).unwrap();
        assert_eq!(sg[0].lambda, 0.0);
    }

    #[test]
    fn nonlinear_gain_is_rejected_with_hint() {
        let mut c = DeltaIssCertificate::affine(0.5, 0.2, 1.0, 1.0);
        c.rho_w = KFn::power(1.0, 2.0);
        match LinearSlopes::of(&c) {
            Err(GainError::Unsupported { hint, .. }) => assert!(hint.contains("linear")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn certificate_serde_roundtrip() {
        let c = DeltaIssCertificate::affine(0.5, 0.2, 1.0, 1.0);
        let text = serde_json::to_string(&c).unwrap();
        let back: DeltaIssCertificate = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
        let parsed: DeltaIssCertificate = serde_json::from_str(
            r#"{"psi_lo":{"kind":"linear","c":1},"psi_hi":{"kind":"linear","c":"2"},
                "kappa":{"kind":"linear","c":"1/2"},"rho_w":{"kind":"linear","c":0},
                "rho_u":{"kind":"linear","c":1},"gamma_hat":{"kind":"linear","c":1},
                "ell":{"kind":"linear","c":1}}"#,
        )
        .unwrap();
        assert_eq!(parsed.lyapunov, Lyapunov::AbsDiff);
        assert!(parsed.check_sandwich(10.0).is_ok());
    }

    #[test]
    fn sandwich_violation_is_reported() {
        let mut c = DeltaIssCertificate::affine(0.5, 0.2, 1.0, 1.0);
        c.psi_lo = KFn::linear(2.0);
        assert!(matches!(c.check_sandwich(1.0), Err(GainError::Sandwich { .. })));
    }
}
