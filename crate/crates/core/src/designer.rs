//! Top-down design of local precisions and quantization parameters.
//!
//! Design runs on *units*: a (subnetwork, class) pair. Every node of a
//! truncation maps to one unit and every node-level edge to a unit-level
//! edge, so the output depends only on the class-level structure and is the
//! same for every truncation size that exhibits the full pattern.
//!
//! Blocks are peeled bottom-up along the subnetwork condensation. A bottom
//! block of the first pass takes `r` with `sup σ·r = ϖ`; later blocks take the
//! largest `r` their downstream consumers allow. Inside a block the
//! internal-input offsets `φ` respect the strict bound
//! `φ_ij < ρ_wi⁻¹((I - κ_i)(ϖ_i)) - max_j α̲_j⁻¹(ϖ_j)`, which makes the
//! quantization budget `(I - κ_i)(ϖ_i) - ρ_wi(ϑ_i)` positive.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gains::{DeltaIssCertificate, SmallGainCertificate};
use crate::kfun::{KFn, KfnError, DEFAULT_INVERSE_TOL};
use crate::netspec::{BoxSet, InputSet, NetworkSpec, SlotSource, TruncatedNetwork};
use crate::num::is_multiple;

/// Relative guard used when re-checking non-strict inequalities.
pub const VERIFY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Kfn(#[from] KfnError),
    #[error("infeasible: {inequality} at {location}: slack {slack} is not positive")]
    Infeasible {
        inequality: String,
        location: String,
        slack: f64,
    },
    #[error("no grid pitch in (0, {bound}] fits the boxes of {location}")]
    NoPitch { location: String, bound: f64 },
    #[error("override for {location}: {reason}")]
    Override { location: String, reason: String },
    #[error("block {0} has no small-gain certificate")]
    MissingCertificate(String),
    #[error("precision must be positive, got {0}")]
    BadPrecision(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiPolicy {
    /// `φ = 0`: the internal grid is the neighbor's output grid.
    #[default]
    Shared,
    /// `φ = θ·slack` of the binding strict inequality.
    Slack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignOptions {
    /// Fraction of a strict slack consumed by a chosen parameter, in (0, 1).
    pub theta: f64,
    pub phi_policy: PhiPolicy,
    /// Per-class input pitch overrides.
    pub eta_u: BTreeMap<String, f64>,
    /// Per-class state pitch overrides, checked against the bound.
    pub eta_x: BTreeMap<String, f64>,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions {
            theta: 0.5,
            phi_policy: PhiPolicy::Shared,
            eta_u: BTreeMap::new(),
            eta_x: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub block: usize,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Intra,
    Cross,
}

/// Unit-level view of a truncation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassSummary {
    pub units: Vec<Unit>,
    /// `(receiver, sender)` unit indices.
    pub edges: BTreeMap<(usize, usize), EdgeKind>,
    pub block_count: usize,
    pub block_ids: Vec<String>,
}

impl ClassSummary {
    pub fn from_truncation(net: &TruncatedNetwork) -> Self {
        let units: BTreeSet<Unit> = net
            .nodes
            .iter()
            .map(|n| Unit {
                block: n.subnetwork,
                class: n.class,
            })
            .collect();
        let units: Vec<Unit> = units.into_iter().collect();
        let index = |u: Unit| units.binary_search(&u).expect("unit");
        let mut edges = BTreeMap::new();
        for node in &net.nodes {
            let ui = index(Unit {
                block: node.subnetwork,
                class: node.class,
            });
            for s in &node.slots {
                if let SlotSource::Node(j) = *s {
                    let nj = &net.nodes[j];
                    let uj = index(Unit {
                        block: nj.subnetwork,
                        class: nj.class,
                    });
                    let kind = if nj.subnetwork == node.subnetwork {
                        EdgeKind::Intra
                    } else {
                        EdgeKind::Cross
                    };
                    edges.insert((ui, uj), kind);
                }
            }
        }
        ClassSummary {
            units,
            edges,
            block_count: net.subnetwork_count(),
            block_ids: net.subnetwork_ids.clone(),
        }
    }

    pub fn unit_index(&self, block: usize, class: usize) -> Option<usize> {
        self.units.binary_search(&Unit { block, class }).ok()
    }

    fn in_edges(&self, ui: usize, kind: EdgeKind) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .range((ui, 0)..=(ui, usize::MAX))
            .filter(move |(_, &k)| k == kind)
            .map(|(&(_, j), _)| j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDesign {
    pub block: usize,
    pub block_id: String,
    pub class: usize,
    pub class_id: String,
    pub sigma: f64,
    pub varpi: f64,
    pub vartheta: f64,
    pub eta_x: f64,
    pub eta_u: f64,
    /// `γ̂⁻¹[(I - κ)(ϖ) - ρ_w(ϑ) - ρ_u(ηᵘ)]`
    pub eta_x_bound: f64,
    /// Which peeling step fixed `ϖ`: `"first-pass"` or `"downstream"`.
    pub varpi_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDesign {
    pub receiver: usize,
    pub sender: usize,
    pub kind: EdgeKind,
    pub phi: f64,
    /// Strict upper bound the choice respected.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackEntry {
    pub inequality: String,
    pub location: String,
    pub value: f64,
    pub bound: f64,
    pub slack: f64,
}

/// Local precisions and quantization parameters for every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantDesign {
    pub varpi: f64,
    /// `min_i ϖ_i`
    pub varpi_lo: f64,
    /// `α̲⁻¹(ϖ)` with `α̲` the smallest class `α̲_i`.
    pub epsilon_hat: f64,
    pub units: Vec<UnitDesign>,
    pub edges: Vec<EdgeDesign>,
    pub slacks: Vec<SlackEntry>,
    /// Order in which blocks were peeled.
    pub peel_order: Vec<Vec<String>>,
}

impl QuantDesign {
    pub fn unit_index(&self, block: usize, class: usize) -> Option<usize> {
        self.units
            .iter()
            .position(|u| u.block == block && u.class == class)
    }

    pub fn phi(&self, receiver: usize, sender: usize) -> Option<f64> {
        self.edges
            .iter()
            .find(|e| e.receiver == receiver && e.sender == sender)
            .map(|e| e.phi)
    }
}

fn infeasible(inequality: &str, location: String, slack: f64) -> DesignError {
    DesignError::Infeasible {
        inequality: inequality.into(),
        location,
        slack,
    }
}

fn inv(f: &KFn, y: f64) -> Result<f64, KfnError> {
    f.inverse(y, DEFAULT_INVERSE_TOL)
}

/// `ρ⁻¹(y)`, infinite for the zero gain.
fn inv_or_inf(f: &KFn, y: f64) -> Result<f64, KfnError> {
    match f {
        KFn::Linear { c } if *c == 0.0 => Ok(f64::INFINITY),
        _ => inv(f, y),
    }
}

/// Largest pitch of the form `m·10^k`, `m ∈ {5, 2.5, 2, 1}`, that is at most
/// `bound` and divides every box endpoint, so the grid covers each box
/// exactly with integer indices.
pub fn snap_pitch(bound: f64, set: &BoxSet) -> Option<f64> {
    if !(bound > 0.0) {
        return None;
    }
    let cap = bound.min(set.span());
    let top = cap.log10().floor() as i32 + 1;
    for k in (top - 15..=top).rev() {
        for (num, extra) in [(5.0, 0), (25.0, 1), (2.0, 0), (1.0, 0)] {
            let e = k - extra;
            let eta = if e >= 0 {
                num * 10f64.powi(e)
            } else {
                num / 10f64.powi(-e)
            };
            if eta <= cap
                && set
                    .boxes()
                    .iter()
                    .all(|b| is_multiple(b.lo, eta) && is_multiple(b.hi, eta))
            {
                return Some(eta);
            }
        }
    }
    None
}

fn grid_compatible(eta: f64, set: &BoxSet) -> bool {
    set.boxes()
        .iter()
        .all(|b| is_multiple(b.lo, eta) && is_multiple(b.hi, eta))
}

/// Runs the peeling design for global precision `varpi`.
pub fn design_precisions(
    spec: &NetworkSpec,
    net: &TruncatedNetwork,
    certs: &[DeltaIssCertificate],
    sg: &[SmallGainCertificate],
    varpi: f64,
    options: &DesignOptions,
) -> Result<QuantDesign, DesignError> {
    if !(varpi > 0.0 && varpi.is_finite()) {
        return Err(DesignError::BadPrecision(varpi));
    }
    let theta = options.theta;
    let summary = ClassSummary::from_truncation(net);
    let nu = summary.units.len();
    let cert = |u: usize| &certs[summary.units[u].class];
    let class_id = |u: usize| spec.classes[summary.units[u].class].id.as_str();
    let unit_name = |u: usize| {
        format!(
            "{}/{}",
            summary.block_ids[summary.units[u].block],
            class_id(u)
        )
    };
    let sigma: Vec<f64> = summary
        .units
        .iter()
        .map(|u| {
            sg.iter()
                .find(|c| c.block == u.block)
                .map(|c| c.sigma_of(u.class))
                .ok_or_else(|| DesignError::MissingCertificate(summary.block_ids[u.block].clone()))
        })
        .collect::<Result<_, _>>()?;
    let alpha_lo: Vec<KFn> = (0..nu)
        .map(|u| {
            cert(u)
                .alpha_lo()
                .map_err(|e| DesignError::Kfn(KfnError::Malformed(e.to_string())))
        })
        .collect::<Result<_, _>>()?;

    // block-level influence edges sender → receiver
    let mut block_out: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); summary.block_count];
    for (&(ri, si), &kind) in &summary.edges {
        if kind == EdgeKind::Cross {
            block_out[summary.units[si].block].insert(summary.units[ri].block);
        }
    }

    let mut w = vec![f64::NAN; nu];
    let mut th = vec![f64::NAN; nu];
    let mut rule = vec![String::new(); nu];
    let mut phi: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    let mut slacks = Vec::new();
    let mut remaining: BTreeSet<usize> = (0..summary.block_count).collect();
    let mut peel_order = Vec::new();
    let mut first = true;

    while !remaining.is_empty() {
        let bottoms: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&k| block_out[k].iter().all(|t| !remaining.contains(t)))
            .collect();
        if bottoms.is_empty() {
            // validation rejects cyclic subnetwork links; this guards direct API use
            return Err(infeasible("acyclic condensation", "blocks".into(), 0.0));
        }
        for &k in &bottoms {
            let members: Vec<usize> = (0..nu).filter(|&u| summary.units[u].block == k).collect();
            let sup_sigma = members.iter().map(|&u| sigma[u]).fold(0.0, f64::max);
            let mut r = varpi / sup_sigma;
            if !first {
                for &u in &members {
                    for (&(ri, si), &kind) in &summary.edges {
                        if si != u || kind != EdgeKind::Cross || remaining.contains(&summary.units[ri].block) {
                            continue;
                        }
                        let gap = th[ri] - phi[&(ri, si)].0;
                        let loc = format!("{} -> {}", unit_name(si), unit_name(ri));
                        if !(gap > 0.0) {
                            return Err(infeasible("downstream margin ϑ_j - φ_ji", loc, gap));
                        }
                        let cap = alpha_lo[u].eval(gap)? / sigma[u];
                        slacks.push(SlackEntry {
                            inequality: "downstream-r".into(),
                            location: loc,
                            value: sigma[u] * cap.min(r),
                            bound: alpha_lo[u].eval(gap)?,
                            slack: alpha_lo[u].eval(gap)? - sigma[u] * cap.min(r),
                        });
                        r = r.min(cap);
                    }
                }
            }
            if !(r > 0.0) {
                return Err(infeasible("r > 0", summary.block_ids[k].clone(), r));
            }
            for &u in &members {
                w[u] = sigma[u] * r;
                rule[u] = if first { "first-pass" } else { "downstream" }.into();
            }
            // intra-block offsets and ϑ
            for &u in &members {
                let c = cert(u);
                let intra: Vec<usize> = summary.in_edges(u, EdgeKind::Intra).collect();
                let cross: Vec<usize> = summary.in_edges(u, EdgeKind::Cross).collect();
                let budget = inv_or_inf(&c.rho_w, c.kappa.one_minus(w[u])?)?;
                if !intra.is_empty() {
                    let worst = intra
                        .iter()
                        .map(|&j| inv(&alpha_lo[j], w[j]))
                        .collect::<Result<Vec<_>, _>>()?
                        .into_iter()
                        .fold(0.0, f64::max);
                    let bound = budget - worst;
                    slacks.push(SlackEntry {
                        inequality: "intra-phi".into(),
                        location: unit_name(u),
                        value: worst,
                        bound: budget,
                        slack: bound,
                    });
                    if !(bound > 0.0) {
                        return Err(infeasible("intra-phi", unit_name(u), bound));
                    }
                    let mut theta_u = 0.0_f64;
                    for &j in &intra {
                        let p = match options.phi_policy {
                            PhiPolicy::Shared => 0.0,
                            PhiPolicy::Slack if bound.is_finite() => {
                                (theta * bound).min(spec.classes[summary.units[j].class].state_set.span())
                            }
                            PhiPolicy::Slack => 0.0,
                        };
                        phi.insert((u, j), (p, bound));
                        theta_u = theta_u.max(inv(&alpha_lo[j], w[j])? + p);
                    }
                    th[u] = theta_u;
                } else if !cross.is_empty() {
                    th[u] = if budget.is_finite() { theta * budget } else { w[u] };
                } else {
                    th[u] = 0.0;
                }
                for &j in &cross {
                    if !(th[u] > 0.0) {
                        return Err(infeasible("cross-phi", format!("{} -> {}", unit_name(j), unit_name(u)), th[u]));
                    }
                    let p = match options.phi_policy {
                        PhiPolicy::Shared => 0.0,
                        PhiPolicy::Slack => {
                            (theta * th[u]).min(spec.classes[summary.units[j].class].state_set.span())
                        }
                    };
                    phi.insert((u, j), (p, th[u]));
                }
            }
        }
        peel_order.push(bottoms.iter().map(|&k| summary.block_ids[k].clone()).collect());
        for k in &bottoms {
            remaining.remove(k);
        }
        first = false;
    }

    let mut units = Vec::with_capacity(nu);
    for u in 0..nu {
        let c = cert(u);
        let class = &spec.classes[summary.units[u].class];
        let avail = c.kappa.one_minus(w[u])? - c.rho_w.eval(th[u])?;
        slacks.push(SlackEntry {
            inequality: "quantization budget".into(),
            location: unit_name(u),
            value: c.rho_w.eval(th[u])?,
            bound: c.kappa.one_minus(w[u])?,
            slack: avail,
        });
        if !(avail > 0.0) {
            return Err(infeasible("quantization budget", unit_name(u), avail));
        }
        let eta_u = match (options.eta_u.get(&class.id), &class.input_set) {
            (Some(&e), _) => {
                if !(e >= 0.0) || c.rho_u.eval(e)? >= avail {
                    return Err(DesignError::Override {
                        location: unit_name(u),
                        reason: format!("input pitch {e} leaves no state budget"),
                    });
                }
                e
            }
            (None, InputSet::Finite(_)) => 0.0,
            (None, InputSet::Boxes(b)) => {
                let target = inv_or_inf(&c.rho_u, theta * avail)?;
                snap_pitch(target.min(b.span()), b).ok_or_else(|| DesignError::NoPitch {
                    location: format!("{} input set", unit_name(u)),
                    bound: target,
                })?
            }
        };
        let rest = avail - c.rho_u.eval(eta_u)?;
        if !(rest > 0.0) {
            return Err(infeasible("state pitch budget", unit_name(u), rest));
        }
        let bound = inv(&c.gamma_hat, rest)?;
        let eta_x = match options.eta_x.get(&class.id) {
            Some(&e) => {
                if !(e > 0.0 && e <= bound && e <= class.state_set.span()) {
                    return Err(DesignError::Override {
                        location: unit_name(u),
                        reason: format!("state pitch {e} exceeds its bound {bound}"),
                    });
                }
                if !grid_compatible(e, &class.state_set) {
                    return Err(DesignError::Override {
                        location: unit_name(u),
                        reason: format!("state pitch {e} does not divide the box endpoints"),
                    });
                }
                e
            }
            None => snap_pitch(bound, &class.state_set).ok_or_else(|| DesignError::NoPitch {
                location: unit_name(u),
                bound,
            })?,
        };
        slacks.push(SlackEntry {
            inequality: "state pitch".into(),
            location: unit_name(u),
            value: eta_x,
            bound,
            slack: bound - eta_x,
        });
        units.push(UnitDesign {
            block: summary.units[u].block,
            block_id: summary.block_ids[summary.units[u].block].clone(),
            class: summary.units[u].class,
            class_id: class.id.clone(),
            sigma: sigma[u],
            varpi: w[u],
            vartheta: th[u],
            eta_x,
            eta_u,
            eta_x_bound: bound,
            varpi_rule: rule[u].clone(),
        });
    }

    let edges = summary
        .edges
        .iter()
        .map(|(&(r, s), &kind)| {
            let (p, bound) = phi[&(r, s)];
            EdgeDesign {
                receiver: r,
                sender: s,
                kind,
                phi: p,
                bound,
            }
        })
        .collect();

    let alpha_min = alpha_lo
        .iter()
        .map(|a| a.linear_slope())
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.into_iter().fold(f64::INFINITY, f64::min));
    let epsilon_hat = match alpha_min {
        Some(s) => inv(&KFn::linear(s), varpi)?,
        None => alpha_lo
            .iter()
            .map(|a| inv(a, varpi))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max),
    };

    Ok(QuantDesign {
        varpi,
        varpi_lo: w.iter().copied().fold(f64::INFINITY, f64::min),
        epsilon_hat,
        units,
        edges,
        slacks,
        peel_order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationEntry {
    pub inequality: String,
    pub location: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub entries: Vec<VerificationEntry>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn failures(&self) -> impl Iterator<Item = &VerificationEntry> {
        self.entries.iter().filter(|e| !e.ok)
    }

    pub fn min_slack(&self, inequality: &str) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.inequality == inequality)
            .map(|e| e.slack)
            .reduce(f64::min)
    }
}

/// Re-evaluates both design inequalities and the parameter ranges from the
/// stored values and the certificates alone.
pub fn verify_design(
    design: &QuantDesign,
    certs: &[DeltaIssCertificate],
    spec: &NetworkSpec,
) -> Result<VerificationReport, DesignError> {
    let mut entries = Vec::new();
    let mut push = |inequality: &str, location: String, lhs: f64, rhs: f64| {
        let slack = rhs - lhs;
        entries.push(VerificationEntry {
            inequality: inequality.into(),
            location,
            lhs,
            rhs,
            slack,
            ok: lhs <= rhs + VERIFY_TOL * rhs.abs().max(1.0),
        });
    };
    let name = |u: &UnitDesign| format!("{}/{}", u.block_id, u.class_id);

    for e in &design.edges {
        let (ui, uj) = (&design.units[e.receiver], &design.units[e.sender]);
        let alpha_j = certs[uj.class]
            .alpha_lo()
            .map_err(|err| DesignError::Kfn(KfnError::Malformed(err.to_string())))?;
        let lhs = alpha_j.inverse(uj.varpi, DEFAULT_INVERSE_TOL)? + e.phi;
        push(
            "precision_split",
            format!("{} -> {}", name(uj), name(ui)),
            lhs,
            ui.vartheta,
        );
        let span_w = spec.classes[uj.class].state_set.span();
        push("phi range", format!("{} -> {}", name(uj), name(ui)), e.phi, span_w);
        push("phi sign", format!("{} -> {}", name(uj), name(ui)), -e.phi, 0.0);
    }
    for u in &design.units {
        let c = &certs[u.class];
        let class = &spec.classes[u.class];
        let budget = c.kappa.one_minus(u.varpi)? - c.rho_w.eval(u.vartheta)? - c.rho_u.eval(u.eta_u)?;
        let bound = if budget > 0.0 {
            c.gamma_hat.inverse(budget, DEFAULT_INVERSE_TOL)?
        } else {
            budget
        };
        push("state_pitch", name(u), u.eta_x, bound);
        push("eta_x range", name(u), u.eta_x, class.state_set.span());
        push("eta_x sign", name(u), -u.eta_x, 0.0);
        push("eta_u range", name(u), u.eta_u, class.input_set.span().max(0.0));
        push("varpi upper", name(u), u.varpi, design.varpi);
        push("varpi lower", name(u), design.varpi_lo, u.varpi);
    }
    push("varpi_lo positive", "design".into(), -design.varpi_lo, -f64::MIN_POSITIVE);
    let passed = entries.iter().all(|e| e.ok);
    Ok(VerificationReport { entries, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gains::{build_gain_matrix, check_small_gain, AssumptionBounds};
    use crate::netspec::{decompose, instantiate, parse_network};

    const TRAFFIC: &str = include_str!("../../../configs/traffic.cfg");

    fn design_traffic(n: usize, varpi: f64) -> (NetworkSpec, Vec<DeltaIssCertificate>, QuantDesign) {
        design_with(TRAFFIC, n, varpi, &DesignOptions::default())
    }

    fn design_with(
        text: &str,
        n: usize,
        varpi: f64,
        opts: &DesignOptions,
    ) -> (NetworkSpec, Vec<DeltaIssCertificate>, QuantDesign) {
        let spec = parse_network(text).unwrap().0;
        let net = instantiate(&spec, n).unwrap();
        let sccs = decompose(&net).unwrap();
        let certs = spec.certificates().unwrap();
        let ids: Vec<String> = spec.classes.iter().map(|c| c.id.clone()).collect();
        let gm = build_gain_matrix(&net, &sccs, &certs, &ids).unwrap();
        let sg = check_small_gain(&gm, &AssumptionBounds::from_certificates(&certs).unwrap()).unwrap();
        let d = design_precisions(&spec, &net, &certs, &sg, varpi, opts).unwrap();
        (spec, certs, d)
    }

    // oracle for the state pitch bound: (1 - 17/30)·ϖ - 0.3·ϖ = 2ϖ/15
    fn bound_oracle(varpi: f64) -> f64 {
        2.0 * varpi / 15.0
    }

    #[test]
    fn traffic_design_at_point_eight() {
        let (_, _, d) = design_traffic(10, 0.8);
        assert_eq!(d.units.len(), 6);
        for u in &d.units {
            assert!((u.varpi - 0.8).abs() < 1e-12);
            assert!((u.vartheta - 0.8).abs() < 1e-12);
            assert!((u.eta_x_bound - bound_oracle(0.8)).abs() < 1e-9);
            assert!((u.eta_x_bound - 0.10667).abs() < 1e-5);
            assert_eq!(u.eta_x, 0.1);
            assert_eq!(u.eta_u, 0.0);
        }
        assert!(d.edges.iter().all(|e| e.phi == 0.0));
        assert!((d.epsilon_hat - 0.8).abs() < 1e-12);
        assert_eq!(
            d.peel_order,
            vec![vec!["G4".to_string()], vec!["G3".into()], vec!["G1".into(), "G2".into()]]
        );
    }

    #[test]
    fn small_precision_stays_feasible() {
        let (_, _, d) = design_traffic(10, 0.01);
        for u in &d.units {
            assert!((u.eta_x_bound - 0.0013333).abs() < 1e-7);
            assert_eq!(u.eta_x, 0.001);
        }
    }

    #[test]
    fn verification_of_traffic_design() {
        let (spec, certs, d) = design_traffic(10, 0.8);
        let report = verify_design(&d, &certs, &spec).unwrap();
        assert!(report.passed, "{:?}", report.failures().collect::<Vec<_>>());
        let s = report.min_slack("state_pitch").unwrap();
        assert!((s - (bound_oracle(0.8) - 0.1)).abs() < 1e-9);
        assert!((s - 0.00667).abs() < 1e-5);
        assert!(report.min_slack("precision_split").unwrap() >= 0.0);
    }

    #[test]
    fn tampered_pitch_fails_verification() {
        let (spec, certs, mut d) = design_traffic(10, 0.8);
        d.units[0].eta_x = 0.2;
        let report = verify_design(&d, &certs, &spec).unwrap();
        assert!(!report.passed);
        assert!(report.failures().any(|e| e.inequality == "state_pitch"));
    }

    #[test]
    fn boundary_exact_phi_is_accepted() {
        let (spec, certs, mut d) = design_traffic(10, 0.8);
        // raise ϑ of one receiver and set φ to the exact gap
        let e = d.edges.iter().position(|e| e.kind == EdgeKind::Intra).unwrap();
        let (r, s) = (d.edges[e].receiver, d.edges[e].sender);
        d.units[r].vartheta = 0.85;
        for edge in d.edges.iter_mut().filter(|x| x.receiver == r) {
            edge.phi = 0.85 - d.units[edge.sender].varpi;
        }
        let _ = s;
        let report = verify_design(&d, &certs, &spec).unwrap();
        assert!(report
            .entries
            .iter()
            .filter(|x| x.inequality == "precision_split")
            .all(|x| x.ok));
    }

    #[test]
    fn design_is_scale_free() {
        let (_, _, a) = design_traffic(10, 0.8);
        let (_, _, b) = design_traffic(200, 0.8);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn linear_gains_scale_linearly() {
        let (_, _, a) = design_traffic(10, 0.8);
        let (_, _, b) = design_traffic(10, 0.4);
        for (x, y) in a.units.iter().zip(&b.units) {
            assert!((y.varpi - 0.5 * x.varpi).abs() < 1e-15);
            assert!((y.vartheta - 0.5 * x.vartheta).abs() < 1e-15);
            assert!((y.eta_x_bound - 0.5 * x.eta_x_bound).abs() < 1e-15);
        }
    }

    #[test]
    fn decoupled_class() {
        let text = r#"{
          "classes": [{"id": "c", "state_set": [[0, 10]], "input_set": {"values": [0, 1]},
                       "dynamics": {"kind": "affine", "a": 0.5, "b": 1, "d": []}}],
          "subnetworks": [{"id": "S", "strongly_connected": false,
                           "rules": [{"class": "c", "neighbors": []}]}]
        }"#;
        let (spec, certs, d) = design_with(text, 3, 1.0, &DesignOptions::default());
        assert_eq!(d.units[0].vartheta, 0.0);
        assert!((d.units[0].eta_x_bound - 0.5).abs() < 1e-15);
        assert_eq!(d.units[0].eta_x, 0.5);
        assert!(verify_design(&d, &certs, &spec).unwrap().passed);
    }

    #[test]
    fn slack_policy_round_trips_through_verification() {
        let opts = DesignOptions {
            phi_policy: PhiPolicy::Slack,
            ..DesignOptions::default()
        };
        let (spec, certs, d) = design_with(TRAFFIC, 10, 0.8, &opts);
        assert!(d.edges.iter().all(|e| e.phi > 0.0 && e.phi < e.bound));
        let report = verify_design(&d, &certs, &spec).unwrap();
        assert!(report.passed, "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn eta_override_must_respect_bound() {
        let mut opts = DesignOptions::default();
        opts.eta_x.insert("low_pair".into(), 0.1);
        let (_, _, d) = design_with(TRAFFIC, 10, 0.8, &opts);
        assert!(d.units.iter().all(|u| u.eta_x == 0.1));
        opts.eta_x.insert("low_pair".into(), 0.2);
        let spec = parse_network(TRAFFIC).unwrap().0;
        let net = instantiate(&spec, 10).unwrap();
        let certs = spec.certificates().unwrap();
        let ids: Vec<String> = spec.classes.iter().map(|c| c.id.clone()).collect();
        let gm = build_gain_matrix(&net, &decompose(&net).unwrap(), &certs, &ids).unwrap();
        let sg = check_small_gain(&gm, &AssumptionBounds::from_certificates(&certs).unwrap()).unwrap();
        assert!(matches!(
            design_precisions(&spec, &net, &certs, &sg, 0.8, &opts),
            Err(DesignError::Override { .. })
        ));
    }

    #[test]
    fn pitch_ladder() {
        let b = BoxSet::interval(5.0, 15.0);
        assert_eq!(snap_pitch(0.10667, &b), Some(0.1));
        assert_eq!(snap_pitch(0.0013333, &b), Some(0.001));
        assert_eq!(snap_pitch(0.3, &b), Some(0.25));
        assert_eq!(snap_pitch(100.0, &b), Some(5.0));
        assert_eq!(snap_pitch(0.0, &b), None);
        let odd = BoxSet::interval(0.0, 0.3);
        assert_eq!(snap_pitch(0.2, &odd), Some(0.1));
    }

    #[test]
    fn nonpositive_precision_rejected() {
        let spec = parse_network(TRAFFIC).unwrap().0;
        let net = instantiate(&spec, 4).unwrap();
        let certs = spec.certificates().unwrap();
        assert!(matches!(
            design_precisions(&spec, &net, &certs, &[], -1.0, &DesignOptions::default()),
            Err(DesignError::BadPrecision(_))
        ));
    }
}
