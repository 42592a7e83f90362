//! Synchronous closed-loop simulation of a truncation under refined local
//! controllers, with safety and alternating-simulation monitors.
//!
//! Every step reads all outputs first and then advances all nodes. Each node
//! carries an abstract companion `x̂_i`: the input is read from the local
//! controller at `x̂_i`, and the companion advances to the successor of
//! `(x̂_i, û_i, ŵ_i)` closest to the new concrete state in `V_i`.

use std::fmt::Write as _;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{Successors, SymbolicModel};
use crate::gains::DeltaIssCertificate;
use crate::netspec::{BoxSet, Dynamics, OutputMap, SlotSource};
use crate::synthesis::{refine, SafetyController};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("initial state {x} of node {node} is outside its state set")]
    BadInitial { node: usize, x: f64 },
    #[error("expected {expected} initial states, got {got}")]
    InitialLength { expected: usize, got: usize },
    #[error("node {node}: constant input {u} is not an abstract input")]
    UnknownInput { node: usize, u: f64 },
    #[error("node {node}: internal grid is empty for slot {slot}")]
    EmptySlot { node: usize, slot: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything the simulator needs about one node.
#[derive(Debug, Clone)]
pub struct SimNode {
    pub subnetwork: String,
    pub local: usize,
    pub dynamics: Dynamics,
    pub output: OutputMap,
    pub cert: DeltaIssCertificate,
    pub state_set: BoxSet,
    pub safe_set: BoxSet,
    pub slots: Vec<SlotSource>,
    /// Local precision `ϖ_i`.
    pub varpi: f64,
    pub model: Arc<SymbolicModel>,
    pub controller: Arc<SafetyController>,
}

#[derive(Debug, Clone)]
pub struct SimNetwork {
    pub nodes: Vec<SimNode>,
    /// Global precision `ϖ`.
    pub varpi: f64,
    /// Output mismatch bound `ε̂`.
    pub epsilon_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDistribution {
    /// Uniform over the safe set shrunk by `η˟/2` on each side.
    #[default]
    UniformShrunk,
    /// Same value for every node.
    Constant { value: f64 },
    /// One value per node.
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputPolicy {
    Refined,
    /// Ignores the controllers; used as a negative control. The companion
    /// is re-anchored at the concrete state when its successor is OUT.
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    Safety,
    LocalAsf,
    GlobalAsf,
    Mismatch,
    Refinement,
    Interconnection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub node: Option<usize>,
    pub monitor: Monitor,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub node: usize,
    pub x: f64,
    pub xhat: f64,
    pub u: f64,
    pub w: Vec<f64>,
    pub v: f64,
    pub safe: bool,
    pub asf_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub nodes: usize,
    pub steps: usize,
    /// Steps fully completed before the run ended.
    pub completed: usize,
    pub passed: bool,
    pub first_violation: Option<Violation>,
    pub max_vbar: f64,
    pub max_mismatch: f64,
    /// `max_i,k V_i/ϖ_i`
    pub max_local_ratio: f64,
    pub epsilon_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
    pub subnetworks: Vec<String>,
    pub summary: RunSummary,
}

impl TrajectoryLog {
    pub fn write_csv(&self, mut out: impl Write) -> Result<(), SimError> {
        let width = self.rows.iter().map(|r| r.w.len()).max().unwrap_or(0);
        let mut line = String::from("step,node,subnetwork,x,xhat,u");
        for k in 1..=width {
            write!(line, ",w{k}").ok();
        }
        line.push_str(",V,safe,asf_ok\n");
        out.write_all(line.as_bytes())?;
        for r in &self.rows {
            line.clear();
            write!(line, "{},{},{},{},{},{}", r.step, r.node, self.subnetworks[r.node], r.x, r.xhat, r.u).ok();
            for k in 0..width {
                match r.w.get(k) {
                    Some(v) => write!(line, ",{v}").ok(),
                    None => write!(line, ",").ok(),
                };
            }
            writeln!(line, ",{},{},{}", r.v, r.safe, r.asf_ok).ok();
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

/// Draws initial states; deterministic in `seed`.
pub fn initial_states(net: &SimNetwork, dist: &InitialDistribution, seed: u64) -> Result<Vec<f64>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = match dist {
        InitialDistribution::UniformShrunk => net
            .nodes
            .iter()
            .map(|n| {
                let half = n.model.eta_x / 2.0;
                let set = n.safe_set.shrink(half).unwrap_or_else(|| n.safe_set.clone());
                let total: f64 = set.boxes().iter().map(|b| b.width()).sum();
                let mut t = rng.gen_range(0.0..=total);
                for b in set.boxes() {
                    if t <= b.width() {
                        return b.lo + t;
                    }
                    t -= b.width();
                }
                set.hi()
            })
            .collect(),
        InitialDistribution::Constant { value } => vec![*value; net.nodes.len()],
        InitialDistribution::Explicit { values } => values.clone(),
    };
    if x.len() != net.nodes.len() {
        return Err(SimError::InitialLength {
            expected: net.nodes.len(),
            got: x.len(),
        });
    }
    for (i, (&xi, n)) in x.iter().zip(&net.nodes).enumerate() {
        if !n.state_set.contains(xi) {
            return Err(SimError::BadInitial { node: i, x: xi });
        }
    }
    Ok(x)
}

fn nearest(values: &[f64], y: f64) -> usize {
    let i = values.partition_point(|&v| v < y);
    if i == 0 {
        0
    } else if i == values.len() || (y - values[i - 1]) <= (values[i] - y) {
        i - 1
    } else {
        i
    }
}

struct StepOutcome {
    next_x: Vec<f64>,
    next_xhat: Vec<usize>,
    rows: Vec<LogRow>,
    violation: Option<Violation>,
    vbar: f64,
    mismatch: f64,
    local_ratio: f64,
}

/// One synchronous step from concrete states `x` and companion indices `xhat`.
fn step(net: &SimNetwork, x: &[f64], xhat: &[usize], policy: InputPolicy, k: usize) -> Result<StepOutcome, SimError> {
    let n = net.nodes.len();
    let xh: Vec<f64> = net
        .nodes
        .iter()
        .zip(xhat)
        .map(|(node, &i)| node.model.states.value(i))
        .collect();
    let mut rows = Vec::with_capacity(n);
    let mut violation: Option<Violation> = None;
    let flag = |v: Violation, slot: &mut Option<Violation>| {
        if slot.is_none() {
            *slot = Some(v);
        }
    };
    let mut vbar = 0.0_f64;
    let mut mismatch = 0.0_f64;
    let mut local_ratio = 0.0_f64;
    let mut next_x = vec![0.0; n];
    let mut next_xhat = vec![0usize; n];
    for (i, node) in net.nodes.iter().enumerate() {
        let v = node.cert.lyapunov(x[i], xh[i]);
        vbar = vbar.max(net.varpi / node.varpi * v);
        local_ratio = local_ratio.max(v / node.varpi);
        mismatch = mismatch.max((node.output.eval(x[i]) - node.output.eval(xh[i])).abs());
        let safe = node.safe_set.contains(x[i]);
        let asf_ok = v <= node.varpi;
        if !safe {
            flag(
                Violation {
                    step: k,
                    node: Some(i),
                    monitor: Monitor::Safety,
                    detail: format!("x = {} outside {}", x[i], node.safe_set),
                },
                &mut violation,
            );
        }
        if !asf_ok {
            flag(
                Violation {
                    step: k,
                    node: Some(i),
                    monitor: Monitor::LocalAsf,
                    detail: format!("V = {v} above {}", node.varpi),
                },
                &mut violation,
            );
        }

        // internal inputs: concrete from current outputs, abstract from companions
        let mut w = Vec::with_capacity(node.slots.len());
        let mut w_idx = Vec::with_capacity(node.slots.len());
        for (s, src) in node.slots.iter().enumerate() {
            let grid = &node.model.slots[s];
            if grid.is_empty() {
                return Err(SimError::EmptySlot { node: i, slot: s });
            }
            let (wc, yhat) = match *src {
                SlotSource::Node(j) => {
                    let out = &net.nodes[j].output;
                    (out.eval(x[j]), out.eval(xh[j]))
                }
                SlotSource::Constant(c) => (c, c),
            };
            let wi = nearest(grid, yhat);
            let phi = node.model.phi.get(s).copied().unwrap_or(0.0);
            if (grid[wi] - yhat).abs() > phi + 1e-9 * node.model.eta_x {
                flag(
                    Violation {
                        step: k,
                        node: Some(i),
                        monitor: Monitor::Interconnection,
                        detail: format!("slot {s}: abstract output {yhat} has no internal grid point within {phi}"),
                    },
                    &mut violation,
                );
            }
            w.push(wc);
            w_idx.push(wi);
        }
        let ui = match policy {
            InputPolicy::Refined => match node.controller.actions(xhat[i]).first() {
                Some(&u) => Some(u as usize),
                None => {
                    flag(
                        Violation {
                            step: k,
                            node: Some(i),
                            monitor: Monitor::Refinement,
                            detail: format!("abstract state {} outside the controller domain", xh[i]),
                        },
                        &mut violation,
                    );
                    None
                }
            },
            InputPolicy::Constant(u) => Some(
                node.model
                    .inputs
                    .iter()
                    .position(|&v| v == u)
                    .ok_or(SimError::UnknownInput { node: i, u })?,
            ),
        };
        let u = ui.map_or(f64::NAN, |ui| node.model.inputs[ui]);
        rows.push(LogRow {
            step: k,
            node: i,
            x: x[i],
            xhat: xh[i],
            u,
            w: w.clone(),
            v,
            safe,
            asf_ok,
        });
        let Some(ui) = ui else { continue };
        next_x[i] = node.dynamics.eval(x[i], u, &w);
        let combo = node.model.combo_index(&w_idx);
        match node.model.successors(xhat[i], ui, combo) {
            Successors::Range(a, b) => {
                let mut best = a;
                let mut best_v = f64::INFINITY;
                for c in a..=b {
                    let vc = node.cert.lyapunov(next_x[i], node.model.states.value(c));
                    if vc < best_v {
                        best = c;
                        best_v = vc;
                    }
                }
                next_xhat[i] = best;
            }
            // open loop: no controller to refine, so re-anchor the companion
            Successors::Out if matches!(policy, InputPolicy::Constant(_)) => {
                let set = node.model.states.set();
                let clamped = next_x[i].clamp(set.lo(), set.hi());
                next_xhat[i] = node.model.states.quantize_index(clamped).unwrap_or(xhat[i]);
            }
            Successors::Out => {
                flag(
                    Violation {
                        step: k,
                        node: Some(i),
                        monitor: Monitor::Refinement,
                        detail: "abstract successor is OUT".into(),
                    },
                    &mut violation,
                );
            }
        }
    }
    if vbar > net.varpi * (1.0 + 1e-12) {
        flag(
            Violation {
                step: k,
                node: None,
                monitor: Monitor::GlobalAsf,
                detail: format!("V̄ = {vbar} above {}", net.varpi),
            },
            &mut violation,
        );
    }
    if mismatch > net.epsilon_hat * (1.0 + 1e-12) {
        flag(
            Violation {
                step: k,
                node: None,
                monitor: Monitor::Mismatch,
                detail: format!("output mismatch {mismatch} above {}", net.epsilon_hat),
            },
            &mut violation,
        );
    }
    Ok(StepOutcome {
        next_x,
        next_xhat,
        rows,
        violation,
        vbar,
        mismatch,
        local_ratio,
    })
}

/// Runs `steps` synchronous steps from `x0`; stops at the first monitor
/// violation. The log holds the rows of every visited step, the initial one
/// included.
pub fn run(net: &SimNetwork, x0: Vec<f64>, steps: usize, seed: u64, policy: InputPolicy) -> Result<TrajectoryLog, SimError> {
    let n = net.nodes.len();
    if x0.len() != n {
        return Err(SimError::InitialLength {
            expected: n,
            got: x0.len(),
        });
    }
    let mut summary = RunSummary {
        seed,
        nodes: n,
        steps,
        completed: 0,
        passed: true,
        first_violation: None,
        max_vbar: 0.0,
        max_mismatch: 0.0,
        max_local_ratio: 0.0,
        epsilon_hat: net.epsilon_hat,
    };
    let mut rows = Vec::new();
    let mut x = x0;
    let mut xhat = Vec::with_capacity(n);
    for (i, node) in net.nodes.iter().enumerate() {
        match refine(&node.controller, &node.model, x[i]) {
            Ok(r) => xhat.push(r.xhat_index),
            Err(e) => {
                summary.passed = false;
                summary.first_violation = Some(Violation {
                    step: 0,
                    node: Some(i),
                    monitor: Monitor::Refinement,
                    detail: e.to_string(),
                });
                return Ok(TrajectoryLog {
                    rows,
                    subnetworks: net.nodes.iter().map(|n| n.subnetwork.clone()).collect(),
                    summary,
                });
            }
        }
    }
    for k in 0..=steps {
        let out = step(net, &x, &xhat, policy, k)?;
        rows.extend(out.rows);
        summary.max_vbar = summary.max_vbar.max(out.vbar);
        summary.max_mismatch = summary.max_mismatch.max(out.mismatch);
        summary.max_local_ratio = summary.max_local_ratio.max(out.local_ratio);
        if let Some(v) = out.violation {
            summary.passed = false;
            summary.first_violation = Some(v);
            break;
        }
        if k == steps {
            break;
        }
        x = out.next_x;
        xhat = out.next_xhat;
        summary.completed = k + 1;
    }
    Ok(TrajectoryLog {
        rows,
        subnetworks: net.nodes.iter().map(|n| n.subnetwork.clone()).collect(),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_prefers_lower_on_ties() {
        let v = [0.0, 1.0, 2.0];
        assert_eq!(nearest(&v, 0.5), 0);
        assert_eq!(nearest(&v, 0.6), 1);
        assert_eq!(nearest(&v, -3.0), 0);
        assert_eq!(nearest(&v, 9.0), 2);
    }
}
