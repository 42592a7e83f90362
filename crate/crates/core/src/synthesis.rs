//! Safety controllers on symbolic models.
//!
//! Each profile is solved on its own: the internal inputs range only over the
//! quantized safe outputs of the neighbors (assume-guarantee), and the
//! maximal controlled-invariant subset of the safe grid is the limit of the
//! usual decreasing iteration. Local controllers then compose node by node.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{AbstractionError, Successors, SymbolicModel};
use crate::netspec::BoxSet;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("slot {slot}: no internal input is consistent with the neighbor's safe outputs")]
    EmptyInternal { slot: usize },
    #[error("expected {expected} safe-internal slots, got {got}")]
    SlotMismatch { expected: usize, got: usize },
    #[error("state {x}: {reason}")]
    Refine { x: f64, reason: String },
    #[error("node {node} ({class}) has an empty controller domain")]
    EmptyDomain { node: usize, class: String },
    #[error("{nodes} nodes but {controllers} controllers")]
    Arity { nodes: usize, controllers: usize },
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
}

/// Slot-grid indices `ŵ` with some safe neighbor output within `phi`.
pub fn safe_internal_indices(slot: &[f64], safe_outputs: &[f64], phi: f64) -> Vec<u32> {
    let mut outs = safe_outputs.to_vec();
    outs.sort_by(f64::total_cmp);
    let tol = 1e-9 * phi.max(f64::EPSILON * slot.iter().fold(1.0_f64, |a, v| a.max(v.abs())));
    slot.iter()
        .enumerate()
        .filter(|(_, &w)| {
            let i = outs.partition_point(|&p| p < w - phi - tol);
            i < outs.len() && outs[i] <= w + phi + tol
        })
        .map(|(k, _)| k as u32)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyController {
    pub class: String,
    /// Controlled-invariant abstract states, ascending.
    pub dom: Vec<u32>,
    /// Admissible input indices per domain state, ascending.
    pub policy: BTreeMap<u32, Vec<u32>>,
    /// Restricted internal grid per slot.
    pub safe_internal: Vec<Vec<u32>>,
    /// Number of domain refinements until the fixed point.
    pub iterations: usize,
    /// Size of the initial safe grid.
    pub safe_states: usize,
}

impl SafetyController {
    pub fn contains(&self, x: usize) -> bool {
        self.dom.binary_search(&(x as u32)).is_ok()
    }

    pub fn actions(&self, x: usize) -> &[u32] {
        self.policy.get(&(x as u32)).map_or(&[], Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.dom.is_empty()
    }
}

fn for_each_combo(model: &SymbolicModel, allowed: &[Vec<u32>], mut f: impl FnMut(usize)) {
    let mut pos = vec![0usize; allowed.len()];
    if allowed.iter().any(Vec::is_empty) {
        return;
    }
    loop {
        let idx: Vec<usize> = pos.iter().zip(allowed).map(|(&p, a)| a[p] as usize).collect();
        f(model.combo_index(&idx));
        let mut s = allowed.len();
        loop {
            if s == 0 {
                return;
            }
            s -= 1;
            pos[s] += 1;
            if pos[s] < allowed[s].len() {
                break;
            }
            pos[s] = 0;
        }
    }
}

/// Maximal safety controller of `model` inside `safe`, with internal inputs
/// restricted to `safe_internal`. An empty domain is a valid result.
pub fn synthesize_safety(
    model: &SymbolicModel,
    safe: &BoxSet,
    safe_internal: Vec<Vec<u32>>,
) -> Result<SafetyController, SynthesisError> {
    if safe_internal.len() != model.slots.len() {
        return Err(SynthesisError::SlotMismatch {
            expected: model.slots.len(),
            got: safe_internal.len(),
        });
    }
    if let Some(slot) = safe_internal.iter().position(Vec::is_empty) {
        return Err(SynthesisError::EmptyInternal { slot });
    }
    let nx = model.states.len();
    let nu = model.inputs.len();
    // distinct successor runs of each (x, u) under the restricted internals;
    // None when some internal input sends it to OUT
    let mut runs: Vec<Option<Vec<(u32, u32)>>> = Vec::with_capacity(nx * nu);
    for x in 0..nx {
        for u in 0..nu {
            let mut out = false;
            let mut r: Vec<(u32, u32)> = Vec::new();
            for_each_combo(model, &safe_internal, |w| match model.successors(x, u, w) {
                Successors::Out => out = true,
                Successors::Range(a, b) => r.push((a as u32, b as u32)),
            });
            runs.push(if out {
                None
            } else {
                r.sort_unstable();
                r.dedup();
                Some(r)
            });
        }
    }

    let mut dom: Vec<bool> = (0..nx).map(|x| safe.contains(model.states.value(x))).collect();
    let safe_states = dom.iter().filter(|&&b| b).count();
    let mut iterations = 0;
    let mut prefix = vec![0u32; nx + 1];
    let admissible = |x: usize, u: usize, prefix: &[u32]| {
        runs[x * nu + u].as_ref().is_some_and(|r| {
            r.iter()
                .all(|&(a, b)| prefix[b as usize + 1] - prefix[a as usize] == b - a + 1)
        })
    };
    loop {
        iterations += 1;
        for x in 0..nx {
            prefix[x + 1] = prefix[x] + dom[x] as u32;
        }
        let next: Vec<bool> = (0..nx)
            .map(|x| dom[x] && (0..nu).any(|u| admissible(x, u, &prefix)))
            .collect();
        if next == dom {
            break;
        }
        dom = next;
    }
    let mut policy = BTreeMap::new();
    let mut d = Vec::new();
    for x in (0..nx).filter(|&x| dom[x]) {
        let acts: Vec<u32> = (0..nu)
            .filter(|&u| admissible(x, u, &prefix))
            .map(|u| u as u32)
            .collect();
        d.push(x as u32);
        policy.insert(x as u32, acts);
    }
    Ok(SafetyController {
        class: model.class.clone(),
        dom: d,
        policy,
        safe_internal,
        iterations,
        safe_states,
    })
}

/// Post-hoc closure check: every successor of every domain state under every
/// admissible input and restricted internal input stays in the domain.
/// Returns the number of violating triples.
pub fn closure_violations(controller: &SafetyController, model: &SymbolicModel) -> usize {
    let mut bad = 0;
    for &x in &controller.dom {
        for &u in controller.actions(x as usize) {
            for_each_combo(model, &controller.safe_internal, |w| {
                match model.successors(x as usize, u as usize, w) {
                    Successors::Out => bad += 1,
                    Successors::Range(a, b) => {
                        if !(a..=b).all(|k| controller.contains(k)) {
                            bad += 1;
                        }
                    }
                }
            });
        }
    }
    bad
}

/// Result of refining a controller at a concrete state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refined {
    pub u: f64,
    pub u_index: usize,
    pub xhat: f64,
    pub xhat_index: usize,
}

/// Quantizes `x` and applies the lowest admissible input index.
pub fn refine(controller: &SafetyController, model: &SymbolicModel, x: f64) -> Result<Refined, SynthesisError> {
    let xi = model
        .states
        .quantize_index(x)
        .map_err(|e| SynthesisError::Refine {
            x,
            reason: e.to_string(),
        })?;
    let u = *controller
        .actions(xi)
        .first()
        .ok_or_else(|| SynthesisError::Refine {
            x,
            reason: format!("abstract state {} is outside the controller domain", model.states.value(xi)),
        })? as usize;
    Ok(Refined {
        u: model.inputs[u],
        u_index: u,
        xhat: model.states.value(xi),
        xhat_index: xi,
    })
}

/// Product of local controllers over a truncation.
#[derive(Debug, Clone)]
pub struct ComposedController {
    pub nodes: Vec<Arc<SafetyController>>,
}

impl ComposedController {
    /// Distinct local controllers in use.
    pub fn distinct(&self) -> usize {
        let mut ptrs: Vec<*const SafetyController> = self.nodes.iter().map(Arc::as_ptr).collect();
        ptrs.sort();
        ptrs.dedup();
        ptrs.len()
    }

    /// Global domain membership: every local abstract state is in its domain.
    pub fn contains(&self, xhat: &[usize]) -> bool {
        xhat.len() == self.nodes.len() && self.nodes.iter().zip(xhat).all(|(c, &x)| c.contains(x))
    }

    /// Global action set at a node is its local action set.
    pub fn actions(&self, node: usize, xhat: usize) -> &[u32] {
        self.nodes[node].actions(xhat)
    }
}

/// Composes local controllers; fails naming the first node whose controller
/// has an empty domain.
pub fn compose(nodes: Vec<Arc<SafetyController>>, node_count: usize) -> Result<ComposedController, SynthesisError> {
    if nodes.len() != node_count {
        return Err(SynthesisError::Arity {
            nodes: node_count,
            controllers: nodes.len(),
        });
    }
    if let Some(i) = nodes.iter().position(|c| c.is_empty()) {
        return Err(SynthesisError::EmptyDomain {
            node: i,
            class: nodes[i].class.clone(),
        });
    }
    Ok(ComposedController { nodes })
}
