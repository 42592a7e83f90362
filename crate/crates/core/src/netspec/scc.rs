use std::collections::BTreeSet;

use serde::Serialize;

use super::{SpecError, TruncatedNetwork};

/// Strong components of a truncation and their condensation.
///
/// Edges follow the direction of influence: `j → i` whenever `j ∈ N_i`.
/// Bottom components have no outgoing condensation edge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SccDecomposition {
    /// Node sets, each sorted; components are ordered by smallest member.
    pub components: Vec<Vec<usize>>,
    pub component_of: Vec<usize>,
    pub dag: Vec<(usize, usize)>,
    pub bottom: Vec<usize>,
    /// Declared subnetwork of each component when it coincides with one.
    pub subnetwork_of: Vec<Option<usize>>,
}

impl SccDecomposition {
    pub fn from_adjacency(adj: &[Vec<usize>]) -> Self {
        let mut components = strongly_connected_components(adj);
        for c in components.iter_mut() {
            c.sort_unstable();
        }
        components.sort_by_key(|c| c[0]);
        let mut component_of = vec![0; adj.len()];
        for (k, c) in components.iter().enumerate() {
            for &v in c {
                component_of[v] = k;
            }
        }
        let mut dag = BTreeSet::new();
        for (u, succ) in adj.iter().enumerate() {
            for &v in succ {
                let (a, b) = (component_of[u], component_of[v]);
                if a != b {
                    dag.insert((a, b));
                }
            }
        }
        let bottom = (0..components.len())
            .filter(|k| !dag.iter().any(|&(a, _)| a == *k))
            .collect();
        SccDecomposition {
            subnetwork_of: vec![None; components.len()],
            components,
            component_of,
            dag: dag.into_iter().collect(),
            bottom,
        }
    }

    /// Set-level view, independent of component numbering.
    pub fn partition(&self) -> BTreeSet<Vec<usize>> {
        self.components.iter().cloned().collect()
    }
}

/// Tarjan's algorithm, iterative. Returns components in reverse topological
/// order of the condensation.
pub fn strongly_connected_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let n = adj.len();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut counter = 0;
    // (vertex, next edge position)
    let mut call: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        call.push((root, 0));
        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            if *pos == 0 && index[v] == UNSEEN {
                index[v] = counter;
                low[v] = counter;
                counter += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            if let Some(&w) = adj[v].get(*pos) {
                *pos += 1;
                if index[w] == UNSEEN {
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}

/// SCC decomposition of a truncation, checked against the declared
/// subnetworks that promise strong connectivity.
pub fn decompose(net: &TruncatedNetwork) -> Result<SccDecomposition, SpecError> {
    let mut d = SccDecomposition::from_adjacency(&net.out_neighbors);
    for (k, comp) in d.components.iter().enumerate() {
        let sub = net.nodes[comp[0]].subnetwork;
        let range = net.subnetwork_nodes(sub);
        if comp.len() == range.len() && comp.iter().copied().eq(range) {
            d.subnetwork_of[k] = Some(sub);
        }
    }
    let mut mismatched = Vec::new();
    for (sub, &strong) in net.declared_strong.iter().enumerate() {
        if strong && !d.subnetwork_of.contains(&Some(sub)) {
            let first = net.subnetwork_nodes(sub).start;
            let pieces = d
                .components
                .iter()
                .filter(|c| net.nodes[c[0]].subnetwork == sub)
                .count();
            let merged = d.components[d.component_of[first]]
                .iter()
                .any(|&v| net.nodes[v].subnetwork != sub);
            mismatched.push(format!(
                "subnetwork {} is declared strongly connected but {}",
                net.subnetwork_ids[sub],
                if merged {
                    "its nodes share a component with another subnetwork".to_string()
                } else {
                    format!("splits into {pieces} components")
                }
            ));
        }
    }
    if mismatched.is_empty() {
        Ok(d)
    } else {
        Err(SpecError::Topology(mismatched.join("; ")))
    }
}
