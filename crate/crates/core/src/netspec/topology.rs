use serde::Serialize;

use super::{BoundaryRule, NetworkSpec, Side, SpecError};

/// Where an internal-input slot reads from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSource {
    Node(usize),
    /// Constant-hold boundary value; not an edge of the interconnection graph.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Node {
    /// Global 0-based id; subnetworks are concatenated in declaration order.
    pub id: usize,
    pub subnetwork: usize,
    /// 1-based position inside the subnetwork.
    pub local: usize,
    pub class: usize,
    pub slots: Vec<SlotSource>,
}

/// Finite truncation of the infinite network with `n` nodes per subnetwork.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncatedNetwork {
    pub n: usize,
    pub nodes: Vec<Node>,
    pub in_neighbors: Vec<Vec<usize>>,
    pub out_neighbors: Vec<Vec<usize>>,
    /// In-neighbors within the same subnetwork.
    pub intra_in: Vec<Vec<usize>>,
    pub intra_out: Vec<Vec<usize>>,
    pub subnetwork_ids: Vec<String>,
    /// Whether each subnetwork is declared strongly connected.
    pub declared_strong: Vec<bool>,
}

impl TruncatedNetwork {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn global(&self, subnetwork: usize, local: usize) -> usize {
        subnetwork * self.n + local - 1
    }

    pub fn subnetwork_nodes(&self, k: usize) -> std::ops::Range<usize> {
        k * self.n..(k + 1) * self.n
    }

    pub fn subnetwork_count(&self) -> usize {
        self.subnetwork_ids.len()
    }

    /// Successor lists `j → i` for `j ∈ N_i` (influence direction).
    pub fn influence_adjacency(&self) -> &[Vec<usize>] {
        &self.out_neighbors
    }
}

/// Materializes `n` nodes per subnetwork and resolves neighbor slots.
pub fn instantiate(spec: &NetworkSpec, n: usize) -> Result<TruncatedNetwork, SpecError> {
    let arity = spec.arity();
    if n < arity {
        return Err(SpecError::Instantiation(format!(
            "truncation size {n} is below the pattern arity {arity}"
        )));
    }
    for l in &spec.links {
        if l.from_index == 0 || l.from_index > n {
            return Err(SpecError::Instantiation(format!(
                "link from {} reads index {} outside 1..={n}",
                spec.subnetworks[l.from].id, l.from_index
            )));
        }
    }

    let global = |k: usize, local: usize| k * n + local - 1;
    let mut nodes = Vec::with_capacity(n * spec.subnetworks.len());
    for (k, sub) in spec.subnetworks.iter().enumerate() {
        for i in 1..=n {
            let rule = sub
                .rules
                .iter()
                .find(|r| r.selector.matches(i))
                .ok_or_else(|| {
                    SpecError::Instantiation(format!(
                        "no rule of subnetwork {} covers position {i}",
                        sub.id
                    ))
                })?;
            let mut slots = Vec::with_capacity(rule.offsets.len());
            for &off in &rule.offsets {
                let idx = i as i64 + off;
                let source = if (1..=n as i64).contains(&idx) {
                    SlotSource::Node(global(k, idx as usize))
                } else {
                    let (side, depth) = if idx < 1 {
                        (Side::Head, (1 - idx) as usize)
                    } else {
                        (Side::Tail, (idx - n as i64) as usize)
                    };
                    let link = if spec.boundary_rule == BoundaryRule::Wrap {
                        None
                    } else {
                        spec.links.iter().find(|l| l.to == k && l.side == side)
                    };
                    match (link, spec.boundary_rule) {
                        (Some(l), _) => {
                            let src = (l.from_index + depth - 1).min(n);
                            SlotSource::Node(global(l.from, src))
                        }
                        (None, BoundaryRule::ConstantHold) => {
                            SlotSource::Constant(sub.hold_value.ok_or_else(|| {
                                SpecError::Instantiation(format!(
                                    "subnetwork {} needs a hold_value for position {i}",
                                    sub.id
                                ))
                            })?)
                        }
                        (None, _) => {
                            let wrapped = (idx - 1).rem_euclid(n as i64) as usize + 1;
                            SlotSource::Node(global(k, wrapped))
                        }
                    }
                };
                if source == SlotSource::Node(global(k, i)) {
                    return Err(SpecError::Instantiation(format!(
                        "position {i} of subnetwork {} would read itself (truncation {n} too short)",
                        sub.id
                    )));
                }
                slots.push(source);
            }
            nodes.push(Node {
                id: global(k, i),
                subnetwork: k,
                local: i,
                class: rule.class,
                slots,
            });
        }
    }

    let total = nodes.len();
    let mut in_neighbors = vec![Vec::new(); total];
    let mut out_neighbors = vec![Vec::new(); total];
    for node in &nodes {
        for s in &node.slots {
            if let SlotSource::Node(j) = *s {
                in_neighbors[node.id].push(j);
                out_neighbors[j].push(node.id);
            }
        }
    }
    for v in in_neighbors.iter_mut().chain(out_neighbors.iter_mut()) {
        v.sort_unstable();
        v.dedup();
    }
    let same = |a: usize, b: usize| nodes[a].subnetwork == nodes[b].subnetwork;
    let intra_in: Vec<Vec<usize>> = in_neighbors
        .iter()
        .enumerate()
        .map(|(i, v)| v.iter().copied().filter(|&j| same(i, j)).collect())
        .collect();
    let intra_out: Vec<Vec<usize>> = out_neighbors
        .iter()
        .enumerate()
        .map(|(i, v)| v.iter().copied().filter(|&j| same(i, j)).collect())
        .collect();

    Ok(TruncatedNetwork {
        n,
        nodes,
        in_neighbors,
        out_neighbors,
        intra_in,
        intra_out,
        subnetwork_ids: spec.subnetworks.iter().map(|s| s.id.clone()).collect(),
        declared_strong: spec.subnetworks.iter().map(|s| s.strongly_connected).collect(),
    })
}
