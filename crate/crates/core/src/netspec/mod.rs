//! Declarative description of an infinite network: finitely many subsystem
//! classes plus a topology pattern, instantiated on demand into finite
//! truncations.

mod config;
mod scc;
mod topology;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gains::{derive_affine_certificate, DeltaIssCertificate, GainError};

pub use config::{parse_network, NetworkConfig};
pub use scc::{decompose, strongly_connected_components, SccDecomposition};
pub use topology::{instantiate, Node, SlotSource, TruncatedNetwork};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("config: {0}")]
    Config(String),
    #[error("instantiation: {0}")]
    Instantiation(String),
    #[error("topology: {0}")]
    Topology(String),
    #[error("invalid network specification:\n{0}")]
    Invalid(ValidationReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Finite union of closed intervals, kept sorted and disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct BoxSet {
    boxes: Vec<Interval>,
}

impl BoxSet {
    pub fn new(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self, String> {
        let mut boxes: Vec<Interval> = pairs
            .into_iter()
            .map(|(lo, hi)| Interval { lo, hi })
            .collect();
        if boxes.is_empty() {
            return Err("empty box set".into());
        }
        for b in &boxes {
            if !(b.lo.is_finite() && b.hi.is_finite()) || b.lo > b.hi {
                return Err(format!("malformed interval [{}, {}]", b.lo, b.hi));
            }
        }
        boxes.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        for w in boxes.windows(2) {
            if w[1].lo <= w[0].hi {
                return Err(format!(
                    "overlapping intervals [{}, {}] and [{}, {}]",
                    w[0].lo, w[0].hi, w[1].lo, w[1].hi
                ));
            }
        }
        Ok(BoxSet { boxes })
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        BoxSet::new([(lo, hi)]).expect("valid interval")
    }

    pub fn boxes(&self) -> &[Interval] {
        &self.boxes
    }

    pub fn contains(&self, x: f64) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    /// Smallest side length over the boxes.
    pub fn span(&self) -> f64 {
        self.boxes
            .iter()
            .map(Interval::width)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn lo(&self) -> f64 {
        self.boxes[0].lo
    }

    pub fn hi(&self) -> f64 {
        self.boxes[self.boxes.len() - 1].hi
    }

    pub fn is_subset_of(&self, other: &BoxSet) -> bool {
        self.boxes
            .iter()
            .all(|b| other.boxes.iter().any(|o| o.lo <= b.lo && b.hi <= o.hi))
    }

    /// Box set shrunk by `margin` on each side; boxes that vanish are dropped.
    pub fn shrink(&self, margin: f64) -> Option<BoxSet> {
        let pairs: Vec<(f64, f64)> = self
            .boxes
            .iter()
            .filter(|b| b.width() >= 2.0 * margin)
            .map(|b| (b.lo + margin, b.hi - margin))
            .collect();
        BoxSet::new(pairs).ok()
    }
}

impl TryFrom<Vec<[f64; 2]>> for BoxSet {
    type Error = String;
    fn try_from(v: Vec<[f64; 2]>) -> Result<Self, String> {
        BoxSet::new(v.into_iter().map(|[a, b]| (a, b)))
    }
}

impl From<BoxSet> for Vec<[f64; 2]> {
    fn from(s: BoxSet) -> Self {
        s.boxes.into_iter().map(|b| [b.lo, b.hi]).collect()
    }
}

impl fmt::Display for BoxSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.boxes.iter().enumerate() {
            if i > 0 {
                write!(f, " ∪ ")?;
            }
            write!(f, "[{}, {}]", b.lo, b.hi)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSet {
    /// Finitely many admissible values (e.g. traffic light red/green).
    Finite(Vec<f64>),
    Boxes(BoxSet),
}

impl InputSet {
    pub fn is_finite(&self) -> bool {
        matches!(self, InputSet::Finite(_))
    }

    pub fn span(&self) -> f64 {
        match self {
            InputSet::Finite(_) => 0.0,
            InputSet::Boxes(b) => b.span(),
        }
    }
}

pub type DynamicsFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;

/// Deterministic scalar dynamics `x⁺ = f(x, u, w)`.
#[derive(Clone)]
pub enum Dynamics {
    /// `x⁺ = a·x + Σ d_j·w_j + b·u`, one `d_j` per neighbor slot.
    Affine { a: f64, b: f64, d: Vec<f64> },
    /// Arbitrary map; requires a user-supplied certificate.
    Evaluator { slots: usize, f: DynamicsFn },
}

impl Dynamics {
    pub fn eval(&self, x: f64, u: f64, w: &[f64]) -> f64 {
        match self {
            Dynamics::Affine { a, b, d } => {
                let mut acc = a * x + b * u;
                for (dj, wj) in d.iter().zip(w) {
                    acc += dj * wj;
                }
                acc
            }
            Dynamics::Evaluator { f, .. } => f(x, u, w),
        }
    }

    pub fn slots(&self) -> usize {
        match self {
            Dynamics::Affine { d, .. } => d.len(),
            Dynamics::Evaluator { slots, .. } => *slots,
        }
    }
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Affine { a, b, d } => f
                .debug_struct("Affine")
                .field("a", a)
                .field("b", b)
                .field("d", d)
                .finish(),
            Dynamics::Evaluator { slots, .. } => {
                f.debug_struct("Evaluator").field("slots", slots).finish()
            }
        }
    }
}

/// Output map `y = h(x)`, shared by every out-neighbor slot in v1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputMap {
    Identity,
    Affine { scale: f64, offset: f64 },
}

impl Default for OutputMap {
    fn default() -> Self {
        OutputMap::Identity
    }
}

impl OutputMap {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            OutputMap::Identity => x,
            OutputMap::Affine { scale, offset } => scale * x + offset,
        }
    }

    /// Lipschitz constant of the map.
    pub fn lipschitz(&self) -> f64 {
        match self {
            OutputMap::Identity => 1.0,
            OutputMap::Affine { scale, .. } => scale.abs(),
        }
    }
}

/// Road-cell parameters the affine dynamics were derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficCell {
    /// Sampling time (h).
    pub tau: f64,
    /// Cell length (km).
    pub length: f64,
    /// Flow speed (km/h).
    pub speed: f64,
    /// Fraction of vehicles leaving through exits per step.
    pub exit_rate: f64,
    /// Vehicles admitted per step on green.
    pub inflow: f64,
    pub slots: usize,
}

impl TrafficCell {
    pub fn flow_ratio(&self) -> f64 {
        self.tau * self.speed / self.length
    }

    /// Coefficient of the own state, `1 - τv/l - e`.
    pub fn retention(&self) -> f64 {
        1.0 - self.flow_ratio() - self.exit_rate
    }

    pub fn dynamics(&self) -> Dynamics {
        let share = (1.0 - self.exit_rate) * self.flow_ratio() / self.slots.max(1) as f64;
        Dynamics::Affine {
            a: self.retention(),
            b: self.inflow,
            d: vec![share; self.slots],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubsystemClass {
    pub id: String,
    pub state_set: BoxSet,
    pub input_set: InputSet,
    pub dynamics: Dynamics,
    pub output: OutputMap,
    pub certificate: Option<DeltaIssCertificate>,
    pub safe_set: BoxSet,
    pub traffic: Option<TrafficCell>,
}

impl SubsystemClass {
    /// Declared certificate, or the one derived from the affine template.
    pub fn certificate(&self) -> Result<DeltaIssCertificate, GainError> {
        match &self.certificate {
            Some(c) => Ok(c.clone()),
            None => derive_affine_certificate(self),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Odd,
    Even,
}

/// Matches positions `i` (1-based) within a subnetwork. All present
/// constraints must hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parity: Option<Parity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_index: Option<usize>,
}

impl Selector {
    pub fn matches(&self, i: usize) -> bool {
        self.index.map_or(true, |k| k == i)
            && self.min_index.map_or(true, |m| i >= m)
            && self.parity.map_or(true, |p| match p {
                Parity::Odd => i % 2 == 1,
                Parity::Even => i % 2 == 0,
            })
    }
}

/// First matching rule assigns the class and the neighbor offsets (one per
/// internal-input slot, in slot order).
#[derive(Debug, Clone, PartialEq)]
pub struct PositionRule {
    pub selector: Selector,
    pub class: usize,
    pub offsets: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subnetwork {
    pub id: String,
    pub rules: Vec<PositionRule>,
    pub strongly_connected: bool,
    pub hold_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Indices below 1.
    Head,
    /// Indices above the truncation size.
    Tail,
}

/// Directed link feeding out-of-range indices on one side of `to` from node
/// `from_index` of `from`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossLink {
    pub from: usize,
    pub from_index: usize,
    pub to: usize,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryRule {
    /// Every out-of-range index wraps around inside its subnetwork.
    Wrap,
    /// Linked sides read the upstream subnetwork; unlinked sides wrap.
    #[default]
    CrossFeed,
    /// Linked sides read the upstream subnetwork; unlinked sides read the
    /// subnetwork's constant hold value.
    ConstantHold,
}

#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub classes: Vec<SubsystemClass>,
    pub subnetworks: Vec<Subnetwork>,
    pub links: Vec<CrossLink>,
    pub boundary_rule: BoundaryRule,
}

impl NetworkSpec {
    pub fn class_index(&self, id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn subnetwork_index(&self, id: &str) -> Option<usize> {
        self.subnetworks.iter().position(|s| s.id == id)
    }

    /// Largest neighbor offset magnitude; truncations must be at least this long.
    pub fn arity(&self) -> usize {
        self.subnetworks
            .iter()
            .flat_map(|s| s.rules.iter())
            .flat_map(|r| r.offsets.iter())
            .map(|o| o.unsigned_abs() as usize)
            .max()
            .unwrap_or(0)
            .max(1)
    }

    /// Subnetwork-level edges `from → to` induced by the cross links.
    pub fn subnetwork_edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self.links.iter().map(|l| (l.from, l.to)).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn certificates(&self) -> Result<Vec<DeltaIssCertificate>, GainError> {
        self.classes.iter().map(SubsystemClass::certificate).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Arity,
    Certificate,
    SafeSet,
    StateSet,
    InputSet,
    Topology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBound {
    pub class: String,
    /// `max{|a|, Σ|d_j|, |b|}` for affine classes.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
    pub class_bounds: Vec<ClassBound>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.diagnostics.is_empty()
    }

    pub fn of_kind(&self, kind: DiagnosticKind) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(move |d| d.kind == kind)
    }

    /// Uniform bound over all classes.
    pub fn uniform_bound(&self) -> Option<f64> {
        self.class_bounds
            .iter()
            .map(|b| b.bound)
            .try_fold(0.0_f64, |acc, b| b.map(|b| acc.max(b)))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.diagnostics {
            writeln!(f, "  [{:?}] {}: {}", d.kind, d.location, d.message)?;
        }
        Ok(())
    }
}

/// Checks the whole specification and collects every violation.
pub fn validate(spec: &NetworkSpec) -> ValidationReport {
    let mut diags = Vec::new();
    let mut push = |kind, location: String, message: String| {
        diags.push(Diagnostic {
            kind,
            location,
            message,
        })
    };
    let mut bounds = Vec::new();

    for class in &spec.classes {
        let loc = format!("class {}", class.id);
        let bound = match &class.dynamics {
            Dynamics::Affine { a, b, d } => {
                let dsum: f64 = d.iter().map(|v| v.abs()).sum();
                Some(a.abs().max(dsum).max(b.abs()))
            }
            Dynamics::Evaluator { .. } => None,
        };
        bounds.push(ClassBound {
            class: class.id.clone(),
            bound,
        });

        if class.state_set.span() <= 0.0 {
            push(
                DiagnosticKind::StateSet,
                loc.clone(),
                format!("state set {} has a degenerate box", class.state_set),
            );
        }
        if !class.safe_set.is_subset_of(&class.state_set) {
            push(
                DiagnosticKind::SafeSet,
                loc.clone(),
                format!(
                    "safe set {} is not contained in state set {}",
                    class.safe_set, class.state_set
                ),
            );
        }
        match &class.input_set {
            InputSet::Finite(v) if v.is_empty() => push(
                DiagnosticKind::InputSet,
                loc.clone(),
                "finite input set is empty".into(),
            ),
            InputSet::Finite(v) if v.iter().any(|u| !u.is_finite()) => push(
                DiagnosticKind::InputSet,
                loc.clone(),
                "non-finite input value".into(),
            ),
            _ => {}
        }

        if let Some(t) = &class.traffic {
            if t.retention() <= 0.0 {
                push(
                    DiagnosticKind::Certificate,
                    loc.clone(),
                    format!(
                        "retention coefficient 1 - τv/l - e = {:.5} is not positive, so κ = (1 - τv/l - e)·id is not a class-K∞ contraction",
                        t.retention()
                    ),
                );
            }
            if !(0.0..1.0).contains(&t.exit_rate) {
                push(
                    DiagnosticKind::Certificate,
                    loc.clone(),
                    format!("exit rate {} outside [0, 1)", t.exit_rate),
                );
            }
        }

        match class.certificate() {
            Ok(cert) => {
                let span = class.state_set.span().max(f64::MIN_POSITIVE);
                for scale in [1e-3, 1e-2, 1e-1, 0.5, 1.0] {
                    let r = scale * span;
                    if let Err(e) = cert.kappa.one_minus(r) {
                        push(DiagnosticKind::Certificate, loc.clone(), e.to_string());
                        break;
                    }
                }
                if let Err(e) = cert.check_sandwich(span) {
                    push(DiagnosticKind::Certificate, loc.clone(), e.to_string());
                }
            }
            Err(e) => push(DiagnosticKind::Certificate, loc.clone(), e.to_string()),
        }
    }

    let mut seen = std::collections::BTreeSet::new();
    for (k, sub) in spec.subnetworks.iter().enumerate() {
        if !seen.insert(sub.id.as_str()) {
            push(
                DiagnosticKind::Topology,
                format!("subnetwork {}", sub.id),
                "duplicate subnetwork id".into(),
            );
        }
        if sub.rules.is_empty() {
            push(
                DiagnosticKind::Topology,
                format!("subnetwork {}", sub.id),
                "no position rules".into(),
            );
        }
        for (r, rule) in sub.rules.iter().enumerate() {
            let class = &spec.classes[rule.class];
            let slots = class.dynamics.slots();
            if slots != rule.offsets.len() {
                push(
                    DiagnosticKind::Arity,
                    format!("subnetwork {} rule {}", sub.id, r),
                    format!(
                        "class {} has {} internal-input coefficient(s) but the rule declares {} neighbor slot(s)",
                        class.id,
                        slots,
                        rule.offsets.len()
                    ),
                );
            }
            if rule.offsets.contains(&0) {
                push(
                    DiagnosticKind::Topology,
                    format!("subnetwork {} rule {}", sub.id, r),
                    "offset 0 would make a node its own neighbor".into(),
                );
            }
        }
        if spec.boundary_rule == BoundaryRule::ConstantHold && sub.hold_value.is_none() {
            let needs_hold = [Side::Head, Side::Tail].iter().any(|side| {
                !spec.links.iter().any(|l| l.to == k && l.side == *side)
            });
            if needs_hold {
                push(
                    DiagnosticKind::Topology,
                    format!("subnetwork {}", sub.id),
                    "constant-hold boundary needs a hold_value".into(),
                );
            }
        }
    }

    if spec.boundary_rule == BoundaryRule::Wrap && !spec.links.is_empty() {
        push(
            DiagnosticKind::Topology,
            "links".into(),
            "cross links are only honored by the cross-feed and constant-hold boundary rules"
                .into(),
        );
    }
    for (n, l) in spec.links.iter().enumerate() {
        if l.from == l.to {
            push(
                DiagnosticKind::Topology,
                format!("link {n}"),
                "link from a subnetwork to itself".into(),
            );
        }
        if l.from_index == 0 {
            push(
                DiagnosticKind::Topology,
                format!("link {n}"),
                "from_index is 1-based".into(),
            );
        }
    }
    for side in [Side::Head, Side::Tail] {
        for k in 0..spec.subnetworks.len() {
            if spec.links.iter().filter(|l| l.to == k && l.side == side).count() > 1 {
                push(
                    DiagnosticKind::Topology,
                    format!("subnetwork {}", spec.subnetworks[k].id),
                    format!("more than one link feeds the {side:?} side"),
                );
            }
        }
    }
    // condensation at subnetwork level must be acyclic
    let edges = spec.subnetwork_edges();
    let mut adj = vec![Vec::new(); spec.subnetworks.len()];
    for (a, b) in &edges {
        adj[*a].push(*b);
    }
    let comps = strongly_connected_components(&adj);
    for c in comps.iter().filter(|c| c.len() > 1) {
        let names: Vec<&str> = c.iter().map(|&k| spec.subnetworks[k].id.as_str()).collect();
        push(
            DiagnosticKind::Topology,
            "links".into(),
            format!("subnetworks {names:?} form a cycle; the subnetwork graph must be acyclic"),
        );
    }

    ValidationReport {
        diagnostics: diags,
        class_bounds: bounds,
    }
}
