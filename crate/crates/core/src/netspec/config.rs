//! JSON-compatible network config.
//!
//! Top-level keys are `classes`, `subnetworks`, `links` and `boundary_rule`;
//! an optional `pipeline` object carries run defaults. Every number may be
//! written as a JSON number or as a decimal/rational string (`"10/3600"`).

use serde::Deserialize;

use super::{
    BoundaryRule, BoxSet, CrossLink, Dynamics, InputSet, NetworkSpec, OutputMap, PositionRule,
    Selector, Side, SpecError, Subnetwork, SubsystemClass, TrafficCell,
};
use crate::gains::DeltaIssCertificate;
use crate::num::{opt_real, real, real_vec};
use crate::pipeline::PipelineOptions;

#[derive(Debug, Clone, Copy, Deserialize)]
struct RealPair(#[serde(deserialize_with = "real")] f64, #[serde(deserialize_with = "real")] f64);

fn boxes(pairs: &[RealPair], what: &str, class: &str) -> Result<BoxSet, SpecError> {
    BoxSet::new(pairs.iter().map(|p| (p.0, p.1)))
        .map_err(|e| SpecError::Config(format!("class {class}: {what}: {e}")))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum InputSetConfig {
    Values {
        #[serde(deserialize_with = "real_vec")]
        values: Vec<f64>,
    },
    Boxes {
        boxes: Vec<RealPair>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DynamicsConfig {
    Affine {
        #[serde(deserialize_with = "real")]
        a: f64,
        #[serde(deserialize_with = "real")]
        b: f64,
        #[serde(default, deserialize_with = "real_vec")]
        d: Vec<f64>,
    },
    TrafficCell {
        #[serde(deserialize_with = "real")]
        tau: f64,
        #[serde(deserialize_with = "real")]
        length: f64,
        #[serde(deserialize_with = "real")]
        speed: f64,
        #[serde(deserialize_with = "real")]
        exit_rate: f64,
        #[serde(deserialize_with = "real")]
        inflow: f64,
        slots: usize,
    },
}

#[derive(Debug, Clone, Deserialize)]
struct ClassConfig {
    id: String,
    state_set: Vec<RealPair>,
    input_set: InputSetConfig,
    dynamics: DynamicsConfig,
    #[serde(default)]
    output: OutputMap,
    #[serde(default)]
    certificate: Option<DeltaIssCertificate>,
    /// Defaults to the state set.
    #[serde(default)]
    safe_set: Option<Vec<RealPair>>,
}

#[derive(Debug, Clone, Deserialize)]
struct RuleConfig {
    #[serde(default)]
    when: Selector,
    class: String,
    #[serde(default)]
    neighbors: Vec<i64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
struct SubnetworkConfig {
    id: String,
    rules: Vec<RuleConfig>,
    #[serde(default = "yes")]
    strongly_connected: bool,
    #[serde(default, deserialize_with = "opt_real")]
    hold_value: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct LinkConfig {
    from: String,
    #[serde(default = "one")]
    from_index: usize,
    to: String,
    side: Side,
}

fn one() -> usize {
    1
}

/// Raw config document as read from disk.
#[derive(Debug, Clone, Deserialize)]
pub struct NetworkConfig {
    classes: Vec<ClassConfig>,
    subnetworks: Vec<SubnetworkConfig>,
    #[serde(default)]
    links: Vec<LinkConfig>,
    #[serde(default)]
    boundary_rule: BoundaryRule,
    #[serde(default)]
    pub pipeline: Option<PipelineOptions>,
}

impl NetworkConfig {
    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        serde_json::from_str(text).map_err(|e| SpecError::Config(e.to_string()))
    }

    pub fn into_spec(self) -> Result<NetworkSpec, SpecError> {
        let mut classes = Vec::with_capacity(self.classes.len());
        for c in &self.classes {
            if classes.iter().any(|k: &SubsystemClass| k.id == c.id) {
                return Err(SpecError::Config(format!("duplicate class id {}", c.id)));
            }
            let state_set = boxes(&c.state_set, "state_set", &c.id)?;
            let safe_set = match &c.safe_set {
                Some(p) => boxes(p, "safe_set", &c.id)?,
                None => state_set.clone(),
            };
            let input_set = match &c.input_set {
                InputSetConfig::Values { values } => {
                    let mut v = values.clone();
                    v.sort_by(f64::total_cmp);
                    v.dedup();
                    InputSet::Finite(v)
                }
                InputSetConfig::Boxes { boxes: b } => InputSet::Boxes(boxes(b, "input_set", &c.id)?),
            };
            let (dynamics, traffic) = match &c.dynamics {
                DynamicsConfig::Affine { a, b, d } => (
                    Dynamics::Affine {
                        a: *a,
                        b: *b,
                        d: d.clone(),
                    },
                    None,
                ),
                DynamicsConfig::TrafficCell {
                    tau,
                    length,
                    speed,
                    exit_rate,
                    inflow,
                    slots,
                } => {
                    let t = TrafficCell {
                        tau: *tau,
                        length: *length,
                        speed: *speed,
                        exit_rate: *exit_rate,
                        inflow: *inflow,
                        slots: *slots,
                    };
                    (t.dynamics(), Some(t))
                }
            };
            if let Some(cert) = &c.certificate {
                cert.validate()
                    .map_err(|e| SpecError::Config(format!("class {}: certificate: {e}", c.id)))?;
            }
            classes.push(SubsystemClass {
                id: c.id.clone(),
                state_set,
                input_set,
                dynamics,
                output: c.output,
                certificate: c.certificate.clone(),
                safe_set,
                traffic,
            });
        }

        let class_index = |name: &str, sub: &str| {
            classes
                .iter()
                .position(|c| c.id == name)
                .ok_or_else(|| SpecError::Config(format!("subnetwork {sub}: unknown class {name}")))
        };
        let mut subnetworks = Vec::with_capacity(self.subnetworks.len());
        for s in &self.subnetworks {
            let rules = s
                .rules
                .iter()
                .map(|r| {
                    Ok(PositionRule {
                        selector: r.when.clone(),
                        class: class_index(&r.class, &s.id)?,
                        offsets: r.neighbors.clone(),
                    })
                })
                .collect::<Result<Vec<_>, SpecError>>()?;
            subnetworks.push(Subnetwork {
                id: s.id.clone(),
                rules,
                strongly_connected: s.strongly_connected,
                hold_value: s.hold_value,
            });
        }

        let sub_index = |name: &str| {
            subnetworks
                .iter()
                .position(|s: &Subnetwork| s.id == name)
                .ok_or_else(|| SpecError::Config(format!("link refers to unknown subnetwork {name}")))
        };
        let links = self
            .links
            .iter()
            .map(|l| {
                Ok(CrossLink {
                    from: sub_index(&l.from)?,
                    from_index: l.from_index,
                    to: sub_index(&l.to)?,
                    side: l.side,
                })
            })
            .collect::<Result<Vec<_>, SpecError>>()?;

        Ok(NetworkSpec {
            classes,
            subnetworks,
            links,
            boundary_rule: self.boundary_rule,
        })
    }
}

/// Parses a network config and returns the spec together with any pipeline
/// defaults found in the document.
pub fn parse_network(text: &str) -> Result<(NetworkSpec, Option<PipelineOptions>), SpecError> {
    let cfg = NetworkConfig::from_json(text)?;
    let pipeline = cfg.pipeline.clone();
    Ok((cfg.into_spec()?, pipeline))
}
