//! End-to-end orchestration: analysis of a truncation, design, per-profile
//! abstraction and synthesis with reuse, and closed-loop runs.
//!
//! Nodes share a symbolic model and controller whenever they agree on a
//! *profile*: class, design parameters and, per slot, the neighbor's state
//! grid, output map, safe set and offset. The number of profiles depends on
//! the topology pattern only, not on the truncation size.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::abstraction::{check_local_asf, slot_grid, AsfParams, AsfReport, Grid, OutRule, SymbolicModel, DEFAULT_MAX_SIZE};
use crate::designer::{design_precisions, verify_design, DesignOptions, PhiPolicy, QuantDesign, VerificationReport};
use crate::gains::{
    build_gain_matrix, check_small_gain, AssumptionBounds, CertificateReport, DeltaIssCertificate, GainMatrix,
    SmallGainCertificate,
};
use crate::netspec::{
    decompose, instantiate, parse_network, validate, BoxSet, NetworkSpec, OutputMap, SccDecomposition, SlotSource, SpecError,
    TruncatedNetwork,
};
use crate::num::{opt_real, real};
use crate::sim::{initial_states, run, InitialDistribution, InputPolicy, SimNetwork, SimNode, TrajectoryLog};
use crate::synthesis::{closure_violations, compose, safe_internal_indices, synthesize_safety, ComposedController, SafetyController};
use crate::Error;

/// The bundled road-traffic case study.
pub const BUNDLED_TRAFFIC_CONFIG: &str = include_str!("../../../configs/traffic.cfg");

fn default_theta() -> f64 {
    0.5
}
fn default_truncation() -> usize {
    10
}
fn default_steps() -> usize {
    100
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_max_size() -> u64 {
    DEFAULT_MAX_SIZE
}
fn default_asf_samples() -> usize {
    10_000
}

/// Run parameters; every field has a default so configs may omit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    #[serde(default, deserialize_with = "opt_real")]
    pub varpi: Option<f64>,
    #[serde(default = "default_theta", deserialize_with = "real")]
    pub theta: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_rule: OutRule,
    #[serde(default = "default_max_size")]
    pub max_size: u64,
    #[serde(default)]
    pub eta_u: BTreeMap<String, f64>,
    #[serde(default)]
    pub eta_x: BTreeMap<String, f64>,
    #[serde(default)]
    pub phi_policy: PhiPolicy,
    #[serde(default = "default_asf_samples")]
    pub asf_samples: usize,
    #[serde(default)]
    pub asf_seed: u64,
    #[serde(default)]
    pub initial: InitialDistribution,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            varpi: None,
            theta: default_theta(),
            truncation: default_truncation(),
            steps: default_steps(),
            seeds: default_seeds(),
            out_rule: OutRule::default(),
            max_size: default_max_size(),
            eta_u: BTreeMap::new(),
            eta_x: BTreeMap::new(),
            phi_policy: PhiPolicy::default(),
            asf_samples: default_asf_samples(),
            asf_seed: 0,
            initial: InitialDistribution::default(),
        }
    }
}

impl PipelineOptions {
    pub fn design_options(&self) -> DesignOptions {
        DesignOptions {
            theta: self.theta,
            phi_policy: self.phi_policy,
            eta_u: self.eta_u.clone(),
            eta_x: self.eta_x.clone(),
        }
    }

    /// Checks ranges that serde cannot express.
    pub fn check(&self) -> Result<(), Error> {
        if let Some(v) = self.varpi {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Usage(format!("varpi must be positive, got {v}")));
            }
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Usage(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if self.truncation == 0 {
            return Err(Error::Usage("truncation must be positive".into()));
        }
        Ok(())
    }
}

/// Parses a config, rejecting specs with validation diagnostics.
pub fn load(text: &str) -> Result<(NetworkSpec, PipelineOptions), Error> {
    let (spec, opts) = parse_network(text)?;
    let report = validate(&spec);
    if !report.is_valid() {
        return Err(SpecError::Invalid(report).into());
    }
    let opts = opts.unwrap_or_default();
    opts.check()?;
    Ok((spec, opts))
}

/// Gains and small-gain certificates of one truncation.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub spec: NetworkSpec,
    pub net: TruncatedNetwork,
    pub sccs: SccDecomposition,
    pub certs: Vec<DeltaIssCertificate>,
    pub class_ids: Vec<String>,
    pub gains: GainMatrix,
    pub bounds: AssumptionBounds,
    pub small_gain: Vec<SmallGainCertificate>,
}

impl Analysis {
    pub fn new(spec: NetworkSpec, n: usize) -> Result<Self, Error> {
        let net = instantiate(&spec, n)?;
        let sccs = decompose(&net)?;
        let certs = spec.certificates()?;
        let class_ids: Vec<String> = spec.classes.iter().map(|c| c.id.clone()).collect();
        let gains = build_gain_matrix(&net, &sccs, &certs, &class_ids)?;
        let bounds = AssumptionBounds::from_certificates(&certs)?;
        let small_gain = check_small_gain(&gains, &bounds)?;
        Ok(Analysis {
            spec,
            net,
            sccs,
            certs,
            class_ids,
            gains,
            bounds,
            small_gain,
        })
    }

    pub fn certificate_report(&self) -> Result<CertificateReport, Error> {
        Ok(CertificateReport::new(&self.class_ids, &self.certs, &self.gains, &self.small_gain, self.bounds)?)
    }

    pub fn design(&self, varpi: f64, opts: &DesignOptions) -> Result<QuantDesign, Error> {
        Ok(design_precisions(&self.spec, &self.net, &self.certs, &self.small_gain, varpi, opts)?)
    }

    pub fn verify(&self, design: &QuantDesign) -> Result<VerificationReport, Error> {
        Ok(verify_design(design, &self.certs, &self.spec)?)
    }
}

/// Where one internal slot of a profile reads from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotProfile {
    Neighbor {
        state_set: BoxSet,
        safe_set: BoxSet,
        output: OutputMap,
        eta_x: f64,
        phi: f64,
    },
    Constant { value: f64 },
}

/// One shared (model, controller) pair and the nodes that use it.
#[derive(Debug, Clone)]
pub struct Profile {
    pub key: String,
    pub class: usize,
    pub unit: usize,
    pub slots: Vec<SlotProfile>,
    pub slot_domains: Vec<BoxSet>,
    pub nodes: Vec<usize>,
    pub model: Arc<SymbolicModel>,
    pub controller: Arc<SafetyController>,
}

#[derive(Debug, Clone)]
pub struct Profiles {
    pub profiles: Vec<Profile>,
    pub node_profile: Vec<usize>,
}

impl Profiles {
    pub fn composed(&self) -> Result<ComposedController, Error> {
        let nodes = self
            .node_profile
            .iter()
            .map(|&p| Arc::clone(&self.profiles[p].controller))
            .collect();
        Ok(compose(nodes, self.node_profile.len())?)
    }
}

struct Pending {
    key: String,
    class: usize,
    unit: usize,
    slots: Vec<SlotProfile>,
    grids: Vec<Vec<f64>>,
    phis: Vec<f64>,
    internal: Vec<Vec<u32>>,
    domains: Vec<BoxSet>,
    nodes: Vec<usize>,
}

fn output_range(set: &BoxSet, out: &OutputMap) -> BoxSet {
    let pairs = set.boxes().iter().map(|b| {
        let (a, c) = (out.eval(b.lo), out.eval(b.hi));
        (a.min(c), a.max(c))
    });
    BoxSet::new(pairs).unwrap_or_else(|_| BoxSet::interval(out.eval(set.lo()), out.eval(set.hi())))
}

/// Groups nodes by profile, then builds one model and controller per
/// profile (in parallel across profiles).
pub fn build_profiles(a: &Analysis, design: &QuantDesign, out_rule: OutRule, max_size: u64) -> Result<Profiles, Error> {
    let spec = &a.spec;
    let unit_of = |node: usize| {
        let n = &a.net.nodes[node];
        design
            .unit_index(n.subnetwork, n.class)
            .ok_or_else(|| Error::Usage(format!("design has no unit for node {node}")))
    };
    let mut pending: Vec<Pending> = Vec::new();
    let mut by_key: BTreeMap<String, usize> = BTreeMap::new();
    let mut node_profile = Vec::with_capacity(a.net.len());
    for (i, node) in a.net.nodes.iter().enumerate() {
        let u = unit_of(i)?;
        let ud = &design.units[u];
        let mut key = format!(
            "{}|x{:x}|u{:x}|{:?}",
            spec.classes[node.class].id,
            ud.eta_x.to_bits(),
            ud.eta_u.to_bits(),
            out_rule
        );
        let mut slots = Vec::new();
        for src in &node.slots {
            match *src {
                SlotSource::Node(j) => {
                    let uj = unit_of(j)?;
                    let phi = design.phi(u, uj).unwrap_or(0.0);
                    let cj = &spec.classes[design.units[uj].class];
                    // keyed on what the slot sees, not on the neighbor's class name
                    key.push_str(&format!(
                        "|{}:{}:{:x}:{:x}:{:?}",
                        cj.state_set,
                        cj.safe_set,
                        design.units[uj].eta_x.to_bits(),
                        phi.to_bits(),
                        cj.output
                    ));
                    slots.push(SlotProfile::Neighbor {
                        state_set: cj.state_set.clone(),
                        safe_set: cj.safe_set.clone(),
                        output: cj.output,
                        eta_x: design.units[uj].eta_x,
                        phi,
                    });
                }
                SlotSource::Constant(c) => {
                    key.push_str(&format!("|const:{:x}", c.to_bits()));
                    slots.push(SlotProfile::Constant { value: c });
                }
            }
        }
        let p = match by_key.get(&key) {
            Some(&p) => p,
            None => {
                let mut grids = Vec::new();
                let mut phis = Vec::new();
                let mut internal = Vec::new();
                let mut domains = Vec::new();
                for (src, sp) in node.slots.iter().zip(&slots) {
                    match (*src, sp) {
                        (
                            SlotSource::Node(_),
                            SlotProfile::Neighbor {
                                state_set,
                                safe_set,
                                output,
                                eta_x,
                                phi,
                            },
                        ) => {
                            let g = Grid::new(*eta_x, state_set)?;
                            let outs: Vec<f64> = g.values().into_iter().map(|v| output.eval(v)).collect();
                            let safe_outs: Vec<f64> = g
                                .values()
                                .into_iter()
                                .filter(|&v| safe_set.contains(v))
                                .map(|v| output.eval(v))
                                .collect();
                            let grid = slot_grid(&outs, *phi);
                            internal.push(safe_internal_indices(&grid, &safe_outs, *phi));
                            grids.push(grid);
                            phis.push(*phi);
                            domains.push(output_range(state_set, output));
                        }
                        (_, _) => {
                            let SlotSource::Constant(c) = *src else { unreachable!() };
                            grids.push(vec![c]);
                            phis.push(0.0);
                            internal.push(vec![0]);
                            domains.push(BoxSet::interval(c, c));
                        }
                    }
                }
                pending.push(Pending {
                    key: key.clone(),
                    class: node.class,
                    unit: u,
                    slots,
                    grids,
                    phis,
                    internal,
                    domains,
                    nodes: Vec::new(),
                });
                by_key.insert(key, pending.len() - 1);
                pending.len() - 1
            }
        };
        pending[p].nodes.push(i);
        node_profile.push(p);
    }

    let built: Vec<Result<(SymbolicModel, SafetyController), Error>> = thread::scope(|s| {
        let handles: Vec<_> = pending
            .iter()
            .map(|p| {
                s.spawn(move || {
                    let class = &spec.classes[p.class];
                    let ud = &design.units[p.unit];
                    let model = SymbolicModel::build(
                        class,
                        ud.eta_x,
                        ud.eta_u,
                        p.grids.clone(),
                        p.phis.clone(),
                        out_rule,
                        max_size,
                    )?;
                    let ctrl = synthesize_safety(&model, &class.safe_set, p.internal.clone())?;
                    Ok((model, ctrl))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("profile worker")).collect()
    });
    let mut profiles = Vec::with_capacity(pending.len());
    for (p, b) in pending.into_iter().zip(built) {
        let (model, controller) = b?;
        profiles.push(Profile {
            key: p.key,
            class: p.class,
            unit: p.unit,
            slots: p.slots,
            slot_domains: p.domains,
            nodes: p.nodes,
            model: Arc::new(model),
            controller: Arc::new(controller),
        });
    }
    Ok(Profiles {
        profiles,
        node_profile,
    })
}

/// Local ASF check for every profile at its design precision.
pub fn check_profiles_asf(a: &Analysis, design: &QuantDesign, profiles: &Profiles, samples: usize, seed: u64) -> Vec<AsfReport> {
    profiles
        .profiles
        .iter()
        .map(|p| {
            let ud = &design.units[p.unit];
            check_local_asf(
                &a.spec.classes[p.class],
                &a.certs[p.class],
                &p.model,
                AsfParams {
                    varpi: ud.varpi,
                    vartheta: ud.vartheta,
                },
                &p.slot_domains,
                samples,
                seed,
            )
        })
        .collect()
}

pub fn sim_network(a: &Analysis, design: &QuantDesign, profiles: &Profiles) -> SimNetwork {
    let nodes = a
        .net
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let p = &profiles.profiles[profiles.node_profile[i]];
            let class = &a.spec.classes[n.class];
            SimNode {
                subnetwork: a.net.subnetwork_ids[n.subnetwork].clone(),
                local: n.local,
                dynamics: class.dynamics.clone(),
                output: class.output,
                cert: a.certs[n.class].clone(),
                state_set: class.state_set.clone(),
                safe_set: class.safe_set.clone(),
                slots: n.slots.clone(),
                varpi: design.units[p.unit].varpi,
                model: Arc::clone(&p.model),
                controller: Arc::clone(&p.controller),
            }
        })
        .collect();
    SimNetwork {
        nodes,
        varpi: design.varpi,
        epsilon_hat: design.epsilon_hat,
    }
}

/// Seeded closed-loop runs under the refined controllers.
pub fn simulate(net: &SimNetwork, opts: &PipelineOptions) -> Result<Vec<TrajectoryLog>, Error> {
    opts.seeds
        .iter()
        .map(|&seed| {
            let x0 = initial_states(net, &opts.initial, seed)?;
            Ok(run(net, x0, opts.steps, seed, InputPolicy::Refined)?)
        })
        .collect()
}

/// One expected-versus-observed line of the traffic reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub expected: String,
    pub observed: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrafficReport {
    pub checks: Vec<Check>,
    pub design: QuantDesign,
    pub profiles: usize,
    pub runs: Vec<crate::sim::RunSummary>,
}

impl TrafficReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn check(name: &str, expected: impl Into<String>, observed: impl Into<String>, pass: bool) -> Check {
    Check {
        name: name.into(),
        expected: expected.into(),
        observed: observed.into(),
        pass,
    }
}

/// Runs the full case study from `text` and compares against the published
/// design values.
pub fn reproduce_traffic(text: &str, overrides: &PipelineOptions) -> Result<(TrafficReport, Vec<TrajectoryLog>), Error> {
    let (spec, _) = load(text)?;
    let opts = overrides;
    let varpi = opts.varpi.unwrap_or(0.8);
    let a = Analysis::new(spec.clone(), opts.truncation)?;
    let design = a.design(varpi, &opts.design_options())?;
    let mut checks = Vec::new();

    let gains: BTreeSet<u64> = a
        .gains
        .blocks
        .iter()
        .flat_map(|b| b.entries.values())
        .map(|g| (g * 1e6).round() as u64)
        .collect();
    let gain_ok = a
        .gains
        .blocks
        .iter()
        .flat_map(|b| b.entries.values())
        .all(|g| (g - 0.69231).abs() <= 1e-5);
    checks.push(check(
        "intra-block gains",
        "0.69231",
        format!("{:?}", gains.iter().map(|g| *g as f64 / 1e6).collect::<Vec<_>>()),
        gain_ok,
    ));
    let sg_ok = a.small_gain.iter().all(|c| c.sup_sigma() == 1.0 && c.lambda < 1.0);
    checks.push(check(
        "small-gain certificate",
        "sigma = 1, lambda < 1",
        format!(
            "{:?}",
            a.small_gain.iter().map(|c| (c.id.clone(), c.lambda)).collect::<Vec<_>>()
        ),
        sg_ok,
    ));
    let all = |f: &dyn Fn(&crate::designer::UnitDesign) -> bool| design.units.iter().all(f);
    checks.push(check(
        "local precisions",
        "varpi_i = vartheta_i = 0.8",
        format!(
            "{:?}",
            design.units.iter().map(|u| (u.varpi, u.vartheta)).collect::<Vec<_>>()
        ),
        all(&|u| (u.varpi - 0.8).abs() < 1e-12 && (u.vartheta - 0.8).abs() < 1e-12),
    ));
    checks.push(check(
        "quantization",
        "eta_x = 0.1, eta_u = 0, phi = 0",
        format!(
            "eta_x {:?}, eta_u {:?}",
            design.units.iter().map(|u| u.eta_x).fold(0.0, f64::max),
            design.units.iter().map(|u| u.eta_u).fold(0.0, f64::max)
        ),
        all(&|u| u.eta_x == 0.1 && u.eta_u == 0.0) && design.edges.iter().all(|e| e.phi == 0.0),
    ));
    let bound = design.units.iter().map(|u| u.eta_x_bound).fold(f64::INFINITY, f64::min);
    checks.push(check(
        "state pitch bound",
        "0.10667",
        format!("{bound:.6}"),
        (bound - 0.32 / 3.0).abs() < 1e-9,
    ));
    let ver = a.verify(&design)?;
    checks.push(check(
        "simultaneous inequalities",
        "slack 0.00667",
        format!("{:?}", ver.min_slack("state_pitch")),
        ver.passed && ver.min_slack("state_pitch").is_some_and(|s| (s - 0.02 / 3.0).abs() < 1e-9),
    ));

    let profiles = build_profiles(&a, &design, opts.out_rule, opts.max_size)?;
    let composed = profiles.composed()?;
    let closure: usize = profiles
        .profiles
        .iter()
        .map(|p| closure_violations(&p.controller, &p.model))
        .sum();
    checks.push(check(
        "controllers",
        "nonempty, closed",
        format!("{} profiles, {} closure violations", composed.distinct(), closure),
        closure == 0,
    ));
    let asf = check_profiles_asf(&a, &design, &profiles, opts.asf_samples, opts.asf_seed);
    checks.push(check(
        "local ASF",
        "no counterexamples",
        format!("{} violations", asf.iter().map(|r| r.violations).sum::<usize>()),
        asf.iter().all(AsfReport::passed),
    ));
    let net = sim_network(&a, &design, &profiles);
    let logs = simulate(&net, opts)?;
    let failed: Vec<u64> = logs.iter().filter(|l| !l.summary.passed).map(|l| l.summary.seed).collect();
    checks.push(check(
        "closed loop",
        "safe, V_i <= varpi_i, mismatch <= 0.8",
        format!(
            "{} runs, failed seeds {:?}, max mismatch {:.4}",
            logs.len(),
            failed,
            logs.iter().map(|l| l.summary.max_mismatch).fold(0.0, f64::max)
        ),
        failed.is_empty(),
    ));
    let report = TrafficReport {
        checks,
        profiles: profiles.profiles.len(),
        runs: logs.iter().map(|l| l.summary.clone()).collect(),
        design,
    };
    Ok((report, logs))
}
