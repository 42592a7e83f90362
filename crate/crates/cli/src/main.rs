//! `infinet`: command-line driver for the design, abstraction, synthesis and
//! simulation pipeline.
//!
//! Exit codes: 0 on success, 1 when the problem itself fails (invalid network,
//! infeasible design, empty controller, monitor violation), 2 on usage or
//! config errors.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use infinet_core::abstraction::AsfParams;
use infinet_core::designer::QuantDesign;
use infinet_core::netspec::{parse_network, validate, BoxSet};
use infinet_core::pipeline::{
    build_profiles, load, reproduce_traffic, sim_network, simulate, Analysis, Profiles,
    SlotProfile,
};
use infinet_core::synthesis::closure_violations;
use infinet_core::{check_local_asf, PipelineOptions, SafetyController, SymbolicModel, VerificationReport};

#[derive(Parser)]
#[command(name = "infinet", version, about = "Scale-free symbolic control of infinite networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network config and report every problem found.
    Validate(Common),
    /// Compute local precisions and quantization parameters.
    Design(Common),
    /// Build and dump one symbolic model per profile.
    Abstract(Common),
    /// Synthesize and dump one safety controller per profile.
    Synthesize(Common),
    /// Run seeded closed-loop simulations.
    Simulate(Common),
    /// Re-check the artifacts in the output directory.
    Verify(Common),
    /// Run the bundled traffic case study end to end.
    ReproduceTraffic(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Network config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global precision.
    #[arg(long, allow_negative_numbers = true)]
    varpi: Option<f64>,
    /// Nodes per subnetwork.
    #[arg(long)]
    truncation: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Simulation seed; repeat for several runs.
    #[arg(long)]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Cap on the number of transition triples per model.
    #[arg(long)]
    max_size: Option<u64>,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

type Outcome = Result<(), Failure>;

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn domain(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

impl From<infinet_core::Error> for Failure {
    fn from(e: infinet_core::Error) -> Self {
        use infinet_core::netspec::SpecError;
        let code = match &e {
            infinet_core::Error::Spec(SpecError::Instantiation(_) | SpecError::Topology(_)) => 2,
            _ if e.is_usage() => 2,
            _ => 1,
        };
        Failure { code, err: e.into() }
    }
}

/// Config, options and analysis shared by most subcommands.
struct Setup {
    opts: PipelineOptions,
    analysis: Analysis,
    varpi: f64,
}

fn read_config(c: &Common) -> Result<String, Failure> {
    let path = c.config.as_ref().ok_or_else(|| usage(anyhow!("--config is required")))?;
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)
}

fn apply_flags(c: &Common, opts: &mut PipelineOptions) -> Outcome {
    if let Some(v) = c.varpi {
        opts.varpi = Some(v);
    }
    if let Some(n) = c.truncation {
        opts.truncation = n;
    }
    if let Some(s) = c.steps {
        opts.steps = s;
    }
    if !c.seed.is_empty() {
        opts.seeds = c.seed.clone();
    }
    if let Some(m) = c.max_size {
        opts.max_size = m;
    }
    opts.check()?;
    Ok(())
}

fn setup(c: &Common) -> Result<Setup, Failure> {
    let text = read_config(c)?;
    // flag errors are usage errors even when the spec is also invalid
    if let Some(v) = c.varpi {
        if !(v > 0.0 && v.is_finite()) {
            return Err(usage(anyhow!("--varpi must be positive, got {v}")));
        }
    }
    let (spec, mut opts) = load(&text)?;
    apply_flags(c, &mut opts)?;
    let varpi = opts
        .varpi
        .ok_or_else(|| usage(anyhow!("no precision given: pass --varpi or set pipeline.varpi")))?;
    let analysis = Analysis::new(spec, opts.truncation)?;
    Ok(Setup {
        opts,
        analysis,
        varpi,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| usage(anyhow!("creating {}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(domain)?;
    fs::write(path, text + "\n").map_err(|e| usage(anyhow!("writing {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(anyhow!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(anyhow!("parsing {}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct DesignArtifact {
    truncation: usize,
    design: QuantDesign,
    certificates: serde_json::Value,
    verification: VerificationReport,
}

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    profile: usize,
    key: String,
    class: String,
    unit: usize,
    file: String,
    controller: String,
    nodes: usize,
    slots: Vec<SlotProfile>,
    slot_domains: Vec<BoxSet>,
    states: usize,
    triples: usize,
    out_transitions: usize,
}

#[derive(Serialize)]
struct ControllerSummary {
    profile: usize,
    class: String,
    nodes: usize,
    domain: usize,
    safe_states: usize,
    iterations: usize,
    closure_violations: usize,
}

fn run_validate(c: &Common) -> Outcome {
    let text = read_config(c)?;
    let (spec, _) = parse_network(&text).map_err(|e| usage(anyhow!(e)))?;
    let report = validate(&spec);
    println!("{}", serde_json::to_string_pretty(&report).map_err(domain)?);
    if report.is_valid() {
        eprintln!("valid: {} classes, {} subnetworks", spec.classes.len(), spec.subnetworks.len());
        Ok(())
    } else {
        Err(domain(anyhow!("{} problem(s) found", report.diagnostics.len())))
    }
}

fn design_step(c: &Common) -> Result<(Setup, QuantDesign), Failure> {
    let s = setup(c)?;
    let design = s.analysis.design(s.varpi, &s.opts.design_options())?;
    let verification = s.analysis.verify(&design)?;
    let artifact = DesignArtifact {
        truncation: s.opts.truncation,
        design: design.clone(),
        certificates: serde_json::to_value(s.analysis.certificate_report()?).map_err(domain)?,
        verification,
    };
    write_json(&c.out.join("design.json"), &artifact)?;
    if !artifact.verification.passed {
        return Err(domain(anyhow!("design fails its own verification")));
    }
    Ok((s, design))
}

fn run_design(c: &Common) -> Outcome {
    let (_, d) = design_step(c)?;
    for u in &d.units {
        println!(
            "{}/{}: varpi {:.6} vartheta {:.6} eta_x {} (bound {:.6}) eta_u {}",
            u.block_id, u.class_id, u.varpi, u.vartheta, u.eta_x, u.eta_x_bound, u.eta_u
        );
    }
    println!("epsilon_hat {:.6}", d.epsilon_hat);
    Ok(())
}

fn abstract_step(c: &Common) -> Result<(Setup, QuantDesign, Profiles), Failure> {
    let (s, d) = design_step(c)?;
    let profiles = build_profiles(&s.analysis, &d, s.opts.out_rule, s.opts.max_size)?;
    let dir = c.out.join("models");
    fs::create_dir_all(&dir).map_err(usage)?;
    let mut index = Vec::new();
    for (k, p) in profiles.profiles.iter().enumerate() {
        let file = format!("profile_{k}.bin");
        let f = fs::File::create(dir.join(&file)).map_err(usage)?;
        p.model.write_to(BufWriter::new(f)).map_err(domain)?;
        index.push(ModelEntry {
            profile: k,
            key: p.key.clone(),
            class: p.model.class.clone(),
            unit: p.unit,
            file,
            controller: format!("profile_{k}.json"),
            nodes: p.nodes.len(),
            slots: p.slots.clone(),
            slot_domains: p.slot_domains.clone(),
            states: p.model.states.len(),
            triples: p.model.triple_count(),
            out_transitions: p.model.out_count(),
        });
    }
    write_json(&dir.join("index.json"), &index)?;
    Ok((s, d, profiles))
}

fn run_abstract(c: &Common) -> Outcome {
    let (_, _, profiles) = abstract_step(c)?;
    for (k, p) in profiles.profiles.iter().enumerate() {
        println!(
            "profile {k} ({}): {} nodes, {} states, {} triples",
            p.model.class,
            p.nodes.len(),
            p.model.states.len(),
            p.model.triple_count()
        );
    }
    Ok(())
}

fn synthesize_step(c: &Common) -> Result<(Setup, QuantDesign, Profiles), Failure> {
    let (s, d, profiles) = abstract_step(c)?;
    let dir = c.out.join("controllers");
    let mut summary = Vec::new();
    for (k, p) in profiles.profiles.iter().enumerate() {
        write_json(&dir.join(format!("profile_{k}.json")), &*p.controller)?;
        summary.push(ControllerSummary {
            profile: k,
            class: p.controller.class.clone(),
            nodes: p.nodes.len(),
            domain: p.controller.dom.len(),
            safe_states: p.controller.safe_states,
            iterations: p.controller.iterations,
            closure_violations: closure_violations(&p.controller, &p.model),
        });
    }
    write_json(&dir.join("summary.json"), &summary)?;
    for line in &summary {
        println!(
            "profile {} ({}): domain {}/{} after {} iterations",
            line.profile, line.class, line.domain, line.safe_states, line.iterations
        );
    }
    profiles.composed()?;
    Ok((s, d, profiles))
}

fn run_simulate(c: &Common) -> Outcome {
    let (s, d, profiles) = synthesize_step(c)?;
    let net = sim_network(&s.analysis, &d, &profiles);
    let logs = simulate(&net, &s.opts)?;
    let mut summaries = Vec::new();
    for log in &logs {
        let path = c.out.join(format!("traj_seed{}.csv", log.summary.seed));
        let f = fs::File::create(&path).map_err(usage)?;
        log.write_csv(BufWriter::new(f)).map_err(domain)?;
        summaries.push(log.summary.clone());
        println!(
            "seed {}: {} ({} steps, max V̄ {:.4}, max mismatch {:.4})",
            log.summary.seed,
            if log.summary.passed { "pass" } else { "FAIL" },
            log.summary.completed,
            log.summary.max_vbar,
            log.summary.max_mismatch
        );
    }
    write_json(&c.out.join("summary.json"), &summaries)?;
    match summaries.iter().find(|s| !s.passed) {
        Some(bad) => Err(domain(anyhow!(
            "seed {}: monitor violation {:?}",
            bad.seed,
            bad.first_violation
        ))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct VerifyReport {
    design: VerificationReport,
    design_reproduced: bool,
    profiles: Vec<VerifyProfile>,
    passed: bool,
}

#[derive(Serialize)]
struct VerifyProfile {
    profile: usize,
    class: String,
    closure_violations: Option<usize>,
    asf_checked: usize,
    asf_violations: usize,
    max_v: f64,
}

fn run_verify(c: &Common) -> Outcome {
    let s = setup(c)?;
    let artifact: DesignArtifact = read_json(&c.out.join("design.json"))?;
    let design = artifact.design;
    let check = s.analysis.verify(&design)?;
    let again = s.analysis.design(design.varpi, &s.opts.design_options())?;
    let design_reproduced = again == design;
    let mut profiles = Vec::new();
    let index_path = c.out.join("models").join("index.json");
    if index_path.exists() {
        let index: Vec<ModelEntry> = read_json(&index_path)?;
        for e in &index {
            let f = fs::File::open(c.out.join("models").join(&e.file)).map_err(usage)?;
            let model = SymbolicModel::read_from(std::io::BufReader::new(f)).map_err(domain)?;
            let ctrl_path = c.out.join("controllers").join(&e.controller);
            let closure = if ctrl_path.exists() {
                let ctrl: SafetyController = read_json(&ctrl_path)?;
                Some(closure_violations(&ctrl, &model))
            } else {
                None
            };
            let unit = design
                .units
                .get(e.unit)
                .ok_or_else(|| domain(anyhow!("index refers to unknown unit {}", e.unit)))?;
            let class = &s.analysis.spec.classes[unit.class];
            let asf = check_local_asf(
                class,
                &s.analysis.certs[unit.class],
                &model,
                AsfParams {
                    varpi: unit.varpi,
                    vartheta: unit.vartheta,
                },
                &e.slot_domains,
                s.opts.asf_samples,
                s.opts.asf_seed,
            );
            profiles.push(VerifyProfile {
                profile: e.profile,
                class: e.class.clone(),
                closure_violations: closure,
                asf_checked: asf.checked,
                asf_violations: asf.violations,
                max_v: asf.max_v,
            });
        }
    }
    let passed = check.passed
        && design_reproduced
        && profiles
            .iter()
            .all(|p| p.asf_violations == 0 && p.closure_violations.unwrap_or(0) == 0);
    let report = VerifyReport {
        design: check,
        design_reproduced,
        profiles,
        passed,
    };
    write_json(&c.out.join("verify.json"), &report)?;
    println!(
        "design inequalities: {}; state_pitch min slack {:?}; precision_split min slack {:?}",
        if report.design.passed { "ok" } else { "FAIL" },
        report.design.min_slack("state_pitch"),
        report.design.min_slack("precision_split")
    );
    for p in &report.profiles {
        println!(
            "profile {} ({}): closure {:?}, ASF {}/{} violations, max V {:.4}",
            p.profile, p.class, p.closure_violations, p.asf_violations, p.asf_checked, p.max_v
        );
    }
    if passed {
        Ok(())
    } else {
        Err(domain(anyhow!("verification failed")))
    }
}

fn run_reproduce(c: &Common) -> Outcome {
    let text = match &c.config {
        Some(_) => read_config(c)?,
        None => infinet_core::BUNDLED_TRAFFIC_CONFIG.to_string(),
    };
    let (_, mut opts) = load(&text)?;
    apply_flags(c, &mut opts)?;
    let (report, logs) = reproduce_traffic(&text, &opts)?;
    for ch in &report.checks {
        println!(
            "[{}] {}: expected {}, observed {}",
            if ch.pass { "pass" } else { "FAIL" },
            ch.name,
            ch.expected,
            ch.observed
        );
    }
    write_json(&c.out.join("reproduce.json"), &report)?;
    for log in &logs {
        let f = fs::File::create(c.out.join(format!("traj_seed{}.csv", log.summary.seed))).map_err(usage)?;
        log.write_csv(BufWriter::new(f)).map_err(domain)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(domain(anyhow!("reproduction checks failed")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Validate(c) => run_validate(c),
        Command::Design(c) => run_design(c),
        Command::Abstract(c) => run_abstract(c),
        Command::Synthesize(c) => synthesize_step(c).map(|_| ()),
        Command::Simulate(c) => run_simulate(c),
        Command::Verify(c) => run_verify(c),
        Command::ReproduceTraffic(c) => run_reproduce(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
