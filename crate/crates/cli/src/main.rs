use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mixps_core::harness::{
    run_conformity_battery, run_experiment, staleness_sweep, BatteryConfig, ExperimentSpec, Report, TechniqueChoice,
    TransportChoice, WorkloadSpec,
};
use mixps_core::workloads::zipf_weights;
use mixps_core::{Cause, ConformityLevel, SchemeKind};

#[derive(Parser)]
#[command(name = "mixps", version, about = "Parameter server with per-key relocation, replication and sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a workload on a cluster and report convergence and message counts.
    Run(RunArgs),
    /// Run the same experiment once per staleness bound.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated bounds in ms; `off` disables synchronization.
        #[arg(long, value_delimiter = ',', default_value = "1,8,40,200,off")]
        bounds: Vec<String>,
    },
    /// Statistical battery for one sampling scheme.
    VerifyConformity(ConformityArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum WorkloadKind {
    Mf,
    Embed,
}

#[derive(Copy, Clone, ValueEnum)]
enum TransportKind {
    Sim,
    Tcp,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment spec (TOML, or JSON with a `.json` extension). Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    workload: Option<WorkloadKind>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Workers per node.
    #[arg(long)]
    workers: Option<usize>,
    /// `relocate`, `heuristic` or `topk=K`.
    #[arg(long)]
    technique: Option<TechniqueChoice>,
    /// `L1`, `L2`, `L2:<bound>`, `L3` or `L4`.
    #[arg(long)]
    conformity: Option<ConformityLevel>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    staleness_ms: Option<f64>,
    #[arg(long)]
    sync_disabled: bool,
    /// Clip replica updates at this multiple of the running mean norm.
    #[arg(long)]
    clip_factor: Option<f64>,
    /// Samples drawn from each pool (U).
    #[arg(long)]
    use_frequency: Option<usize>,
    /// Keys per pool (G).
    #[arg(long)]
    pool_size: Option<usize>,
    /// Virtual compute time per training point, in microseconds.
    #[arg(long)]
    step_cost_us: Option<u64>,
    #[arg(long, value_enum)]
    transport: Option<TransportKind>,
    /// Directory for report.json, epochs.csv and histogram.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the generated dataset to this file.
    #[arg(long)]
    dataset_out: Option<PathBuf>,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentSpec::default(),
        };
        match self.workload {
            Some(WorkloadKind::Mf) if !matches!(spec.workload, WorkloadSpec::Mf { .. }) => {
                spec.workload = WorkloadSpec::mf()
            }
            Some(WorkloadKind::Embed) if !matches!(spec.workload, WorkloadSpec::Embed { .. }) => {
                spec.workload = WorkloadSpec::embed()
            }
            _ => {}
        }
        let c = &mut spec.cluster;
        set(&mut c.num_nodes, self.nodes);
        set(&mut c.workers_per_node, self.workers);
        set(&mut c.staleness_ms, self.staleness_ms);
        set(&mut c.use_frequency, self.use_frequency);
        set(&mut c.pool_size, self.pool_size);
        set(&mut c.step_cost_us, self.step_cost_us);
        if self.clip_factor.is_some() {
            c.clip_factor = self.clip_factor;
        }
        if self.sync_disabled {
            c.sync_disabled = true;
        }
        set(&mut spec.technique, self.technique);
        set(&mut spec.conformity, self.conformity);
        set(&mut spec.epochs, self.epochs);
        set(&mut spec.seed, self.seed);
        match self.transport {
            Some(TransportKind::Tcp) => spec.transport = TransportChoice::Tcp,
            Some(TransportKind::Sim) if spec.transport == TransportChoice::Tcp => {
                spec.transport = TransportChoice::default()
            }
            _ => {}
        }
        Ok(spec)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct ConformityArgs {
    /// `independent`, `pooled-reuse`, `postponing` or `local`.
    #[arg(long)]
    scheme: SchemeKind,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, default_value_t = 100)]
    keys: usize,
    /// Zipf exponent of the target distribution; 0 is uniform.
    #[arg(long, default_value_t = 1.1)]
    zipf: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    use_frequency: Option<usize>,
    /// Significance level of the statistical tests.
    #[arg(long)]
    alpha: Option<f64>,
    /// Write the full outcome as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let spec = args.spec()?;
            if let Some(p) = &args.dataset_out {
                spec.write_dataset(p).with_context(|| format!("writing {}", p.display()))?;
            }
            let report = run_experiment(&spec)?;
            print_report(&report);
            if let Some(dir) = &args.out {
                report.write_to_dir(dir).with_context(|| format!("writing {}", dir.display()))?;
            }
            Ok(check_invariants(&report))
        }
        Command::Sweep { run, bounds } => {
            let spec = run.spec()?;
            let bounds = bounds
                .iter()
                .map(|b| match b.trim() {
                    "off" | "none" => Ok(None),
                    s => s.parse().map(Some).with_context(|| format!("bad staleness bound {s:?}")),
                })
                .collect::<Result<Vec<_>>>()?;
            let reports = staleness_sweep(&spec, &bounds)?;
            println!("{:>10} {:>12} {:>12} {:>10}", "staleness", reports[0].metric, "messages", "rounds");
            let mut ok = true;
            for (b, r) in bounds.iter().zip(&reports) {
                let label = b.map_or("off".to_string(), |ms| format!("{ms}ms"));
                println!("{label:>10} {:>12.5} {:>12} {:>10}", r.last_metric(), r.messages.total, r.sync_rounds);
                ok &= check_invariants(r);
            }
            if let Some(dir) = &run.out {
                for (b, r) in bounds.iter().zip(&reports) {
                    let name = b.map_or("off".to_string(), |ms| format!("staleness-{ms}ms"));
                    r.write_to_dir(&dir.join(name))?;
                }
            }
            Ok(ok)
        }
        Command::VerifyConformity(args) => verify_conformity(&args),
    }
}

fn check_invariants(report: &Report) -> bool {
    let violations = report.invariant_violations();
    for v in &violations {
        eprintln!("invariant violated: {v}");
    }
    violations.is_empty()
}

fn print_report(r: &Report) {
    let spec = &r.spec;
    println!(
        "{} on {} nodes x {} workers, technique {} ({} of {} keys replicated), {}",
        r.workload,
        spec.cluster.num_nodes,
        spec.cluster.workers_per_node,
        spec.technique,
        r.num_replicated,
        r.num_keys,
        spec.conformity
    );
    println!("{:>5} {:>12} {:>12} {:>10} {:>10}", "epoch", "train_loss", r.metric, "secs", "messages");
    println!("{:>5} {:>12} {:>12.5}", 0, "", r.initial_metric);
    for e in &r.epochs {
        println!(
            "{:>5} {:>12.5} {:>12.5} {:>10.3} {:>10}",
            e.epoch, e.train_loss, e.test_metric, e.duration_secs, e.messages.total
        );
    }
    println!("final {}: {:.5}", r.metric, r.final_metric);
    let causes: Vec<String> = Cause::ALL
        .iter()
        .map(|c| format!("{} {}", c.name(), r.messages.cause(*c)))
        .collect();
    println!("messages: {} ({})", r.messages.total, causes.join(", "));
    match r.sync_frequency_hz {
        Some(hz) => println!("sync rounds: {} ({hz:.1} Hz)", r.sync_rounds),
        None => println!("sync rounds: {}", r.sync_rounds),
    }
    println!(
        "relocations: {} granted, {} forwarded, {} queued",
        r.relocation.grants_received, r.relocation.forwarded, r.relocation.queued
    );
    if let Some(s) = &r.sampling {
        println!(
            "sampling: {} delivered, {} postponed, {} pools, {} local fallbacks",
            s.delivered, s.postponed, s.pools_created, s.local_fallbacks
        );
    }
    if let Some(c) = &r.sampled_chi_square {
        println!(
            "sampled keys vs target: chi2 {:.1} (dof {}, critical {:.1}, p {:.3})",
            c.statistic, c.dof, c.critical, c.p_value
        );
    }
}

fn verify_conformity(args: &ConformityArgs) -> Result<bool> {
    if args.keys == 0 {
        bail!("--keys must be positive");
    }
    if args.alpha.is_some_and(|a| !(a > 0.0 && a < 1.0)) {
        bail!("--alpha must be in (0, 1)");
    }
    let mut cfg = BatteryConfig::new(args.scheme, zipf_weights(args.keys, args.zipf), args.draws, args.seed);
    set(&mut cfg.num_nodes, args.nodes);
    set(&mut cfg.pool_size, args.pool_size);
    set(&mut cfg.use_frequency, args.use_frequency);
    set(&mut cfg.alpha, args.alpha);
    let out = run_conformity_battery(&cfg)?;
    println!(
        "{}: {} draws over {} keys on {} node(s), {} messages",
        args.scheme.name(),
        args.draws,
        args.keys,
        cfg.num_nodes,
        out.messages.total
    );
    for t in &out.results {
        let verdict = match (t.passed, t.informational) {
            (true, _) => "pass",
            (false, true) => "info",
            (false, false) => "FAIL",
        };
        println!("  [{verdict}] {:<26} {}", t.name, t.detail);
    }
    if let Some(p) = &args.out {
        std::fs::write(p, serde_json::to_string_pretty(&out)?).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}", if out.passed() { "conforms" } else { "does not conform" });
    Ok(out.passed())
}
