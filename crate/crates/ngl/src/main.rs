//! Experiment CLI. Each run subcommand layers config from defaults,
//! then a key = value file, then NGL_* environment variables, then
//! flags, and leaves a hashed output directory behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ngl::girth::{default_girth_target, generate, GirthConfig};
use ngl::lab::config::ConfigError;
use ngl::lab::experiment::{default_config, run_experiment, ExperimentManifest};
use ngl::lab::sig12;
use ngl::rng::StreamKey;

#[derive(Parser)]
#[command(
    name = "ngl",
    version,
    about = "Builds cut-and-rewire tree overlays and measures how their balls grow"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the configured graph; record the cluster inventory, girth
    /// census and edge list under a hashed manifest.
    Build(RunArgs),
    /// Build, profile sampled roots and report growth estimates.
    Measure(RunArgs),
    /// Build and check slow-growth witness paths.
    Witness(RunArgs),
    /// Build and run mass-transport balance sampling.
    Mtp(RunArgs),
    /// Time the girth generator across sizes and emit a CSV.
    GirthBench(GirthBenchArgs),
    /// Summarize a manifest written by an earlier run.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Key = value file applied over the built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory, or a path to the manifest.json inside it.
    #[arg(long, default_value = "ngl-out", value_name = "PATH")]
    out: PathBuf,
    #[command(flatten)]
    keys: KeyFlags,
}

/// Every config key, exposed one-to-one. Values are free-form here;
/// they are parsed and validated by the experiment layer, so a bad
/// value names the key it came from.
#[derive(Args, Default)]
struct KeyFlags {
    /// What to build: I, J, U or UT3.
    #[arg(long)]
    mode: Option<String>,
    /// Degree parameter shared by all constructions.
    #[arg(long)]
    d: Option<String>,
    /// Comma-separated cut levels, lowest first.
    #[arg(long)]
    levels: Option<String>,
    /// Truncation depth (the apex generation).
    #[arg(long)]
    depth: Option<String>,
    /// Seed behind every stream of the run.
    #[arg(long)]
    seed: Option<String>,
    /// Boundary-fraction tolerance for the selected construction.
    #[arg(long)]
    epsilon: Option<String>,
    /// Levels at or below this index are skipped by selection; -1 keeps all.
    #[arg(long)]
    k0: Option<String>,
    /// Selection class length (one cut per class of this many vertices).
    #[arg(long, visible_alias = "L")]
    class_len: Option<String>,
    /// Cap on the girth requested inside expander clusters.
    #[arg(long)]
    girth_cap: Option<String>,
    /// Largest cluster the overlay will enumerate.
    #[arg(long)]
    max_cluster: Option<String>,
    /// Guard generation; "auto" derives it from the last cut level.
    #[arg(long)]
    guard: Option<String>,
    /// Comma-separated check names, "auto" or "none".
    #[arg(long)]
    checks: Option<String>,
    /// Endpoint pairs for the path invariance checks.
    #[arg(long)]
    pairs: Option<String>,
    /// Alternative simple paths tried per pair.
    #[arg(long)]
    alt_tries: Option<String>,
    /// Sampled roots for the profile check.
    #[arg(long)]
    roots: Option<String>,
    /// Largest profiled radius.
    #[arg(long)]
    r_max: Option<String>,
    /// Breadth-first search node budget.
    #[arg(long)]
    node_cap: Option<String>,
    /// Accepted samples required by each transport test.
    #[arg(long)]
    mtp_samples: Option<String>,
    /// Origins sampled by the witness check.
    #[arg(long)]
    witness_count: Option<String>,
    /// Comma-separated crossing counts for lower witnesses.
    #[arg(long)]
    witness_m: Option<String>,
    /// Boundary-share constant the witness inequalities are tested at.
    #[arg(long)]
    witness_c: Option<String>,
    /// Edge export: "auto", "true" or "false".
    #[arg(long)]
    edges: Option<String>,
    /// Depth of each fiber in the product stack.
    #[arg(long)]
    fiber_depth: Option<String>,
    /// Selection tolerance used inside each fiber.
    #[arg(long)]
    select_eps: Option<String>,
    /// Marked-overlay tolerance used inside each fiber.
    #[arg(long)]
    overlay_eps: Option<String>,
    /// Per-generation tolerance schedule: "geometric" or "override:a,b,..".
    #[arg(long)]
    eps_schedule: Option<String>,
    /// Turnable-component targets per generation, comma-separated.
    #[arg(long)]
    turn_targets: Option<String>,
    /// Upward chains sampled by the lucky-hit check.
    #[arg(long)]
    walks: Option<String>,
    /// Ball radius for the crossed-stack checks.
    #[arg(long)]
    ut3_radius: Option<String>,
    /// Clean roots required by the crossed-stack checks.
    #[arg(long)]
    ut3_roots: Option<String>,
}

impl KeyFlags {
    fn apply(&self, cfg: &mut ngl::lab::ConfigMap) -> Result<(), ConfigError> {
        let entries: [(&str, &Option<String>); 30] = [
            ("mode", &self.mode),
            ("d", &self.d),
            ("levels", &self.levels),
            ("depth", &self.depth),
            ("seed", &self.seed),
            ("epsilon", &self.epsilon),
            ("k0", &self.k0),
            ("class_len", &self.class_len),
            ("girth_cap", &self.girth_cap),
            ("max_cluster", &self.max_cluster),
            ("guard", &self.guard),
            ("checks", &self.checks),
            ("pairs", &self.pairs),
            ("alt_tries", &self.alt_tries),
            ("roots", &self.roots),
            ("r_max", &self.r_max),
            ("node_cap", &self.node_cap),
            ("mtp_samples", &self.mtp_samples),
            ("witness_count", &self.witness_count),
            ("witness_m", &self.witness_m),
            ("witness_c", &self.witness_c),
            ("edges", &self.edges),
            ("fiber_depth", &self.fiber_depth),
            ("select_eps", &self.select_eps),
            ("overlay_eps", &self.overlay_eps),
            ("eps_schedule", &self.eps_schedule),
            ("turn_targets", &self.turn_targets),
            ("walks", &self.walks),
            ("ut3_radius", &self.ut3_radius),
            ("ut3_roots", &self.ut3_roots),
        ];
        for (key, value) in entries {
            if let Some(v) = value {
                cfg.set_flag(key, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Args)]
struct GirthBenchArgs {
    /// Comma-separated vertex counts.
    #[arg(long, default_value = "64,256,1024")]
    n: String,
    /// Degree of every generated graph.
    #[arg(long, default_value_t = 3)]
    d: u32,
    /// Girth target; derived from n and d when omitted.
    #[arg(long)]
    target: Option<u32>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory, or the manifest.json itself.
    #[arg(default_value = "ngl-out", value_name = "PATH")]
    path: PathBuf,
    /// Also print per-stage timings.
    #[arg(long)]
    timings: bool,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.cmd {
        Cmd::Build(a) => experiment(a, "girths"),
        Cmd::Measure(a) => experiment(a, "profiles"),
        Cmd::Witness(a) => experiment(a, "witnesses"),
        Cmd::Mtp(a) => experiment(a, "mtp"),
        Cmd::GirthBench(a) => girth_bench(a),
        Cmd::Report(a) => report(a),
    }
}

fn experiment(args: RunArgs, implied_checks: &str) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut cfg = default_config();
    // The subcommand picks the suite; file, environment and flags can
    // still widen or narrow it.
    cfg.set_flag("checks", implied_checks)?;
    if let Some(path) = &args.config {
        cfg.load_file(path)?;
    }
    cfg.load_env(std::env::vars())?;
    args.keys.apply(&mut cfg)?;

    let out_dir = if args.out.extension().map_or(false, |e| e == "json") {
        match args.out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
    } else {
        args.out.clone()
    };
    let manifest = run_experiment(&cfg, &out_dir)?;
    print_manifest(&manifest, &out_dir);
    Ok(exit_for(&manifest))
}

fn print_manifest(m: &ExperimentManifest, dir: &Path) {
    println!("mode {} seed {} -> {}", m.mode, m.seed, dir.display());
    for c in &m.checks {
        println!("  [{}] {}: {}", c.status, c.name, c.detail);
    }
    if let Some(p) = &m.product {
        println!("  lucky vertices: {}", p.lucky_total);
        for s in &p.per_ind {
            let gate = s.gate.map_or_else(|| "-".to_string(), sig12);
            println!(
                "    ind {}: {} turnable, {} lucky (expected rate {gate})",
                s.ind, s.turnable, s.lucky
            );
        }
    }
    for (i, w) in m.warnings.iter().enumerate() {
        if i == 8 && m.warnings.len() > 9 {
            println!("  ... {} more notes in the manifest", m.warnings.len() - i);
            break;
        }
        println!("  note: {w}");
    }
    for (name, hash) in &m.outputs {
        println!("  {name} {hash}");
    }
}

fn exit_for(m: &ExperimentManifest) -> ExitCode {
    match m.failed().first() {
        None => ExitCode::SUCCESS,
        Some(c) => {
            eprintln!("failed check: {} ({})", c.name, c.detail);
            ExitCode::FAILURE
        }
    }
}

fn girth_bench(a: GirthBenchArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut rows = String::from("n,d,target,achieved,retries,seconds\n");
    for part in a.n.split(',') {
        let n: u32 = part
            .trim()
            .parse()
            .map_err(|_| format!("vertex count {part:?} is not a number"))?;
        let target = a.target.unwrap_or_else(|| default_girth_target(n, a.d, 10));
        let key = StreamKey::root(a.seed).child("bench").child_u64(u64::from(n));
        let started = Instant::now();
        let g = generate(&GirthConfig::new(n, a.d, target), &key)?;
        let achieved = g.girth().map_or_else(String::new, |x| x.to_string());
        rows.push_str(&format!(
            "{n},{},{target},{achieved},{},{:.3}\n",
            a.d,
            g.retries(),
            started.elapsed().as_secs_f64()
        ));
    }
    match a.out {
        Some(path) => fs::write(path, rows)?,
        None => print!("{rows}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn report(a: ReportArgs) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let path = if a.path.is_dir() { a.path.join("manifest.json") } else { a.path.clone() };
    let m = ExperimentManifest::load(&path)?;
    print_manifest(&m, path.parent().unwrap_or_else(|| Path::new(".")));
    if a.timings {
        for (name, ms) in &m.timings_ms {
            println!("  {name}: {ms} ms");
        }
    }
    Ok(exit_for(&m))
}
