//! `edaod`: scenario generation, clustering, adaptation, evaluation and
//! gradient self-checks.
//!
//! Exit codes: 0 success, 1 I/O, 2 config or invalid input, 3 failed
//! verification.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edaod::adapt::gradcheck::{gradient_suite, SuiteDims, TOLERANCE};
use edaod::adapt::{adapt_fused, adapt_stream, AdaptError, ModelParams};
use edaod::assoc::build_clusters;
use edaod::cluster::{cluster_records, merge_clusters_logged, write_cluster_records, ClusterError, ClusterSet};
use edaod::detstream::{parse_stream, StreamError};
use edaod::eval::{run_protocol, summarize, EvalError, ProtocolOptions};
use edaod::simenv::{generate_scenario, pretrain_source, read_bundle, write_bundle, ScenarioBundle, SimError};

use config::{Overrides, RunConfig};

/// File name of the pretrained source model inside a bundle directory.
const SOURCE_MODEL_FILE: &str = "source.model.json";
const THREADS_VAR: &str = "EDAOD_THREADS";

#[derive(Parser)]
#[command(name = "edaod", version, about = "Embodied detection adaptation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario bundle and pretrain its source model
    Simgen {
        /// Bundle directory to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster one detection stream
    Cluster {
        stream: PathBuf,
        /// Output `.clusters.jsonl` (default: next to the stream)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt a model to one layout of a bundle
    Adapt {
        bundle: PathBuf,
        /// Starting model (default: the bundle's source model)
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layout: usize,
        /// Output `.model.json` (default: `adapted.model.json` in the bundle)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write one model per merge threshold
        #[arg(long)]
        keep_singles: bool,
    },
    /// Run an evaluation protocol over a bundle
    Eval {
        bundle: PathBuf,
        /// Starting model (default: the bundle's source model)
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output `.report.json`; a CSV is written next to it
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score ground truth instead of model predictions
        #[arg(long, hide = true)]
        oracle_predictions: bool,
    },
    /// Check analytic loss gradients against finite differences
    Gradcheck {
        /// Feature dim, projection dim, classes, stages
        #[arg(long, value_delimiter = ',', default_values_t = [8, 6, 5, 3])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: 1, message: format!("{}: {e}", path.display()) }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn verification(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<StreamError> for Failure {
    fn from(e: StreamError) -> Self {
        let code = if matches!(e, StreamError::Io { .. }) { 1 } else { 2 };
        Self { code, message: e.to_string() }
    }
}

impl From<AdaptError> for Failure {
    fn from(e: AdaptError) -> Self {
        let code = if matches!(e, AdaptError::Io(..)) { 1 } else { 2 };
        Self { code, message: e.to_string() }
    }
}

impl From<ClusterError> for Failure {
    fn from(e: ClusterError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io { .. } => Self { code: 1, message: e.to_string() },
            SimError::Stream(s) => s.into(),
            SimError::Adapt(a) => a.into(),
            other => Self::config(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Adapt(a) => a.into(),
            EvalError::ParametersChanged { .. } => Self::verification(e.to_string()),
            other => Self::config(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let o = &cli.overrides;
    match cli.command {
        Command::Simgen { out } => simgen(&RunConfig::load(o)?, &out),
        Command::Cluster { stream, out } => cluster(&RunConfig::load(o)?, &stream, out),
        Command::Adapt { bundle, model, layout, out, keep_singles } => {
            adapt(&RunConfig::load(o)?, &bundle, model, layout, out, keep_singles)
        }
        Command::Eval { bundle, model, out, oracle_predictions } => {
            eval(&RunConfig::load(o)?, &bundle, model, out, oracle_predictions)
        }
        Command::Gradcheck { dims, instances, corrupt_gradient } => {
            gradcheck(o.seed.unwrap_or(0), &dims, instances, corrupt_gradient)
        }
    }
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e)),
        _ => Ok(()),
    }
}

/// Parallel threshold runs: `EDAOD_THREADS`, else one per threshold.
fn thread_cap(thresholds: usize) -> Result<usize, Failure> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::config(format!("{THREADS_VAR}: expected a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(thresholds.max(1)),
    }
}

fn simgen(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let sc = &cfg.scenario;
    let bundle = generate_scenario(sc, sc.seed)?;
    write_bundle(&bundle, out)?;
    let (model, report) = pretrain_source(&bundle.source_set, &sc.head_shape(), &sc.pretrain, sc.seed)?;
    model.save(out.join(SOURCE_MODEL_FILE))?;

    println!("bundle      {}", out.display());
    println!("seed        {}", sc.seed);
    println!("layouts     {}", bundle.target_streams.len());
    println!("frames      {}", sc.frames);
    println!("categories  {}", sc.num_classes);
    for (l, s) in bundle.target_streams.iter().enumerate() {
        println!("layout {l}: {} detections, {} oracle tracks", s.num_detections(), bundle.oracle[l].len());
    }
    println!(
        "source set  {} examples; held-out accuracy {:.4}, AP50 {:.4}",
        bundle.source_set.len(),
        report.holdout_accuracy,
        report.holdout_ap50
    );
    if !report.passes(sc.pretrain.sanity_ap50) {
        return Err(Failure::verification(format!(
            "source model held-out AP50 {:.4} is below the sanity bound {}",
            report.holdout_ap50, sc.pretrain.sanity_ap50
        )));
    }
    Ok(())
}

fn cluster(cfg: &RunConfig, stream_path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let tau2 = match cfg.adapt.tau2_list.as_slice() {
        [t] => *t,
        list => return Err(Failure::config(format!("tau2: cluster takes one threshold, got {}", list.len()))),
    };
    let stream = parse_stream(stream_path)?;
    let initial = ClusterSet::new(build_clusters(&stream, cfg.adapt.tau1, cfg.adapt.eps), stream.header.num_classes);
    let (merged, merges) = merge_clusters_logged(&initial, tau2);
    let records = cluster_records(&merged)?;

    let out = out.unwrap_or_else(|| clusters_path(stream_path));
    create_parent(&out)?;
    let file = File::create(&out).map_err(|e| Failure::io(&out, e))?;
    let mut w = BufWriter::new(file);
    write_cluster_records(&records, &mut w).and_then(|_| w.flush()).map_err(|e| Failure::io(&out, e))?;

    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for c in &merged.clusters {
        *sizes.entry(c.len()).or_default() += 1;
    }
    println!("detections  {}", stream.num_detections());
    println!("linked      {} clusters (tau1 {})", initial.len(), cfg.adapt.tau1);
    println!("merged      {} clusters (tau2 {tau2})", merged.len());
    println!("merges      {}", merges.len());
    println!("size  count");
    for (size, count) in sizes {
        println!("{size:>4}  {count:>5}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn clusters_path(stream_path: &Path) -> PathBuf {
    let name = stream_path.file_name().and_then(|n| n.to_str()).unwrap_or("stream");
    let stem = name.strip_suffix(".dstream.jsonl").or_else(|| name.strip_suffix(".jsonl")).unwrap_or(name);
    stream_path.with_file_name(format!("{stem}.{}", edaod::cluster::CLUSTER_EXTENSION))
}

fn load_bundle_and_model(bundle_dir: &Path, model: Option<PathBuf>) -> Result<(ScenarioBundle, ModelParams), Failure> {
    let bundle = read_bundle(bundle_dir)?;
    let model_path = model.unwrap_or_else(|| bundle_dir.join(SOURCE_MODEL_FILE));
    let model = ModelParams::load(&model_path)?;
    Ok((bundle, model))
}

fn adapt(
    cfg: &RunConfig,
    bundle_dir: &Path,
    model: Option<PathBuf>,
    layout: usize,
    out: Option<PathBuf>,
    keep_singles: bool,
) -> Result<(), Failure> {
    let (bundle, source) = load_bundle_and_model(bundle_dir, model)?;
    let stream = bundle.target_streams.get(layout).ok_or_else(|| {
        Failure::config(format!("layout: {layout} out of range (bundle has {})", bundle.target_streams.len()))
    })?;
    let ac = &cfg.adapt;
    let (fused, singles) = if ac.method.uses_clusters() {
        let run = adapt_fused(&source, stream, ac, thread_cap(ac.tau2_list.len())?)?;
        (run.fused, run.singles)
    } else {
        (adapt_stream(&source, stream, ac.tau2_list[0], ac)?, Vec::new())
    };

    let out = out.unwrap_or_else(|| bundle_dir.join("adapted.model.json"));
    create_parent(&out)?;
    fused.save(&out)?;
    println!("layout {layout}: {} epochs, method {:?}", ac.epochs, ac.method);
    println!("wrote {}", out.display());
    if keep_singles {
        for (tau2, m) in &singles {
            let path = single_path(&out, *tau2);
            m.save(&path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// `<stem>.tau<t>.model.json` next to the fused model.
fn single_path(fused: &Path, tau2: f64) -> PathBuf {
    let name = fused.file_name().and_then(|n| n.to_str()).unwrap_or("adapted.model.json");
    let stem = name.strip_suffix(".model.json").or_else(|| name.strip_suffix(".json")).unwrap_or(name);
    fused.with_file_name(format!("{stem}.tau{tau2}.model.json"))
}

fn eval(
    cfg: &RunConfig,
    bundle_dir: &Path,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    oracle_predictions: bool,
) -> Result<(), Failure> {
    let (bundle, source) = load_bundle_and_model(bundle_dir, model)?;
    let options =
        ProtocolOptions { max_threads: thread_cap(cfg.adapt.tau2_list.len())?, oracle_predictions };
    let report = run_protocol(cfg.protocol, &bundle, &source, &cfg.adapt, options)?;

    let out = out.unwrap_or_else(|| bundle_dir.join(format!("{}.report.json", cfg.protocol)));
    create_parent(&out)?;
    report.write_json(&out).map_err(|e| Failure::io(&out, e))?;
    let csv = csv_path(&out);
    let file = File::create(&csv).map_err(|e| Failure::io(&csv, e))?;
    let mut w = BufWriter::new(file);
    report.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Failure::io(&csv, e))?;

    print!("{}", report.table());
    for (variant, map) in summarize(&report) {
        println!("mean {variant:<12} {map:.4}");
    }
    println!("wrote {} and {}", out.display(), csv.display());
    Ok(())
}

fn csv_path(report: &Path) -> PathBuf {
    let name = report.file_name().and_then(|n| n.to_str()).unwrap_or("report.json");
    let stem = name.strip_suffix(".json").unwrap_or(name);
    report.with_file_name(format!("{stem}.csv"))
}

fn gradcheck(seed: u64, dims: &[usize], instances: usize, corrupt: bool) -> Result<(), Failure> {
    let [feature_dim, proj_dim, num_classes, stages] = dims else {
        return Err(Failure::config("dims: expected four values D,D',C,K"));
    };
    let dims = SuiteDims { feature_dim: *feature_dim, proj_dim: *proj_dim, num_classes: *num_classes, stages: *stages };
    if dims.feature_dim == 0 || dims.proj_dim == 0 || dims.num_classes == 0 || dims.stages == 0 {
        return Err(Failure::config("dims: every dimension must be positive"));
    }
    if instances == 0 {
        return Err(Failure::config("instances: must be positive"));
    }
    let results = gradient_suite(seed, dims, instances, corrupt);
    println!("{:<12}{:>10}{:>16}  status", "loss", "instances", "max rel error");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<12}{:>10}{:>16.3e}  {status}", r.kind.name(), r.instances, r.max_rel_error);
    }
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::verification(format!("gradient check exceeded relative error {TOLERANCE:e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_paths() {
        assert_eq!(clusters_path(Path::new("b/layout_0.dstream.jsonl")), Path::new("b/layout_0.clusters.jsonl"));
        assert_eq!(single_path(Path::new("m/fused.model.json"), 0.85), Path::new("m/fused.tau0.85.model.json"));
        assert_eq!(csv_path(Path::new("r/same.report.json")), Path::new("r/same.report.csv"));
    }
}
