use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use erclust_core::calibration::{
    all_pairs_histogram, fit_left_half, fit_report, mismatched_histogram, threshold_for_fpr, CountHistogram,
    DEFAULT_TARGET_FPR,
};
use erclust_core::er_graph::connectivity_curve;
use erclust_core::eval::{categorize_pairs, export_matrix, match_detections, metrics_report, DEFAULT_MATCH_IOU};
use erclust_core::fusion::{
    fuse, ConstantPosition, ConstantVelocity, FusionConfig, ScriptedTracker, TrackerAdapter, DEFAULT_IOU_THRESHOLD,
    DEFAULT_PATIENCE,
};
use erclust_core::io::{
    load_features, read_boxes, read_clusters, read_constraints, read_labels, write_clusters, write_constraints,
    write_tracklet_boxes, FeatureFormat,
};
use erclust_core::linkage::{cluster_scores, constraints_from_tracklets, LinkageAlgorithm};
use erclust_core::similarity::{rank1_all_pairs_fast, tracklet_score_table};
use erclust_core::{ConstraintSet, Error, ErrorClass, GallerySet, PairScoreTable, RngSpec, ScoreMode};

const DEFAULT_BIN_WIDTH: f64 = 2.0;
const GLOBAL_VALUE_FLAGS: [&str; 4] = ["--config", "--threads", "--seed", "--out"];

/// Face clustering with rank-1 counts and constrained single linkage.
#[derive(Parser, Debug)]
#[command(name = "erclust", version, args_override_self = true)]
struct Cli {
    /// key=value file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Score every pair of items (or tracklets).
    Similarity(SimilarityArgs),
    /// Cluster a score table at a fixed or calibrated threshold.
    Cluster(ClusterArgs),
    /// Fit a reference histogram and report the threshold.
    Calibrate(CalibrateArgs),
    /// Mismatched-pair histogram from labeled scores.
    MakeReference(MakeReferenceArgs),
    /// Fuse per-frame detections into tracklets.
    Tracklets(TrackletArgs),
    /// Unified pairwise precision/recall against annotations.
    Eval(EvalArgs),
    /// Connectivity curve of random graphs.
    SimulateEr(SimulateArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SimilarityArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    super_gallery: Option<PathBuf>,
    /// Simulated gallery size in averaged mode (default: gallery size).
    #[arg(long)]
    g_sim: Option<usize>,
    #[arg(long, default_value = "exact")]
    mode: ScoreMode,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: f64,
    /// Boxes CSV with tracklet_id; scores tracklets instead of items.
    #[arg(long)]
    tracklets: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    sample_size: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct ClusterArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Feature dimension F (the maximum score).
    #[arg(long)]
    dims: usize,
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Link pairs scoring strictly above this.
    #[arg(long, allow_negative_numbers = true, required_unless_present = "auto", conflicts_with = "auto")]
    threshold: Option<f64>,
    /// Calibrate the threshold from --reference.
    #[arg(long, requires = "reference")]
    auto: bool,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TARGET_FPR)]
    target_fpr: f64,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: f64,
    #[arg(long, default_value = "fast")]
    algorithm: LinkageAlgorithm,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    dims: usize,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TARGET_FPR)]
    target_fpr: f64,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct MakeReferenceArgs {
    #[arg(long)]
    scores: PathBuf,
    /// item_index,label CSV covering every item.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    dims: usize,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrackletArgs {
    #[arg(long)]
    detections: PathBuf,
    /// constant-position, constant-velocity or scripted:PATH.
    #[arg(long, default_value = "constant-position")]
    tracker: String,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    iou_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_PATIENCE)]
    patience: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// Boxes CSV; joined to clusters by tracklet_id, feature_index or row.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
    match_iou: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    alphas: Vec<f64>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    /// Comma-separated, strictly increasing edge probabilities.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    trials: usize,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Validation => 2,
                ErrorClass::Runtime => 3,
            },
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args_os().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprint!("{m}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn parse(argv: &[String]) -> Result<Option<(Cli, ArgMatches)>, Failure> {
    match Cli::command().try_get_matches_from(argv) {
        Ok(m) => {
            let cli = Cli::from_arg_matches(&m).map_err(|e| Failure::Usage(e.render().to_string()))?;
            Ok(Some((cli, m)))
        }
        Err(e) if !e.use_stderr() => {
            print!("{}", e.render());
            Ok(None)
        }
        Err(e) => Err(Failure::Usage(e.render().to_string())),
    }
}

fn run(argv: Vec<String>) -> Result<(), Failure> {
    let argv = match config_path(&argv) {
        Some((path, name)) => expand_config(&argv, &path, &name)?,
        None => argv,
    };
    let Some((cli, matches)) = parse(&argv)? else {
        return Ok(());
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be >= 1\n".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot size thread pool: {e}\n")))?;
    }
    let out = cli.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_run_file(&out, &cli, &matches)?;
    let rng = RngSpec::new(cli.seed);
    match cli.cmd {
        Cmd::Similarity(a) => similarity(a, &out, &rng),
        Cmd::Cluster(a) => cluster(a, &out),
        Cmd::Calibrate(a) => calibrate(a, &out),
        Cmd::MakeReference(a) => make_reference(a, &out),
        Cmd::Tracklets(a) => tracklets(a, &out),
        Cmd::Eval(a) => eval(a, &out),
        Cmd::SimulateEr(a) => simulate(a, &out, &rng),
    }
    .map_err(Failure::Core)
}

/// `--config` value and subcommand position, found without a full parse so
/// the config can supply required flags.
fn config_path(argv: &[String]) -> Option<(PathBuf, (usize, String))> {
    let names: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_owned()).collect();
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let tok = argv[i].as_str();
        if let Some(v) = tok.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if tok == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if GLOBAL_VALUE_FLAGS.contains(&tok) {
            i += 1;
        } else if sub.is_none() && names.iter().any(|n| n == tok) {
            sub = Some((i, tok.to_owned()));
        }
        i += 1;
    }
    Some((config?, sub?))
}

fn subcommand_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Similarity(_) => "similarity",
        Cmd::Cluster(_) => "cluster",
        Cmd::Calibrate(_) => "calibrate",
        Cmd::MakeReference(_) => "make-reference",
        Cmd::Tracklets(_) => "tracklets",
        Cmd::Eval(_) => "eval",
        Cmd::SimulateEr(_) => "simulate-er",
    }
}

/// Splices config entries in as flags right after the subcommand, so any
/// flag given on the command line later overrides them.
fn expand_config(argv: &[String], path: &Path, (at, name): &(usize, String)) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (at, name) = (*at, name.as_str());
    let root = Cli::command();
    let sub = root.find_subcommand(name).expect("known subcommand");
    let takes_value: HashMap<String, bool> = root
        .get_arguments()
        .chain(sub.get_arguments())
        .filter_map(|a| a.get_long().map(|l| (l.to_owned(), a.get_action().takes_values())))
        .collect();

    let mut injected = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse {
                context: path.display().to_string(),
                line: k + 1,
                message: "expected key=value".into(),
            })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            continue;
        }
        match takes_value.get(&key) {
            Some(true) => {
                injected.push(format!("--{key}"));
                injected.push(value.to_owned());
            }
            Some(false) => match value {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                other => {
                    return Err(Failure::Usage(format!(
                        "{}: line {}: {key} expects true or false, got {other:?}\n",
                        path.display(),
                        k + 1
                    )))
                }
            },
            None => {
                return Err(Failure::Usage(format!(
                    "{}: line {}: unknown key {key:?} for {name}\n",
                    path.display(),
                    k + 1
                )))
            }
        }
    }

    let mut expanded = argv[..=at].to_vec();
    expanded.extend(injected);
    expanded.extend_from_slice(&argv[at + 1..]);
    Ok(expanded)
}

fn write_run_file(out: &Path, cli: &Cli, matches: &ArgMatches) -> Result<(), Error> {
    let name = subcommand_name(&cli.cmd);
    let sub = matches.subcommand_matches(name).expect("subcommand matches");
    let root = Cli::command();
    let mut entries = BTreeMap::new();
    for arg in root
        .get_arguments()
        .chain(root.find_subcommand(name).expect("known subcommand").get_arguments())
    {
        let id = arg.get_id().as_str();
        if matches!(id, "help" | "version") {
            continue;
        }
        let raw = sub
            .try_get_raw(id)
            .ok()
            .flatten()
            .or_else(|| matches.try_get_raw(id).ok().flatten());
        if let Some(values) = raw {
            let joined: Vec<String> = values.map(|v: &std::ffi::OsStr| v.to_string_lossy().into_owned()).collect();
            entries.insert(id.replace('_', "-"), joined.join(","));
        } else if !arg.get_action().takes_values() && sub.try_get_one::<bool>(id).ok().flatten() == Some(&true) {
            entries.insert(id.replace('_', "-"), "true".into());
        }
    }
    let mut text = format!(
        "version={}\ncommand={name}\nrng={}\n",
        env!("CARGO_PKG_VERSION"),
        RngSpec::ALGORITHM
    );
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    let path = out.join("run.txt");
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn load(path: &Path, dims: Option<usize>) -> Result<erclust_core::FeatureMatrix, Error> {
    load_features(path, FeatureFormat::from_path(path), dims)
}

fn similarity(a: SimilarityArgs, out: &Path, rng: &RngSpec) -> Result<(), Error> {
    let feats = load(&a.features, None)?;
    let gallery = load(&a.gallery, Some(feats.n_dims()))?;
    let gal = match a.mode {
        ScoreMode::ExactFixedGallery => GallerySet::fixed(gallery),
        ScoreMode::AveragedGallery => {
            let path = a.super_gallery.as_ref().ok_or(Error::MissingSuperGallery)?;
            let sg = load(path, Some(feats.n_dims()))?;
            let g_sim = a.g_sim.unwrap_or(gallery.n_items());
            GallerySet::with_super_gallery(gallery, sg, g_sim)?
        }
    };
    let table = match &a.tracklets {
        Some(path) => {
            let tracks = read_boxes(path)?.tracklets()?;
            tracklet_score_table(&tracks, &feats, &gal, a.sample_size, a.mode, rng)?
        }
        None => rank1_all_pairs_fast(&feats, &gal, a.mode)?,
    };
    let max = feats.n_dims() as f64;
    table.write_csv(&out.join("scores.csv"))?;
    all_pairs_histogram(&table, a.bin_width, max)?.write_csv(&out.join("histogram.csv"))
}

fn cluster(a: ClusterArgs, out: &Path) -> Result<(), Error> {
    let table = PairScoreTable::read_csv(&a.scores)?;
    let constraints = match &a.constraints {
        Some(p) => read_constraints(p)?,
        None => ConstraintSet::new(),
    };
    let f = a.dims as f64;
    let threshold = match a.threshold {
        Some(t) => t,
        None => {
            let reference = CountHistogram::read_csv(a.reference.as_ref().expect("clap enforces --reference"))?;
            calibrated_threshold(&table, &reference, f, a.bin_width, a.target_fpr, out)?
        }
    };
    let (clustering, _) = cluster_scores(&table, f, &constraints, threshold, a.algorithm)?;
    write_clusters(&out.join("clusters.csv"), clustering.assignment())
}

fn calibrated_threshold(
    table: &PairScoreTable,
    reference: &CountHistogram,
    f: f64,
    bin_width: f64,
    target_fpr: f64,
    out: &Path,
) -> Result<f64, Error> {
    let test = all_pairs_histogram(table, bin_width, f)?;
    let fit = fit_left_half(&test, reference)?;
    let decision = threshold_for_fpr(&fit, table.n_pairs(), target_fpr, f)?;
    if !decision.attainable {
        eprintln!("warning: target FPR {target_fpr} not attainable; linking nothing");
    }
    let path = out.join("fit.txt");
    fs::write(&path, fit_report(&fit, &decision, target_fpr)).map_err(|e| Error::Io { path, source: e })?;
    fit.fitted.write_csv(&out.join("fitted.csv"))?;
    Ok(decision.threshold)
}

fn calibrate(a: CalibrateArgs, out: &Path) -> Result<(), Error> {
    let table = PairScoreTable::read_csv(&a.scores)?;
    let reference = CountHistogram::read_csv(&a.reference)?;
    calibrated_threshold(&table, &reference, a.dims as f64, a.bin_width, a.target_fpr, out).map(|_| ())
}

fn make_reference(a: MakeReferenceArgs, out: &Path) -> Result<(), Error> {
    let table = PairScoreTable::read_csv(&a.scores)?;
    let mut labels: Vec<Option<String>> = vec![None; table.n_items()];
    for (item, label) in read_labels(&a.labels)? {
        let slot = labels.get_mut(item).ok_or(Error::DimensionMismatch {
            expected: table.n_items(),
            found: item + 1,
        })?;
        *slot = Some(label);
    }
    let labels: Vec<String> = labels
        .into_iter()
        .enumerate()
        .map(|(k, l)| l.ok_or_else(|| Error::MissingField(format!("label for item {k}"))))
        .collect::<Result<_, _>>()?;
    mismatched_histogram(&table, &labels, a.bin_width, a.dims as f64)?.write_csv(&out.join("reference.csv"))
}

fn tracklets(a: TrackletArgs, out: &Path) -> Result<(), Error> {
    let dets = read_boxes(&a.detections)?.boxes;
    let cfg = FusionConfig {
        iou_threshold: a.iou_threshold,
        patience_alpha: a.patience,
    };
    let tracker: Box<dyn TrackerAdapter> = match a.tracker.as_str() {
        "constant-position" => Box::new(ConstantPosition),
        "constant-velocity" => Box::new(ConstantVelocity),
        spec => match spec.strip_prefix("scripted:") {
            Some(path) => Box::new(ScriptedTracker::from_boxes(&read_boxes(Path::new(path))?.boxes)?),
            None => return Err(Error::InvalidParameter(format!("unknown tracker {spec:?}"))),
        },
    };
    let tracks = fuse(&dets, tracker.as_ref(), &cfg)?;
    write_tracklet_boxes(&out.join("tracklets.csv"), &tracks)?;
    write_constraints(&out.join("constraints.csv"), &constraints_from_tracklets(&tracks))
}

fn eval(a: EvalArgs, out: &Path) -> Result<(), Error> {
    let table = read_boxes(&a.detections)?;
    let annotations = read_boxes(&a.annotations)?.boxes;
    let mut keys = table.item_keys();
    if table.tracklet_ids.is_some() {
        // Cluster files index tracklets by position in id order.
        let mut ids = keys.clone();
        ids.sort_unstable();
        ids.dedup();
        for k in &mut keys {
            *k = ids.binary_search(k).expect("id collected above");
        }
    }
    let cluster_of: HashMap<usize, usize> = read_clusters(&a.clusters)?.into_iter().collect();
    let det_clusters: Vec<Option<usize>> = keys.iter().map(|k| cluster_of.get(k).copied()).collect();
    let tuples = match_detections(&table.boxes, &det_clusters, &annotations, a.match_iou)?;
    let counts = categorize_pairs(&tuples)?;
    let report = metrics_report(&counts, &a.alphas)?;
    let path = out.join("metrics.txt");
    fs::write(&path, report).map_err(|e| Error::Io { path, source: e })?;
    export_matrix(&tuples, &out.join("matrix.ppm"))
}

fn simulate(a: SimulateArgs, out: &Path, rng: &RngSpec) -> Result<(), Error> {
    connectivity_curve(a.n, &a.grid, a.trials, rng)?.write_csv(&out.join("curve.csv"))
}
