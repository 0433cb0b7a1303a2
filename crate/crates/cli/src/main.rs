use std::collections::HashSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pvcd::encoder::mining::{mine_hard_negatives, positive_samples};
use pvcd::encoder::{
    train_encoder, write_history_csv, Encoder, EncoderConfig, TrainConfig, DEFAULT_FFN_DIM, DEFAULT_HEADS,
};
use pvcd::eval::{evaluation_report, Detection};
use pvcd::features::{load_annotations, load_feature_file, load_manifest_videos};
use pvcd::index::{DEFAULT_KMEANS_ITERS, DEFAULT_TOP_K_ALL};
use pvcd::localize::{DEFAULT_MAX_DIFF, DEFAULT_MAX_STEP};
use pvcd::pipeline::{bench_search, run_query, MatrixMode, QueryParams};
use pvcd::scoring::DEFAULT_TOP_K_VIDEO;
use pvcd::simmatrix::{DEFAULT_SIM_TH, DEFAULT_TOP_K_ONE};
use pvcd::{GlobalIndex, VideoFeatures};

#[derive(Parser)]
#[command(name = "pvcd", version, about = "Partial video copy detection over frame features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a reference index from a feature manifest.
    Index(IndexArgs),
    /// Localize copies of a query video in an index.
    Query(QueryArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
    /// Train the feature encoder on annotated copies.
    Train(TrainArgs),
    /// Time matrix multiplication, flat and IVF search.
    Bench(BenchArgs),
}

#[derive(Args)]
struct IndexArgs {
    /// CSV of `video_id,feature_path`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Build an IVF quantizer with this many cells.
    #[arg(long)]
    ivf_cells: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_KMEANS_ITERS)]
    kmeans_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder weights. Reference features are encoded at build time, so queries
    /// against this index must pass the same weights.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query feature file(s).
    #[arg(long, required = true, num_args = 1..)]
    query: Vec<PathBuf>,
    /// Encoder weights; the index must have been built with the same weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOP_K_ALL)]
    top_k_all: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_K_ONE)]
    top_k_one: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_K_VIDEO)]
    top_k_video: usize,
    #[arg(long, default_value_t = DEFAULT_SIM_TH, allow_negative_numbers = true)]
    sim_th: f32,
    #[arg(long, default_value_t = DEFAULT_MAX_STEP)]
    max_step: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_DIFF)]
    max_diff: usize,
    /// reconstructed, original or scan.
    #[arg(long, default_value = "reconstructed")]
    mode: MatrixMode,
    #[arg(long, default_value_t = 1)]
    n_probe: usize,
    #[arg(long, default_value_t = 1)]
    max_segments: usize,
    /// Feature frames per second, used to convert frame indices to seconds.
    #[arg(long, default_value_t = 1.0)]
    fps: f64,
    /// JSON-lines output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON-lines detections.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Report the best F1 over all score thresholds.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// CSV of `video_id,feature_path` covering queries and references.
    #[arg(long)]
    manifest: PathBuf,
    /// Copy annotations; `video_a` videos are treated as queries, all others as references.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_HEADS)]
    heads: usize,
    #[arg(long, default_value_t = DEFAULT_FFN_DIM)]
    ffn_dim: usize,
    /// Add sinusoidal positional encodings.
    #[arg(long)]
    positional: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    fps: f64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to the weights path with a `.loss.csv` suffix.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    /// CSV of `video_id,feature_path` whose frames are used as queries.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Comma-separated n_probe values for IVF rows.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    n_probe: Vec<usize>,
    /// (Re)build the IVF quantizer with this many cells before timing.
    #[arg(long)]
    ivf_cells: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn index(args: IndexArgs) -> Result<()> {
    let mut videos = load_manifest_videos(&args.manifest)?;
    if let Some(w) = &args.weights {
        let encoder = Encoder::load(w)?;
        videos = videos
            .into_iter()
            .map(|v| encoder.encode_features(&v.normalize_rows()?))
            .collect::<pvcd::Result<_>>()?;
    }
    let mut idx = GlobalIndex::build_flat(&videos)?;
    if let Some(cells) = args.ivf_cells {
        idx = idx.with_ivf(cells, args.kmeans_iters, args.seed)?;
    }
    idx.save(&args.out)?;
    eprintln!(
        "indexed {} videos, {} frames, dim {}{}",
        idx.video_count(),
        idx.row_count(),
        idx.dim(),
        args.ivf_cells.map(|c| format!(", {c} IVF cells")).unwrap_or_default()
    );
    Ok(())
}

fn query(args: QueryArgs) -> Result<()> {
    let idx = GlobalIndex::load(&args.index)?;
    let encoder = args.weights.as_ref().map(Encoder::load).transpose()?;
    let params = QueryParams {
        top_k_all: args.top_k_all,
        top_k_one: args.top_k_one,
        top_k_video: args.top_k_video,
        sim_th: args.sim_th,
        max_step: args.max_step,
        max_diff: args.max_diff,
        mode: args.mode,
        use_encoder: encoder.is_some(),
        n_probe: args.n_probe,
        max_segments: args.max_segments,
        fps: args.fps,
    };
    let mut out = output(args.out.as_deref())?;
    for path in &args.query {
        let q = load_feature_file(path)?;
        for d in run_query(&idx, &q, &params, encoder.as_ref())? {
            serde_json::to_writer(&mut out, &d)?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), n + 1)))
        .collect()
}

fn eval(args: EvalArgs) -> Result<()> {
    let dets = read_detections(&args.detections)?;
    let anns = load_annotations(&args.annotations)?;
    let report = evaluation_report(&dets, &anns, args.sweep);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let videos = load_manifest_videos(&args.manifest)?;
    let anns = load_annotations(&args.annotations)?;
    if anns.is_empty() {
        bail!("no annotations in {}", args.annotations.display());
    }
    let query_ids: HashSet<&str> = anns.iter().map(|a| a.video_a.as_str()).collect();
    let (queries, references): (Vec<VideoFeatures>, Vec<VideoFeatures>) =
        videos.iter().cloned().partition(|v| query_ids.contains(v.video_id.as_str()));
    if references.is_empty() {
        bail!("every video is an annotated query; no references left to mine negatives from");
    }
    let d = videos[0].dim();
    let mut cfg = EncoderConfig::new(d, args.heads);
    cfg.ffn_dim = args.ffn_dim;
    cfg.positional = args.positional;
    cfg.seed = args.seed;
    cfg.validate()?;

    let mut samples = positive_samples(&videos, &anns, args.fps)?;
    let params = QueryParams {
        fps: args.fps,
        ..QueryParams::default()
    };
    let negatives = mine_hard_negatives(&references, &queries, &anns, &params, samples.len(), args.seed)?;
    eprintln!("{} positives, {} negatives", samples.len(), negatives.len());
    samples.extend(negatives);

    let train = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let outcome = train_encoder(&samples, &cfg, &train)?;
    for h in &outcome.history {
        eprintln!("epoch {:>3}  loss {:.6}", h.epoch, h.mean_loss);
    }
    Encoder::new(cfg, outcome.weights)?.save(&args.out)?;
    let history = args.history.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    write_history_csv(&history, &outcome.history)?;
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut idx = GlobalIndex::load(&args.index)?;
    if let Some(cells) = args.ivf_cells {
        idx = idx.with_ivf(cells, DEFAULT_KMEANS_ITERS, args.seed)?;
    }
    let queries = load_manifest_videos(&args.queries)?;
    let report = bench_search(&idx, &queries, args.top_k, &args.n_probe, args.reps)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
    }
}
