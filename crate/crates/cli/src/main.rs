use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use flashvid::canonical::to_canonical_string;
use flashvid::npy::{save_attention, save_features};
use flashvid::partition::partition_video;
use flashvid::{
    budget_align, evaluate, generate, load_attention, load_features, run_strategy, save_result, AttentionStack,
    Budget, CompressionConfig, Error, Strategy, SynthSpec,
};

#[derive(Parser)]
#[command(name = "flashvid", version, about = "Visual-token compression for video language models")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, env = "FLASHVID_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a feature tensor and write the kept tokens plus a JSON report.
    Compress(CompressArgs),
    /// Print the token budget plan for hybrid before/inside-LLM compression.
    PlanBudget(PlanArgs),
    /// Print the frame segments of a feature tensor.
    Segment(SegmentArgs),
    /// Write a synthetic drifting-entity clip.
    GenSynth(SynthArgs),
    /// Compare strategies across merge thresholds.
    Eval(EvalArgs),
    /// Print the effective configuration as JSON.
    Config(ConfigArgs),
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON configuration file; individual flags take precedence.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Minimum cosine similarity for a merge link [default: 0.8]
    #[arg(long)]
    merge_threshold: Option<f64>,
    /// Share of the token budget filled by selection [default: 0.7]
    #[arg(long)]
    alpha: Option<f64>,
    /// Before-LLM tokens over the average per-layer budget [default: 1.25]
    #[arg(long)]
    expansion: Option<f64>,
    /// Transition similarity below which frames are split [default: 0.9]
    #[arg(long)]
    segment_threshold: Option<f64>,
    /// Minimum number of segments [default: 8]
    #[arg(long)]
    min_segments: Option<usize>,
    /// LLM layer of inner pruning, 0 to disable [default: 20]
    #[arg(long)]
    prune_layer: Option<usize>,
    /// LLM layer count [default: 28]
    #[arg(long)]
    layers: Option<usize>,
    /// Retention ratio of the per-layer token budget [default: 0.10]
    #[arg(long, conflicts_with_all = ["budget_tokens", "unlimited_budget"])]
    retention: Option<f64>,
    /// Fixed before-LLM token count instead of a retention ratio
    #[arg(long, conflicts_with = "unlimited_budget")]
    budget_tokens: Option<usize>,
    /// Keep as many tokens as merging leaves
    #[arg(long)]
    unlimited_budget: bool,
    /// Longest merge chain in tokens [default: unlimited]
    #[arg(long)]
    max_depth: Option<usize>,
    /// Largest position gap for a merge link [default: unlimited]
    #[arg(long)]
    neighborhood: Option<usize>,
    /// Skip density-peaks trimming of merged tokens
    #[arg(long)]
    no_enforce_budget: bool,
    /// Neighbours for density estimates [default: min(5, n-1)]
    #[arg(long)]
    dpc_knn: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<CompressionConfig, Error> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Report(format!("{}: {e}", path.display())))?
            }
            None => CompressionConfig::default(),
        };
        if let Some(v) = self.merge_threshold {
            c.merge_threshold = v;
        }
        if let Some(v) = self.alpha {
            c.adts_ratio = v;
        }
        if let Some(v) = self.expansion {
            c.expansion_factor = v;
        }
        if let Some(v) = self.segment_threshold {
            c.segment_threshold = v;
        }
        if let Some(v) = self.min_segments {
            c.min_segments = v;
        }
        if let Some(v) = self.prune_layer {
            c.prune_layer = v;
        }
        if let Some(v) = self.layers {
            c.num_layers = v;
        }
        if let Some(v) = self.retention {
            c.budget = Budget::Retention(v);
        }
        if let Some(v) = self.budget_tokens {
            c.budget = Budget::Tokens(v);
        }
        if self.unlimited_budget {
            c.budget = Budget::Unlimited;
        }
        if self.max_depth.is_some() {
            c.max_depth = self.max_depth;
        }
        if self.neighborhood.is_some() {
            c.neighborhood = self.neighborhood;
        }
        if self.no_enforce_budget {
            c.enforce_budget = false;
        }
        if self.dpc_knn.is_some() {
            c.dpc_knn = self.dpc_knn;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct CompressArgs {
    /// Features, float32 NPY of shape (F, N_v, d).
    #[arg(long, value_name = "PATH")]
    features: PathBuf,
    /// Attention, float32 NPY of shape (F, N_v, N_v); uniform when absent.
    #[arg(long, value_name = "PATH")]
    attention: Option<PathBuf>,
    /// Output tokens, float32 NPY of shape (M, d).
    #[arg(long, short, value_name = "PATH")]
    output: PathBuf,
    /// JSON report [default: OUTPUT with a .json extension]
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    #[arg(long, default_value = "flashvid", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Record zero for every stage time, for reproducible reports.
    #[arg(long)]
    no_timings: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, default_value_t = 28)]
    layers: usize,
    #[arg(long, default_value_t = 20)]
    prune_layer: usize,
    #[arg(long, default_value_t = 1.25)]
    expansion: f64,
    /// Average visual tokens per layer [default: RETENTION × TOTAL_TOKENS]
    #[arg(long)]
    avg_tokens: Option<f64>,
    #[arg(long, default_value_t = 0.10)]
    retention: f64,
    /// Uncompressed visual token count.
    #[arg(long, default_value_t = 32 * 196)]
    total_tokens: usize,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long, value_name = "PATH")]
    features: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 196)]
    tokens: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 24)]
    entities: usize,
    /// Positions an entity moves per frame.
    #[arg(long, default_value_t = 1.0)]
    drift: f64,
    /// Standard deviation of per-channel Gaussian noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    scale_min: f64,
    #[arg(long, default_value_t = 1.0)]
    scale_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    features_out: PathBuf,
    #[arg(long, value_name = "PATH")]
    attention_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    features: PathBuf,
    #[arg(long, value_name = "PATH")]
    attention: Option<PathBuf>,
    /// Comma-separated strategies [default: all]
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Vec<Strategy>,
    /// Comma-separated merge thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.8,0.9")]
    thresholds: Vec<f64>,
    /// Per-frame CSV output.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Full JSON report output.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
    #[arg(long)]
    no_timings: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::MalformedHeader { .. } | Error::UnsupportedDtype { .. } | Error::Truncated { .. } => "format",
        Error::Rank { .. } | Error::Shape(_) | Error::NonFinite { .. } | Error::Attention { .. } => "validation",
        Error::Config { .. } => "config",
        Error::Infeasible(_) => "infeasible",
        Error::Stage { source, .. } => error_kind(source),
        Error::Report(_) => "report",
        Error::Invariant(_) => "invariant",
    }
}

fn is_invariant(e: &Error) -> bool {
    match e {
        Error::Invariant(_) => true,
        Error::Stage { source, .. } => is_invariant(source),
        _ => false,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_inputs(features: &Path, attention: Option<&Path>) -> Result<(flashvid::VideoFeatures, AttentionStack), Error> {
    let f = load_features(features)?;
    let a = match attention {
        Some(p) => load_attention(p)?,
        None => AttentionStack::uniform(f.frames(), f.tokens_per_frame())?,
    };
    a.check_matches(&f)?;
    Ok((f, a))
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

fn compress(args: &CompressArgs) -> Result<(), Error> {
    let config = args.config.resolve()?;
    let (features, attn) = load_inputs(&args.features, args.attention.as_deref())?;
    let mut result = run_strategy(args.strategy, &features, &attn, &config)?;
    result.verify(&features)?;
    if args.no_timings {
        result.stats.timings = Default::default();
    }
    let report = args.report.clone().unwrap_or_else(|| args.output.with_extension("json"));
    save_result(&result, &args.output, &report, Some(&config))?;

    let s = &result.stats;
    let mut line = format!(
        "{}: {} -> {} tokens ({:.2}%), target {}, {} segments, {} selected, {} trees, {} merged, {} reduced",
        args.strategy,
        s.input_tokens,
        s.output_tokens,
        100.0 * s.output_tokens as f64 / s.input_tokens as f64,
        s.target_tokens,
        s.segments,
        s.adts_selected,
        s.trees_formed,
        s.tstm_merged,
        s.dpc_reduced,
    );
    if !args.no_timings {
        let t = &s.timings;
        line += &format!(
            " | partition {:.2} ms, selection {:.2} ms, merging {:.2} ms, budget {:.2} ms",
            ms(t.partition_ns),
            ms(t.selection_ns),
            ms(t.merging_ns),
            ms(t.budget_ns)
        );
    }
    println!("{line}");
    Ok(())
}

fn plan_budget(args: &PlanArgs) -> Result<(), Error> {
    let avg = args
        .avg_tokens
        .unwrap_or(args.retention * args.total_tokens as f64);
    let plan = budget_align(args.layers, args.prune_layer, args.expansion, avg)?;
    print!("{}", to_canonical_string(&plan)?);
    Ok(())
}

fn segment(args: &SegmentArgs) -> Result<(), Error> {
    let config = args.config.resolve()?;
    let features = load_features(&args.features)?;
    let (transitions, partition) =
        partition_video(&features, config.segment_threshold, config.min_segments);
    let out = json!({
        "frames": features.frames(),
        "transitions": transitions,
        "segments": partition.segments,
        "boundaries": partition.boundaries,
    });
    print!("{}", to_canonical_string(&out)?);
    Ok(())
}

fn gen_synth(args: &SynthArgs) -> Result<(), Error> {
    let spec = SynthSpec {
        frames: args.frames,
        tokens: args.tokens,
        dim: args.dim,
        num_entities: args.entities,
        drift_rate: args.drift,
        feature_noise_sigma: args.noise,
        scale_range: (args.scale_min, args.scale_max),
        seed: args.seed,
    };
    let (features, attn) = generate(&spec)?;
    save_features(&args.features_out, &features)?;
    if let Some(p) = &args.attention_out {
        save_attention(p, &attn)?;
    }
    println!(
        "wrote {}×{}×{} features (seed {})",
        spec.frames, spec.tokens, spec.dim, spec.seed
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Error> {
    let config = args.config.resolve()?;
    let (features, attn) = load_inputs(&args.features, args.attention.as_deref())?;
    let strategies = if args.strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        args.strategies.clone()
    };
    for &t in &args.thresholds {
        CompressionConfig { merge_threshold: t, ..config.clone() }.validate()?;
    }
    let mut report = evaluate(&strategies, &args.thresholds, &features, &attn, &config)?;
    if args.no_timings {
        report.clear_timings();
    }
    if let Some(p) = &args.csv {
        let file = File::create(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        report.write_csv(BufWriter::new(file))?;
    }
    if let Some(p) = &args.json {
        write_text(p, &report.to_json()?)?;
    }
    for r in &report.runs {
        println!(
            "{:<10} T={:<4} merged {:>6}  outputs {:>6}  mean link sim {}  mse {:.6}",
            r.strategy.name(),
            r.merge_threshold,
            r.merged_total,
            r.output_count,
            r.mean_link_similarity.map_or("-".to_string(), |m| format!("{m:.4}")),
            r.reconstruction_mse
        );
    }
    Ok(())
}

fn show_config(args: &ConfigArgs) -> Result<(), Error> {
    print!("{}", to_canonical_string(&args.resolve()?)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Compress(a) => compress(a),
        Command::PlanBudget(a) => plan_budget(a),
        Command::Segment(a) => segment(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::Eval(a) => eval(a),
        Command::Config(a) => show_config(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default();
            let message = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", json!({"error": "usage", "message": message}));
            return ExitCode::from(1);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string()}));
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": error_kind(&e), "message": e.to_string()}));
            ExitCode::from(if is_invariant(&e) { 2 } else { 1 })
        }
    }
}
