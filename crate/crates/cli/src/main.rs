mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use xground_core::dataset::{self, assign_splits, build_dataset_jobs, emit_manifest, load_manifest, VideoIndex};
use xground_core::eval::{evaluate_manifest, render_runs};
use xground_core::fixtures::generate_fixtures;
use xground_core::grpo::{objective_terms, read_rollouts, ObjectiveTerms};
use xground_core::mtw::{TokenCorpus, TokenWeightTable};
use xground_core::response::parse_response;
use xground_core::reward::{total_reward, RewardBreakdown, RewardContext, SpatialReward};
use xground_core::sample::{MigSample, PredictionRecord};
use xground_core::sim::{self, Policy, PolicyLayout, SyntheticEnv};
use xground_core::tokenize::Tokenizer;
use xground_core::uav::{
    self, generate_batch, import_review_decisions, ChatClient, EchoClient, HttpChatClient, PromptTemplateSet,
    ReviewCounts, ReviewDecision, VmcotRecord,
};
use xground_core::Modality;

use crate::config::AppConfig;

/// Bad flags, config or missing required inputs; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "xground", version, about = "RGB+X multi-image grounding toolkit")]
struct Cli {
    /// TOML config; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sample manifest from video index files.
    BuildDataset(BuildArgs),
    /// Score predictions against a manifest.
    Eval(EvalArgs),
    /// Compute modality-specific token weights.
    MtwWeights(MtwArgs),
    /// Score response texts with the combined reward.
    Reward(RewardArgs),
    /// Generate reasoning traces through the chat endpoint.
    GenCot(GenCotArgs),
    /// Train the toy policy and write a reward trace.
    Simulate(SimulateArgs),
    /// Write pending records to a human review queue.
    ReviewExport(ReviewExportArgs),
    /// Apply human review decisions to records.
    ReviewImport(ReviewImportArgs),
    /// Evaluate the GRPO objective on logged rollouts.
    GrpoScore(GrpoScoreArgs),
    /// Regenerate the synthetic fixture tree.
    Fixtures(FixturesArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args)]
struct BuildArgs {
    /// Video index JSON files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    videos: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Assign a seeded video-level split to videos without one.
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    preds: Option<PathBuf>,
    /// Row label in the table.
    #[arg(long, default_value = "run")]
    name: String,
    #[arg(long)]
    threshold: Option<f64>,
    /// Drop samples without a usable prediction instead of scoring them 0.
    #[arg(long)]
    lenient: bool,
    /// Where to write the JSON report.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct MtwArgs {
    /// Counts as JSON, or JSONL lines of `{"modality": .., "text": ..}`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tsv: Option<PathBuf>,
    /// Print the k highest-weighted tokens per modality.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args)]
struct RewardArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSONL lines of `{"sample_id": .., "text": .., "reference": ..}`.
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    spatial: Option<SpatialReward>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenCotArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Use an offline echo client instead of the endpoint.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    require_human_review: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reward: Option<SpatialReward>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    /// Group size.
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReviewExportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReviewImportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    decisions: PathBuf,
    /// Defaults to rewriting `--records`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GrpoScoreArgs {
    #[arg(long)]
    rollouts: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let is_usage = e.downcast_ref::<UsageError>().is_some();
            let report = serde_json::json!({
                "error": format!("{e:#}"),
                "kind": if is_usage { "usage" } else { "runtime" },
            });
            eprintln!("{report}");
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p).map_err(usage)?,
        None => AppConfig::default(),
    };
    if let Some(l) = cli.log_level {
        cfg.log_level = l;
    }
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be >= 1"));
        }
        cfg.jobs = j;
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cfg.log_level))
        .format_timestamp(None)
        .try_init()
        .ok();

    match cli.command {
        Command::BuildDataset(a) => build_dataset_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cfg, a),
        Command::MtwWeights(a) => mtw_cmd(&cfg, a),
        Command::Reward(a) => reward_cmd(&cfg, a),
        Command::GenCot(a) => gen_cot_cmd(&cfg, a),
        Command::Simulate(a) => simulate_cmd(&cfg, a),
        Command::ReviewExport(a) => review_export_cmd(&cfg, a),
        Command::ReviewImport(a) => review_import_cmd(a),
        Command::GrpoScore(a) => grpo_score_cmd(&cfg, a),
        Command::Fixtures(a) => fixtures_cmd(&cfg, a),
        Command::Config => emit(&cfg.to_toml()),
    }
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn seed(flag: Option<u64>, cfg: &AppConfig) -> Result<u64> {
    flag.or(cfg.seed)
        .ok_or_else(|| usage("an explicit --seed (or `seed` in the config) is required"))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    uav::read_jsonl(path).map_err(Into::into)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_jsonl<T: Serialize>(items: &[T], out: Option<&Path>) -> Result<()> {
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?)?;
    }
    w.flush()?;
    Ok(())
}

fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn video_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn build_dataset_cmd(cfg: &AppConfig, a: BuildArgs) -> Result<()> {
    let seed = seed(a.seed, cfg)?;
    let mut videos = video_files(&a.videos)?
        .iter()
        .map(|p| VideoIndex::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(frac) = a.train_fraction {
        if !(0.0..=1.0).contains(&frac) {
            return Err(usage("--train-fraction must lie in [0, 1]"));
        }
        let unsplit: Vec<String> = videos
            .iter()
            .filter(|v| v.split.is_none())
            .map(|v| v.video_id.clone())
            .collect();
        let splits = assign_splits(&unsplit, seed, frac);
        for v in videos.iter_mut().filter(|v| v.split.is_none()) {
            v.split = splits.get(&v.video_id).copied();
        }
    }
    let out = build_dataset_jobs(&videos, &cfg.build, seed, cfg.jobs)?;
    for reason in &out.skipped {
        log::info!("skipped: {reason}");
    }
    let stats = emit_manifest(&out.samples, &a.out)?;
    log::info!(
        "{} samples from {} videos, {} skipped; stats in {}",
        stats.samples,
        videos.len(),
        out.skipped.len(),
        dataset::stats_path(&a.out).display()
    );
    print_json(&stats)
}

fn eval_cmd(cfg: &AppConfig, a: EvalArgs) -> Result<()> {
    let manifest = pick(a.manifest, &cfg.paths.manifest, "manifest")?;
    let preds_path = pick(a.preds, &cfg.paths.predictions, "predictions")?;
    let samples = load_manifest(&manifest)?;
    let preds: Vec<PredictionRecord> = read_jsonl(&preds_path)?;
    let mut options = cfg.eval;
    if let Some(t) = a.threshold {
        options.threshold = t;
    }
    if a.lenient {
        options.strict = false;
    }
    let report = evaluate_manifest(&samples, &preds, options);
    for issue in &report.issues {
        log::warn!("{}", serde_json::to_string(issue)?);
    }
    emit(&render_runs(&[(a.name.as_str(), &report)]))?;
    if let Some(p) = a.json {
        let mut w = create(&p)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct CorpusLine {
    modality: Modality,
    text: String,
}

fn load_corpus(path: &Path, tokenizer: &dyn Tokenizer) -> Result<TokenCorpus> {
    if path.extension().is_some_and(|x| x == "jsonl") {
        let mut corpus = TokenCorpus::new();
        for line in read_jsonl::<CorpusLine>(path)? {
            corpus.add_text(line.modality, &line.text, tokenizer);
        }
        Ok(corpus)
    } else {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?)
    }
}

fn mtw_cmd(cfg: &AppConfig, a: MtwArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus, &cfg.reward.tokenizer)?;
    let table = TokenWeightTable::build(&corpus, cfg.mtw)?;
    let out = a.out.or_else(|| cfg.paths.weights.clone());
    if let Some(p) = &out {
        std::fs::write(p, table.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.tsv {
        std::fs::write(p, table.to_tsv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let top: std::collections::BTreeMap<String, Vec<(String, f64)>> = corpus
        .modalities()
        .into_iter()
        .map(|m| (m.to_string(), table.top(m, a.top)))
        .collect();
    print_json(&top)
}

#[derive(Deserialize)]
struct ResponseLine {
    sample_id: String,
    text: String,
    reference: String,
}

#[derive(Serialize)]
struct RewardLine {
    sample_id: String,
    well_formed: bool,
    #[serde(flatten)]
    reward: RewardBreakdown,
}

fn reward_cmd(cfg: &AppConfig, a: RewardArgs) -> Result<()> {
    let manifest = pick(a.manifest, &cfg.paths.manifest, "manifest")?;
    let samples = load_manifest(&manifest)?;
    let by_id: std::collections::HashMap<&str, &MigSample> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut rcfg = cfg.reward;
    if let Some(s) = a.spatial {
        rcfg.spatial = s;
    }
    let mut out = Vec::new();
    for line in read_jsonl::<ResponseLine>(&a.responses)? {
        let Some(sample) = by_id.get(line.sample_id.as_str()) else {
            bail!("response for unknown sample {}", line.sample_id);
        };
        let parsed = parse_response(&line.text, sample.n());
        let ctx = RewardContext::from_sample(sample, line.reference);
        out.push(RewardLine {
            sample_id: line.sample_id,
            well_formed: parsed.well_formed,
            reward: total_reward(&parsed, &ctx, &rcfg)?,
        });
    }
    write_jsonl(&out, a.out.as_deref())
}

fn gen_cot_cmd(cfg: &AppConfig, a: GenCotArgs) -> Result<()> {
    let manifest = pick(a.manifest, &cfg.paths.manifest, "manifest")?;
    let mut samples = load_manifest(&manifest)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let templates = match &cfg.paths.templates {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<PromptTemplateSet>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => PromptTemplateSet::default(),
    };
    templates.validate().map_err(|e| usage(e.to_string()))?;
    let client: Box<dyn ChatClient> = if a.dry_run {
        Box::new(EchoClient::default())
    } else {
        Box::new(HttpChatClient::new(&cfg.endpoint).map_err(|e| usage(e.to_string()))?)
    };
    let mut options = cfg.filter;
    options.require_human_review |= a.require_human_review;
    let records = generate_batch(&samples, client.as_ref(), &templates, &cfg.retry, options, cfg.jobs)?;
    uav::write_records(&records, &a.out)?;
    print_json(&ReviewCounts::from_records(&records))
}

#[derive(Serialize)]
struct SimSummary {
    steps: usize,
    seed: u64,
    first_window_total: f64,
    last_window_total: f64,
    late_frame_iou: f64,
    expected_iou: Vec<f64>,
    kl_to_reference: f64,
    probe: sim::ProbeReport,
}

fn simulate_cmd(cfg: &AppConfig, a: SimulateArgs) -> Result<()> {
    let seed = seed(a.seed, cfg)?;
    let mut sc = cfg.sim_config();
    if let Some(r) = a.reward {
        sc.reward.spatial = r;
    }
    if let Some(b) = a.beta {
        sc.grpo.beta = b;
    }
    if let Some(c) = a.clip {
        sc.grpo.clip_eps = c;
    }
    if let Some(g) = a.g {
        sc.group_size = g;
    }
    if let Some(lr) = a.lr {
        sc.learning_rate = lr;
    }
    sc.validate().map_err(|e| usage(e.to_string()))?;
    if a.steps == 0 {
        return Err(usage("--steps must be >= 1"));
    }
    let env = SyntheticEnv::new(sc.env.clone(), seed).map_err(|e| usage(e.to_string()))?;
    let initial = Policy::uniform(PolicyLayout::for_env(&env), sc.temperature);
    let out = sim::train(&env, &initial, &sc, a.steps, seed)?;

    let trace_path = a
        .out
        .or_else(|| cfg.paths.traces.clone())
        .unwrap_or_else(|| PathBuf::from("trace.csv"));
    sim::write_trace_csv(&out.trace, create(&trace_path)?)?;

    let window = 50.min(out.trace.len());
    let mean = |rows: &[sim::TraceRow]| rows.iter().map(|r| r.total_mean).sum::<f64>() / rows.len() as f64;
    print_json(&SimSummary {
        steps: a.steps,
        seed,
        first_window_total: mean(&out.trace[..window]),
        last_window_total: mean(&out.trace[out.trace.len() - window..]),
        late_frame_iou: sim::late_frame_iou(&env, &out.policy),
        expected_iou: sim::expected_iou(&env, &out.policy),
        kl_to_reference: sim::policy_kl(&out.policy, &initial),
        probe: sim::probe_policy(&env, &out.policy),
    })
}

fn review_export_cmd(cfg: &AppConfig, a: ReviewExportArgs) -> Result<()> {
    let records: Vec<VmcotRecord> = read_jsonl(&a.records)?;
    let samples = match a.manifest.or_else(|| cfg.paths.manifest.clone()) {
        Some(p) => load_manifest(&p)?,
        None => Vec::new(),
    };
    let n = uav::export_review_queue(&records, &samples, &a.out)?;
    print_json(&serde_json::json!({ "exported": n, "records": records.len() }))
}

fn review_import_cmd(a: ReviewImportArgs) -> Result<()> {
    let mut records: Vec<VmcotRecord> = read_jsonl(&a.records)?;
    let decisions: Vec<ReviewDecision> = read_jsonl(&a.decisions)?;
    let summary = import_review_decisions(&mut records, &decisions);
    for id in &summary.ignored {
        log::warn!("decision for {id} ignored (unknown, not pending, or incomplete)");
    }
    uav::write_records(&records, a.out.as_deref().unwrap_or(&a.records))?;
    print_json(&serde_json::json!({
        "summary": summary,
        "counts": ReviewCounts::from_records(&records),
    }))
}

#[derive(Serialize)]
struct GroupScore {
    query_id: String,
    #[serde(flatten)]
    terms: ObjectiveTerms,
}

fn grpo_score_cmd(cfg: &AppConfig, a: GrpoScoreArgs) -> Result<()> {
    let f = File::open(&a.rollouts).with_context(|| format!("opening {}", a.rollouts.display()))?;
    let groups = read_rollouts(BufReader::new(f))?;
    let scores = groups
        .into_iter()
        .map(|g| {
            objective_terms(&g, &cfg.grpo).map(|terms| GroupScore {
                query_id: g.query_id,
                terms,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(&scores, a.out.as_deref())
}

fn fixtures_cmd(cfg: &AppConfig, a: FixturesArgs) -> Result<()> {
    let seed = seed(a.seed, cfg)?;
    let files = generate_fixtures(seed, &a.out)?;
    print_json(&files)
}
