//! `forgetgate` operator CLI.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use forgetgate::datagen::{
    assemble_dataset, generate_all, generate_near_utility, generate_random_negatives, AssembleOptions,
    GenerationOptions, MockSurrogate, SeedQuestion, SurrogateClient, TemplateSet, DEFAULT_DECLARATIVE_PROBABILITY,
};
use forgetgate::embed::{ComposedEmbedder, Embedder, StubEmbedder};
use forgetgate::eval::{
    parse_grid, planted_cluster_plan, run_stages_with, score_plan_with, sweep_items, sweep_tsv, tune_threshold,
    MetricsReport, PlantedClusterConfig, StagePlan,
};
use forgetgate::gate::RefusalSet;
use forgetgate::io::{load_config, load_dataset, load_head, load_store, save_dataset, save_head, save_store, ParseMode};
use forgetgate::pipeline::{MockUpstream, Pipeline, PipelineOptions};
use forgetgate::store::CompressionReport;
use forgetgate::trainer::{train, TrainConfig};
use forgetgate::{ForgetStore, StoreMode, StoreVariant};
use forgetgate_gateway::{Gateway, HttpSurrogate, RemoteEmbedder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "forgetgate", version, about = "Embedding-similarity forget gate for LLM serving")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a labeled pair dataset from seed questions, or write the planted benchmark plan.
    Datagen(DatagenArgs),
    /// Train a projection head on a pair dataset.
    Train(TrainArgs),
    /// Run the HTTP gateway.
    Serve(ServeArgs),
    /// Send a forget request to a running gateway.
    Forget(ForgetArgs),
    /// Send a prompt to a running gateway.
    Query(QueryArgs),
    /// Replay a stage plan through an in-process pipeline and report metrics.
    Eval(EvalArgs),
    /// Score a stage plan once and evaluate it over a threshold grid.
    Sweep(SweepArgs),
    /// Compress a store file, or the store of a running gateway.
    Compress(CompressArgs),
    /// Show counters and latency quantiles of a running gateway.
    Stats(StatsArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Seed questions, JSONL of {"id", "text"}.
    #[arg(long, required_unless_present = "planted")]
    seeds: Option<PathBuf>,
    /// Write the synthetic planted-cluster stage plan instead of a dataset.
    #[arg(long, conflicts_with = "seeds")]
    planted: bool,
    /// Output path (dataset JSONL, or plan JSON with --planted).
    #[arg(long)]
    out: PathBuf,
    /// Surrogate endpoint; the built-in rule-based rewriter is used when absent.
    #[arg(long)]
    surrogate_url: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    surrogate_timeout_ms: u64,
    /// Directory holding tau1.txt, tau2.txt and near_utility.txt.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DECLARATIVE_PROBABILITY)]
    declarative_prob: f64,
    #[arg(long, default_value_t = 3)]
    retries: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Extra negatives pairing questions of two different seeds.
    #[arg(long, default_value_t = 0)]
    random_negatives: usize,
    #[arg(long)]
    no_type2: bool,
    #[arg(long)]
    no_type3: bool,
    /// Also write a near-utility variant per seed (JSONL).
    #[arg(long)]
    near_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Planted plan: number of stages.
    #[arg(long, default_value_t = 3)]
    stages: usize,
    /// Planted plan: forget items per stage.
    #[arg(long, default_value_t = 100)]
    per_stage: usize,
    /// Planted plan: retain items.
    #[arg(long, default_value_t = 200)]
    retain: usize,
}

/// Base embedder selection shared by offline subcommands.
#[derive(Args)]
struct EmbedArgs {
    /// Stub embedder dimension, or the remote provider's dimension.
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Remote embedding provider; the hashing stub is used when absent.
    #[arg(long)]
    embedder_url: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    embedder_timeout_ms: u64,
    /// Trained projection head applied on top of the base embedder.
    #[arg(long)]
    head: Option<PathBuf>,
}

impl EmbedArgs {
    fn base(&self) -> Arc<dyn Embedder> {
        match &self.embedder_url {
            Some(url) => Arc::new(RemoteEmbedder::new(url, self.dim, Duration::from_millis(self.embedder_timeout_ms))),
            None => Arc::new(StubEmbedder::new(self.dim)),
        }
    }

    fn build(&self) -> anyhow::Result<Arc<dyn Embedder>> {
        let base = self.base();
        Ok(match &self.head {
            Some(path) => {
                let head = load_head(path).with_context(|| format!("loading head {}", path.display()))?;
                Arc::new(ComposedEmbedder::new(base, head)?)
            }
            None => base,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Pair dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Where to write the head container.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    embed: EmbedArgs,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    /// Output dimension; defaults to the base dimension with an identity start.
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip malformed dataset lines instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Store file, loaded at start and persisted in the background.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Any config key, e.g. `--set upstream=http`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ClientArgs {
    /// Gateway base URL.
    #[arg(long, env = "FORGETGATE_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
}

#[derive(Args)]
struct ForgetArgs {
    #[arg(long)]
    text: String,
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Compressed,
    Clustered,
}

impl ModeArg {
    fn variant(self) -> StoreVariant {
        match self {
            Self::Exact => StoreVariant::Exact,
            Self::Compressed => StoreVariant::Compressed,
            Self::Clustered => StoreVariant::Clustered,
        }
    }

    fn store_mode(self, pca_dim: usize, keep_ratio: f64) -> StoreMode {
        match self {
            Self::Exact => StoreMode::exact(),
            Self::Compressed => StoreMode::compressed(pca_dim),
            Self::Clustered => StoreMode::clustered(pca_dim, keep_ratio),
        }
    }
}

#[derive(Args)]
struct StoreModeArgs {
    /// Store representation used while replaying the plan.
    #[arg(long, value_enum, default_value = "exact")]
    store_mode: ModeArg,
    #[arg(long, default_value_t = 32)]
    pca_dim: usize,
    #[arg(long, default_value_t = 0.9)]
    keep_ratio: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Stage plan (JSON).
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    store: StoreModeArgs,
    /// Text the mock upstream answers with.
    #[arg(long, default_value = "I can help with that.")]
    mock_response: String,
    /// Also write the per-set metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    plan: PathBuf,
    /// `start:end:step` (inclusive) or a comma list.
    #[arg(long, default_value = "0.01:0.99:0.01")]
    grid: String,
    /// Stage to evaluate (1-based); defaults to the last.
    #[arg(long)]
    stage: Option<usize>,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    store: StoreModeArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompressArgs {
    /// Store file to compress offline; without it the running gateway at --url is compressed.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Output file; defaults to rewriting --store in place.
    #[arg(long, requires = "store")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value_t = 32)]
    pca_dim: usize,
    #[arg(long, default_value_t = 0.9)]
    keep_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    client: ClientArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_env("FORGETGATE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = Output { json: cli.json };
    match cli.command {
        Command::Datagen(a) => datagen(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Serve(a) => serve(a, out),
        Command::Forget(a) => {
            let v = post(&a.client, "/v1/forget", json!({ "text": a.text }))?;
            out.emit(&v, || format!("forgotten {} ({:.2} ms)\n", v["id"].as_str().unwrap_or("?"), num(&v["latency_ms"])))
        }
        Command::Query(a) => {
            let v = post(&a.client, "/v1/query", json!({ "prompt": a.prompt }))?;
            out.emit(&v, || {
                let s = v["s_max"].as_f64().map_or("none".to_string(), |s| format!("{s:.4}"));
                let matched = v["matched_id"].as_str().map(|m| format!("  matched={m}")).unwrap_or_default();
                format!("{}  s_max={s}{matched}\n{}\n", v["action"].as_str().unwrap_or("?"), v["response"].as_str().unwrap_or(""))
            })
        }
        Command::Stats(a) => {
            let v = get(&a.client, "/v1/stats")?;
            out.emit(&v, || stats_table(&v))
        }
        Command::Eval(a) => eval(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Compress(a) => compress(a, out),
    }
}

#[derive(Clone, Copy)]
struct Output {
    json: bool,
}

impl Output {
    fn emit<T: Serialize>(self, value: &T, human: impl FnOnce() -> String) -> anyhow::Result<()> {
        let mut stdout = std::io::stdout().lock();
        if self.json {
            serde_json::to_writer(&mut stdout, value)?;
            writeln!(stdout)?;
        } else {
            stdout.write_all(human().as_bytes())?;
        }
        stdout.flush()?;
        Ok(())
    }
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn agent(c: &ClientArgs) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(Duration::from_millis(c.timeout_ms)).build()
}

fn endpoint(c: &ClientArgs, path: &str) -> String {
    format!("{}{path}", c.url.trim_end_matches('/'))
}

fn read_response(url: &str, r: Result<ureq::Response, ureq::Error>) -> anyhow::Result<Value> {
    match r {
        Ok(resp) => Ok(resp.into_json()?),
        Err(ureq::Error::Status(code, resp)) => {
            let body: Value = resp.into_json().unwrap_or(Value::Null);
            let msg = body["error"].as_str().unwrap_or("no details");
            bail!("{url} answered {code}: {msg}")
        }
        Err(e) => Err(e.into()),
    }
}

fn post(c: &ClientArgs, path: &str, body: Value) -> anyhow::Result<Value> {
    let url = endpoint(c, path);
    read_response(&url, agent(c).post(&url).send_json(body))
}

fn get(c: &ClientArgs, path: &str) -> anyhow::Result<Value> {
    let url = endpoint(c, path);
    read_response(&url, agent(c).get(&url).call())
}

fn stats_table(v: &Value) -> String {
    let mut s = format!(
        "records      {}\nstore mode   {}\ndimension    {}\nthreshold    {}\nuptime       {:.1} s\nanswers      {}\nrefusals     {}\nupstream     {}\n",
        v["count"], v["store_mode"]["variant"].as_str().unwrap_or("?"), v["dim"], v["delta"], num(&v["uptime_s"]),
        v["answers"], v["refusals"], v["upstream_calls"],
    );
    for (name, key) in [("forget", "forget_latency_ms"), ("query", "query_latency_ms")] {
        let q = &v[key];
        s += &format!(
            "{name:<7} ms   n={} p50={:.2} p95={:.2} p99={:.2} max={:.2}\n",
            q["count"], num(&q["p50"]), num(&q["p95"]), num(&q["p99"]), num(&q["max"])
        );
    }
    s
}

fn read_seeds(path: &Path) -> anyhow::Result<Vec<SeedQuestion>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut seeds = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seed: SeedQuestion =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        seeds.push(seed);
    }
    Ok(seeds)
}

fn datagen(a: DatagenArgs, out: Output) -> anyhow::Result<()> {
    if a.planted {
        let cfg = PlantedClusterConfig {
            stages: a.stages,
            forget_per_stage: a.per_stage,
            retain_count: a.retain,
            seed: a.seed,
            ..Default::default()
        };
        let plan = planted_cluster_plan(&cfg)?;
        std::fs::write(&a.out, serde_json::to_vec_pretty(&plan)?)?;
        let v = json!({ "plan": a.out, "stages": plan.stages.len(), "queries": plan.query_count() });
        return out.emit(&v, || format!("wrote {} stages, {} queries to {}\n", v["stages"], v["queries"], a.out.display()));
    }

    let seeds = read_seeds(a.seeds.as_deref().expect("required unless planted"))?;
    let templates = match &a.templates {
        Some(dir) => TemplateSet::load_dir(dir, a.declarative_prob)?,
        None => TemplateSet::builtin(a.declarative_prob),
    };
    let surrogate: Box<dyn SurrogateClient> = match &a.surrogate_url {
        Some(url) => Box::new(HttpSurrogate::new(url, Duration::from_millis(a.surrogate_timeout_ms))),
        None => Box::new(MockSurrogate::rule_based()),
    };
    let opts = GenerationOptions {
        retry_limit: a.retries,
        concurrency: a.concurrency,
        rng_seed: a.seed,
        ..Default::default()
    };
    let summary = generate_all(&seeds, surrogate.as_ref(), &templates, &opts)?;
    let triples: Vec<_> = summary.triples.iter().map(|t| t.triple.clone()).collect();
    let mut dataset = assemble_dataset(
        &triples,
        AssembleOptions { include_type2: !a.no_type2, include_type3: !a.no_type3 },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    if a.random_negatives > 0 {
        dataset.extend(generate_random_negatives(&seeds, a.random_negatives, &mut rng)?);
    }
    save_dataset(&a.out, &dataset)?;

    let mut near_written = 0;
    if let Some(path) = &a.near_out {
        let mut w = BufWriter::new(File::create(path)?);
        for seed in &seeds {
            match generate_near_utility(seed, surrogate.as_ref(), &templates, &opts, &mut rng) {
                Ok(near) => {
                    serde_json::to_writer(&mut w, &json!({ "seed_id": seed.id, "q": seed.text, "near": near }))?;
                    writeln!(w)?;
                    near_written += 1;
                }
                Err(e @ forgetgate::Error::UnparseableResponse { .. }) => eprintln!("warning: {e}"),
                Err(e) => return Err(e.into()),
            }
        }
        w.flush()?;
    }

    let skipped: Vec<Value> = summary.skipped.iter().map(|(id, why)| json!({ "seed_id": id, "reason": why })).collect();
    let v = json!({
        "seeds": seeds.len(),
        "triples": triples.len(),
        "pairs": dataset.len(),
        "positives": dataset.positives(),
        "retries": summary.triples.iter().map(|t| t.retries).sum::<usize>(),
        "near_utility": near_written,
        "skipped": skipped,
    });
    out.emit(&v, || {
        let mut s = format!(
            "{} seeds -> {} triples -> {} pairs ({} positive) in {}\n",
            v["seeds"], v["triples"], v["pairs"], v["positives"], a.out.display()
        );
        for (id, why) in &summary.skipped {
            s += &format!("skipped {id}: {why}\n");
        }
        s
    })
}

fn train_cmd(a: TrainArgs, out: Output) -> anyhow::Result<()> {
    let mode = if a.lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let load = load_dataset(&a.data, mode)?;
    for e in &load.skipped {
        eprintln!("warning: skipped {e}");
    }
    let config = TrainConfig {
        margin: a.margin,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        warmup_steps: a.warmup,
        rng_seed: a.seed,
        out_dim: a.out_dim,
        ..Default::default()
    };
    let report = train(&load.dataset, a.embed.base().as_ref(), &config)?;
    save_head(&a.out, &report.head)?;
    let v = json!({
        "pairs": load.dataset.len(),
        "skipped": load.skipped.len(),
        "steps": report.step_losses.len(),
        "initial_loss": report.initial_loss(),
        "final_loss": report.final_window_loss(),
        "in_dim": report.head.in_dim(),
        "out_dim": report.head.out_dim(),
        "head": a.out,
    });
    out.emit(&v, || {
        format!(
            "{} pairs, {} steps, loss {:.6} -> {:.6}; head {}x{} written to {}\n",
            v["pairs"], v["steps"], report.initial_loss(), report.final_window_loss(),
            report.head.out_dim(), report.head.in_dim(), a.out.display()
        )
    })
}

fn serve(a: ServeArgs, out: Output) -> anyhow::Result<()> {
    let mut flags: Vec<(String, String)> = Vec::new();
    if let Some(l) = a.listen {
        flags.push(("listen".into(), l));
    }
    if let Some(t) = a.threshold {
        flags.push(("threshold".into(), t.to_string()));
    }
    if let Some(s) = a.store {
        flags.push(("store_path".into(), s.display().to_string()));
    }
    for kv in a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    let cfg = load_config(a.config.as_deref(), std::env::vars(), flags)?;
    let gateway = Gateway::from_config(&cfg)?;

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.listen)
            .await
            .with_context(|| format!("binding {}", cfg.listen))?;
        let addr = listener.local_addr()?;
        let v = json!({ "listen": addr.to_string(), "url": format!("http://{addr}") });
        out.emit(&v, || format!("listening on http://{addr}\n"))?;
        gateway.serve(listener, shutdown_signal()).await?;
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

fn offline_pipeline(embed: &EmbedArgs, threshold: f64, mock_response: &str, seed: u64) -> anyhow::Result<Pipeline> {
    Ok(Pipeline::new(
        embed.build()?,
        Arc::new(ForgetStore::new()),
        Arc::new(MockUpstream::canned(mock_response)),
        RefusalSet::builtin(),
        PipelineOptions { threshold, rng_seed: seed, ..Default::default() },
    )?)
}

/// Stage hook that switches the store to the requested representation the
/// first time it holds records; later forgets land in the delta rows.
fn compress_hook(args: &StoreModeArgs, seed: u64) -> impl FnMut(&Pipeline) -> forgetgate::Result<()> {
    let mode = args.store_mode.store_mode(args.pca_dim, args.keep_ratio);
    move |p: &Pipeline| {
        if mode.variant != StoreVariant::Exact && p.store().mode().variant == StoreVariant::Exact && !p.store().is_empty() {
            p.compress(mode, seed)?;
        }
        Ok(())
    }
}

fn eval(a: EvalArgs, out: Output) -> anyhow::Result<()> {
    let plan = StagePlan::load(&a.plan).with_context(|| format!("loading plan {}", a.plan.display()))?;
    let pipeline = offline_pipeline(&a.embed, a.threshold, &a.mock_response, a.seed)?;
    let report = run_stages_with(&plan, &pipeline, compress_hook(&a.store, a.seed))?;
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv())?;
    }
    out.emit(&report, || metrics_table(&report))
}

fn metrics_table(report: &MetricsReport) -> String {
    let mut s = format!("threshold {}\n", report.threshold);
    s += "stage  set               n      prec    recall  f1      answer  rouge-l\n";
    for st in &report.stages {
        for m in st.sets.iter().chain(std::iter::once(&st.overall)) {
            s += &format!(
                "{:<6} {:<16} {:>5}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}\n",
                st.stage, m.set, m.count, m.classification.precision, m.classification.recall,
                m.classification.f1, m.answer_rate, m.rouge_l_mean
            );
        }
    }
    s
}

fn sweep(a: SweepArgs, out: Output) -> anyhow::Result<()> {
    let grid = parse_grid(&a.grid)?;
    let plan = StagePlan::load(&a.plan).with_context(|| format!("loading plan {}", a.plan.display()))?;
    if plan.stages.is_empty() {
        bail!("plan has no stages");
    }
    let stage = a.stage.unwrap_or(plan.stages.len());
    if stage == 0 || stage > plan.stages.len() {
        bail!("stage {stage} outside 1..={}", plan.stages.len());
    }
    let pipeline = offline_pipeline(&a.embed, 0.8, "", a.seed)?;
    let scored = score_plan_with(&plan, &pipeline, compress_hook(&a.store, a.seed))?;
    let items = &scored[stage - 1].items;
    let rows = sweep_items(items, &grid);
    if out.json {
        let best = tune_threshold(items, &grid).map(|(delta, f1)| json!({ "delta": delta, "f1": f1 }));
        out.emit(&json!({ "stage": stage, "queries": items.len(), "rows": rows, "best": best }), String::new)
    } else {
        out.emit(&(), || sweep_tsv(&rows))
    }
}

fn compress(a: CompressArgs, out: Output) -> anyhow::Result<()> {
    let report: CompressionReport = match &a.store {
        Some(path) => {
            let snap = load_store(path).with_context(|| format!("loading store {}", path.display()))?;
            let store = ForgetStore::from_snapshot(snap, None);
            let report = store.compress(a.mode.store_mode(a.pca_dim, a.keep_ratio), a.seed)?;
            save_store(a.out.as_deref().unwrap_or(path), &store.snapshot())?;
            report
        }
        None => {
            let body = json!({
                "mode": a.mode.variant(),
                "pca_dim": a.pca_dim,
                "keep_ratio": a.keep_ratio,
                "seed": a.seed,
            });
            serde_json::from_value(post(&a.client, "/v1/compress", body)?)?
        }
    };
    out.emit(&report, || {
        format!(
            "{} records, {} stored vectors, k={}: {} -> {} bytes ({:.2}x)\n",
            report.count, report.stored_vectors, report.k, report.exact_bytes, report.compressed_bytes, report.ratio
        )
    })
}
