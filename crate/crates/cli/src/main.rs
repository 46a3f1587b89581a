mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gphdm::data::{augment_reverse, read_dataset_dir, synthesize, write_dataset_dir, Dataset, PreprocessConfig, SynthConfig, TaxonomyGraph};
use gphdm::eval::{latents_csv, populations, run_comparison, ComparisonConfig, MetricReport, ModelMetrics};
use gphdm::generate::{
    conditional_optimize, hyperbolic_geodesic, mean_predict, pullback_geodesic, ConditionalOptions, GeneratedPath, Generator,
    PullbackOptions,
};
use gphdm::manifold::raw;
use gphdm::model::{fit, Checkpoint, Geometry, LatentState, ModelData, ModelKind, TrainConfig};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser, Serialize)]
#[command(name = "gphdm", version, about = "Train hyperbolic GP dynamical models and generate latent trajectories")]
struct Cli {
    /// Seed for data synthesis and initialization.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    #[serde(skip)]
    out: PathBuf,
    /// Restrict or check the latent geometry.
    #[arg(long, global = true, value_enum)]
    geometry: Option<GeometryArg>,
    /// Latent dimension (2 when not given).
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(2..=3))]
    latent_dim: Option<u8>,
    /// Print a JSON summary on standard output.
    #[arg(long, global = true)]
    #[serde(skip)]
    json: bool,
    /// Record wall-clock runtimes in written artifacts (makes them non-reproducible).
    #[arg(long, global = true)]
    timings: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum GeometryArg {
    Hyperbolic,
    Euclidean,
}

impl From<GeometryArg> for Geometry {
    fn from(g: GeometryArg) -> Self {
        match g {
            GeometryArg::Hyperbolic => Geometry::Hyperbolic,
            GeometryArg::Euclidean => Geometry::Euclidean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelArg {
    Gplvm,
    Gpdm,
    Gphlvm,
    Gphdm,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Gplvm => ModelKind::Gplvm,
            ModelArg::Gpdm => ModelKind::Gpdm,
            ModelArg::Gphlvm => ModelKind::Gphlvm,
            ModelArg::Gphdm => ModelKind::Gphdm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Mean,
    Conditional,
    Geodesic,
    Pullback,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Write a synthetic taxonomy dataset directory.
    Synth(SynthArgs),
    /// Train one model and write a checkpoint and its loss trace.
    Train(TrainArgs),
    /// Generate a latent path with a trained checkpoint.
    Generate(GenerateArgs),
    /// Evaluate checkpoints, or train and compare the four models.
    Eval(EvalArgs),
    /// Export latent coordinates (with Poincaré projection) and an optional SVG plot.
    Export(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// Levels of the binary taxonomy tree.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    per_leaf: usize,
    #[arg(long, default_value_t = 30)]
    points: usize,
    #[arg(long, default_value_t = 8)]
    output_dim: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Also add every trajectory reversed.
    #[arg(long)]
    reverse: bool,
    #[arg(long, default_value_t = 100.0)]
    sample_rate: f64,
}

#[derive(Debug, Args, Serialize)]
struct TrainOverrides {
    /// JSON file with training settings; flags below take precedence.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr_latent: Option<f64>,
    #[arg(long)]
    lr_hyper: Option<f64>,
    #[arg(long)]
    back_constraints: bool,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Dataset directory; the default synthetic dataset for `--seed` when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Start: taxonomy node name or comma-separated ambient coordinates.
    #[arg(long)]
    from: String,
    /// End (all methods except `mean`).
    #[arg(long)]
    to: Option<String>,
    /// Number of path points.
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Drop the observation term of the conditional objective.
    #[arg(long)]
    no_likelihood: bool,
    /// Spline weight of the pullback curve energy.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Checkpoints to evaluate; without any, models are trained and compared.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    models: Vec<ModelArg>,
    /// Initialization seeds of the comparison (defaults to `--seed`).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args, Serialize)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Generated path JSON files to overlay on the plot.
    #[arg(long)]
    path: Vec<PathBuf>,
    /// Also write an SVG plot.
    #[arg(long)]
    svg: bool,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Library(gphdm::Error),
}

impl From<gphdm::Error> for Failure {
    fn from(e: gphdm::Error) -> Self {
        Failure::Library(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Library(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Library(e.into())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Validation(msg.into()))
}

/// Output wrapper for JSON artifacts.
#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    version: String,
    config_digest: String,
    command: String,
    data: T,
}

struct Ctx<'a> {
    cli: &'a Cli,
    digest: String,
    command: &'static str,
    files: Vec<PathBuf>,
    summary: BTreeMap<String, serde_json::Value>,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn header(&self) -> String {
        format!("gphdm {VERSION} config {}", self.digest)
    }

    fn write(&mut self, name: &str, contents: &str) -> Outcome<()> {
        let p = self.path(name);
        std::fs::write(&p, contents)?;
        self.files.push(p);
        Ok(())
    }

    fn write_csv(&mut self, name: &str, csv: &str) -> Outcome<()> {
        let text = format!("# {}\n{csv}", self.header());
        self.write(name, &text)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, data: T) -> Outcome<()> {
        let env = Envelope { version: VERSION.into(), config_digest: self.digest.clone(), command: self.command.into(), data };
        let text = serde_json::to_string_pretty(&env)?;
        self.write(name, &text)
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.into(), serde_json::to_value(value).expect("summary value serializes"));
    }

    fn latent_dim(&self) -> usize {
        self.cli.latent_dim.unwrap_or(2) as usize
    }
}

fn sha256_file(p: &Path) -> Outcome<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(p)?)))
}

fn load_data(data: Option<&Path>, seed: u64) -> Outcome<(Dataset, TaxonomyGraph)> {
    Ok(match data {
        Some(dir) => read_dataset_dir(dir, &PreprocessConfig::default())?,
        None => {
            let g = TaxonomyGraph::binary_tree(3);
            (synthesize(&g, &SynthConfig { seed, ..Default::default() })?, g)
        }
    })
}

fn train_config(o: &TrainOverrides, seed: u64) -> Outcome<TrainConfig> {
    let mut cfg: TrainConfig = match &o.train_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(v) = o.iters {
        cfg.max_iters = v;
    }
    if let Some(v) = o.patience {
        cfg.patience = v;
    }
    if let Some(v) = o.lr_latent {
        cfg.lr_latent = v;
    }
    if let Some(v) = o.lr_hyper {
        cfg.lr_hyper = v;
    }
    cfg.back_constraints |= o.back_constraints;
    for (name, v) in [("lr-latent", cfg.lr_latent), ("lr-hyper", cfg.lr_hyper), ("alpha", cfg.alpha)] {
        if !(v > 0.0 && v.is_finite()) {
            return invalid(format!("{name} must be positive"));
        }
    }
    Ok(cfg)
}

fn load_checkpoint(ctx: &Ctx, path: &Path) -> Outcome<(Checkpoint, LatentState, TaxonomyGraph)> {
    let ck = Checkpoint::load(path)?;
    if let Some(g) = ctx.cli.geometry {
        if ck.model.geometry() != g.into() {
            return invalid(format!("--geometry {g:?} does not match the {} checkpoint", ck.model).to_lowercase());
        }
    }
    if let Some(d) = ctx.cli.latent_dim {
        if d as usize != ck.latent_dim {
            return invalid(format!("--latent-dim {d} does not match the checkpoint ({})", ck.latent_dim));
        }
    }
    let state = ck.state()?;
    let graph = ck.graph()?;
    Ok((ck, state, graph))
}

fn cmd_synth(ctx: &mut Ctx, a: &SynthArgs) -> Outcome<()> {
    if a.depth < 2 {
        return invalid("--depth must be at least 2");
    }
    let g = TaxonomyGraph::binary_tree(a.depth);
    let cfg = SynthConfig {
        trajectories_per_leaf: a.per_leaf,
        points_per_trajectory: a.points,
        output_dim: a.output_dim,
        noise_std: a.noise,
        seed: ctx.cli.seed,
        ..Default::default()
    };
    let mut ds = synthesize(&g, &cfg)?;
    if a.reverse {
        ds = augment_reverse(&ds);
    }
    let dir = ctx.path("data");
    write_dataset_dir(&dir, &ds, &g, a.sample_rate)?;
    ctx.files.push(dir.join("dataset.json"));
    ctx.note("dataset_digest", ds.digest());
    ctx.note("trajectories", ds.n_trajectories());
    ctx.note("data_dir", dir);
    Ok(())
}

fn cmd_train(ctx: &mut Ctx, a: &TrainArgs) -> Outcome<()> {
    let kind: ModelKind = a.model.into();
    if let Some(g) = ctx.cli.geometry {
        if kind.geometry() != g.into() {
            return invalid(format!("--geometry {g:?} conflicts with --model {kind}").to_lowercase());
        }
    }
    let cfg = train_config(&a.train, ctx.cli.seed)?;
    let (ds, g) = load_data(a.data.as_deref(), ctx.cli.seed)?;
    let (state, mut report) = fit(&ds, &g, kind, ctx.latent_dim(), &cfg)?;
    let runtime = report.runtime_secs;
    if !ctx.cli.timings {
        report.runtime_secs = 0.0;
    }
    let mut trace = String::from("iteration,loss\n");
    for (i, l) in report.trace.iter().enumerate() {
        trace.push_str(&format!("{i},{l}\n"));
    }
    ctx.note("model", kind.name());
    ctx.note("initial_loss", report.initial.loss);
    ctx.note("final_loss", report.result.loss);
    ctx.note("iterations", report.iterations);
    ctx.note("stop", report.stop);
    ctx.note("runtime_secs", runtime);
    let ck = Checkpoint::new(&state, &cfg, &ds, &g, Some(report));
    let p = ctx.path("model.json");
    ck.save(&p)?;
    ctx.files.push(p);
    ctx.write_csv("loss_trace.csv", &trace)?;
    Ok(())
}

fn resolve_point(gen: &Generator, graph: &TaxonomyGraph, s: &str) -> Outcome<DVector<f64>> {
    if graph.contains(s) {
        return Ok(gen.node_location(s)?);
    }
    let parsed: Result<Vec<f64>, _> = s.split(',').map(|v| v.trim().parse::<f64>()).collect();
    match parsed {
        Ok(v) => {
            let x = DVector::from_vec(v);
            gen.check_point(&x)?;
            Ok(x)
        }
        Err(_) => invalid(format!("`{s}` is neither a taxonomy node nor comma-separated coordinates")),
    }
}

fn cmd_generate(ctx: &mut Ctx, a: &GenerateArgs) -> Outcome<()> {
    let (ck, state, graph) = load_checkpoint(ctx, &a.checkpoint)?;
    let gen = Generator::new(state, &ck.dataset, &graph)?;
    let from = resolve_point(&gen, &graph, &a.from)?;
    let to = match (&a.to, a.method) {
        (Some(_), MethodArg::Mean) => return invalid("--to is not used by --method mean"),
        (None, MethodArg::Mean) => None,
        (None, _) => return invalid("--to is required for this method"),
        (Some(t), _) => Some(resolve_point(&gen, &graph, t)?),
    };
    if a.points < 2 {
        return invalid("--points must be at least 2");
    }
    let path: GeneratedPath = match a.method {
        MethodArg::Mean => mean_predict(&gen, &from, a.points - 1)?,
        MethodArg::Conditional => {
            let mut opts = ConditionalOptions { include_likelihood: !a.no_likelihood, ..Default::default() };
            if let Some(i) = a.iters {
                opts.max_iters = i;
            }
            let anchors = [(0, from), (a.points - 1, to.expect("checked"))];
            conditional_optimize(&gen, &anchors, a.points, &opts)?
        }
        MethodArg::Geodesic => hyperbolic_geodesic(&gen, &from, &to.expect("checked"), a.points)?,
        MethodArg::Pullback => {
            if !(a.lambda >= 0.0) {
                return invalid("--lambda must be non-negative");
            }
            let mut opts = PullbackOptions { lambda: a.lambda, ..Default::default() };
            if let Some(i) = a.iters {
                opts.max_iters = i;
            }
            pullback_geodesic(&gen, &from, &to.expect("checked"), a.points, &opts)?
        }
    };
    let name = format!("{:?}", a.method).to_lowercase();
    ctx.note("method", &name);
    ctx.note("mean_variance", path.mean_variance());
    ctx.note("converged", path.diagnostics.converged);
    ctx.note("warnings", &path.diagnostics.warnings);
    for w in &path.diagnostics.warnings {
        eprintln!("gphdm: warning: {w}");
    }
    ctx.write_csv(&format!("path_{name}.csv"), &path.to_csv(Some(&ck.dataset.offset))?)?;
    ctx.write_json(&format!("path_{name}.json"), &path)?;
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, a: &EvalArgs) -> Outcome<()> {
    let start = Instant::now();
    let mut report = if a.checkpoint.is_empty() {
        let (ds, g) = load_data(a.data.as_deref(), ctx.cli.seed)?;
        let mut models: Vec<ModelKind> = if a.models.is_empty() {
            ModelKind::ALL.to_vec()
        } else {
            a.models.iter().map(|&m| m.into()).collect()
        };
        if let Some(geo) = ctx.cli.geometry {
            models.retain(|m| m.geometry() == geo.into());
        }
        if models.is_empty() {
            return invalid("no models left to evaluate");
        }
        let cfg = ComparisonConfig {
            models,
            latent_dims: vec![ctx.latent_dim()],
            seeds: if a.seeds.is_empty() { vec![ctx.cli.seed] } else { a.seeds.clone() },
            train: train_config(&a.train, ctx.cli.seed)?,
        };
        run_comparison(&ds, &g, &cfg)?.0
    } else {
        if a.data.is_some() || !a.models.is_empty() || !a.seeds.is_empty() {
            return invalid("--checkpoint cannot be combined with --data, --models or --seeds");
        }
        let mut rows = Vec::new();
        let mut per_seed = Vec::new();
        let mut seeds = Vec::new();
        let mut dataset_digest: Option<String> = None;
        for p in &a.checkpoint {
            let (ck, state, graph) = load_checkpoint(ctx, p)?;
            match &dataset_digest {
                Some(d) if *d != ck.dataset_digest => return invalid("checkpoints were trained on different datasets"),
                _ => dataset_digest = Some(ck.dataset_digest.clone()),
            }
            let data = ModelData::new(&ck.dataset, &graph)?;
            let pops = populations(&state, &data)?;
            let runtime = ck.report.as_ref().map_or(0.0, |r| r.runtime_secs);
            let row = ModelMetrics::from_populations(ck.model, ck.latent_dim, &[&pops], runtime);
            rows.push(row.clone());
            per_seed.push((ck.seed, row));
            if !seeds.contains(&ck.seed) {
                seeds.push(ck.seed);
            }
        }
        MetricReport {
            version: VERSION.into(),
            config_digest: ctx.digest.clone(),
            dataset_digest: dataset_digest.expect("at least one checkpoint"),
            seeds,
            rows,
            per_seed,
            runtime_secs: 0.0,
        }
    };
    report.runtime_secs = start.elapsed().as_secs_f64();
    let text = report.to_text();
    if !ctx.cli.json {
        print!("{text}");
    }
    if !ctx.cli.timings {
        report.runtime_secs = 0.0;
        for r in report.rows.iter_mut().chain(report.per_seed.iter_mut().map(|(_, r)| r)) {
            r.runtime_secs = 0.0;
        }
    }
    ctx.note("rows", &report.rows);
    ctx.write_csv("report.csv", &report.to_csv()?)?;
    ctx.write_json("report.json", &report)?;
    Ok(())
}

fn planar(geometry: Geometry, x: &DVector<f64>) -> [f64; 2] {
    match geometry {
        Geometry::Hyperbolic => {
            let p = raw::poincare(x);
            [p[0], p[1]]
        }
        Geometry::Euclidean => [x[0], x[1]],
    }
}

fn cmd_export(ctx: &mut Ctx, a: &ExportArgs) -> Outcome<()> {
    let (ck, state, _) = load_checkpoint(ctx, &a.checkpoint)?;
    ctx.write_csv("latents.csv", &latents_csv(&state, &ck.dataset)?)?;
    let mut paths = Vec::new();
    for p in &a.path {
        let env: Envelope<GeneratedPath> = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        if env.data.geometry != ck.model.geometry() || env.data.latents.first().is_some_and(|x| x.len() != state.geometry().coord_len()) {
            return invalid(format!("{} does not match the checkpoint's latent space", p.display()));
        }
        paths.push((p.display().to_string(), env.data));
    }
    if a.svg {
        let geometry = ck.model.geometry();
        let mut scene = svg::Scene { disk: geometry == Geometry::Hyperbolic, ..Default::default() };
        for r in ck.dataset.ranges() {
            scene.trajectories.push(state.latents[r].iter().map(|x| planar(geometry, x)).collect());
        }
        for (name, p) in &paths {
            scene.paths.push((name.clone(), p.latents.iter().map(|x| planar(geometry, x)).collect()));
        }
        let mut labels: Vec<&String> = ck.dataset.start_labels.iter().chain(&ck.dataset.end_labels).collect();
        labels.sort();
        labels.dedup();
        let graph = ck.graph()?;
        let gen = Generator::new(state.clone(), &ck.dataset, &graph)?;
        for l in labels {
            scene.labels.push((planar(geometry, &gen.node_location(l)?), l.clone()));
        }
        let text = svg::render(&scene, &ctx.header());
        ctx.write("latents.svg", &text)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome<Ctx<'_>> {
    let digest = hex::encode(Sha256::digest(serde_json::to_vec(cli)?));
    let command = match cli.command {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Generate(_) => "generate",
        Command::Eval(_) => "eval",
        Command::Export(_) => "export",
    };
    let mut ctx = Ctx { cli, digest, command, files: Vec::new(), summary: BTreeMap::new() };
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&mut ctx, a)?,
        Command::Train(a) => cmd_train(&mut ctx, a)?,
        Command::Generate(a) => cmd_generate(&mut ctx, a)?,
        Command::Eval(a) => cmd_eval(&mut ctx, a)?,
        Command::Export(a) => cmd_export(&mut ctx, a)?,
    }
    Ok(ctx)
}

fn report(ctx: &Ctx) -> Outcome<()> {
    let mut files = BTreeMap::new();
    for f in &ctx.files {
        files.insert(f.display().to_string(), sha256_file(f)?);
    }
    if ctx.cli.json {
        let out = serde_json::json!({
            "command": ctx.command,
            "version": VERSION,
            "config_digest": ctx.digest,
            "files": files,
            "summary": ctx.summary,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        for (k, v) in &ctx.summary {
            if k != "rows" {
                println!("{k}: {v}");
            }
        }
        for (f, d) in &files {
            println!("wrote {f} (sha256 {})", &d[..16]);
        }
    }
    Ok(())
}

fn fail(kind: &str, msg: &str) -> ExitCode {
    let line = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    eprintln!("gphdm: error[{kind}]: {line}");
    ExitCode::from(if kind == "numerical" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("validation", first);
        }
    };
    match run(&cli).and_then(|ctx| report(&ctx)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => fail("validation", &m),
        Err(Failure::Library(e)) if e.is_numerical() => fail("numerical", &e.to_string()),
        Err(Failure::Library(e)) => fail("validation", &e.to_string()),
    }
}
