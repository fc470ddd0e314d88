//! `bpjdet`: simulate scenes, decode grids, evaluate, check gradients and
//! overfit raw grids from the command line.

use anyhow::{anyhow, bail, Context, Result};
use bpjdet_core::association::{run_inference, ImagePrediction, PredictionDump};
use bpjdet_core::config::{ConfigError, Resolved, RunConfig};
use bpjdet_core::gradcheck::{gradcheck, GradcheckError};
use bpjdet_core::io::{load_grids, read_json, save_grids, write_json, write_text, IoError};
use bpjdet_core::metrics::{EvalInputs, MetricsError};
use bpjdet_core::representation::{Dataset, ImageAnnotation, RepresentationError, SchemaDecl};
use bpjdet_core::synthscene::{generate_scene, generate_scenes, perturb_grids, render_perfect_grids, SceneError};
use bpjdet_core::trainer::{lambda_sweep, overfit, sweep_csv, trace_csv, TrainError};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bpjdet", version, about = "Joint body/part detection toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scene and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "bpjdet-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic annotated scenes, optionally with perfect grids.
    Simulate {
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Also write encoder-perfect grid files under `grids/`.
        #[arg(long)]
        golden: bool,
        /// Raw-value noise added to the written grids.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Decode grid files into a prediction dump.
    Infer {
        /// Grid files or directories of `.bpjg` files; the image id is the file stem.
        #[arg(long, required = true, num_args = 1..)]
        grids: Vec<PathBuf>,
    },
    /// Score a prediction dump against annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        ann: PathBuf,
    },
    /// Compare finite-difference gradients with closed forms.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Annotation file to use instead of a generated scene.
        #[arg(long)]
        ann: Option<PathBuf>,
    },
    /// Fit raw grids to one annotated image by gradient descent.
    Overfit {
        #[arg(long)]
        ann: PathBuf,
        /// Image id inside the annotation file; the first image when omitted.
        #[arg(long)]
        image: Option<String>,
    },
    /// Overfit every image once per offset weight.
    Sweep {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.005, 0.015, 0.05, 0.15])]
        lambdas: Vec<f64>,
    },
}

struct Ctx {
    cfg: RunConfig,
    res: Resolved,
    out: PathBuf,
}

impl Ctx {
    fn echo(&self) -> Value {
        self.cfg.to_json_value()
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds: Dataset = read_json(path)?;
    ds.validate().with_context(|| format!("{}", path.display()))?;
    Ok(ds)
}

fn check_schema(ds: &Dataset, ctx: &Ctx) -> Result<()> {
    let names = &ctx.res.schema.part_names;
    if ds.schema.parts != *names {
        bail!("annotation parts {:?} differ from configured parts {:?}", ds.schema.parts, names);
    }
    Ok(())
}

fn simulate(ctx: &Ctx, count: usize, golden: bool, noise: Option<f64>) -> Result<Value> {
    let out = ctx.out_dir()?;
    let scene = &ctx.cfg.scene;
    let images = generate_scenes(scene, &ctx.res.spec, count)?;
    let ds = Dataset { schema: SchemaDecl::from(&ctx.res.schema), images };
    write_json(&out.join("annotations.json"), &ds)?;
    let sigma = noise.unwrap_or(scene.noise_sigma);
    if golden {
        let dir = out.join("grids");
        fs::create_dir_all(&dir)?;
        for (i, ann) in ds.images.iter().enumerate() {
            let mut g = render_perfect_grids(ann, &ctx.res.spec, &ctx.res.schema)?;
            if sigma > 0.0 {
                g = perturb_grids(&g, sigma, scene.seed.wrapping_add(i as u64))?;
            }
            save_grids(&dir.join(format!("{}.bpjg", ann.id)), &g, &ctx.res.schema)?;
        }
    }
    let summary = json!({
        "command": "simulate",
        "images": ds.images.len(),
        "bodies": ds.images.iter().map(|a| a.bodies.len()).sum::<usize>(),
        "golden_grids": golden,
        "noise_sigma": if golden { sigma } else { 0.0 },
        "config": ctx.echo(),
    });
    write_json(&out.join("simulate.json"), &summary)?;
    Ok(summary)
}

fn grid_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "bpjg"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no grid files found");
    }
    Ok(files)
}

fn infer(ctx: &Ctx, grids: &[PathBuf]) -> Result<Value> {
    let mut images = Vec::new();
    for f in grid_files(grids)? {
        let (g, k) = load_grids(&f)?;
        if k != ctx.res.schema.k {
            bail!("{}: grid has k = {k}, config has k = {}", f.display(), ctx.res.schema.k);
        }
        let out = run_inference(&g, &ctx.res.spec, &ctx.res.schema, &ctx.cfg.inference)
            .with_context(|| format!("{}", f.display()))?;
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        images.push(ImagePrediction::from_output(id, &out));
    }
    let dump = PredictionDump { config: Some(ctx.echo()), images };
    let path = ctx.out_dir()?.join("predictions.json");
    write_json(&path, &dump)?;
    Ok(json!({
        "command": "infer",
        "images": dump.images.len(),
        "bodies": dump.images.iter().map(|i| i.bodies.len()).sum::<usize>(),
        "parts": dump.images.iter().map(|i| i.parts.len()).sum::<usize>(),
        "output": path,
    }))
}

fn eval(ctx: &Ctx, pred: &Path, ann: &Path) -> Result<Value> {
    let ds = load_dataset(ann)?;
    let schema = ds.schema.to_schema()?;
    let dump: PredictionDump = read_json(pred)?;
    let inputs = EvalInputs::collect(&ds.images, &dump.images, &schema)?;
    let mut report = inputs.report();
    report.config = Some(ctx.echo());
    let out = ctx.out_dir()?;
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("pr_curve.csv"), &inputs.pr_curve_csv())?;
    write_text(&out.join("fppi_curve.csv"), &inputs.fppi_curve_csv())?;
    Ok(serde_json::to_value(&report)?)
}

/// First generated scene from the configured seed that has a visible part.
fn gradcheck_scene(ctx: &Ctx) -> Result<ImageAnnotation> {
    let mut scene = ctx.cfg.scene.clone();
    for _ in 0..1000 {
        let ann = generate_scene(&scene, &ctx.res.spec)?;
        if ann.bodies.iter().any(|b| b.parts.iter().any(|p| p.visible == 1)) {
            return Ok(ann);
        }
        scene.seed = scene.seed.wrapping_add(1);
    }
    Err(anyhow!("no scene with a visible part in 1000 seeds"))
}

fn run_gradcheck(ctx: &Ctx, points: usize, ann: Option<&Path>) -> Result<Value> {
    let image = match ann {
        Some(p) => {
            let ds = load_dataset(p)?;
            check_schema(&ds, ctx)?;
            ds.images.into_iter().next().ok_or_else(|| anyhow!("{}: no images", p.display()))?
        }
        None => gradcheck_scene(ctx)?,
    };
    let r = gradcheck(&image, &ctx.res.spec, &ctx.res.schema, &ctx.cfg.loss, points, ctx.cfg.train.seed)?;
    let mut v = serde_json::to_value(&r)?;
    v["image"] = json!(image.id);
    v["config"] = ctx.echo();
    write_json(&ctx.out_dir()?.join("gradcheck.json"), &v)?;
    if !r.passed {
        let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        bail!(CheckFailed(format!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(v)
}

fn pick_image(ds: Dataset, id: Option<&str>) -> Result<ImageAnnotation> {
    match id {
        Some(id) => ds.images.into_iter().find(|i| i.id == id).ok_or_else(|| anyhow!("no image with id {id:?}")),
        None => ds.images.into_iter().next().ok_or_else(|| anyhow!("annotation file has no images")),
    }
}

fn run_overfit(ctx: &Ctx, ann: &Path, image: Option<&str>) -> Result<Value> {
    let ds = load_dataset(ann)?;
    check_schema(&ds, ctx)?;
    let img = pick_image(ds, image)?;
    let r = overfit(&img, &ctx.res.spec, &ctx.res.schema, &ctx.res.train, &ctx.cfg.inference)?;
    let out = ctx.out_dir()?;
    write_text(&out.join("trace.csv"), &trace_csv(&r.trace))?;
    save_grids(&out.join(format!("{}.bpjg", img.id)), &r.grids, &ctx.res.schema)?;
    let mut report = r.report;
    report.config = Some(ctx.echo());
    write_json(&out.join("report.json"), &report)?;
    let last = r.trace.last().map(|t| &t.loss);
    Ok(json!({
        "command": "overfit",
        "image": img.id,
        "final_loss": last,
        "report": report,
    }))
}

fn sweep(ctx: &Ctx, ann: &Path, lambdas: &[f64]) -> Result<Value> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        bail!(BadInput("lambdas must be finite and >= 0".into()));
    }
    let ds = load_dataset(ann)?;
    check_schema(&ds, ctx)?;
    let rows = lambda_sweep(&ds.images, &ctx.res.spec, &ctx.res.schema, lambdas, &ctx.res.train, &ctx.cfg.inference)?;
    let out = ctx.out_dir()?;
    write_text(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    let summary = json!({ "command": "sweep", "rows": rows, "config": ctx.echo() });
    write_json(&out.join("sweep.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Debug)]
struct BadInput(String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

/// Stable error category for the JSON error record.
fn kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<IoError>() || cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<RepresentationError>() {
            return "representation";
        }
        if cause.is::<SceneError>() {
            return "scene";
        }
        if cause.is::<TrainError>() {
            return "train";
        }
        if cause.is::<MetricsError>() {
            return "metrics";
        }
        if cause.is::<GradcheckError>() {
            return "gradcheck";
        }
        if cause.is::<CheckFailed>() {
            return "check_failed";
        }
    }
    "input"
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("BPJDET_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| BadInput(format!("BPJDET_THREADS={v:?} is not a count")))?;
    if n == 0 {
        bail!(BadInput("BPJDET_THREADS must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<Value> {
    configure_threads()?;
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg = cfg.with_seed(seed);
    }
    let res = cfg.resolve()?;
    let ctx = Ctx { cfg, res, out: cli.global.out };
    match &cli.command {
        Command::Simulate { count, golden, noise } => simulate(&ctx, *count, *golden, *noise),
        Command::Infer { grids } => infer(&ctx, grids),
        Command::Eval { pred, ann } => eval(&ctx, pred, ann),
        Command::Gradcheck { points, ann } => run_gradcheck(&ctx, *points, ann.as_deref()),
        Command::Overfit { ann, image } => run_overfit(&ctx, ann, image.as_deref()),
        Command::Sweep { ann, lambdas } => sweep(&ctx, ann, lambdas),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({ "error": { "kind": kind(&e), "message": format!("{e:#}") } });
            let _ = writeln!(std::io::stderr().lock(), "{record}");
            ExitCode::from(if kind(&e) == "check_failed" { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpjdet_core::losses::LossWeights;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn error_kinds() {
        let e: anyhow::Error = ConfigError::Parse("x".into()).into();
        assert_eq!(kind(&e), "config");
        assert_eq!(kind(&anyhow!("plain")), "input");
        let e: anyhow::Error = CheckFailed("f".into()).into();
        assert_eq!(kind(&e), "check_failed");
    }

    #[test]
    fn default_loss_weights_reach_training() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.resolve().unwrap().train.weights, LossWeights::default());
    }
}
