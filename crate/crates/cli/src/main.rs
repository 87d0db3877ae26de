mod svg;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use trajgraft::harness::{self, CurveRow, CURVE_HEADER};
use trajgraft::model::Model;
use trajgraft::par::Exec;
use trajgraft::scene::{self, Scene};
use trajgraft::{Config, Error, Result};

const RESOLVED: &str = "resolved.cfg";
const CHECKPOINT: &str = "model.ckpt";

#[derive(Parser, Debug)]
#[command(name = "trajgraft", version, about = "Synthetic trajectory prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    Gen(GenArgs),
    /// Train a model and write its checkpoint, loss curve, and config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
    /// Attach decoded mixtures to every agent of a dataset.
    Predict(PredictArgs),
    /// Render loss curves and predicted trajectories as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    agents: usize,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated mode counts; defaults to 1, 6 and M where they fit.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Score only the validation split.
    #[arg(long)]
    validation: bool,
    /// Output directory for metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed of the two-agent scene.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    scene: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output JSON-lines file with predictions attached.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Predictions file written by `predict`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Scene id to draw; every scene when omitted.
    #[arg(long)]
    scene: Option<u64>,
    /// Agent index within the scene; defaults to the ego.
    #[arg(long)]
    agent: Option<usize>,
    /// Loss curve CSV written by `train`.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// A failure together with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Lookup { .. } => 3,
            Error::NonFinite { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: message.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn resolve(base: Config, args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => {
            let mut c = base;
            let text = fs::read_to_string(path)?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                c.apply_override(line)
                    .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            }
            c
        }
        None => base,
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The config saved beside an artifact (dataset or checkpoint), when there
/// is one.
fn saved_config(artifact: &Path) -> Result<Config> {
    let saved = parent_dir(artifact).join(RESOLVED);
    if saved.exists() {
        Config::load(&saved)
    } else {
        Ok(Config::default())
    }
}

fn write_resolved(dir: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED), cfg.to_text())?;
    Ok(())
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_model(cfg: &Config, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::new(&cfg.train, &cfg.data)?;
    model.load(checkpoint)?;
    Ok(model)
}

fn gen(args: GenArgs) -> Outcome {
    let cfg = resolve(Config::default(), &args.cfg)?;
    let scenes = scene::generate_dataset(args.seed, args.scenes, args.agents, &cfg.data)?;
    let dir = parent_dir(&args.out);
    fs::create_dir_all(&dir)?;
    scene::write_jsonl(&args.out, &scenes)?;
    write_resolved(&dir, &cfg)?;
    println!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Outcome {
    let cfg = resolve(saved_config(&args.data)?, &args.cfg)?;
    let data = scene::read_jsonl(&args.data)?;
    write_resolved(&args.out, &cfg)?;
    let every = (cfg.train.steps / 20).max(1);
    let outcome = harness::train_observed(&data, &cfg.data, &cfg.train, &mut |info| {
        let r = info.row;
        if r.step % every == 0 || r.step + 1 == cfg.train.steps {
            eprintln!(
                "step {:>6}  l_traj {:>10.4}  l_aux {:>10.4}  l_cl {:>8.4}  total {:>10.4}",
                r.step, r.l_traj, r.l_aux, r.l_cl, r.total
            );
        }
    })?;
    outcome.model.save(&args.out.join(CHECKPOINT))?;
    let mut curve = io::BufWriter::new(fs::File::create(args.out.join("curve.csv"))?);
    harness::write_curve(&mut curve, &outcome.curve)?;
    curve.flush()?;
    println!("saved {}", args.out.join(CHECKPOINT).display());
    Ok(())
}

fn default_ks(modes: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [1, 6, modes].into_iter().filter(|&k| k <= modes).collect();
    ks.dedup();
    ks
}

fn eval(args: EvalArgs) -> Outcome {
    let cfg = resolve(saved_config(&args.checkpoint)?, &args.cfg)?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let mut data = scene::read_jsonl(&args.data)?;
    if args.validation {
        data.retain(Scene::is_validation);
    }
    if data.is_empty() {
        return Err(usage_error("no scenes to evaluate"));
    }
    let ks = if args.k.is_empty() { default_ks(cfg.train.model.modes) } else { args.k };
    let report = harness::evaluate(&model, &data, &ks)?;
    let mut text = Vec::new();
    report.write_csv(&mut text)?;
    io::stdout().write_all(&text)?;
    if let Some(dir) = &args.out {
        write_resolved(dir, &cfg)?;
        fs::write(dir.join("metrics.csv"), &text)?;
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Outcome {
    let cfg = resolve(harness::gradcheck_config(), &args.cfg)?;
    let exec = if args.sequential { Exec::Sequential } else { Exec::Parallel };
    let start = std::time::Instant::now();
    let r = harness::default_grad_check(&cfg, args.seed, args.scene, args.tol, exec)?;
    println!("{:<40} {:>6} {:>12} {:>12}", "param", "numel", "max_rel_err", "max|grad|");
    for p in &r.params {
        println!("{:<40} {:>6} {:>12.3e} {:>12.3e}", p.name, p.numel, p.max_rel_err, p.max_abs_analytic);
    }
    println!(
        "b: analytic {:.6e} numeric {:.6e} data part {:.3e}",
        r.b_analytic, r.b_numeric, r.b_data_grad
    );
    println!(
        "{} scalars, max rel err {:.3e} in {} ({:.2}s)",
        r.scalars,
        r.max_rel_err,
        r.worst,
        start.elapsed().as_secs_f64()
    );
    if r.passed() {
        println!("PASS (tolerance {:e})", r.tolerance);
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("gradient check failed: {:.3e} >= {:e}", r.max_rel_err, r.tolerance),
        })
    }
}

fn predict(args: PredictArgs) -> Outcome {
    let cfg = resolve(saved_config(&args.checkpoint)?, &args.cfg)?;
    let model = load_model(&cfg, &args.checkpoint)?;
    let mut data = scene::read_jsonl(&args.data)?;
    let preds = harness::predict_scenes(&model, &data, Exec::default())?;
    for (s, ps) in data.iter_mut().zip(preds) {
        for (a, p) in s.agents.iter_mut().zip(ps) {
            a.prediction = Some(p);
        }
    }
    let dir = parent_dir(&args.out);
    fs::create_dir_all(&dir)?;
    scene::write_jsonl(&args.out, &data)?;
    write_resolved(&dir, &cfg)?;
    println!("wrote predictions for {} scenes to {}", data.len(), args.out.display());
    Ok(())
}

fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::Config(format!("{} is not a loss curve", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Config(format!("bad curve row `{line}`"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CurveRow {
                step: f[0].parse().map_err(|_| bad())?,
                l_traj: num(f[1])?,
                l_aux: num(f[2])?,
                l_cl: num(f[3])?,
                total: num(f[4])?,
            })
        })
        .collect()
}

fn plot(args: PlotArgs) -> Outcome {
    if args.predictions.is_none() && args.curve.is_none() {
        return Err(usage_error("plot needs --predictions or --curve"));
    }
    fs::create_dir_all(&args.out)?;
    if let Some(curve) = &args.curve {
        let path = args.out.join("loss.svg");
        fs::write(&path, svg::loss_curve(&read_curve(curve)?))?;
        println!("{}", path.display());
    }
    if let Some(preds) = &args.predictions {
        let scenes = scene::read_jsonl(preds)?;
        let chosen: Vec<&Scene> = scenes.iter().filter(|s| args.scene.is_none_or(|id| s.scene_id == id)).collect();
        if chosen.is_empty() {
            return Err(usage_error(format!("scene {} not found", args.scene.unwrap_or_default())));
        }
        for s in chosen {
            let idx = args.agent.unwrap_or(s.ego_index);
            let agent = s
                .agents
                .get(idx)
                .ok_or_else(|| usage_error(format!("scene {} has no agent {idx}", s.scene_id)))?;
            if agent.prediction.is_none() {
                return Err(usage_error(format!("scene {} carries no predictions", s.scene_id)));
            }
            let path = args.out.join(format!("scene_{}.svg", s.scene_id));
            fs::write(&path, svg::agent_modes(agent, &format!("scene {} agent {idx}", s.scene_id)))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Predict(a) => predict(a),
        Command::Plot(a) => plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(3),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
