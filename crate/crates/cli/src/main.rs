use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rsbp::dataset::{generate, Dataset, Split};
use rsbp::eval::{
    evaluate_method, per_image_csv, reconstruct, render_table, EvalSetup, Method, MethodResult,
};
use rsbp::geometry::ViewGeometry;
use rsbp::io::{
    image_container, load_checkpoint, read_header, save_checkpoint, sinogram_from_container,
    write_pgm, Container, DType, ExperimentConfig,
};
use rsbp::nn::{Model, ModelConfig, ModelVariant, Real};
use rsbp::train::{loss_history_csv, train_loop};
use rsbp::Error;

#[derive(Parser)]
#[command(name = "rsbp", version, about = "Sparse-view CT reconstruction toolkit")]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the phantom seed for `gen` and the training seed for `train`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Float64 deterministic mode for training and inference.
    #[arg(long, global = true)]
    verify: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms, sinograms, SBP tensors and FBP inputs.
    Gen,
    /// Train one model variant on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `model.variant` from the config.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Reconstruct one sinogram container.
    Reconstruct {
        #[arg(long)]
        method: String,
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint for neural methods.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also write an 8-bit PGM with the 0 to 2000 HU window.
        #[arg(long)]
        pgm: bool,
    },
    /// Score the configured methods on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint files; each carries its variant.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Print container headers.
    Inspect { files: Vec<PathBuf> },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Config(msg),
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::LineSearch { .. } => {
                Failure::Numeric(msg)
            }
            _ => Failure::Data(msg),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    Ok(match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn out_dir(cli: &Cli) -> CliResult<&Path> {
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| Failure::Config("--out DIR is required".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| {
        Failure::Data(format!("i/o error on {}: {e}", path.display()))
    })
}

fn parse_variant(s: &str) -> CliResult<ModelVariant> {
    ModelVariant::parse(s).map_err(|e| Failure::Config(e.to_string()))
}

fn cmd_gen(cli: &Cli) -> CliResult {
    let mut cfg = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.phantom.seed = s;
    }
    cfg.validate()?;
    let dir = out_dir(cli)?;
    let m = generate(&cfg, dir)?;
    println!(
        "wrote {} train and {} test items to {}",
        m.train.len(),
        m.test.len(),
        dir.display()
    );
    Ok(())
}

fn run_training<T: Real>(
    cfg: &ExperimentConfig,
    model_cfg: ModelConfig,
    ds: &Dataset,
    dir: &Path,
) -> CliResult {
    let pairs = ds.training_pairs(model_cfg.variant)?;
    let model = Model::<T>::init(model_cfg, cfg.train.seed)?;
    let name = model_cfg.variant.name();
    let outcome = train_loop(model, &pairs, &cfg.train, |step, params| {
        save_checkpoint(dir.join(format!("{name}_step{step:06}.rsbp")), params, &model_cfg)
    })?;
    save_checkpoint(dir.join(format!("{name}.rsbp")), outcome.model.params(), &model_cfg)?;
    write_text(&dir.join(format!("{name}_loss.csv")), &loss_history_csv(&outcome.history))?;
    if let Some(last) = outcome.history.last() {
        println!("{name}: {} steps, final loss {:.6}", last.step + 1, last.loss);
    }
    Ok(())
}

fn cmd_train(cli: &Cli, data: &Path, variant: Option<&str>) -> CliResult {
    let mut cfg = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let variant = match variant {
        Some(v) => parse_variant(v)?,
        None => cfg.model.variant,
    };
    let model_cfg = cfg.model_config(variant);
    cfg.train
        .validate(&model_cfg)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let ds = Dataset::open(data)?;
    ds.check_compatible(&cfg)?;
    let dir = out_dir(cli)?;
    if cli.verify {
        run_training::<f64>(&cfg, model_cfg, &ds, dir)
    } else {
        run_training::<f32>(&cfg, model_cfg, &ds, dir)
    }
}

/// A checkpoint loaded at the precision it was stored in, or promoted to
/// float64 in verification mode.
enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    fn load(path: &Path, verify: bool) -> CliResult<Self> {
        let header = read_header(path)?;
        Ok(if verify || header.dtype == DType::F64 {
            let (cfg, p) = load_checkpoint::<f64>(path)?;
            AnyModel::F64(Model::from_params(cfg, p)?)
        } else {
            let (cfg, p) = load_checkpoint::<f32>(path)?;
            AnyModel::F32(Model::from_params(cfg, p)?)
        })
    }

    fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }
}

fn setup<'a>(
    cfg: &ExperimentConfig,
    geom: &'a ViewGeometry,
    phys: &'a rsbp::physics::PhysicsConstants,
) -> EvalSetup<'a> {
    EvalSetup {
        geom,
        phys,
        noisy: cfg.physics.noise,
        margin: cfg.model_config(cfg.model.variant).margin(),
        sbp: cfg.model.sbp_options(),
        iterative: cfg.eval.iterative,
    }
}

fn cmd_reconstruct(
    cli: &Cli,
    method: &str,
    input: &Path,
    params: Option<&Path>,
    pgm: bool,
) -> CliResult {
    let cfg = load_config(cli)?;
    let method = Method::parse(method).map_err(|e| Failure::Config(e.to_string()))?;
    let sino = sinogram_from_container(&Container::read(input)?)?;
    let geom = ViewGeometry::new(sino.n_detectors(), sino.n_views())?;
    let phys = cfg.physics.constants()?;
    let s = setup(&cfg, &geom, &phys);
    let image = match (method, params) {
        (Method::Neural(v), None) => {
            return Err(Failure::Data(format!("invalid argument: {v} needs --params")))
        }
        (Method::Neural(_), Some(p)) => match AnyModel::load(p, cli.verify)? {
            AnyModel::F32(m) => reconstruct(method, &sino, &s, Some(&m))?,
            AnyModel::F64(m) => reconstruct(method, &sino, &s, Some(&m))?,
        },
        _ => reconstruct::<f64>(method, &sino, &s, None)?,
    };
    let dir = out_dir(cli)?;
    let mut c = image_container(&image);
    c.metadata["method"] = method.name().into();
    c.write(dir.join(format!("{}.rsbp", method.name())))?;
    if pgm {
        write_pgm(dir.join(format!("{}.pgm", method.name())), &image, 0.0, 2000.0)?;
    }
    println!("{}: {}x{} HU image written", method.name(), image.side(), image.side());
    Ok(())
}

fn cmd_eval(cli: &Cli, data: &Path, checkpoints: &[PathBuf]) -> CliResult {
    let cfg = load_config(cli)?;
    let ds = Dataset::open(data)?;
    ds.check_compatible(&cfg)?;
    let test = ds.phantoms(Split::Test)?;
    let mut models = Vec::new();
    for p in checkpoints {
        let m = AnyModel::load(p, cli.verify)?;
        if m.config().n_views != cfg.geometry.n_views {
            return Err(Failure::Data(format!(
                "invalid argument: checkpoint {} expects {} views, dataset has {}",
                p.display(),
                m.config().n_views,
                cfg.geometry.n_views
            )));
        }
        models.push(m);
    }
    let geom = cfg.view_geometry()?;
    let phys = cfg.physics.constants()?;
    let s = setup(&cfg, &geom, &phys);
    let mut results: Vec<MethodResult> = Vec::new();
    let mut missing = Vec::new();
    for &method in &cfg.eval.methods {
        let r = match method {
            Method::Neural(v) => match models.iter().find(|m| m.config().variant == v) {
                Some(AnyModel::F32(m)) => evaluate_method(method, &test, &s, Some(m))?,
                Some(AnyModel::F64(m)) => evaluate_method(method, &test, &s, Some(m))?,
                None => {
                    missing.push(v.name());
                    continue;
                }
            },
            _ => evaluate_method::<f64>(method, &test, &s, None)?,
        };
        results.push(r);
    }
    let dir = out_dir(cli)?;
    let table = render_table(&results);
    write_text(&dir.join("summary.csv"), &table.csv)?;
    write_text(&dir.join("summary.txt"), &table.text)?;
    write_text(&dir.join("per_image.csv"), &per_image_csv(&results))?;
    print!("{}", table.text);
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(format!(
            "no checkpoint for {}; skipped",
            missing.join(", ")
        )))
    }
}

fn cmd_inspect(files: &[PathBuf]) -> CliResult {
    if files.is_empty() {
        return Err(Failure::Config("inspect needs at least one file".into()));
    }
    for f in files {
        let h = read_header(f)?;
        println!("{}", f.display());
        println!("  version: {}", h.version);
        println!("  dtype: {:?}", h.dtype);
        println!("  dims: {:?}", h.dims);
        println!("  payload bytes: {}", h.payload_bytes);
        let meta = serde_json::to_string_pretty(&h.metadata).unwrap_or_default();
        println!("  metadata: {}", meta.replace('\n', "\n  "));
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Gen => cmd_gen(cli),
        Command::Train { data, variant } => cmd_train(cli, data, variant.as_deref()),
        Command::Reconstruct {
            method,
            input,
            params,
            pgm,
        } => cmd_reconstruct(cli, method, input, params.as_deref(), *pgm),
        Command::Eval { data, checkpoints } => cmd_eval(cli, data, checkpoints),
        Command::Inspect { files } => cmd_inspect(files),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
