//! `attribpaint`: train, infer and eval front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attribpaint_core::archive::Archive;
use attribpaint_core::config::{self, RunConfig, CONFIG_ENV};
use attribpaint_core::data::{self, Dataset};
use attribpaint_core::evaluation::{self, DEFAULT_SPLITS};
use attribpaint_core::training::{self, RunDir, TrainState};
use attribpaint_core::{AttributeSchema, AttributeSet, Axis, ConditionBatch, Error, ImageTensor, Mode, SeededRng};
use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};

#[derive(Parser)]
#[command(name = "attribpaint", version, about = "Attribute-conditioned painting translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config and a data root.
    Train(TrainArgs),
    /// Stylize content images with a trained checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint with a judge classifier.
    Eval(EvalArgs),
    /// Write the synthetic fixture dataset.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config (default: $ATTRIBPAINT_CONFIG, else built-in defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory (default: the resumed checkpoint's directory, else `run`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed of a fresh run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires_all = ["period", "genre"], conflicts_with = "condition_vector")]
    artist: Option<String>,
    #[arg(long, requires = "artist")]
    period: Option<String>,
    #[arg(long, requires = "artist")]
    genre: Option<String>,
    /// Raw comma-separated condition of length N_a + N_p + N_g.
    #[arg(long, allow_hyphen_values = true)]
    condition_vector: Option<String>,
    /// Also write a contact sheet over every attribute combination.
    #[arg(long)]
    grid: bool,
    /// Content images.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated axes to score.
    #[arg(long, default_value = "artist", value_delimiter = ',')]
    axes: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_SPLITS)]
    splits: usize,
    /// Judge seed (default: the checkpoint's run seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
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
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) => match e {
                Error::ConfigParse(_)
                | Error::ConfigInvalid(_)
                | Error::UnknownLabel { .. }
                | Error::Shape(_)
                | Error::Precondition(_) => 1,
                Error::NonFinite { .. } => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fixture(a) => data::fixture::write_fixture(&a.out, a.seed).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn load_run_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    match path.map(Path::to_path_buf).or(env) {
        Some(p) => Ok(config::load_config(&p)?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let (state, out) = match &a.resume {
        Some(ckpt) => {
            let state = TrainState::restore(ckpt)?;
            let out = a
                .out
                .clone()
                .unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
            (state, out)
        }
        None => {
            let mut cfg = load_run_config(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            // the schema comes from the data; state creation waits for it
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            let data = Dataset::load(&a.data_root, cfg.image_size, cfg.hflip)?;
            let state = TrainState::new(&cfg, &data.schema)?;
            return run_fit(state, &data, &out);
        }
    };
    if state.step >= state.config.total_steps {
        log::info!(
            "checkpoint is already at step {} of {}; nothing to do",
            state.step,
            state.config.total_steps
        );
        return Ok(());
    }
    let data = Dataset::load(&a.data_root, state.config.image_size, state.config.hflip)?;
    state.schema.ensure_matches(&data.schema)?;
    run_fit(state, &data, &out)
}

fn run_fit(state: TrainState, data: &Dataset, out: &Path) -> CliResult {
    let dir = RunDir::new(out)?;
    let total = state.config.total_steps;
    let every = (total / 20).max(1);
    let start = std::time::Instant::now();
    let state = training::fit_with(state, data, Some(&dir), |step, r| {
        if step % every == 0 || step == total {
            log::info!(
                "step {step}/{total}: full_g {:.4} full_d {:.4} rec {:.4} ({:.1}s)",
                r.full_g,
                r.full_d,
                r.rec,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    log::info!("finished at step {}; checkpoint {}", state.step, dir.checkpoint().display());
    Ok(())
}

fn to_rgb(img: &ImageTensor, index: usize) -> RgbImage {
    let (_, _, h, w) = img.dims();
    let d = img.tensor().data();
    let base = index * 3 * h * w;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (((d[base + c * h * w + p] + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn save_png(img: &RgbImage, path: &Path) -> CliResult {
    img.save(path).map_err(|e| {
        Failure::Core(Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    })
}

fn condition_from_labels(schema: &AttributeSchema, labels: [&str; 3]) -> std::result::Result<(AttributeSet, String), Failure> {
    let mut idx = [0; 3];
    for axis in Axis::ALL {
        idx[axis.index()] = schema.index_of(axis, labels[axis.index()])?;
    }
    let set = AttributeSet::from_indices(
        idx,
        schema,
        Mode::Test,
        &config::GenrePerturbationParams::disabled(),
        &mut SeededRng::new(0),
    )?;
    Ok((set, labels.join("_")))
}

fn parse_vector(text: &str) -> std::result::Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("--condition-vector: {s:?} is not a number")))
        })
        .collect()
}

/// Suffix naming a raw vector by its largest entry per axis.
fn vector_suffix(schema: &AttributeSchema, v: &[f64]) -> String {
    let mut start = 0;
    let parts: Vec<String> = Axis::ALL
        .iter()
        .map(|&axis| {
            let n = schema.size(axis);
            let seg = &v[start..start + n];
            start += n;
            let best = (0..n).fold(0, |b, i| if seg[i] > seg[b] { i } else { b });
            schema.labels(axis)[best].clone()
        })
        .collect();
    format!("mix_{}", parts.join("_"))
}

fn cmd_infer(a: InferArgs) -> CliResult {
    let state = TrainState::restore(&a.checkpoint)?;
    let schema = &state.schema;
    let size = state.config.image_size;
    let generator = &state.nets.gen_forward;
    let (cond, suffix) = match (&a.artist, &a.condition_vector) {
        (Some(artist), _) => {
            let (set, suffix) = condition_from_labels(
                schema,
                [artist, a.period.as_deref().unwrap_or_default(), a.genre.as_deref().unwrap_or_default()],
            )?;
            (Some(ConditionBatch::from_sets(&[set])), suffix)
        }
        (None, Some(text)) => {
            let v = parse_vector(text)?;
            let batch = ConditionBatch::from_raw(std::slice::from_ref(&v), schema)?;
            (Some(batch), vector_suffix(schema, &v))
        }
        (None, None) if a.grid => (None, String::new()),
        (None, None) => {
            return Err(Failure::Usage(
                "give --artist/--period/--genre, --condition-vector or --grid".into(),
            ))
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    for input in &a.inputs {
        let x = data::preprocess(input, size)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        if let Some(cond) = &cond {
            let y = generator.generate(&x, cond)?;
            let path = a.out.join(format!("{stem}__{suffix}.png"));
            save_png(&to_rgb(&y, 0), &path)?;
            log::info!("wrote {}", path.display());
        }
        if a.grid {
            let path = a.out.join(format!("{stem}__grid.png"));
            save_png(&contact_sheet(&state, &x)?, &path)?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Rows: artist x period; columns: genre.
fn contact_sheet(state: &TrainState, x: &ImageTensor) -> std::result::Result<RgbImage, Failure> {
    let s = &state.schema;
    let [na, np, ng] = s.sizes();
    let size = state.config.image_size as u32;
    let mut sheet = RgbImage::new(size * ng as u32, size * (na * np) as u32);
    for a in 0..na {
        for p in 0..np {
            for g in 0..ng {
                let set = AttributeSet::from_indices(
                    [a, p, g],
                    s,
                    Mode::Test,
                    &config::GenrePerturbationParams::disabled(),
                    &mut SeededRng::new(0),
                )?;
                let y = state.nets.gen_forward.generate(x, &ConditionBatch::from_sets(&[set]))?;
                let tile = to_rgb(&y, 0);
                let row = (a * np + p) as u32;
                image::imageops::replace(&mut sheet, &tile, (g as u32 * size) as i64, (row * size) as i64);
            }
        }
    }
    Ok(sheet)
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let axes = a
        .axes
        .iter()
        .map(|s| Axis::parse(s.trim()))
        .collect::<attribpaint_core::Result<Vec<_>>>()?;
    if axes.is_empty() {
        return Err(Failure::Usage("--axes needs at least one axis".into()));
    }
    let archive = Archive::read(&a.checkpoint)?;
    let checkpoint_id = archive.id().to_string();
    let state = TrainState::from_archive(&archive)?;
    let data = Dataset::load(&a.data_root, state.config.image_size, false)?;
    state.schema.ensure_matches(&data.schema)?;
    let seed = a.seed.unwrap_or(state.config.seed);
    log::info!("training judge ({} steps)", state.config.judge.steps);
    let judge = evaluation::train_judge(&data, &state.config.judge, &axes, &mut SeededRng::new(seed))?;
    let report = evaluation::evaluate(&state.nets.gen_forward, &data, &judge, &axes, a.splits, &checkpoint_id)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let path = a.out.join("eval_report.jsonl");
    report.write(&path)?;
    for m in &report.metrics {
        log::info!("{} {} [{}] = {:.4}", m.metric, m.axis, m.direction, m.value);
    }
    log::info!("wrote {}", path.display());
    Ok(())
}
