use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use weatherdiff::diffusion::SamplingStrategy;
use weatherdiff::embedding::{FrozenEncoders, PromptBank, DEFAULT_ENCODER_SEED, DEFAULT_TOKENS, DEFAULT_WIDTH};
use weatherdiff::evalkit::{restore_image, write_scores_csv, EvalOptions};
use weatherdiff::img::RgbImage;
use weatherdiff::pipeline::{encode_bank, evaluate_model, load_for_inference, Stage2Config, Trainer};
use weatherdiff::prompt_trainer::{accuracy, train_prompts, Stage1Config};
use weatherdiff::weathergen::{make_dataset, DatasetManifest, PairImages, Split};
use weatherdiff::{selfcheck, Error, Precision};

const DATA_ENV: &str = "WEATHERDIFF_DATA";

#[derive(Parser)]
#[command(name = "weatherdiff", version, about = "All-in-one adverse weather restoration with residual diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic rain/haze/snow dataset.
    GenData(GenData),
    /// Stage 1: align one prompt per weather class.
    TrainPrompts(TrainPrompts),
    /// Stage 2: train the restorer.
    Train(Box<Train>),
    /// Restore a single image.
    Restore(Restore),
    /// Score a checkpoint on a dataset split.
    Eval(Eval),
    /// Run the analytic invariant suite.
    Selfcheck,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each class placed in the test split.
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

#[derive(Args)]
struct TrainPrompts {
    /// Dataset root; falls back to $WEATHERDIFF_DATA.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long, default_value_t = 8000)]
    iters: usize,
    #[arg(long, default_value_t = 5e-6)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Side length images are resized to before encoding.
    #[arg(long, default_value_t = 224)]
    image_size: usize,
    /// Divides the cosine logits.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the frozen encoders.
    #[arg(long, default_value_t = DEFAULT_ENCODER_SEED)]
    encoder_seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOKENS)]
    tokens: usize,
    #[arg(long, default_value_t = DEFAULT_WIDTH)]
    width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Component {
    Wpg,
    Desm,
    Balance,
}

#[derive(Args)]
struct Train {
    /// Dataset root; falls back to $WEATHERDIFF_DATA.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    /// Stage-1 prompt bank; required unless WPG is ablated.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// TOML file with stage-2 settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint. Only --iters may change.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    /// [default: 8e-5]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 6]
    #[arg(long)]
    batch: Option<usize>,
    /// Load-balance weight. [default: 0.01]
    #[arg(long)]
    lambda: Option<f64>,
    /// [default: 4]
    #[arg(long)]
    n_experts: Option<usize>,
    /// Top(P) routing threshold. [default: 0.4]
    #[arg(long)]
    p: Option<f64>,
    /// EMA decay. [default: 0.995]
    #[arg(long)]
    ema: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Components to switch off.
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<Component>,
    /// JSON-lines training log; defaults to stdout.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct Restore {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value = "noise_projected")]
    strategy: SamplingStrategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample with the raw weights instead of the EMA shadow.
    #[arg(long)]
    raw_weights: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    /// Dataset root; falls back to $WEATHERDIFF_DATA.
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// JSON report path; the summary is printed either way.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-image scores.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value = "noise_projected")]
    strategy: SamplingStrategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    raw_weights: bool,
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainPrompts(a) => run_train_prompts(a),
        Command::Train(a) => run_train(*a),
        Command::Restore(a) => run_restore(a),
        Command::Eval(a) => run_eval(a),
        Command::Selfcheck => run_selfcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn print_resolved(pairs: &[(&str, String)]) {
    println!("# resolved config");
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn gen_data(a: GenData) -> CliResult {
    print_resolved(&[
        ("out", format!("{:?}", a.out)),
        ("per_class", a.per_class.to_string()),
        ("size", a.size.to_string()),
        ("seed", a.seed.to_string()),
        ("test_fraction", a.test_fraction.to_string()),
    ]);
    let m = make_dataset(&a.out, a.per_class, a.size, a.seed, a.test_fraction)?;
    let test = m.split(Split::Test).count();
    println!("wrote {} pairs ({} train, {} test) to {}", m.records.len(), m.records.len() - test, test, a.out.display());
    Ok(())
}

fn open_split(root: &Path, split: Split) -> weatherdiff::Result<Vec<(String, PairImages)>> {
    let m = DatasetManifest::open(root)?;
    m.split(split)
        .map(|r| Ok((format!("{:05}", r.id), m.load_pair(r)?)))
        .collect()
}

fn run_train_prompts(a: TrainPrompts) -> CliResult {
    let cfg = Stage1Config {
        iterations: a.iters,
        lr: a.lr,
        batch_size: a.batch,
        image_size: a.image_size,
        seed: a.seed,
        temperature: a.temperature,
        ..Stage1Config::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    println!("# resolved config");
    print!("{}", toml::to_string(&cfg).map_err(|e| Failure::Runtime(Error::Config(e.to_string())))?);
    println!("data = {:?}\nencoder_seed = {}\ntokens = {}\nwidth = {}", a.data, a.encoder_seed, a.tokens, a.width);
    let dtype = Precision::F32.dtype();
    let manifest = DatasetManifest::open(&a.data)?;
    let train = manifest.load_split(Split::Train)?;
    let test = manifest.load_split(Split::Test)?;
    let enc = FrozenEncoders::new(a.encoder_seed, a.tokens, a.width, dtype)?;
    let bank = PromptBank::init(a.seed, a.tokens, a.width, dtype)?.with_encoder_seed(a.encoder_seed);
    let outcome = train_prompts(&cfg, &enc, &bank, &train)?;
    for r in &outcome.log {
        println!("{}", serde_json::to_string(r).map_err(|e| Failure::Runtime(Error::Data(e.to_string())))?);
    }
    let train_acc = accuracy(&enc, &outcome.bank, &train, cfg.image_size)?;
    println!("train accuracy {train_acc:.4}");
    if !test.is_empty() {
        let test_acc = accuracy(&enc, &outcome.bank, &test, cfg.image_size)?;
        println!("held-out accuracy {test_acc:.4} over {} images", test.len());
    }
    outcome.bank.save(&a.out)?;
    println!("saved prompts to {}", a.out.display());
    Ok(())
}

fn resolve_stage2(a: &Train) -> std::result::Result<Stage2Config, Failure> {
    let mut cfg = match &a.config {
        Some(p) => Stage2Config::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => Stage2Config::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    set!(a.iters, iterations);
    set!(a.lr, lr);
    set!(a.batch, batch_size);
    set!(a.lambda, lambda_balance);
    set!(a.n_experts, n_experts);
    set!(a.p, threshold);
    set!(a.ema, ema_decay);
    set!(a.base_channels, base_channels);
    set!(a.crop, crop_size);
    set!(a.seed, seed);
    if let Some(p) = a.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    for c in &a.ablate {
        match c {
            Component::Wpg => cfg.wpg_on = false,
            Component::Desm => {
                cfg.desm_on = false;
                cfg.balance_on = false;
            }
            Component::Balance => cfg.balance_on = false,
        }
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run_train(a: Train) -> CliResult {
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let overrides = a.lr.is_some()
                || a.batch.is_some()
                || a.lambda.is_some()
                || a.n_experts.is_some()
                || a.p.is_some()
                || a.ema.is_some()
                || a.base_channels.is_some()
                || a.crop.is_some()
                || a.seed.is_some()
                || a.precision.is_some()
                || a.prompts.is_some()
                || !a.ablate.is_empty();
            if overrides {
                return Err(Failure::Usage("--resume only accepts --iters, --data, --log and --out".into()));
            }
            let mut t = Trainer::load(ckpt)?;
            if let Some(n) = a.iters {
                t.set_iterations(n);
            }
            t
        }
        None => {
            let cfg = resolve_stage2(&a)?;
            let bank = match (&a.prompts, cfg.wpg_on) {
                (Some(p), true) => Some(PromptBank::load(p, cfg.precision.dtype())?),
                (None, true) => return Err(Failure::Usage("--prompts is required unless --ablate wpg".into())),
                (_, false) => None,
            };
            let prompts = bank.as_ref().map(|b| encode_bank(b, cfg.precision.dtype())).transpose()?;
            Trainer::new(&cfg, prompts, bank)?
        }
    };
    println!("# resolved config");
    print!("{}", trainer.config().to_toml()?);
    println!("# start step {}, {} parameters", trainer.step(), trainer.model().params().num_elements());
    let data = DatasetManifest::open(&a.data)?.load_split(Split::Train)?;
    match &a.log {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            trainer.run(&data, Some(&mut w))?;
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            trainer.run(&data, Some(&mut out))?;
        }
    }
    trainer.save(&a.out)?;
    println!("saved checkpoint at step {} to {}", trainer.step(), a.out.display());
    Ok(())
}

fn run_restore(a: Restore) -> CliResult {
    print_resolved(&[
        ("model", format!("{:?}", a.model)),
        ("input", format!("{:?}", a.input)),
        ("steps", a.steps.to_string()),
        ("strategy", format!("{:?}", a.strategy)),
        ("seed", a.seed.to_string()),
        ("weights", if a.raw_weights { "raw" } else { "ema" }.to_string()),
    ]);
    if a.steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    let degraded = RgbImage::load(&a.input)?;
    let loaded = load_for_inference(&a.model, !a.raw_weights)?;
    let opts = EvalOptions {
        steps: a.steps,
        strategy: a.strategy,
        seed: a.seed,
        dtype: loaded.model.dtype(),
    };
    let mut predictor = loaded.predictor();
    let restored = restore_image(&mut predictor, &loaded.schedule, &degraded, &opts, a.seed)?;
    restored.save_png(&a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn run_eval(a: Eval) -> CliResult {
    print_resolved(&[
        ("model", format!("{:?}", a.model)),
        ("data", format!("{:?}", a.data)),
        ("split", format!("{:?}", a.split)),
        ("steps", a.steps.to_string()),
        ("strategy", format!("{:?}", a.strategy)),
        ("seed", a.seed.to_string()),
        ("weights", if a.raw_weights { "raw" } else { "ema" }.to_string()),
    ]);
    if a.steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    let loaded = load_for_inference(&a.model, !a.raw_weights)?;
    let samples = open_split(&a.data, a.split)?;
    let opts = EvalOptions {
        steps: a.steps,
        strategy: a.strategy,
        seed: a.seed,
        ..EvalOptions::default()
    };
    let (scores, report) = evaluate_model(&loaded, &samples, &opts)?;
    let o = &report.overall;
    println!(
        "{} images  PSNR {:.3} -> {:.3} ({:+.3} dB)  SSIM {:.4} -> {:.4} ({:+.4})",
        o.count, o.psnr_input, o.psnr_restored, o.psnr_delta, o.ssim_input, o.ssim_restored, o.ssim_delta
    );
    for (w, g) in &report.per_class {
        if let Some(g) = g {
            println!("  {w:<5} {:>3} images  PSNR {:+.3} dB  SSIM {:+.4}", g.count, g.psnr_delta, g.ssim_delta);
        }
    }
    if let Some(p) = &a.report {
        report.write(p)?;
    }
    if let Some(p) = &a.csv {
        write_scores_csv(p, &scores)?;
    }
    Ok(())
}

fn run_selfcheck() -> CliResult {
    let results = selfcheck::run_all();
    print!("{}", selfcheck::render_table(&results));
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(Failure::Invariant(format!("{}: {}", r.name, r.detail))),
        None => Ok(()),
    }
}
