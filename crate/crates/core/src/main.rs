use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ilrnet::diagnostics::{run_suite, self_test, Suite};
use ilrnet::io::{import_raw, read_cube, read_dataset, write_cube, Dtype};
use ilrnet::metrics::MetricReport;
use ilrnet::network::{checkpoint, Ilrnet, NetworkConfig};
use ilrnet::noise::{self, NoiseKind, NoiseSpec};
use ilrnet::trainer::{train, TrainConfig};
use ilrnet::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "ilrnet", version, about = "Hyperspectral image denoising with learned low-rank thresholding and refinement")]
struct Cli {
    /// Worker threads; 1 is the reproducibility baseline.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a clean cube with synthetic noise.
    AddNoise(AddNoiseArgs),
    /// Denoise a cube with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Train a network on a directory of clean `.hsi` cubes.
    Train(TrainArgs),
    /// Print PSNR, SSIM and SAM of a prediction against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Run the finite-difference gradient suites.
    GradCheck {
        /// Run a single suite instead of all of them.
        #[arg(long)]
        module: Option<String>,
        /// Overrides the suite default (1e-4 for modules, 1e-3 end to end).
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Wavelet reconstruction, SVT oracle and metric identities.
    SelfTest,
    /// Wrap a headerless band-major little-endian file as an `.hsi` cube.
    ImportRaw {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bands: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: RawDtype,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RawDtype {
    F32,
    F64,
}

#[derive(Args)]
struct AddNoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// noniid (default), mixture or corr.
    #[arg(long)]
    kind: Option<String>,
    /// Key-value noise config; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sigma_lo: Option<f64>,
    #[arg(long)]
    sigma_hi: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Refinement steps; defaults to the number the checkpoint holds.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Standard,
    Micro,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    noise_config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    /// Patch extents as BANDSxHEIGHTxWIDTH.
    #[arg(long)]
    patch: Option<String>,
    /// Refinement steps in the network.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum, default_value = "standard")]
    arch: Arch,
    /// Fusion-weight window size.
    #[arg(long)]
    window: Option<usize>,
    /// Append the per-epoch TSV log here instead of printing it.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_patch(s: &str) -> ilrnet::Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(['x', ','])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::invalid(format!("bad patch shape {s:?}, expected BxHxW")))?;
    <[usize; 3]>::try_from(parts).map_err(|_| Error::invalid(format!("bad patch shape {s:?}, expected BxHxW")))
}

fn add_noise(a: AddNoiseArgs) -> ilrnet::Result<()> {
    let mut spec = match &a.config {
        Some(p) => NoiseSpec::parse_config(&std::fs::read_to_string(p)?)?,
        None => NoiseSpec::default(),
    };
    if let Some(k) = &a.kind {
        spec.kind = k.parse::<NoiseKind>()?;
    }
    if let Some(v) = a.sigma_lo {
        spec.sigma_lo = v;
    }
    if let Some(v) = a.sigma_hi {
        spec.sigma_hi = v;
    }
    if let Some(v) = a.beta {
        spec.beta = v;
    }
    if let Some(v) = a.eta {
        spec.eta = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    spec.validate()?;
    let clean = read_cube(&a.input)?;
    write_cube(&a.out, &noise::apply(&clean, &spec)?)
}

fn denoise(a: DenoiseArgs) -> ilrnet::Result<()> {
    let net = checkpoint::load(&a.checkpoint)?;
    let noisy = read_cube(&a.input)?;
    let k = a.iterations.unwrap_or(net.iterations());
    let (out, _) = net.forward(&noisy, k)?;
    write_cube(&a.out, &out)
}

fn train_cmd(a: TrainArgs) -> ilrnet::Result<()> {
    let spec = NoiseSpec::parse_config(&std::fs::read_to_string(&a.noise_config)?)?;
    let data = read_dataset(&a.data_dir)?;
    let mut cfg = TrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(p) = &a.patch {
        cfg.patch_shape = parse_patch(p)?;
    }
    let mut net_cfg = match a.arch {
        Arch::Standard => NetworkConfig::standard(),
        Arch::Micro => NetworkConfig::micro(3),
    };
    if let Some(k) = a.iterations {
        net_cfg.iterations = k;
    }
    if let Some(w) = a.window {
        net_cfg.lambda.window = w;
    }
    cfg.iterations_k = net_cfg.iterations;
    let mut net = Ilrnet::init(&net_cfg, a.seed)?;

    let mut sink: Box<dyn std::io::Write> = match &a.log {
        Some(p) => Box::new(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut write_err = None;
    train(&mut net, &data, &spec, &cfg, |line| {
        if let Err(e) = writeln!(sink, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    checkpoint::save(&net, &a.out_checkpoint)
}

fn eval(pred: &Path, reference: &Path) -> ilrnet::Result<()> {
    let report = MetricReport::evaluate(&read_cube(pred)?, &read_cube(reference)?)?;
    println!("{report}");
    Ok(())
}

/// Returns whether every check passed.
fn grad_check(module: Option<String>, tolerance: Option<f64>) -> ilrnet::Result<bool> {
    let suites = match module {
        Some(m) => vec![m.parse::<Suite>()?],
        None => Suite::ALL.to_vec(),
    };
    let mut all = true;
    for suite in suites {
        for res in run_suite(suite, tolerance)? {
            eprintln!("[{suite}] {res}");
            all &= res.passed();
        }
    }
    Ok(all)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numerical() => EXIT_NUMERICAL,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> ilrnet::Result<u8> {
    match cli.command {
        Command::AddNoise(a) => add_noise(a)?,
        Command::Denoise(a) => denoise(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval { pred, reference } => eval(&pred, &reference)?,
        Command::GradCheck { module, tolerance } => {
            if !grad_check(module, tolerance)? {
                eprintln!("gradient check failed");
                return Ok(EXIT_NUMERICAL);
            }
        }
        Command::SelfTest => {
            let checks = self_test()?;
            checks.iter().for_each(|c| eprintln!("{c}"));
            if checks.iter().any(|c| !c.passed) {
                return Ok(EXIT_NUMERICAL);
            }
        }
        Command::ImportRaw {
            input,
            out,
            bands,
            height,
            width,
            dtype,
        } => {
            let dtype = match dtype {
                RawDtype::F32 => Dtype::F32,
                RawDtype::F64 => Dtype::F64,
            };
            write_cube(&out, &import_raw(&input, [bands, height, width], dtype)?)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
