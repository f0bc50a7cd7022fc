//! `lwe` command line. Exit status: 0 success, 1 runtime failure, 2 usage
//! error.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use lwe_core::dataset::{
    build_pairs, cluster, encode_jpeg, histograms, load_image_dir, write_atomic, BuildConfig, ClusterModel,
    DatasetManifest, DegradeRanges,
};
use lwe_core::metrics::{evaluate_pair, MetricReport};
use lwe_core::retouch::retouch;
use lwe_core::{io, ImageF, RetouchCoefficients};
use lwe_net::train::{train_stage1, train_stage2, TrainConfig};
use lwe_net::{enhance, interactive_enhance, EnhanceModel, EnhanceParams};

use crate::error::{Error, Result};
use crate::server::{self, AppState, DEFAULT_MAX_PIXELS};
use crate::workdir::load_coefficient_source;

#[derive(Debug, Parser)]
#[command(name = "lwe", version, about = "Light-weight enhancement of low-light and non-uniformly lit images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance one image with the network.
    Enhance(EnhanceArgs),
    /// Apply the classical retouching pipeline with given coefficients.
    Retouch(RetouchArgs),
    /// Cluster source images and render training pairs.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one stage of the network on a dataset manifest.
    Train(TrainArgs),
    /// Enhance every input of a manifest and score it against its target.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

fn unit_interval(s: &str) -> std::result::Result<f32, String> {
    let v: f32 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside the valid range [0,1]"))
    }
}

fn range<T: std::str::FromStr + Copy>(s: &str) -> std::result::Result<(T, T), String> {
    let parse = |p: &str| p.trim().parse::<T>().map_err(|_| format!("{p:?} is not a valid number"));
    match s.split_once(',') {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

fn size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("{s:?} is not HEIGHTxWIDTH"))?;
    let parse = |p: &str| p.parse::<usize>().map_err(|_| format!("{s:?} is not HEIGHTxWIDTH"));
    Ok((parse(h)?, parse(w)?))
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Weights file; the built-in weights when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Under-exposure correction strength.
    #[arg(long, value_parser = unit_interval)]
    pub g1: Option<f32>,
    /// Over-exposure correction strength.
    #[arg(long, value_parser = unit_interval)]
    pub g2: Option<f32>,
    /// Noise removal strength.
    #[arg(long, value_parser = unit_interval)]
    pub g3: Option<f32>,
}

#[derive(Debug, Args)]
pub struct RetouchArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// JSON coefficient object.
    #[arg(long)]
    pub coeffs: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// k-means over luminance histograms.
    Cluster {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render retouched targets and degraded inputs plus a manifest.
    Build(BuildArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Cluster model written by `dataset cluster`.
    #[arg(long)]
    pub clusters: PathBuf,
    /// Directory of `<cluster>.json` files, a JSON map keyed by cluster id,
    /// or one coefficient object for every cluster.
    #[arg(long)]
    pub coeffs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Signal-dependent noise range `LO,HI`.
    #[arg(long, value_parser = range::<f32>)]
    pub sigma_s: Option<(f32, f32)>,
    /// Signal-independent noise range `LO,HI`.
    #[arg(long, value_parser = range::<f32>)]
    pub sigma_c: Option<(f32, f32)>,
    /// JPEG quality range `LO,HI`.
    #[arg(long, value_parser = range::<u8>)]
    pub jpeg_q: Option<(u8, u8)>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub variants: usize,
    /// Random crop `HEIGHTxWIDTH` before retouching.
    #[arg(long, value_parser = size)]
    pub crop: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Starting weights; required for stage 2, fresh weights for stage 1.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Optimizer steps; overrides --epochs.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_augment: bool,
    /// Adds the perceptual term.
    #[arg(long)]
    pub perceptual: bool,
    /// Also write the training report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Overridden by the LWE_WORKDIR environment variable.
    #[arg(long, default_value = ".")]
    pub workdir: PathBuf,
    /// Largest accepted image, in pixels.
    #[arg(long, default_value_t = DEFAULT_MAX_PIXELS)]
    pub max_pixels: usize,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Enhance(a) => cmd_enhance(a),
        Command::Retouch(a) => cmd_retouch(a),
        Command::Dataset(DatasetCommand::Cluster { input, k, seed, out }) => cmd_cluster(&input, k, seed, &out),
        Command::Dataset(DatasetCommand::Build(a)) => cmd_build(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn load(path: &Path) -> Result<ImageF> {
    io::load_image(path).map_err(|e| Error::other(format!("cannot read {}: {e}", path.display())))
}

/// JPEG for `.jpg`/`.jpeg` outputs, PNG otherwise.
fn save(img: &ImageF, path: &Path) -> Result<()> {
    let jpeg = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg"));
    let bytes = if jpeg { encode_jpeg(img, 95)? } else { io::encode_png(img)? };
    std::fs::write(path, bytes).map_err(|e| Error::other(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::other(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::other(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs) -> Result<()> {
    let model = crate::load_model(a.weights.as_deref())?;
    let img = load(&a.input)?;
    let out = if a.g1.is_none() && a.g2.is_none() && a.g3.is_none() {
        enhance(&img, &model)?.0
    } else {
        let params = EnhanceParams {
            gamma1: a.g1.unwrap_or(1.0),
            gamma2: a.g2.unwrap_or(1.0),
            gamma3: a.g3.unwrap_or(1.0),
        };
        interactive_enhance(&img, &model, params)?
    };
    save(&out, &a.output)
}

fn cmd_retouch(a: RetouchArgs) -> Result<()> {
    let coeffs: RetouchCoefficients = read_json(&a.coeffs)?;
    coeffs.validate()?;
    let img = load(&a.input)?;
    save(&retouch(&img, &coeffs)?, &a.output)
}

fn cmd_cluster(input: &Path, k: usize, seed: u64, out: &Path) -> Result<()> {
    let images = load_image_dir(input)?;
    if k == 0 || k > images.len() {
        return Err(Error::usage(format!("--k must be in [1, {}] for {} images", images.len(), images.len())));
    }
    let mut model = cluster(&histograms(&images)?, k, seed)?;
    let dir = std::fs::canonicalize(input)?;
    model.source_dir = Some(dir.to_string_lossy().into_owned());
    write_json(&model, out)?;
    let sizes: Vec<String> = model.sizes().iter().map(|s| s.to_string()).collect();
    println!("{} images in {k} clusters (sizes {})", images.len(), sizes.join(", "));
    Ok(())
}

fn cmd_build(a: BuildArgs) -> Result<()> {
    let model: ClusterModel = read_json(&a.clusters)?;
    let d = DegradeRanges::default();
    let degrade = DegradeRanges {
        sigma_s: a.sigma_s.unwrap_or(d.sigma_s),
        sigma_c: a.sigma_c.unwrap_or(d.sigma_c),
        jpeg_quality: a.jpeg_q.unwrap_or(d.jpeg_quality),
        seed: a.seed,
    };
    degrade.validate().map_err(|e| Error::usage(e.to_string()))?;
    if a.variants == 0 {
        return Err(Error::usage("--variants must be at least 1"));
    }
    let coeffs = load_coefficient_source(&a.coeffs, model.k)?;
    let images = load_image_dir(&a.input)?;
    let cfg = BuildConfig {
        degrade,
        variants_per_image: a.variants,
        crop: a.crop,
    };
    let manifest = build_pairs(&images, &model, &coeffs, &cfg, &a.out)?;
    println!("{} pairs written to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let d = TrainConfig::default();
    let mut cfg = TrainConfig {
        iterations: a.iterations,
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        patch: a.patch.unwrap_or(d.patch),
        augment: !a.no_augment,
        perceptual: a.perceptual,
        seed: a.seed,
        ..d
    };
    if let Some(lr) = a.lr {
        cfg.adam.alpha = lr;
    }
    cfg.validate().map_err(|e| Error::usage(e.to_string()))?;
    let model = match (&a.init, a.stage) {
        (Some(p), _) => crate::load_model(Some(p))?,
        (None, 1) => EnhanceModel::new(a.seed)?,
        (None, _) => return Err(Error::usage("stage 2 needs --init with stage-1 weights")),
    };
    let manifest = DatasetManifest::load(&a.manifest)
        .map_err(|e| Error::other(format!("cannot load manifest {}: {e}", a.manifest.display())))?;
    let pairs = manifest.load_pairs(manifest_dir(&a.manifest))?;
    let (trained, mut report) = match a.stage {
        1 => train_stage1(&pairs, model, &cfg)?,
        _ => train_stage2(&pairs, model, &cfg)?,
    };
    trained.save(&a.out)?;
    report.weights_path = Some(a.out.to_string_lossy().into_owned());
    println!(
        "stage {}: {} iterations, loss {:.4} -> {:.4}",
        report.stage, report.iterations, report.initial_loss, report.final_loss
    );
    if let Some(p) = &a.report {
        write_json(&report, p)?;
    }
    Ok(())
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = crate::load_model(a.weights.as_deref())?;
    let manifest = DatasetManifest::load(&a.manifest)
        .map_err(|e| Error::other(format!("cannot load manifest {}: {e}", a.manifest.display())))?;
    let pairs = manifest.load_pairs(manifest_dir(&a.manifest))?;
    let entries = manifest
        .entries
        .iter()
        .zip(&pairs)
        .map(|(e, (input, target))| {
            let (out, _) = enhance(input, &model)?;
            Ok(evaluate_pair(input, &out, target, &e.input_path, &e.target_path)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_entries(entries);
    write_json(&report, &a.out)?;
    println!(
        "{} pairs: PSNR {:.2} dB, SSIM {:.4}, LOE {:.1}",
        report.entries.len(),
        report.mean_psnr,
        report.mean_ssim,
        report.mean_loe
    );
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let workdir = std::env::var_os("LWE_WORKDIR").map(PathBuf::from).unwrap_or(a.workdir);
    let model = crate::load_model(a.weights.as_deref())?;
    let state = Arc::new(AppState::new(&workdir, model, a.max_pixels)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| Error::usage(format!("bad address {}:{}", a.host, a.port)))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("listening on http://{} (workdir {})", listener.local_addr()?, workdir.display());
        server::serve(listener, state).await
    })?;
    Ok(())
}
