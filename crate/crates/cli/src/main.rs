use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scan_core::analysis::{
    analyze_layer, filters_csv, histogram_csv, scale_histogram, truncation_csv, truncation_report, XPassClass,
    DEFAULT_BIN_WIDTH,
};
use scan_core::config::RunConfig;
use scan_core::data::{blur_split, Blur, DatasetSpec};
use scan_core::model_io::{load_model, round_to_f32, save_model};
use scan_core::network::{NetworkForm, SacNetwork};
use scan_core::sac::{sac_forward, SacPath};
use scan_core::scale_space::{empirical_scale_peak, scale_response_curve, ScaleOracleSpec};
use scan_core::train::{evaluate, train_with, Evaluation};
use scan_core::{DenseArray, FloatWidth};

/// Scale-attention convolution networks: training, evaluation and diagnostics.
#[derive(Parser)]
#[command(name = "scan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a config file and write the model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Suppress per-epoch progress.
        #[arg(long)]
        quiet: bool,
    },
    /// Accuracy of a model on a dataset's test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Config file whose dataset.* keys describe the data.
        #[arg(long)]
        dataset: PathBuf,
        /// Blur every test image with g(.; T) first.
        #[arg(long, value_name = "T")]
        blur: Option<f64>,
        #[command(flatten)]
        width: WidthArg,
    },
    /// Clean and blurred accuracy of two models side by side.
    BlurBench {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        /// Config file with dataset.* keys; blur range defaults to [1, 4].
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        width: WidthArg,
    },
    /// Fold a scale-attention model into a plain 3x3 conv model.
    Absorb {
        #[arg(long)]
        model_in: PathBuf,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Diagnostics over a scale-attention model.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Normalized-derivative scale selection on a sinusoid.
    Oracle {
        #[command(subcommand)]
        what: Oracle,
    },
}

#[derive(Args)]
struct WidthArg {
    /// Run inference in 32-bit floats.
    #[arg(long)]
    f32: bool,
}

impl WidthArg {
    fn width(&self) -> FloatWidth {
        if self.f32 {
            FloatWidth::F32
        } else {
            FloatWidth::F64
        }
    }
}

#[derive(Subcommand)]
enum Analyze {
    /// Histogram of the learnt scales t per layer.
    Hist {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
        bin_width: f64,
    },
    /// Deconvolve k by k_i and classify each filter's x-pass response.
    Filters {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaussian mass lost to the fixed 5x5 window, per filter.
    Truncation {
        #[arg(long)]
        model: PathBuf,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Oracle {
    ScalePeak {
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        order: u32,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        t_min: f64,
        #[arg(long)]
        t_max: f64,
        #[arg(long)]
        t_step: f64,
        /// Sample spacing; defaults to 0.1 / omega.
        #[arg(long)]
        dx: Option<f64>,
        /// Write the response curve as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out, quiet } => train(&config, &out, quiet),
        Command::Eval {
            model,
            dataset,
            blur,
            width,
        } => eval(&model, &dataset, blur, width.width()),
        Command::BlurBench {
            model_a,
            model_b,
            dataset,
            width,
        } => blur_bench(&model_a, &model_b, dataset.as_deref(), width.width()),
        Command::Absorb { model_in, model_out } => absorb(&model_in, &model_out),
        Command::Analyze { what } => analyze(what),
        Command::Oracle {
            what:
                Oracle::ScalePeak {
                    omega,
                    order,
                    gamma,
                    t_min,
                    t_max,
                    t_step,
                    dx,
                    out,
                },
        } => {
            let spec = ScaleOracleSpec::with_range(omega, order, gamma, t_min, t_max, t_step)?;
            let dx = dx.unwrap_or(0.1 / omega);
            let peak = empirical_scale_peak(&spec, dx)?;
            let analytic = spec.analytic_peak();
            println!("empirical peak  t = {:.6}  amplitude {:.6e}", peak.t_hat, peak.amplitude);
            println!("analytic peak   t = {analytic:.6}");
            println!("relative error    {:.3}%", 100.0 * (peak.t_hat - analytic).abs() / analytic);
            if let Some(path) = out {
                let mut csv = String::from("t,amplitude\n");
                csv.push_str(&format!("# omega={omega} order={order} gamma={gamma} dx={dx}\n"));
                for (t, a) in scale_response_curve(&spec, dx)? {
                    csv.push_str(&format!("{t:.6},{a:.9e}\n"));
                }
                write(&path, &csv)?;
            }
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<SacNetwork> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn dataset_spec(path: &Path) -> Result<DatasetSpec> {
    Ok(RunConfig::load(path)
        .with_context(|| format!("reading dataset spec {}", path.display()))?
        .dataset)
}

fn train(config: &Path, out: &Path, quiet: bool) -> Result<()> {
    let cfg = RunConfig::load(config).with_context(|| format!("reading config {}", config.display()))?;
    let data = cfg.dataset.generate()?;
    let (mut net, history) = train_with(&cfg.net, &data.train, data.classes, &cfg.train, |e| {
        if !quiet {
            println!(
                "epoch {:>3}  lr {:.4}  rec {:.4}  scale {:?}  total {:.4}  train acc {:.3}",
                e.epoch + 1,
                e.lr,
                e.loss.rec,
                e.loss
                    .scale_per_layer
                    .iter()
                    .map(|v| format!("{v:.3}"))
                    .collect::<Vec<_>>(),
                e.loss.total,
                e.train_accuracy
            );
        }
    })?;
    net.meta.config_hash = cfg.hash;
    let width = cfg.train.float_width;
    let train_acc = evaluate(&net, &data.train, width)?.accuracy;
    let test_acc = evaluate(&net, &data.test, width)?.accuracy;
    save_model(&net, out).with_context(|| format!("writing model {}", out.display()))?;
    println!(
        "trained {} epochs: train accuracy {train_acc:.4}, test accuracy {test_acc:.4}, final total loss {:.4}",
        history.epochs.len(),
        history.epochs.last().map_or(f64::NAN, |e| e.loss.total)
    );
    println!("config hash {:08x}; wrote {}", cfg.hash, out.display());
    Ok(())
}

fn print_eval(label: &str, e: &Evaluation) {
    println!("{label}: accuracy {:.4}", e.accuracy);
    println!("  class  correct  total  accuracy");
    for (c, s) in e.per_class.iter().enumerate() {
        let acc = if s.total == 0 { f64::NAN } else { s.correct as f64 / s.total as f64 };
        println!("  {c:>5}  {:>7}  {:>5}  {acc:.4}", s.correct, s.total);
    }
}

fn eval(model: &Path, dataset: &Path, blur: Option<f64>, width: FloatWidth) -> Result<()> {
    let net = load(model)?;
    let spec = dataset_spec(dataset)?;
    let data = spec.generate()?;
    let split = match blur {
        Some(t) => blur_split(&data.test, t, t, spec.seed)?,
        None => data.test,
    };
    let label = match blur {
        Some(t) => format!("test split blurred at t = {t}"),
        None => "test split".to_string(),
    };
    print_eval(&label, &evaluate(&net, &split, width)?);
    Ok(())
}

fn blur_bench(a: &Path, b: &Path, dataset: Option<&Path>, width: FloatWidth) -> Result<()> {
    let (a_net, b_net) = (load(a)?, load(b)?);
    let spec = match dataset {
        Some(p) => dataset_spec(p)?,
        None => RunConfig::default().dataset,
    };
    let (t_min, t_max) = match spec.blur {
        Blur::Gaussian { t_min, t_max } => (t_min, t_max),
        Blur::None => (1.0, 4.0),
    };
    let data = spec.generate()?;
    let blurred = blur_split(&data.test, t_min, t_max, spec.seed)?;
    println!("blur t in [{t_min}, {t_max}], {} test images", data.test.len());
    println!("{:<40} {:>8} {:>8}", "model", "clean", "blurred");
    for (path, net) in [(a, &a_net), (b, &b_net)] {
        let clean = evaluate(net, &data.test, width)?.accuracy;
        let blur = evaluate(net, &blurred, width)?.accuracy;
        println!("{:<40} {:>8.4} {:>8.4}", path.display().to_string(), clean, blur);
    }
    Ok(())
}

/// Largest |difference| between two feature stacks away from a border.
fn interior_max_diff(a: &DenseArray, b: &DenseArray, border: usize) -> Result<f64> {
    let [n, c, h, w] = a.dims4()?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..c {
            for y in border..h.saturating_sub(border) {
                for x in border..w.saturating_sub(border) {
                    worst = worst.max((a.at4(i, j, y, x) - b.at4(i, j, y, x)).abs());
                }
            }
        }
    }
    Ok(worst)
}

fn absorb(input: &Path, output: &Path) -> Result<()> {
    let net = load(input)?;
    if net.form() != NetworkForm::Sac {
        bail!("{} is already in absorbed form", input.display());
    }
    let folded = net.absorbed();
    save_model(&folded, output).with_context(|| format!("writing model {}", output.display()))?;
    let stored = round_to_f32(&folded);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probe = DenseArray::random_uniform(&[2, net.in_channels(), 24, 24], -1.0, 1.0, &mut rng);
    let border = 4;
    let sac = net.forward_trace(&probe)?;
    let mut before: f64 = 0.0;
    let mut after: f64 = 0.0;
    let mut x = probe.clone();
    for s in net.sac_layers().expect("sac form checked above") {
        let two_branch = sac_forward(&x, s, SacPath::Train)?;
        let one = sac_forward(&x, s, SacPath::Absorbed)?;
        before = before.max(interior_max_diff(&two_branch.pre_activation, &one.pre_activation, border)?);
        x = two_branch.output;
    }
    let restored = stored.forward_trace(&probe)?;
    for (p, q) in sac.pre_activations.iter().zip(&restored.pre_activations) {
        after = after.max(interior_max_diff(p, q, border)?);
    }
    println!("wrote {} ({} parameters, was {})", output.display(), folded.param_count(), net.param_count());
    println!("max interior pre-activation discrepancy on the probe: {before:.3e} (f64), {after:.3e} after f32 storage");
    Ok(())
}

fn analyze(what: Analyze) -> Result<()> {
    match what {
        Analyze::Hist { model, out, bin_width } => {
            let net = load(&model)?;
            let hists = scale_histogram(&net, bin_width)?;
            write(&out, &histogram_csv(&hists))?;
            for h in &hists {
                println!("layer {}: {} bins, mode t = {:.3}", h.layer, h.bins.len(), h.mode());
            }
        }
        Analyze::Filters { model, layer, out } => {
            let net = load(&model)?;
            let rows = analyze_layer(&net, layer)?;
            write(&out, &filters_csv(&rows))?;
            for class in [XPassClass::HighPass, XPassClass::LowPass, XPassClass::Mixed, XPassClass::AllPass] {
                let n = rows.iter().filter(|r| r.analysis.xpass.map(|x| x.class) == Some(class)).count();
                println!("{:<10} {n}", class.name());
            }
            let worst = rows
                .iter()
                .filter(|r| r.analysis.well_conditioned)
                .map(|r| r.analysis.residual)
                .fold(0.0, f64::max);
            println!("max residual over well-conditioned pairs: {worst:.3e}");
        }
        Analyze::Truncation { model, out } => {
            let net = load(&model)?;
            let csv = truncation_csv(&truncation_report(&net)?);
            match out {
                Some(path) => write(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}
