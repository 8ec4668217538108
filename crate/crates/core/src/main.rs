use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use outreg::data_synth::{
    gen_scene, read_class_map, read_selection, sample_labels, write_class_map, write_selection, LabelBudget, SceneSpec,
};
use outreg::network::NetworkParams;
use outreg::train::{evaluate, gradcheck_fixture, sweep, train, Experiment, RunStatus, TrainConfig};
use outreg::{Error, FeatureField, Result};

const GRADCHECK_LIMIT: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "outreg", version, about = "Output-regularized ResNet training on sparsely labeled scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene, its truth map and a train/val label split.
    GenData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Scene size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 16)]
        bands: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        #[arg(long, default_value_t = 8)]
        blobs: usize,
        #[arg(long = "train", default_value_t = 200)]
        n_train: usize,
        #[arg(long = "val", default_value_t = 50)]
        n_val: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over a grid of alphas and seeds and pick alpha by validation mIoU.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trained parameters against the dense truth map.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare adjoint gradients with central differences on a small instance.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 50)]
        coordinates: usize,
    },
}

struct DataDir {
    num_classes: usize,
    data: FeatureField,
    truth: outreg::loss_metrics::ClassMap,
    train: outreg::network::SelectionSet,
    val: outreg::network::SelectionSet,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("size '{s}' is not HxW")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| Error::Config(format!("size '{s}': {e}")));
    Ok((parse(h)?, parse(w)?))
}

fn load_data(dir: &Path) -> Result<DataDir> {
    let data = FeatureField::load(&dir.join("data.ftf"))?;
    let truth = read_class_map(&dir.join("truth.lbl"))?;
    let (train, ..) = read_selection(&dir.join("train.lbl"))?;
    let (val, ..) = read_selection(&dir.join("val.lbl"))?;
    if truth.height() != data.height() || truth.width() != data.width() {
        return Err(Error::Dimension(format!(
            "data is {}x{}, truth is {}x{}",
            data.height(),
            data.width(),
            truth.height(),
            truth.width()
        )));
    }
    let seen = truth
        .class_counts()
        .len()
        .max(train.entries().iter().chain(val.entries()).map(|e| e.class_id + 1).max().unwrap_or(0));
    let meta = dir.join("scene.txt");
    let num_classes = if meta.exists() {
        let text = fs::read_to_string(&meta)?;
        text.lines()
            .find_map(|l| l.strip_prefix("num_classes = "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Format {
                path: meta.clone(),
                reason: "missing 'num_classes = K' line".into(),
            })?
    } else {
        seen
    };
    if num_classes < seen {
        return Err(Error::Format {
            path: meta,
            reason: format!("labels use {seen} classes but the scene declares {num_classes}"),
        });
    }
    Ok(DataDir {
        num_classes,
        data,
        truth,
        train,
        val,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            seed,
            size,
            bands,
            classes,
            noise,
            blobs,
            n_train,
            n_val,
            out,
        } => {
            let (h, w) = parse_size(&size)?;
            let spec = SceneSpec::with_generated_signatures(seed, h, w, bands, classes, blobs, noise);
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let (data, truth) = gen_scene(&spec)?;
            let (train, val) = sample_labels(&truth, &LabelBudget { n_train, n_val, seed })?;
            fs::create_dir_all(&out)?;
            data.save(&out.join("data.ftf"))?;
            write_class_map(&out.join("truth.lbl"), &truth)?;
            write_selection(&out.join("train.lbl"), &train, h, w)?;
            write_selection(&out.join("val.lbl"), &val, h, w)?;
            fs::write(
                out.join("scene.txt"),
                format!(
                    "seed = {seed}\nheight = {h}\nwidth = {w}\nbands = {bands}\nnum_classes = {classes}\nblobs = {blobs}\nnoise = {noise:?}\n"
                ),
            )?;
            println!(
                "wrote {h}x{w}x{bands} scene, class counts {:?}, {} train / {} val labels to {}",
                truth.class_counts(),
                train.len(),
                val.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let d = load_data(&data)?;
            let outcome = train(&cfg, &d.data, &d.train, &d.val, d.num_classes)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            outcome.params.save(&out.join("params"))?;
            outcome.write_history(&out.join("history.csv"))?;
            if let Some(last) = outcome.history.last() {
                println!("final loss {:.6}, regularizer {:.6e}", last.loss, last.regularizer);
            }
            match outcome.status {
                RunStatus::Completed => Ok(ExitCode::SUCCESS),
                RunStatus::Diverged { iteration } => {
                    eprintln!("diverged at iteration {iteration}; saved last finite parameters");
                    Ok(ExitCode::from(3))
                }
            }
        }
        Command::Sweep {
            config,
            alphas,
            seeds,
            data,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let d = load_data(&data)?;
            let exp = Experiment {
                num_classes: d.num_classes,
                data: d.data,
                truth: d.truth,
                train: d.train,
                val: d.val,
            };
            let result = sweep(&cfg, &alphas, &seeds, &exp)?;
            fs::create_dir_all(&out)?;
            result.write_csv(fs::File::create(out.join("sweep.csv"))?)?;
            let summary = result.summary_text();
            fs::write(out.join("summary.txt"), &summary)?;
            print!("{summary}");
            Ok(if result.alpha_star.is_some() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
        Command::Eval { params, data, out } => {
            let p = NetworkParams::load(&params)?;
            let d = load_data(&data)?;
            let (report, pred) = evaluate(&p, &d.data, &d.truth)?;
            fs::create_dir_all(&out)?;
            write_class_map(&out.join("prediction.lbl"), &pred)?;
            let mut w = csv::Writer::from_path(out.join("iou.csv"))?;
            w.write_record(["class", "intersection", "union", "iou"])?;
            for c in &report.per_class {
                w.write_record([
                    c.class_id.to_string(),
                    c.intersection.to_string(),
                    c.union.to_string(),
                    c.iou.map(|v| format!("{v:?}")).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            println!("mIoU {:.4}", report.miou);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            seed,
            alpha,
            coordinates,
        } => {
            if !alpha.is_finite() || alpha < 0.0 {
                return Err(Error::Config(format!("alpha {alpha} must be finite and >= 0")));
            }
            let report = gradcheck_fixture(seed, alpha, coordinates, 1e-6)?;
            println!("max relative error {:.3e} over {} coordinates", report.max_relative_error, report.samples.len());
            Ok(if report.max_relative_error < GRADCHECK_LIMIT {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Parameter(_) | Error::InfeasibleBudget { .. } => 2,
                Error::Diverged { .. } | Error::NumericalOverflow { .. } => 3,
                _ => 1,
            })
        }
    }
}
