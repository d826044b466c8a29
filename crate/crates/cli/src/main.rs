use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use freqbias_core::attacks::{attack_suite, AttackConfig, Norm};
use freqbias_core::autodiff::io;
use freqbias_core::data::{encode_batch, CifarLayout};
use freqbias_core::experiment::{emit_report, prepare_data, run_experiment_in, trial_seed, ExperimentConfig, PreparedData};
use freqbias_core::linmap::end_to_end_beta;
use freqbias_core::models::{train, Model};
use freqbias_core::spectral::export::{grid_csv, pgm, Scale};
use freqbias_core::spectral::{mean_magnitude_spectrum, radial_profile};
use freqbias_core::{rng, Error, Tensor};

/// Train small image classifiers, attack them, and measure the Fourier
/// structure of their predictors and perturbations.
#[derive(Parser)]
#[command(name = "freqbias", version)]
struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every model x trial of an experiment config.
    Experiment {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Artifact directory (overrides the config and the environment).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild report.csv, plots and the manifest of an artifact directory.
    Report { dir: PathBuf },
    /// Train the models of a config once and save the selected weights.
    Train {
        config: PathBuf,
        /// Only this model.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Injection variant to train on.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack a saved model on the test split of a config's dataset.
    Attack {
        /// Model stem (`<stem>.fbt` and `<stem>.json`).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        norm: Option<NormArg>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        /// Output stem for the perturbation container and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the end-to-end matrix of a linear model and its mean spectrum.
    Beta {
        #[arg(long)]
        model: PathBuf,
        /// Compose layers 1..=upto (default: all).
        #[arg(long)]
        upto: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean magnitude spectrum of every tensor in a container.
    Spectrum {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a config's injected dataset in the binary batch format.
    Inject {
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Linf,
    L2,
    L1,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Norm {
        match n {
            NormArg::Linf => Norm::Linf,
            NormArg::L2 => Norm::L2,
            NormArg::L1 => Norm::L1,
        }
    }
}

enum Failure {
    Config(String),
    Partial(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidSpec(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Partial(m)) => {
            eprintln!("{m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn pick_data(cfg: &ExperimentConfig, trial: usize, variant: Option<&str>) -> Result<PreparedData, Failure> {
    let mut all = prepare_data(cfg, trial)?;
    let idx = match variant {
        None => 0,
        Some(v) => all
            .iter()
            .position(|d| d.variant.as_deref() == Some(v))
            .ok_or_else(|| Failure::Config(format!("no variant `{v}`")))?,
    };
    Ok(all.swap_remove(idx))
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Experiment {
            config,
            seed,
            trials,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| cfg.output_dir());
            let summary = run_experiment_in(&cfg, &dir)?;
            println!("{}", dir.join("report.csv").display());
            if !summary.failed.is_empty() {
                let names: Vec<String> = summary
                    .failed
                    .iter()
                    .map(|u| format!("{} trial {}: {}", u.label, u.trial, u.error.as_deref().unwrap_or("")))
                    .collect();
                return Err(Failure::Partial(format!("{} unit(s) failed:\n{}", names.len(), names.join("\n"))));
            }
            Ok(())
        }
        Cmd::Report { dir } => {
            let s = emit_report(&dir)?;
            for f in &s.written {
                println!("{f}");
            }
            if !s.missing.is_empty() {
                return Err(Failure::Partial(format!("missing artifacts:\n{}", s.missing.join("\n"))));
            }
            Ok(())
        }
        Cmd::Train {
            config,
            model,
            trial,
            variant,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = pick_data(&cfg, trial, variant.as_deref())?;
            let specs = cfg.model_specs()?;
            let mut any = false;
            for (i, spec) in specs.iter().enumerate() {
                if model.as_ref().is_some_and(|m| *m != spec.name) {
                    continue;
                }
                any = true;
                let seed = trial_seed(cfg.seed, trial);
                let m = Model::build(spec, rng::derive_str(seed, &format!("init/{}", spec.name)))?;
                let mut tc = cfg.models[i].train_override().apply(&cfg.train);
                tc.seed = rng::derive_str(seed, &format!("train/{}", spec.name));
                let t = train(&m, &data.train, Some(&data.test), &tc)?;
                std::fs::create_dir_all(&out)?;
                t.best().save(&out.join(&spec.name))?;
                let s = &t.history[t.best_epoch];
                println!(
                    "{}: epoch {} train {:.4} test {:.4}",
                    spec.name, t.best_epoch, s.train_accuracy, s.test_accuracy
                );
            }
            if !any {
                return Err(Failure::Config(format!("no model named {}", model.unwrap_or_default())));
            }
            Ok(())
        }
        Cmd::Attack {
            model,
            config,
            norm,
            epsilon,
            rate,
            steps,
            examples,
            variant,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = Model::load(&model)?;
            let base = cfg.attacks.first().cloned().unwrap_or(AttackConfig {
                norm: Norm::Linf,
                epsilon: 8.0 / 255.0,
                rate: 0.1,
                steps: 100,
                random_start: false,
                seed: 0,
                stop_on_success: false,
            });
            let a = AttackConfig {
                norm: norm.map(Norm::from).unwrap_or(base.norm),
                epsilon: epsilon.unwrap_or(base.epsilon),
                rate: rate.unwrap_or(base.rate),
                steps: steps.unwrap_or(base.steps),
                ..base
            };
            a.validate()?;
            let data = pick_data(&cfg, 0, variant.as_deref())?;
            let test = match examples.or(cfg.settings.attack_examples) {
                Some(n) => data.test.head(n),
                None => data.test,
            };
            let run = attack_suite(&m, &test, &[a]).remove(0);
            if let Some(p) = out.parent() {
                std::fs::create_dir_all(p)?;
            }
            run.write(&out)?;
            let s = run.summary();
            println!(
                "{}: success {:.4} mean l2 {:.4} mean linf {:.4} ({} failures)",
                s.attack,
                s.success_rate,
                s.mean_l2,
                s.mean_linf,
                s.failures.len()
            );
            if !s.failures.is_empty() {
                return Err(Failure::Partial(format!("{} example(s) failed", s.failures.len())));
            }
            Ok(())
        }
        Cmd::Beta { model, upto, out } => {
            let m = Model::load(&model)?;
            let beta = end_to_end_beta(&m, upto.unwrap_or(m.layers().len()))?;
            write(&out.join("beta.fbt"), beta.to_bytes())?;
            if beta.cols() == m.spec.input.iter().product::<usize>() {
                let spec = mean_magnitude_spectrum(&beta.row_images(m.spec.input)?)?;
                write_spectrum(&out, &spec)?;
            }
            println!("{}", out.join("beta.fbt").display());
            Ok(())
        }
        Cmd::Spectrum { input, out } => {
            let entries = io::decode_tensors(&std::fs::read(&input)?)?;
            let tensors: Vec<Tensor> = entries.into_iter().map(|(_, t)| t).collect();
            let spec = mean_magnitude_spectrum(&tensors)?;
            write_spectrum(&out, &spec)?;
            println!("{}", out.join("spectrum.csv").display());
            Ok(())
        }
        Cmd::Inject {
            config,
            variant,
            trial,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            if cfg.inject.is_empty() {
                return Err(Failure::Config("config has no injection variants".into()));
            }
            let data = pick_data(&cfg, trial, variant.as_deref())?;
            let [c, h, w] = data.train.image_shape();
            let layout = CifarLayout {
                label_bytes: 1,
                channels: c,
                height: h,
                width: w,
                classes: data.train.classes,
            };
            write(&out.join("train.bin"), encode_batch(&data.train, layout)?)?;
            write(&out.join("test.bin"), encode_batch(&data.test, layout)?)?;
            let prov = serde_json::json!({
                "variant": data.variant,
                "shape": [c, h, w],
                "classes": data.train.classes,
                "train": { "provenance": data.train.provenance, "hash": data.train.hash() },
                "test": { "provenance": data.test.provenance, "hash": data.test.hash() },
                "clamped_fraction": data.clamped,
            });
            write(&out.join("provenance.json"), serde_json::to_string_pretty(&prov).expect("plain json"))?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn write_spectrum(out: &Path, spec: &Tensor) -> Result<(), Failure> {
    write(&out.join("spectrum.csv"), grid_csv(spec)?)?;
    write(&out.join("spectrum.pgm"), pgm(spec, Scale::Linear)?)?;
    write(&out.join("spectrum_log.pgm"), pgm(spec, Scale::Log)?)?;
    let energy = spec.map(|v| v * v);
    let radial = radial_profile(&energy)?;
    let mut s = String::from("radius,energy\n");
    for (i, e) in radial.bins.iter().enumerate() {
        s.push_str(&format!("{i},{e:?}\n"));
    }
    write(&out.join("radial.csv"), s)
}
