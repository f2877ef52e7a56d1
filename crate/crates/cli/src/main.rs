mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fbsd::ablation::{ablate, Variant};
use fbsd::data::{augment_eval, read_dataset, stack, synth_generate, write_dataset, Dataset};
use fbsd::gradcheck::{fbsm_suite, fdm_suite, model_suite, GradcheckConfig, GradcheckReport};
use fbsd::model::{activation_map, Model};
use fbsd::persist::{load_checkpoint, save_checkpoint, Session};
use fbsd::train::{evaluate, metrics_csv, train_epochs, TrainState};
use fbsd::viz::export_activation_map;

use config::{ConfigError, RunConfig};

const PRECEDENCE: &str = "Configuration precedence: --set KEY=VALUE flags override the --config file, \
which overrides built-in defaults (see --print-defaults).\n\
Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.";

#[derive(Parser)]
#[command(name = "fbsd", version, about = "Part-feature boosting, suppression and diversification on a desk-scale classifier", after_help = PRECEDENCE)]
struct Cli {
    /// Print every configuration key with its default value and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file ('#' starts a comment).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    Fbsm,
    Fdm,
    Model,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-part dataset.
    Synth {
        /// Configuration file with the synthetic-data keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a model and write a resumable checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Separate evaluation set; without it the tail of --data is held out.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Checkpoint path, rewritten after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// Write per-epoch metrics as CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete; a later --resume continues.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Print the accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the f64 finite-difference gradient suites.
    Gradcheck {
        /// Run a single suite instead of all three.
        #[arg(long, value_enum)]
        module: Option<Module>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write stage 3/4/5 activation maps of one sample as PGM images.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the backbone, +FBSM and +FBSM+FDM variants and print their mean accuracies.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
}

fn is_usage(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<ConfigError>().is_some() {
        return true;
    }
    matches!(
        e.downcast_ref::<fbsd::Error>(),
        Some(fbsd::Error::Config(_) | fbsd::Error::Usage(_))
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if cli.print_defaults {
        print!("{}", RunConfig::default().render());
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.cmd else {
        eprintln!("usage: fbsd <synth|train|eval|gradcheck|viz|ablate> [options]\n       fbsd --help");
        return ExitCode::from(2);
    };
    match run(cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading {}", path.display()))
}

/// Training and evaluation sets: an explicit eval file, or the tail of `data`.
fn split(cfg: &RunConfig, data: &Path, eval: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let train = load_data(data)?;
    if let Some(e) = eval {
        return Ok((train, load_data(e)?));
    }
    let n = if cfg.holdout > 0 {
        cfg.holdout
    } else {
        let c = cfg.model.num_classes;
        (train.len() / 3 / c * c).max(1)
    };
    Ok(train.split_tail(n)?)
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Synth {
            spec,
            sets,
            out,
            count,
        } => {
            let cfg = RunConfig::load(spec.as_deref(), &sets)?;
            let ds = synth_generate(&cfg.synth, count)?;
            write_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Cmd::Train {
            cfg,
            data,
            eval_data,
            out,
            metrics,
            resume,
            until,
        } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.sets)?;
            let (train, eval) = split(&rc, &data, eval_data.as_deref())?;
            let (mut model, mut session) = match resume {
                Some(p) => {
                    let (m, s) = load_checkpoint(&p)?;
                    let s = s.ok_or_else(|| anyhow!("{} holds no training state", p.display()))?;
                    (m, s)
                }
                None => {
                    let m = Model::<f32>::build(&rc.model)?;
                    let state = TrainState::new(&m.params);
                    (
                        m,
                        Session {
                            optim: rc.optim.clone(),
                            augment: rc.augment,
                            state,
                        },
                    )
                }
            };
            let (optim, augment) = (session.optim.clone(), session.augment);
            train_epochs(
                &mut model,
                &mut session.state,
                &train,
                &eval,
                &optim,
                &augment,
                until.unwrap_or(optim.epochs),
                &mut |m, st| {
                    let last = st.history.last().expect("epoch recorded");
                    println!(
                        "epoch={} train_loss={:.4} eval_acc={:.4} lr={}",
                        last.epoch, last.train_loss, last.eval_acc, last.lr
                    );
                    let s = Session {
                        optim: optim.clone(),
                        augment,
                        state: st.clone(),
                    };
                    save_checkpoint(&out, m, Some(&s))?;
                    if let Some(p) = &metrics {
                        fs::write(p, metrics_csv(&st.history))?;
                    }
                    Ok(())
                },
            )?;
            println!("best_acc={:.4} best_epoch={}", session.state.best_acc, session.state.best_epoch);
        }
        Cmd::Eval { ckpt, data } => {
            let (mut model, session) = load_checkpoint(&ckpt)?;
            let augment = session.as_ref().map(|s| s.augment).unwrap_or_default();
            if let Some(best) = session.and_then(|s| s.state.best_params) {
                model.params = best;
            }
            let ds = load_data(&data)?;
            let r = evaluate(&model, &ds, &augment, 64)?;
            println!("acc={:.4}", r.accuracy);
            println!(
                "head_acc={:.4},{:.4},{:.4}",
                r.head_acc[0], r.head_acc[1], r.head_acc[2]
            );
            println!("loss={:.4}", r.mean_loss);
        }
        Cmd::Gradcheck { module, seed } => {
            let cfg = GradcheckConfig {
                seed,
                ..Default::default()
            };
            type Suite = fn(&GradcheckConfig) -> fbsd::Result<GradcheckReport>;
            let suites: Vec<(&str, Suite)> = vec![
                ("fbsm", fbsm_suite),
                ("fdm", fdm_suite),
                ("model", model_suite),
            ];
            let mut all = true;
            for (name, suite) in suites {
                let selected = match module {
                    None => true,
                    Some(Module::Fbsm) => name == "fbsm",
                    Some(Module::Fdm) => name == "fdm",
                    Some(Module::Model) => name == "model",
                };
                if !selected {
                    continue;
                }
                let r = suite(&cfg)?;
                println!(
                    "{name} max_rel_err={:.3e} checked={} skipped={} {}",
                    r.max_rel_err,
                    r.checked,
                    r.skipped,
                    if r.pass { "pass" } else { "FAIL" }
                );
                all &= r.pass;
            }
            return Ok(all);
        }
        Cmd::Viz {
            ckpt,
            data,
            index,
            out_dir,
        } => {
            let (mut model, session) = load_checkpoint(&ckpt)?;
            let augment = session.as_ref().map(|s| s.augment).unwrap_or_default();
            if let Some(best) = session.and_then(|s| s.state.best_params) {
                model.params = best;
            }
            let ds = load_data(&data)?;
            if index >= ds.len() {
                return Err(fbsd::Error::Usage(format!("index {index} out of range for {} samples", ds.len())).into());
            }
            let x = stack(vec![augment_eval(ds.image(index), &augment)])?;
            let art = model.infer(&x)?;
            fs::create_dir_all(&out_dir)?;
            for stage in 3..=5 {
                let map = &activation_map(&art, stage)?[0];
                let path = out_dir.join(format!("stage{stage}.pgm"));
                export_activation_map(map, model.cfg.input_size, &path)?;
                println!("{}", path.display());
            }
        }
        Cmd::Ablate {
            cfg,
            data,
            eval_data,
        } => {
            let rc = RunConfig::load(cfg.config.as_deref(), &cfg.sets)?;
            let (train, eval) = split(&rc, &data, eval_data.as_deref())?;
            if train.is_empty() || eval.is_empty() {
                bail!("training and evaluation sets must be non-empty");
            }
            let summary = ablate(&rc.model, &rc.optim, &rc.augment, &train, &eval, &rc.seeds)?;
            for v in &summary {
                for r in &v.runs {
                    eprintln!("{} seed={} acc={:.4}", v.variant.name(), r.seed, r.final_acc);
                }
            }
            debug_assert_eq!(summary.len(), Variant::ALL.len());
            for v in &summary {
                println!("{},{:.4}", v.variant.name(), v.mean_acc);
            }
        }
    }
    Ok(true)
}
