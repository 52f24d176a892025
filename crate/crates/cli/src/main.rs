use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cobprune::cob::apply_cob;
use cobprune::config::ExperimentConfig;
use cobprune::container::ModelContainer;
use cobprune::experiment::{build_model, fixed_ratio_line, load_data, run_experiment, threshold_line, FIXED_RATIO_HEADER, THRESHOLD_HEADER};
use cobprune::nn::{SubspaceSplit, TsraParams};
use cobprune::pruning::{prepare, run_setting, PipelineConfig, Schedule, Setting, ThresholdKind, ThresholdRule};
use cobprune::saturation::{lemma1_witness, radial_lossless_compress, saturation_grid, SATURATION_HEADER};
use cobprune::train::{evaluate, finetune, history_csv, train};
use cobprune::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "cobprune", version, about = "Change-of-basis structured pruning for TSRA networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (key = value); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense mini-VGG and save it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss/accuracy CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Rotate a model into its PCA basis (forward-equivalent) and save it with the plan.
    Cob {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a model at one ratio or threshold and save the result.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed per-layer prune ratio in [0, 1).
        #[arg(long, conflicts_with = "rule")]
        ratio: Option<f64>,
        /// Threshold rule: zscore, prop_avg, prop_median or prop_max.
        #[arg(long, requires = "t")]
        rule: Option<String>,
        #[arg(long, allow_negative_numbers = true)]
        t: Option<f64>,
        /// Apply the change of basis before scoring.
        #[arg(long)]
        cob: bool,
    },
    /// Fine-tune a (pruned) model at a tenth of the configured learning rate.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.finetune_epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print test accuracy of a model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Occupied-subspace rank grid, witness search and radial compression check.
    Saturation {
        /// Input widths; d_out = 4 d_in + 8.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        d_in: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// CSV path; defaults to saturation.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full train, change-of-basis and prune sweep writing CSV tables.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn load(path: &Path) -> Result<ModelContainer> {
    ModelContainer::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out, history } => {
            let cfg = common.load()?;
            let (tr, te) = load_data(&cfg)?;
            let m = build_model(&cfg, &tr)?;
            let (m, h) = train(&m, &tr, &cfg.train)?;
            if let Some(p) = history {
                fs::write(p, history_csv(&h))?;
            }
            let mut c = ModelContainer::new(m);
            c.provenance.insert("preset".into(), cfg.preset.name().into());
            c.provenance.insert("seed".into(), cfg.seed.to_string());
            c.provenance.insert("optimizer".into(), cfg.train.optimizer.name().into());
            c.provenance.insert("epochs".into(), cfg.train.epochs.to_string());
            println!("test_accuracy={:.4}", evaluate(&c.model, &te)?);
            c.save(&out)
        }
        Command::Cob { common, model, out } => {
            let cfg = common.load()?;
            let (tr, _) = load_data(&cfg)?;
            let mut c = load(&model)?;
            let (rotated, plan) = apply_cob(&c.model, &tr.images, cfg.n_capture, cfg.seed)?;
            c.model = rotated;
            c.rotation = Some(plan);
            c.provenance.insert("cob_n_capture".into(), cfg.n_capture.to_string());
            c.save(&out)
        }
        Command::Prune {
            common,
            model,
            out,
            ratio,
            rule,
            t,
            cob,
        } => {
            let cfg = common.load()?;
            let (tr, te) = load_data(&cfg)?;
            let mut c = load(&model)?;
            let setting = match (ratio, rule, t) {
                (Some(p), None, _) => {
                    Schedule::FixedRatio(vec![p]).settings()?;
                    Setting::Ratio(p)
                }
                (None, Some(r), Some(t)) => Setting::Rule(ThresholdRule::new(ThresholdKind::parse(&r)?, t)?),
                _ => return Err(Error::config("prune needs --ratio or --rule with --t")),
            };
            let pc = PipelineConfig {
                schedule: Schedule::FixedRatio(Vec::new()),
                cob,
                n_capture: cfg.n_capture,
                capture_seed: cfg.seed,
                finetune: None,
                variant: if cob { "cob".into() } else { "baseline".into() },
            };
            let prep = prepare(&c.model, &tr, &te, &pc)?;
            let (row, pruned) = run_setting(&prep, setting, &tr, &te, &pc)?;
            match setting {
                Setting::Ratio(_) => println!("{FIXED_RATIO_HEADER}\n{}", fixed_ratio_line(&row)),
                Setting::Rule(_) => println!("{THRESHOLD_HEADER}\n{}", threshold_line(&row)),
            }
            c.model = pruned;
            c.rotation = None;
            c.save(&out)
        }
        Command::Finetune {
            common,
            model,
            out,
            epochs,
        } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.train.finetune_epochs = e;
            }
            let (tr, te) = load_data(&cfg)?;
            let mut c = load(&model)?;
            let (m, _) = finetune(&c.model, &tr, &cfg.train)?;
            println!("test_accuracy={:.4}", evaluate(&m, &te)?);
            c.model = m;
            c.save(&out)
        }
        Command::Eval { common, model } => {
            let cfg = common.load()?;
            let (_, te) = load_data(&cfg)?;
            let c = load(&model)?;
            println!("test_accuracy={:.4}", evaluate(&c.model, &te)?);
            Ok(())
        }
        Command::Saturation { d_in, seeds, out } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let rows = saturation_grid(&d_in, &seeds)?;
            let mut csv = String::from(SATURATION_HEADER);
            csv.push('\n');
            for r in &rows {
                csv.push_str(&r.csv());
                csv.push('\n');
            }
            let path = match out {
                Some(p) => p,
                None => {
                    let dir = ExperimentConfig::default().resolved_output_dir();
                    fs::create_dir_all(&dir)?;
                    dir.join("saturation.csv")
                }
            };
            fs::write(&path, csv)?;
            let violations = rows.iter().filter(|r| r.measured_rank > r.bound).count();
            let inconclusive = rows.iter().filter(|r| r.gap_ratio < 1e3).count();
            println!("rows={} bound_violations={violations} inconclusive={inconclusive}", rows.len());
            let w = lemma1_witness(&SubspaceSplit::halves(8)?, &TsraParams::default())?;
            println!("witness={w:?}");
            let mut rng = cobprune::rng::Rng::new(0);
            let weight = Tensor::new(vec![12, 3], rng.normal_vec(36))?;
            let bias = Tensor::new(vec![12], rng.normal_vec(12))?;
            let c = radial_lossless_compress(&weight, Some(&bias))?;
            println!(
                "radial_compression: 12 -> {} outputs, max deviation {:e}",
                c.bias.len(),
                c.max_deviation
            );
            Ok(())
        }
        Command::Experiment { common } => {
            let cfg = common.load()?;
            let s = run_experiment(&cfg)?;
            println!(
                "dense_accuracy={:.4} fixed_ratio_rows={} threshold_rows={} output={}",
                s.dense_acc,
                s.fixed_ratio.len(),
                s.threshold.len(),
                s.output_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
