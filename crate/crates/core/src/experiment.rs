//! End-to-end sweeps: train a dense model, optionally rotate it, prune at every
//! schedule point and write the result tables as CSV.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::{DataSource, ExperimentConfig};
use crate::container::ModelContainer;
use crate::data::{gen_synthetic, load_cifar10, Dataset};
use crate::error::{Error, Result};
use crate::nn::{mini_vgg, Model};
use crate::pruning::{prepare, run_setting, PipelineConfig, PipelineRow, Prepared, Schedule, Setting};
use crate::train::{history_csv, train};

pub const FIXED_RATIO_HEADER: &str = "dim_prune_pct,param_prune_pct,params_after,acc_pre_ft,acc_post_ft,variant";
pub const THRESHOLD_HEADER: &str = "rule,T,param_prune_pct,acc_post_ft,delta_vs_dense";

/// Offset between the synthetic training and test seeds.
const TEST_SEED_OFFSET: u64 = 0x7e57;

fn pct(x: f64) -> String {
    format!("{:.4}", 100.0 * x)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_default()
}

pub fn fixed_ratio_line(r: &PipelineRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        pct(r.dim_prune_frac),
        pct(r.param_prune_frac),
        r.params_after,
        pct(r.acc_pre_ft),
        opt_pct(r.acc_post_ft),
        r.variant
    )
}

/// `acc_post_ft` and `delta_vs_dense` stay empty when fine-tuning is off.
pub fn threshold_line(r: &PipelineRow) -> String {
    let Setting::Rule(rule) = r.setting else {
        panic!("threshold row without a rule");
    };
    format!(
        "{},{},{},{},{}",
        rule.kind.name(),
        rule.t,
        pct(r.param_prune_frac),
        opt_pct(r.acc_post_ft),
        opt_pct(r.acc_post_ft.map(|a| r.dense_acc - a))
    )
}

/// Loads the configured train and test splits.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic {
            n_per_class,
            test_per_class,
        } => Ok((
            gen_synthetic(cfg.seed, *n_per_class)?,
            gen_synthetic(cfg.seed.wrapping_add(TEST_SEED_OFFSET), *test_per_class)?,
        )),
        DataSource::Cifar10 {
            path,
            train_limit,
            test_limit,
        } => {
            let (tr, te) = load_cifar10(path)?;
            Ok((
                tr.take(train_limit.unwrap_or(usize::MAX))?,
                te.take(test_limit.unwrap_or(usize::MAX))?,
            ))
        }
    }
}

/// Builds the configured mini-VGG for `data`.
pub fn build_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let s = data.sample_shape();
    if s.len() != 3 {
        return Err(Error::Data(format!("mini-VGG needs C x H x W samples, got {s:?}")));
    }
    mini_vgg(cfg.preset, [s[0], s[1], s[2]], data.num_classes, cfg.widths, cfg.seed)
}

/// Writes a CSV header, then one flushed line per completed row.
pub struct CsvSink {
    file: File,
}

impl CsvSink {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{header}")?;
        file.flush()?;
        Ok(Self { file })
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

/// Runs every setting of `prep`, in parallel threads when `parallel`, handing
/// rows to `emit` in schedule order.
pub fn run_sweep(
    prep: &Prepared,
    settings: &[Setting],
    train: &Dataset,
    test: &Dataset,
    pcfg: &PipelineConfig,
    parallel: bool,
    mut emit: impl FnMut(&PipelineRow) -> Result<()>,
) -> Result<Vec<PipelineRow>> {
    let mut rows = Vec::with_capacity(settings.len());
    if parallel {
        let results: Vec<Result<PipelineRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = settings
                .iter()
                .map(|&st| s.spawn(move || run_setting(prep, st, train, test, pcfg).map(|(r, _)| r)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::numeric("sweep worker panicked"))))
                .collect()
        });
        for r in results {
            let r = r?;
            emit(&r)?;
            rows.push(r);
        }
    } else {
        for &st in settings {
            let (r, _) = run_setting(prep, st, train, test, pcfg)?;
            emit(&r)?;
            rows.push(r);
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub dense_acc: f64,
    pub fixed_ratio: Vec<PipelineRow>,
    pub threshold: Vec<PipelineRow>,
    pub output_dir: PathBuf,
}

/// train -> [change of basis] -> sweep(prune -> eval -> [fine-tune -> eval]).
///
/// Writes `history.csv`, `dense.cobp`, `fixed_ratio.csv` (when ratios are
/// configured) and `threshold.csv` (when threshold sweeps are configured).
/// Threshold sweeps use the rotated model unless `cob.mode = off`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out)?;
    let (train_set, test_set) = load_data(cfg)?;
    let model = build_model(cfg, &train_set)?;
    info!("training {} ({} params) on {} samples", cfg.preset.name(), model.param_count(), train_set.len());
    let (dense, history) = train(&model, &train_set, &cfg.train)?;
    fs::write(out.join("history.csv"), history_csv(&history))?;
    let mut container = ModelContainer::new(dense.clone());
    container.provenance.insert("preset".into(), cfg.preset.name().into());
    container.provenance.insert("seed".into(), cfg.seed.to_string());
    container.provenance.insert("optimizer".into(), cfg.train.optimizer.name().into());
    container.provenance.insert("epochs".into(), cfg.train.epochs.to_string());
    container.save(&out.join("dense.cobp"))?;

    let finetune = (cfg.train.finetune && cfg.train.finetune_epochs > 0).then(|| cfg.train.clone());
    let pcfg = |cob: bool, schedule: Schedule| PipelineConfig {
        schedule,
        cob,
        n_capture: cfg.n_capture,
        capture_seed: cfg.seed,
        finetune: finetune.clone(),
        variant: if cob { "cob".into() } else { "baseline".into() },
    };
    let mut dense_acc = f64::NAN;
    let mut fixed_rows = Vec::new();
    if !cfg.ratios.is_empty() {
        let mut sink = CsvSink::create(&out.join("fixed_ratio.csv"), FIXED_RATIO_HEADER)?;
        let schedule = Schedule::FixedRatio(cfg.ratios.clone());
        let settings = schedule.settings()?;
        for &cob in cfg.cob.variants() {
            let pc = pcfg(cob, schedule.clone());
            let prep = prepare(&dense, &train_set, &test_set, &pc)?;
            dense_acc = prep.dense_acc;
            info!("{} sweep over {} ratios", pc.variant, settings.len());
            let rows = run_sweep(&prep, &settings, &train_set, &test_set, &pc, cfg.parallel, |r| {
                sink.row(&fixed_ratio_line(r))
            })?;
            fixed_rows.extend(rows);
        }
    }
    let mut threshold_rows = Vec::new();
    if !cfg.thresholds.is_empty() {
        let mut sink = CsvSink::create(&out.join("threshold.csv"), THRESHOLD_HEADER)?;
        let cob = *cfg.cob.variants().last().expect("at least one variant");
        let pc = pcfg(cob, Schedule::FixedRatio(Vec::new()));
        let prep = prepare(&dense, &train_set, &test_set, &pc)?;
        dense_acc = prep.dense_acc;
        for (kind, values) in &cfg.thresholds {
            let settings = Schedule::Threshold {
                kind: *kind,
                values: values.clone(),
            }
            .settings()?;
            let rows = run_sweep(&prep, &settings, &train_set, &test_set, &pc, cfg.parallel, |r| {
                sink.row(&threshold_line(r))
            })?;
            threshold_rows.extend(rows);
        }
    }
    if dense_acc.is_nan() {
        dense_acc = crate::train::evaluate(&dense, &test_set)?;
    }
    Ok(ExperimentSummary {
        dense_acc,
        fixed_ratio: fixed_rows,
        threshold: threshold_rows,
        output_dir: out,
    })
}
