//! End-to-end runs driven by a [`ModelConfig`]: data loading and splitting,
//! training, test scoring and checkpoints.

use std::path::{Path, PathBuf};

use crate::config::{ModelConfig, Task};
use crate::data::{gen_toy_letters, load_csv, split, Dataset, Mask, SplitSpec, Standardizer};
use crate::deepmodel::DgpModel;
use crate::error::{Error, Result};
use crate::metrics::ScoreReport;
use crate::trainer::{evaluate, train, Checkpoint, EpochLog, TrainOutcome};

/// Directory searched for dataset files that are not found as given.
pub const DATA_DIR_ENV: &str = "AVDGP_DATA_DIR";

/// Finds `name` as given, then under `$AVDGP_DATA_DIR`.
pub fn resolve_data_path(name: &str) -> Result<PathBuf> {
    let direct = Path::new(name);
    if direct.exists() {
        return Ok(direct.to_path_buf());
    }
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        let joined = Path::new(&dir).join(name);
        if joined.exists() {
            return Ok(joined);
        }
    }
    Err(Error::Data(format!("dataset `{name}` not found (also looked under ${DATA_DIR_ENV})")))
}

/// Standardized train/test/validation sets and the transform that made them.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub val: Dataset,
    pub standardizer: Standardizer,
}

/// Raw (unstandardized) `(train, test, val)`.
///
/// The toy problem draws `toy_n` training points plus test and validation
/// sets at the 3:2:1 proportion; CSV data is split 80/10/10.
pub fn raw_splits(cfg: &ModelConfig) -> Result<(Dataset, Dataset, Dataset)> {
    if cfg.dataset == "toy" {
        if cfg.task != Task::Binary {
            return Err(Error::Config("the toy dataset is a binary task".into()));
        }
        let (n_train, n_test, n_val) = (cfg.toy_n, cfg.toy_n * 2 / 3, cfg.toy_n / 3);
        let all = gen_toy_letters(n_train + n_test + n_val, cfg.seed, &Mask::default_letters())?;
        let idx: Vec<usize> = (0..all.len()).collect();
        let (a, rest) = idx.split_at(n_train);
        let (b, c) = rest.split_at(n_test);
        return Ok((all.subset(a), all.subset(b), all.subset(c)));
    }
    let path = resolve_data_path(&cfg.dataset)?;
    let ds = load_csv(&path, cfg.label_column, cfg.task, cfg.header)?;
    split(&ds, SplitSpec::new(cfg.seed))
}

pub fn prepare(cfg: &ModelConfig) -> Result<Splits> {
    let (train, test, val) = raw_splits(cfg)?;
    let standardizer = Standardizer::fit(&train);
    Ok(Splits {
        train: standardizer.apply(&train),
        test: standardizer.apply(&test),
        val: standardizer.apply(&val),
        standardizer,
    })
}

#[derive(Debug)]
pub struct RunOutput {
    pub model: DgpModel,
    pub outcome: TrainOutcome,
    pub splits: Splits,
    /// Final model on the test split, in standardized units.
    pub test: ScoreReport,
    pub checkpoint: Checkpoint,
    /// Parameters of the epoch with the lowest validation NLL.
    pub best: Option<Checkpoint>,
}

/// Trains the configured model from scratch and scores it on the test split.
pub fn run(cfg: &ModelConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<RunOutput> {
    cfg.validate()?;
    let splits = prepare(cfg)?;
    let mut model = DgpModel::from_config(cfg, &splits.train.x)?;
    let outcome = train(&mut model, &splits.train, Some(&splits.val), cfg, on_epoch)?;
    let test = evaluate(&model, &splits.test, cfg.eval_samples, cfg.seed)?;
    let std = Some(splits.standardizer.clone());
    let checkpoint = Checkpoint::from_model(&model, cfg, cfg.epochs, std.clone());
    let best = outcome
        .best
        .as_ref()
        .map(|(epoch, values)| Checkpoint::from_values(&model, cfg, *epoch, std.clone(), values.clone()));
    Ok(RunOutput { model, outcome, splits, test, checkpoint, best })
}

/// Epoch log as CSV; missing validation columns are left empty.
pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,steps,train_loss,val_nll,val_rmse,val_error_rate\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch,
            e.steps,
            e.train_loss,
            opt(e.val_nll),
            opt(e.val_rmse),
            opt(e.val_error_rate)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(n: usize) -> ModelConfig {
        let text = format!(
            r#"{{"task":"binary","dataset":"toy","toy_n":{n},"rule":"AR2","layers":2,"dims":[2],
                "inducing":[4,4],"samples":2,"eval_samples":2,"epochs":2,"batch":50,
                "likelihood":"bernoulli_probit","inference_fn":"affine_mlp"}}"#
        );
        ModelConfig::from_json(&text).unwrap()
    }

    #[test]
    fn toy_splits_follow_three_two_one() {
        let (a, b, c) = raw_splits(&toy_cfg(300)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (300, 200, 100));
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let mut cfg = toy_cfg(30);
        cfg.dataset = "definitely/not/here.csv".into();
        cfg.task = Task::Binary;
        assert!(matches!(raw_splits(&cfg), Err(Error::Data(_))));
    }

    #[test]
    fn run_logs_every_epoch_and_matches_checkpoint() {
        let cfg = toy_cfg(100);
        let mut seen = 0;
        let out = run(&cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(out.outcome.log.len(), 2);
        let restored = out.checkpoint.model().unwrap();
        let again = evaluate(&restored, &out.splits.test, cfg.eval_samples, cfg.seed).unwrap();
        assert_eq!(again.nll.to_bits(), out.test.nll.to_bits());
        let csv = epoch_log_csv(&out.outcome.log);
        assert_eq!(csv.lines().count(), 3);
    }
}
