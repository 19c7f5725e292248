//! Dataset loading and the fixed evaluation / adaptation-stream split.

use dua_core::shiftlab::{corrupt_dataset, gen_synthetic, load_idx, CorruptionSpec, Dataset};
use dua_core::{Model, Rng};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{config_err, Result};

pub fn load_train(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Synthetic => Ok(gen_synthetic(cfg.train_samples, cfg.data_seed ^ 0x7472_6169_6e00)?),
        DatasetKind::Mnist => {
            let dir = cfg.data_dir.as_ref().expect("validated");
            Ok(load_idx(
                dir.join("train-images-idx3-ubyte"),
                dir.join("train-labels-idx1-ubyte"),
            )?)
        }
    }
}

pub fn load_test(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Synthetic => Ok(gen_synthetic(cfg.test_samples, cfg.data_seed ^ 0x7465_7374_0000)?),
        DatasetKind::Mnist => {
            let dir = cfg.data_dir.as_ref().expect("validated");
            Ok(load_idx(
                dir.join("t10k-images-idx3-ubyte"),
                dir.join("t10k-labels-idx1-ubyte"),
            )?)
        }
    }
}

/// Test set in clean and corrupted form, split into a fixed evaluation
/// slice and a disjoint pool from which adaptation streams are drawn.
pub struct TestBed {
    pub clean: Dataset,
    pub corrupt: Dataset,
    pub spec: CorruptionSpec,
    pub eval_idx: Vec<usize>,
    pub pool_idx: Vec<usize>,
    pub clean_eval: Dataset,
    pub corrupt_eval: Dataset,
}

impl TestBed {
    pub fn new(cfg: &ExperimentConfig, test: Dataset) -> Result<Self> {
        let spec = cfg.corruption_spec()?;
        if cfg.eval_slice >= test.len() {
            return config_err(format!(
                "eval_slice {} leaves no stream samples in a test set of {}",
                cfg.eval_slice,
                test.len()
            ));
        }
        let perm = Rng::stream(cfg.data_seed, "split").permutation(test.len());
        let (eval, pool) = perm.split_at(cfg.eval_slice);
        let mut eval_idx = eval.to_vec();
        eval_idx.sort_unstable();
        let mut pool_idx = pool.to_vec();
        pool_idx.sort_unstable();
        if cfg.n_adapt_samples > pool_idx.len() {
            return config_err(format!(
                "n_adapt_samples {} exceeds the {} stream samples outside the eval slice",
                cfg.n_adapt_samples,
                pool_idx.len()
            ));
        }
        let corrupt = corrupt_dataset(&test, spec, cfg.data_seed)?;
        Ok(TestBed {
            clean_eval: test.subset(&eval_idx)?,
            corrupt_eval: corrupt.subset(&eval_idx)?,
            clean: test,
            corrupt,
            spec,
            eval_idx,
            pool_idx,
        })
    }

    /// Pool indices in the order a run with `run_seed` consumes them.
    pub fn stream_order(&self, run_seed: u64) -> Vec<usize> {
        let mut order = self.pool_idx.clone();
        Rng::stream(run_seed, "stream").shuffle(&mut order);
        order
    }

    pub fn eval_set(&self, corrupted: bool) -> &Dataset {
        if corrupted {
            &self.corrupt_eval
        } else {
            &self.clean_eval
        }
    }

    pub fn pool_set(&self, corrupted: bool) -> &Dataset {
        if corrupted {
            &self.corrupt
        } else {
            &self.clean
        }
    }
}

/// Top-1 error in percent under eval-mode inference.
pub fn error_pct(model: &Model, ds: &Dataset, chunk: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict(&ds.images, chunk)?;
    let wrong = pred.iter().zip(&ds.labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}
