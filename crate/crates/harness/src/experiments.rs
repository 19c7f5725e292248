//! Experiment runners. Each runner starts from a clone of the source model
//! and never touches the checkpoint on disk.

use std::collections::BTreeMap;

use dua_core::adapt::{dua_adapt_step, fixed_momentum_adapt_step, norm_recompute};
use dua_core::bn::MomentumSchedule;
use dua_core::shiftlab::{corrupt_dataset, CorruptionKind, CorruptionSpec, Dataset};
use dua_core::{AdaptConfig, LayerMask, Model, Rng, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Domain, ExperimentConfig};
use crate::data::{error_pct, TestBed};
use crate::error::{config_err, Result};

/// One evaluated point of an adaptation curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub k: usize,
    pub w_k: f64,
    pub error_pct: f64,
}

/// An adaptation run: evaluated rows plus per-step trajectory data.
#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub rows: Vec<CurveRow>,
    /// Running-stat digest after each evaluated row.
    pub stats_hashes: Vec<String>,
    /// Entry `k - 1`: L2 norm of the change of the watched layer's running
    /// mean caused by step `k`.
    pub mean_change: Vec<f64>,
    #[serde(skip)]
    pub model: Model,
}

impl Trace {
    pub fn final_error(&self) -> f64 {
        self.rows.last().map(|r| r.error_pct).unwrap_or(f64::NAN)
    }

    pub fn error_at(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.error_pct)
    }

    /// (max, min) of the per-step mean change over steps `after < k`.
    /// `None` when the run has no such step.
    pub fn change_extremes_after(&self, after: usize) -> Option<(f64, f64)> {
        let tail = self.mean_change.get(after..)?;
        if tail.is_empty() {
            return None;
        }
        let max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = tail.iter().cloned().fold(f64::INFINITY, f64::min);
        Some((max, min))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arm {
    Dua,
    /// Constant update weight.
    Fixed(f64),
}

/// A model under online adaptation together with its schedule and
/// augmentation stream.
struct Adapter {
    model: Model,
    cfg: AdaptConfig,
    rng: Rng,
    arm: Arm,
}

impl Adapter {
    fn new(model: Model, cfg: AdaptConfig, arm: Arm) -> Self {
        let rng = cfg.rng();
        Adapter { model, cfg, rng, arm }
    }

    /// Consumes one sample; returns the weight used.
    fn step(&mut self, sample: &Tensor) -> Result<f64> {
        match self.arm {
            Arm::Dua => {
                dua_adapt_step(&mut self.model, sample, &mut self.cfg, &mut self.rng)?;
                Ok(self.cfg.schedule.weight())
            }
            Arm::Fixed(rho) => {
                fixed_momentum_adapt_step(&mut self.model, sample, &self.cfg, rho, &mut self.rng)?;
                Ok(rho)
            }
        }
    }
}

/// Hex digest (16 chars) of every running statistic of `model`.
pub fn stats_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, (mean, var)) in model.running_stats() {
        h.update(name.as_bytes());
        for v in mean.iter().chain(&var) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn running_mean(model: &Model, layer: &str) -> Vec<f64> {
    model.bn(layer).map(|s| s.running_mean.clone()).unwrap_or_default()
}

/// Name of the deepest batch-norm layer.
pub fn last_bn(model: &Model) -> Result<String> {
    match model.bn_names().pop() {
        Some(n) => Ok(n),
        None => config_err("model has no batch-norm layer"),
    }
}

/// Streams `pool[stream[0..n]]` through an adapter, evaluating on `eval`
/// at k = 0 and wherever `eval_at(k)` holds.
#[allow(clippy::too_many_arguments)]
pub fn run_stream(
    source: &Model,
    cfg: AdaptConfig,
    arm: Arm,
    pool: &Dataset,
    stream: &[usize],
    eval: &Dataset,
    eval_at: &dyn Fn(usize) -> bool,
    watch: &str,
    chunk: usize,
) -> Result<Trace> {
    let mut ad = Adapter::new(source.clone(), cfg, arm);
    let mut rows = vec![CurveRow {
        k: 0,
        w_k: 0.0,
        error_pct: error_pct(&ad.model, eval, chunk)?,
    }];
    let mut stats_hashes = vec![stats_hash(&ad.model)];
    let mut mean_change = Vec::with_capacity(stream.len());
    for (i, &idx) in stream.iter().enumerate() {
        let k = i + 1;
        let before = running_mean(&ad.model, watch);
        let w = ad.step(&pool.sample(idx))?;
        mean_change.push(l2_diff(&before, &running_mean(&ad.model, watch)));
        if eval_at(k) {
            rows.push(CurveRow {
                k,
                w_k: w,
                error_pct: error_pct(&ad.model, eval, chunk)?,
            });
            stats_hashes.push(stats_hash(&ad.model));
        }
    }
    Ok(Trace {
        rows,
        stats_hashes,
        mean_change,
        model: ad.model,
    })
}

fn eval_predicate(cfg: &ExperimentConfig) -> impl Fn(usize) -> bool + Sync {
    let every = cfg.eval_every;
    let n = cfg.n_adapt_samples;
    let marks = cfg.stability_checkpoints.clone();
    move |k| k % every == 0 || k == n || marks.contains(&k)
}

fn stream(bed: &TestBed, cfg: &ExperimentConfig, seed: u64) -> Vec<usize> {
    let mut order = bed.stream_order(seed);
    order.truncate(cfg.n_adapt_samples);
    order
}

/// Distance the running mean of `layer` has to travel: norm of the gap
/// between the source running mean and the mean obtained by a front-to-back
/// recompute of every batch-norm layer on `ds`.
pub fn stat_shift_norm(source: &Model, ds: &Dataset, layer: &str) -> Result<f64> {
    if source.bn_index(layer).is_none() {
        return config_err(format!("unknown batch-norm layer '{layer}'"));
    }
    let mut target = source.clone();
    norm_recompute(&mut target, &ds.images)?;
    Ok(l2_diff(&running_mean(&target, layer), &running_mean(source, layer)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormRow {
    pub batch_size: usize,
    pub error_pct: f64,
}

/// NORM baseline: recompute statistics from the first `nb` stream samples.
pub fn run_norm_baseline(source: &Model, cfg: &ExperimentConfig, bed: &TestBed) -> Result<Vec<NormRow>> {
    let order = bed.stream_order(cfg.run_seed(0));
    cfg.norm_batch_sizes
        .iter()
        .map(|&nb| {
            if nb > order.len() {
                return config_err(format!(
                    "NORM batch size {nb} exceeds the {} stream samples",
                    order.len()
                ));
            }
            let mut model = source.clone();
            let batch = bed.corrupt.subset(&order[..nb])?;
            norm_recompute(&mut model, &batch.images)?;
            Ok(NormRow {
                batch_size: nb,
                error_pct: error_pct(&model, &bed.corrupt_eval, cfg.eval_chunk)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptCurveResult {
    pub source_error_pct: f64,
    pub dua: Trace,
    pub fixed: Option<Trace>,
    pub fixed_rho: f64,
    pub norm: Vec<NormRow>,
    /// DUA model after the last step, evaluated on the whole corrupted test set.
    pub final_full_error_pct: f64,
    pub source_full_error_pct: f64,
    pub watched_layer: String,
    pub initial_shift_norm: f64,
}

/// DUA curve on the corrupted stream with optional fixed-momentum and NORM arms.
pub fn run_adapt_curve(source: &Model, cfg: &ExperimentConfig, bed: &TestBed) -> Result<AdaptCurveResult> {
    let seed = cfg.run_seed(0);
    let order = stream(bed, cfg, seed);
    let watch = last_bn(source)?;
    let eval_at = eval_predicate(cfg);
    let ac = cfg.adapt_config(source, seed)?;
    let fixed_rho = cfg.rho0;
    let run = |arm| {
        run_stream(
            source,
            ac.clone(),
            arm,
            &bed.corrupt,
            &order,
            &bed.corrupt_eval,
            &eval_at,
            &watch,
            cfg.eval_chunk,
        )
    };
    let (dua, fixed) = if cfg.fixed_momentum_arm {
        let (a, b) = rayon::join(|| run(Arm::Dua), || run(Arm::Fixed(fixed_rho)));
        (a?, Some(b?))
    } else {
        (run(Arm::Dua)?, None)
    };
    let norm = if cfg.norm_arm {
        run_norm_baseline(source, cfg, bed)?
    } else {
        Vec::new()
    };
    Ok(AdaptCurveResult {
        source_error_pct: dua.rows[0].error_pct,
        final_full_error_pct: error_pct(&dua.model, &bed.corrupt, cfg.eval_chunk)?,
        source_full_error_pct: error_pct(source, &bed.corrupt, cfg.eval_chunk)?,
        initial_shift_norm: stat_shift_norm(source, &bed.corrupt_eval, &watch)?,
        dua,
        fixed,
        fixed_rho,
        norm,
        watched_layer: watch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub run_id: usize,
    pub k: usize,
    pub error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityResult {
    pub rows: Vec<StabilityRow>,
    pub summary: Vec<CheckpointSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `n_runs` independent DUA runs, each with its own stream order and
/// augmentation seed, evaluated at the stability checkpoints.
pub fn run_shuffle_stability(source: &Model, cfg: &ExperimentConfig, bed: &TestBed) -> Result<StabilityResult> {
    if cfg.n_runs < 2 {
        return config_err("shuffle-stability needs n_runs >= 2");
    }
    let mut marks: Vec<usize> = cfg
        .stability_checkpoints
        .iter()
        .copied()
        .filter(|&k| k >= 1 && k <= cfg.n_adapt_samples)
        .collect();
    marks.sort_unstable();
    marks.dedup();
    let watch = last_bn(source)?;
    let per_run: Vec<Vec<StabilityRow>> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|run_id| {
            let seed = cfg.run_seed(run_id);
            let trace = run_stream(
                source,
                cfg.adapt_config(source, seed)?,
                Arm::Dua,
                &bed.corrupt,
                &stream(bed, cfg, seed),
                &bed.corrupt_eval,
                &|k| marks.contains(&k),
                &watch,
                cfg.eval_chunk,
            )?;
            Ok(trace
                .rows
                .iter()
                .filter(|r| r.k > 0)
                .map(|r| StabilityRow {
                    run_id,
                    k: r.k,
                    error_pct: r.error_pct,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<StabilityRow> = per_run.into_iter().flatten().collect();
    let summary = marks
        .iter()
        .map(|&k| {
            let errs: Vec<f64> = rows.iter().filter(|r| r.k == k).map(|r| r.error_pct).collect();
            let (mean, std) = mean_std(&errs);
            CheckpointSummary { k, mean, std }
        })
        .collect();
    Ok(StabilityResult { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaRow {
    pub omega: f64,
    pub k: usize,
    pub w_k: f64,
    pub error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaSummary {
    pub omega: f64,
    pub zeta: f64,
    pub final_error_pct: f64,
    /// Max per-step running-mean change at the watched layer over k > 50.
    pub stability_metric: Option<f64>,
    pub threshold: f64,
    pub stable: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OmegaResult {
    pub rows: Vec<OmegaRow>,
    pub summary: Vec<OmegaSummary>,
    pub watched_layer: String,
    pub initial_shift_norm: f64,
}

/// Steps after which trajectory stability is judged.
pub const STABILITY_AFTER: usize = 50;
/// Stability threshold as a fraction of the initial stat-shift norm.
pub const STABILITY_FRACTION: f64 = 0.05;

/// One DUA curve per ω from the same stream. ω = 1 runs with ζ = 0, i.e.
/// constant weight ρ₀.
pub fn run_omega_sweep(source: &Model, cfg: &ExperimentConfig, bed: &TestBed) -> Result<OmegaResult> {
    let seed = cfg.run_seed(0);
    let order = stream(bed, cfg, seed);
    let watch = last_bn(source)?;
    let shift = stat_shift_norm(source, &bed.corrupt_eval, &watch)?;
    let threshold = STABILITY_FRACTION * shift;
    let eval_at = eval_predicate(cfg);
    let results: Vec<(Vec<OmegaRow>, OmegaSummary)> = cfg
        .omegas
        .par_iter()
        .map(|&omega| {
            let zeta = if omega == 1.0 { 0.0 } else { cfg.zeta };
            let mut ac = cfg.adapt_config(source, seed)?;
            ac.schedule = MomentumSchedule::new(cfg.rho0, omega, zeta)?;
            let trace = run_stream(
                source,
                ac,
                Arm::Dua,
                &bed.corrupt,
                &order,
                &bed.corrupt_eval,
                &eval_at,
                &watch,
                cfg.eval_chunk,
            )?;
            let metric = trace.change_extremes_after(STABILITY_AFTER).map(|(max, _)| max);
            let rows = trace
                .rows
                .iter()
                .map(|r| OmegaRow {
                    omega,
                    k: r.k,
                    w_k: r.w_k,
                    error_pct: r.error_pct,
                })
                .collect();
            let summary = OmegaSummary {
                omega,
                zeta,
                final_error_pct: trace.final_error(),
                stability_metric: metric,
                threshold,
                stable: metric.map(|m| m < threshold),
            };
            Ok((rows, summary))
        })
        .collect::<Result<_>>()?;
    let (rows, summary): (Vec<Vec<OmegaRow>>, Vec<OmegaSummary>) = results.into_iter().unzip();
    Ok(OmegaResult {
        rows: rows.into_iter().flatten().collect(),
        summary,
        watched_layer: watch,
        initial_shift_norm: shift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mask: String,
    pub error_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub source_error_pct: f64,
    pub rows: Vec<AblationRow>,
}

/// Masks `none`, each single layer, and `all`, all on the same stream.
pub fn run_layer_ablation(source: &Model, cfg: &ExperimentConfig, bed: &TestBed) -> Result<AblationResult> {
    let seed = cfg.run_seed(0);
    let order = stream(bed, cfg, seed);
    let watch = last_bn(source)?;
    let names = source.bn_names();
    let mut masks: Vec<(String, LayerMask)> = vec![("none".into(), LayerMask::none())];
    for n in &names {
        masks.push((n.clone(), LayerMask::from_names([n.clone()])));
    }
    masks.push(("all".into(), LayerMask::all(source)));
    let n = cfg.n_adapt_samples;
    let rows = masks
        .par_iter()
        .map(|(label, mask)| {
            let mut ac = cfg.adapt_config(source, seed)?;
            ac.layer_mask = mask.clone();
            let trace = run_stream(
                source,
                ac,
                Arm::Dua,
                &bed.corrupt,
                &order,
                &bed.corrupt_eval,
                &|k| k == n,
                &watch,
                cfg.eval_chunk,
            )?;
            Ok(AblationRow {
                mask: label.clone(),
                error_pct: trace.final_error(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationResult {
        source_error_pct: error_pct(source, &bed.corrupt_eval, cfg.eval_chunk)?,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRow {
    pub segment: usize,
    pub domain: String,
    pub k: usize,
    pub w_k: f64,
    pub error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSummary {
    pub segment: usize,
    pub domain: String,
    pub source_error_pct: f64,
    pub start_error_pct: f64,
    pub end_error_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleResult {
    pub rows: Vec<CycleRow>,
    pub segments: Vec<SegmentSummary>,
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Clean => "clean",
        Domain::Corrupt => "corrupt",
    }
}

/// Continuous adaptation over the configured domain schedule. Running
/// statistics carry across segments; the momentum schedule restarts at a
/// domain switch when `cycle_reset_schedule` is set. Errors are measured on
/// the current domain's eval slice; the start row of a segment is measured
/// before its first sample.
pub fn run_cycle(source: &Model, cfg: &ExperimentConfig, bed: &TestBed) -> Result<CycleResult> {
    if cfg.cycle.is_empty() {
        return config_err("cycle needs at least one segment");
    }
    let total: usize = cfg.cycle.iter().map(|s| s.samples).sum();
    let seed = cfg.run_seed(0);
    let order = bed.stream_order(seed);
    if total > order.len() {
        return config_err(format!(
            "cycle consumes {total} samples but only {} stream samples exist",
            order.len()
        ));
    }
    let mut ad = Adapter::new(source.clone(), cfg.adapt_config(source, seed)?, Arm::Dua);
    let mut rows = Vec::new();
    let mut segments = Vec::new();
    let mut k = 0;
    let mut prev: Option<Domain> = None;
    for (si, seg) in cfg.cycle.iter().enumerate() {
        let corrupted = seg.domain == Domain::Corrupt;
        let (pool, eval) = (bed.pool_set(corrupted), bed.eval_set(corrupted));
        if cfg.cycle_reset_schedule && prev.is_some_and(|p| p != seg.domain) {
            ad.cfg.schedule.reset();
        }
        prev = Some(seg.domain);
        let name = domain_name(seg.domain).to_string();
        let start_error = error_pct(&ad.model, eval, cfg.eval_chunk)?;
        rows.push(CycleRow {
            segment: si,
            domain: name.clone(),
            k,
            w_k: 0.0,
            error_pct: start_error,
        });
        let mut end_error = start_error;
        for j in 1..=seg.samples {
            let w = ad.step(&pool.sample(order[k]))?;
            k += 1;
            if j % cfg.eval_every == 0 || j == seg.samples {
                end_error = error_pct(&ad.model, eval, cfg.eval_chunk)?;
                rows.push(CycleRow {
                    segment: si,
                    domain: name.clone(),
                    k,
                    w_k: w,
                    error_pct: end_error,
                });
            }
        }
        segments.push(SegmentSummary {
            segment: si,
            domain: name,
            source_error_pct: error_pct(source, eval, cfg.eval_chunk)?,
            start_error_pct: start_error,
            end_error_pct: end_error,
        });
    }
    Ok(CycleResult { rows, segments })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRow {
    pub layer: String,
    pub channel: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count_clean: u64,
    pub count_shift: u64,
    pub count_adapted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub layer: String,
    pub channel: usize,
    pub condition: String,
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityResult {
    pub rows: Vec<DensityRow>,
    pub moments: Vec<MomentRow>,
    /// Mean over channels of |mean(shift) − mean(clean)|.
    pub mean_abs_shift_unadapted: f64,
    /// Mean over channels of |mean(adapted) − mean(clean)|.
    pub mean_abs_shift_adapted: f64,
    pub alignment_ratio: f64,
    /// Mean per-channel 1-Wasserstein distances on the shared bin grid.
    pub w1_shift: f64,
    pub w1_adapted: f64,
    /// Clean data through a model adapted on the clean stream.
    pub w1_clean_adapted: f64,
    pub samples: usize,
}

/// Per-channel running moments and extremes of one condition.
struct ChannelScan {
    min: Vec<f64>,
    max: Vec<f64>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    count: usize,
}

/// Calls `f` with each chunk of BN-layer outputs for `ds` under `model`.
fn for_each_output(
    model: &Model,
    ds: &Dataset,
    end: usize,
    chunk: usize,
    mut f: impl FnMut(&Tensor),
) -> Result<()> {
    let mut start = 0;
    while start < ds.len() {
        let stop = (start + chunk).min(ds.len());
        let out = model.forward_eval_range(&ds.images.slice_batch(start, stop), 0, end)?;
        f(&out);
        start = stop;
    }
    Ok(())
}

fn scan(model: &Model, ds: &Dataset, end: usize, chunk: usize, channels: usize) -> Result<ChannelScan> {
    let mut s = ChannelScan {
        min: vec![f64::INFINITY; channels],
        max: vec![f64::NEG_INFINITY; channels],
        sum: vec![0.0; channels],
        sumsq: vec![0.0; channels],
        count: 0,
    };
    for_each_output(model, ds, end, chunk, |out| {
        let plane = out.h() * out.w();
        for i in 0..out.n() {
            for (c, vals) in out.item(i).chunks(plane).enumerate() {
                for &v in vals {
                    s.min[c] = s.min[c].min(v);
                    s.max[c] = s.max[c].max(v);
                    s.sum[c] += v;
                    s.sumsq[c] += v * v;
                }
            }
        }
        s.count += out.n() * plane;
    })?;
    Ok(s)
}

fn histogram(
    model: &Model,
    ds: &Dataset,
    end: usize,
    chunk: usize,
    ranges: &[(f64, f64)],
    bins: usize,
) -> Result<Vec<Vec<u64>>> {
    let mut counts = vec![vec![0u64; bins]; ranges.len()];
    for_each_output(model, ds, end, chunk, |out| {
        let plane = out.h() * out.w();
        for i in 0..out.n() {
            for (c, vals) in out.item(i).chunks(plane).enumerate() {
                let (lo, hi) = ranges[c];
                for &v in vals {
                    let b = (((v - lo) / (hi - lo)) * bins as f64).floor();
                    counts[c][(b.max(0.0) as usize).min(bins - 1)] += 1;
                }
            }
        }
    })?;
    Ok(counts)
}

/// 1-Wasserstein distance between two histograms on the same grid.
fn w1_binned(a: &[u64], b: &[u64], width: f64) -> f64 {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (mut ca, mut cb, mut d) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ca += *x as f64 / na;
        cb += *y as f64 / nb;
        d += (ca - cb).abs() * width;
    }
    d
}

/// Histograms and moments of a BN layer's outputs for clean data under
/// the source model, corrupted data under the source model, and corrupted
/// data after DUA on the corrupted stream.
pub fn export_density(source: &Model, cfg: &ExperimentConfig, bed: &TestBed) -> Result<DensityResult> {
    let layer = &cfg.density_layer;
    let idx = match source.bn_index(layer) {
        Some(i) => i,
        None => {
            return Err(dua_core::Error::Parameter(format!("unknown batch-norm layer '{layer}'")).into());
        }
    };
    let channels = source.bn(layer).expect("indexed").channels();
    let n = cfg.density_samples.min(bed.eval_idx.len());
    let take: Vec<usize> = (0..n).collect();
    let clean = bed.clean_eval.subset(&take)?;
    let shifted = bed.corrupt_eval.subset(&take)?;

    let seed = cfg.run_seed(0);
    let order = stream(bed, cfg, seed);
    let adapt_on = |pool: &Dataset| -> Result<Model> {
        let mut ad = Adapter::new(source.clone(), cfg.adapt_config(source, seed)?, Arm::Dua);
        for &i in &order {
            ad.step(&pool.sample(i))?;
        }
        Ok(ad.model)
    };
    let adapted = adapt_on(&bed.corrupt)?;
    let clean_adapted = adapt_on(&bed.clean)?;

    let end = idx + 1;
    let chunk = cfg.eval_chunk;
    let conditions: [(&str, &Model, &Dataset); 4] = [
        ("clean", source, &clean),
        ("shift", source, &shifted),
        ("adapted", &adapted, &shifted),
        ("clean_adapted", &clean_adapted, &clean),
    ];
    let scans: Vec<ChannelScan> = conditions
        .iter()
        .map(|(_, m, d)| scan(m, d, end, chunk, channels))
        .collect::<Result<_>>()?;
    let ranges: Vec<(f64, f64)> = (0..channels)
        .map(|c| {
            let lo = scans.iter().map(|s| s.min[c]).fold(f64::INFINITY, f64::min);
            let hi = scans.iter().map(|s| s.max[c]).fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        })
        .collect();
    let bins = cfg.density_bins;
    let hists: Vec<Vec<Vec<u64>>> = conditions
        .iter()
        .map(|(_, m, d)| histogram(m, d, end, chunk, &ranges, bins))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(channels * bins);
    for (c, &(lo, hi)) in ranges.iter().enumerate() {
        let width = (hi - lo) / bins as f64;
        for b in 0..bins {
            rows.push(DensityRow {
                layer: layer.clone(),
                channel: c,
                bin_lo: lo + b as f64 * width,
                bin_hi: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
                count_clean: hists[0][c][b],
                count_shift: hists[1][c][b],
                count_adapted: hists[2][c][b],
            });
        }
    }
    let mut moments = Vec::new();
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (ci, (name, _, _)) in conditions.iter().enumerate().take(3) {
        let s = &scans[ci];
        let cnt = s.count as f64;
        for c in 0..channels {
            let mean = s.sum[c] / cnt;
            moments.push(MomentRow {
                layer: layer.clone(),
                channel: c,
                condition: name.to_string(),
                mean,
                var: (s.sumsq[c] / cnt - mean * mean).max(0.0),
            });
            means.entry(name).or_default().push(mean);
        }
    }
    let gap = |a: &str, b: &str| {
        let (x, y) = (&means[a], &means[b]);
        x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / channels as f64
    };
    let w1 = |i: usize, j: usize| {
        (0..channels)
            .map(|c| w1_binned(&hists[i][c], &hists[j][c], (ranges[c].1 - ranges[c].0) / bins as f64))
            .sum::<f64>()
            / channels as f64
    };
    let unadapted = gap("shift", "clean");
    let adapted_gap = gap("adapted", "clean");
    Ok(DensityResult {
        rows,
        moments,
        mean_abs_shift_unadapted: unadapted,
        mean_abs_shift_adapted: adapted_gap,
        alignment_ratio: adapted_gap / unadapted,
        w1_shift: w1(0, 1),
        w1_adapted: w1(0, 2),
        w1_clean_adapted: w1(0, 3),
        samples: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub corruption: String,
    pub severity: u8,
    pub error_pct: f64,
}

/// Source error on the eval slice: clean, then every corruption at every
/// severity.
pub fn run_eval(source: &Model, cfg: &ExperimentConfig, bed: &TestBed) -> Result<Vec<EvalRow>> {
    let mut rows = vec![EvalRow {
        corruption: "clean".into(),
        severity: 0,
        error_pct: error_pct(source, &bed.clean_eval, cfg.eval_chunk)?,
    }];
    for kind in CorruptionKind::ALL {
        for severity in 1..=5 {
            let spec = CorruptionSpec::new(kind, severity)?;
            let ds = corrupt_dataset(&bed.clean_eval, spec, cfg.data_seed)?;
            rows.push(EvalRow {
                corruption: kind.name().into(),
                severity,
                error_pct: error_pct(source, &ds, cfg.eval_chunk)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1_of_shifted_histogram() {
        // all mass moves by two bins
        assert!((w1_binned(&[4, 0, 0], &[0, 0, 4], 0.5) - 1.0).abs() < 1e-15);
        assert_eq!(w1_binned(&[1, 2, 3], &[2, 4, 6], 1.0), 0.0);
    }
}
