//! Command-line entry: argument parsing, config resolution and dispatch.

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use dua_core::checkpoint;
use dua_core::shiftlab::severity_manifest;
use dua_core::Model;
use serde::Serialize;
use serde_json::json;

use crate::config::{Command, ExperimentConfig};
use crate::data::{error_pct, load_test, load_train, TestBed};
use crate::error::Result;
use crate::experiments::*;
use crate::report::Reporter;
use crate::train::train_model;

#[derive(Debug, Parser)]
#[command(name = "dua", version, about = "Test-time batch-norm adaptation experiments")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON config file; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, `key=value` with a JSON value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Cli {
    /// File, then `--set`, then the dedicated flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        cfg.command = self.command;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = c.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config_hash: String,
    wall_time_s: f64,
    artifacts: &'a [String],
    summary: serde_json::Value,
    config: &'a ExperimentConfig,
}

fn load_source(cfg: &ExperimentConfig) -> Result<Model> {
    Ok(checkpoint::load(&cfg.checkpoint)?)
}

fn test_bed(cfg: &ExperimentConfig) -> Result<TestBed> {
    TestBed::new(cfg, load_test(cfg)?)
}

/// Runs `cfg.command`, writing artifacts and `manifest.json` into
/// `cfg.output_dir`. Returns the manifest summary.
pub fn execute(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = cfg.hash();
    let mut out = Reporter::new(&cfg.output_dir, &hash)?;
    out.json("severity_tables.json", &severity_manifest())?;
    let summary = match cfg.command {
        Command::Train => {
            let report = train_model(cfg, &load_train(cfg)?)?;
            checkpoint::save(&report.model, &cfg.checkpoint)?;
            out.csv("train_log.csv", &report.epochs)?;
            let test = load_test(cfg)?;
            let err = error_pct(&report.model, &test, cfg.eval_chunk)?;
            log::info!("clean test error {err:.2}%");
            json!({
                "checkpoint": cfg.checkpoint,
                "clean_test_error_pct": err,
                "epochs": report.epochs,
            })
        }
        Command::Eval => {
            let rows = run_eval(&load_source(cfg)?, cfg, &test_bed(cfg)?)?;
            out.csv("eval.csv", &rows)?;
            json!({ "rows": rows })
        }
        Command::AdaptCurve => {
            let r = run_adapt_curve(&load_source(cfg)?, cfg, &test_bed(cfg)?)?;
            out.csv("adapt_curve.csv", &r.dua.rows)?;
            if let Some(f) = &r.fixed {
                out.csv("adapt_curve_fixed.csv", &f.rows)?;
            }
            if !r.norm.is_empty() {
                out.csv("norm_baseline.csv", &r.norm)?;
            }
            out.json("adapt_curve.json", &r)?;
            json!({
                "source_error_pct": r.source_error_pct,
                "final_error_pct": r.dua.final_error(),
                "final_full_error_pct": r.final_full_error_pct,
                "fixed_final_error_pct": r.fixed.as_ref().map(|f| f.final_error()),
                "norm": r.norm,
                "samples_used": cfg.n_adapt_samples,
            })
        }
        Command::ShuffleStability => {
            let r = run_shuffle_stability(&load_source(cfg)?, cfg, &test_bed(cfg)?)?;
            out.csv("stability.csv", &r.rows)?;
            out.csv("stability_summary.csv", &r.summary)?;
            json!({ "checkpoints": r.summary })
        }
        Command::OmegaSweep => {
            let r = run_omega_sweep(&load_source(cfg)?, cfg, &test_bed(cfg)?)?;
            out.csv("omega_sweep.csv", &r.rows)?;
            out.json("omega_summary.json", &r.summary)?;
            json!({ "omegas": r.summary, "initial_shift_norm": r.initial_shift_norm })
        }
        Command::LayerAblation => {
            let r = run_layer_ablation(&load_source(cfg)?, cfg, &test_bed(cfg)?)?;
            out.csv("layer_ablation.csv", &r.rows)?;
            json!({ "source_error_pct": r.source_error_pct, "masks": r.rows })
        }
        Command::Cycle => {
            let r = run_cycle(&load_source(cfg)?, cfg, &test_bed(cfg)?)?;
            out.csv("cycle.csv", &r.rows)?;
            out.json("cycle_summary.json", &r.segments)?;
            json!({ "segments": r.segments })
        }
        Command::Density => {
            let r = export_density(&load_source(cfg)?, cfg, &test_bed(cfg)?)?;
            out.csv("density.csv", &r.rows)?;
            out.csv("density_moments.csv", &r.moments)?;
            let s = json!({
                "layer": cfg.density_layer,
                "samples": r.samples,
                "mean_abs_shift_unadapted": r.mean_abs_shift_unadapted,
                "mean_abs_shift_adapted": r.mean_abs_shift_adapted,
                "alignment_ratio": r.alignment_ratio,
                "w1_shift": r.w1_shift,
                "w1_adapted": r.w1_adapted,
                "w1_clean_adapted": r.w1_clean_adapted,
            });
            out.json("density_summary.json", &s)?;
            s
        }
        Command::NormBaseline => {
            let rows = run_norm_baseline(&load_source(cfg)?, cfg, &test_bed(cfg)?)?;
            out.csv("norm_baseline.csv", &rows)?;
            json!({ "rows": rows })
        }
    };
    let artifacts = out.written().to_vec();
    let manifest = Manifest {
        command: cfg.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_hash: hash,
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts: &artifacts,
        summary: summary.clone(),
        config: cfg,
    };
    out.json("manifest.json", &manifest)?;
    Ok(summary)
}
