//! Experiment runner and summary tables.
//!
//! Each run writes `output_dir/<env>/<variant>/<point>/<seed>/` holding
//! `metrics.csv`, `diagnostics.csv`, `policy.dncp`, `partition.json` and
//! `run.json`. `<point>` is the penalty weight, with `-kl<max_kl>` appended
//! when the trust-region radius is swept as well. Variants that ignore the
//! penalty run once per trust-region radius at point `0`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_policy;
use crate::config::ExperimentConfig;
use crate::dnc::{DiagnosticsRow, DncConfig, Trainer, Variant};
use crate::envs::make_env;
use crate::error::{DncError, Result};
use crate::metrics::{final_row, read_metrics, write_csv, write_metrics, MetricsRow, Scope};
use crate::trpo::TrpoConfig;

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub env: String,
    pub variant: Variant,
    pub alpha: f64,
    pub max_kl: f64,
    pub seed: u64,
    pub iterations: usize,
    pub eval_episodes: usize,
    /// Seed of the final global evaluation; `dnc eval` replays it.
    pub final_eval_seed: u64,
    pub completed_iterations: usize,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    pub alpha: f64,
    pub max_kl: f64,
    pub seed: u64,
    pub dir: PathBuf,
}

fn format_float(v: f64) -> String {
    format!("{v}")
}

fn uses_alpha(v: Variant) -> bool {
    !matches!(v, Variant::TrpoMonolithic | Variant::Unconstrained)
}

/// Every run of `cfg`, in execution order.
pub fn enumerate_runs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let max_kls = cfg.max_kls();
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        let alphas = if uses_alpha(variant) { cfg.alphas() } else { vec![0.0] };
        for &alpha in &alphas {
            for &max_kl in &max_kls {
                let mut point = format_float(alpha);
                if max_kls.len() > 1 {
                    point = format!("{point}-kl{}", format_float(max_kl));
                }
                for &seed in &cfg.seeds {
                    let dir = cfg
                        .output_dir
                        .join(&cfg.env_name)
                        .join(variant.as_str())
                        .join(&point)
                        .join(seed.to_string());
                    out.push(RunSpec {
                        variant,
                        alpha,
                        max_kl,
                        seed,
                        dir,
                    });
                }
            }
        }
    }
    out
}

/// Trains one run and writes its directory. Training errors are recorded in
/// `run.json` next to the partial metrics rather than returned.
pub fn execute_run(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<RunRecord> {
    let env = make_env(&cfg.env_name)?;
    fs::create_dir_all(&spec.dir).map_err(|e| DncError::io(&spec.dir, e))?;
    let dnc = DncConfig {
        variant: spec.variant,
        alpha: spec.alpha,
        ..cfg.dnc.clone()
    };
    let trpo = TrpoConfig {
        max_kl: spec.max_kl,
        ..cfg.trpo.clone()
    };
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut diagnostics: Vec<DiagnosticsRow> = Vec::new();
    let mut record = RunRecord {
        env: cfg.env_name.clone(),
        variant: spec.variant,
        alpha: spec.alpha,
        max_kl: spec.max_kl,
        seed: spec.seed,
        iterations: dnc.iterations,
        eval_episodes: cfg.eval_episodes,
        final_eval_seed: crate::dnc::final_eval_seed(spec.seed),
        completed_iterations: 0,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let mut trainer = Trainer::new(env.as_ref(), &dnc, &trpo, &cfg.run_options(), spec.seed)?;
        trainer.state().partition.save(&spec.dir.join("partition.json"))?;
        while !trainer.is_done() {
            let rep = trainer.step()?;
            metrics.extend(rep.rows);
            diagnostics.extend(rep.diagnostics);
            record.completed_iterations = rep.iteration;
        }
        let state = trainer.state();
        save_policy(&state.global_policy, &spec.dir.join("policy.dncp"))?;
        if !spec.variant.has_global() {
            for (i, p) in state.local_policies.iter().enumerate() {
                save_policy(p, &spec.dir.join(format!("policy_{i}.dncp")))?;
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    write_metrics(&spec.dir.join("metrics.csv"), &metrics)?;
    write_csv(&spec.dir.join("diagnostics.csv"), &diagnostics)?;
    let json = serde_json::to_string_pretty(&record)?;
    fs::write(spec.dir.join("run.json"), json).map_err(|e| DncError::io(&spec.dir, e))?;
    Ok(record)
}

/// Runs every configured run, then writes `summary.csv` in the output
/// directory. Failed runs are reported in the returned records.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<RunRecord>, Vec<SummaryRow>)> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| DncError::io(&cfg.output_dir, e))?;
    fs::write(cfg.output_dir.join("config.json"), cfg.to_json()).map_err(|e| DncError::io(&cfg.output_dir, e))?;
    let mut records = Vec::new();
    for spec in enumerate_runs(cfg) {
        let rec = match execute_run(cfg, &spec) {
            Ok(r) => r,
            Err(e) => RunRecord {
                env: cfg.env_name.clone(),
                variant: spec.variant,
                alpha: spec.alpha,
                max_kl: spec.max_kl,
                seed: spec.seed,
                iterations: cfg.dnc.iterations,
                eval_episodes: cfg.eval_episodes,
                final_eval_seed: crate::dnc::final_eval_seed(spec.seed),
                completed_iterations: 0,
                error: Some(e.to_string()),
            },
        };
        records.push(rec);
    }
    let summary = summarize(&cfg.output_dir)?;
    Ok((records, summary))
}

/// Scope whose final row is a variant's headline result.
pub fn headline_scope(variant: Variant) -> Scope {
    if variant.has_global() {
        Scope::Global
    } else {
        Scope::Oracle
    }
}

/// One completed run as read back from disk.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub metrics: Vec<MetricsRow>,
}

impl RunResult {
    pub fn final_return(&self) -> Option<f64> {
        final_row(&self.metrics, headline_scope(self.record.variant)).map(|r| r.mean_return)
    }

    pub fn final_success(&self) -> Option<f64> {
        final_row(&self.metrics, headline_scope(self.record.variant)).map(|r| r.success_rate)
    }
}

/// Reads every run directory under `dir`, sorted by path.
pub fn load_runs(dir: &Path) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| DncError::Input(e.to_string()))?;
        if entry.file_name() != "run.json" {
            continue;
        }
        let run_dir = entry.path().parent().expect("file has a parent").to_path_buf();
        let text = fs::read_to_string(entry.path()).map_err(|e| DncError::io(entry.path(), e))?;
        let record: RunRecord = serde_json::from_str(&text)?;
        let metrics = read_metrics(&run_dir.join("metrics.csv"))?;
        out.push(RunResult {
            dir: run_dir,
            record,
            metrics,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub variant: Variant,
    pub alpha: f64,
    pub max_kl: f64,
    pub seeds: usize,
    pub failed_runs: usize,
    pub final_return_mean: f64,
    pub final_return_sd: f64,
    pub final_success_mean: f64,
    /// Best sweep point of this (env, variant) by mean final return.
    pub best_point: bool,
    /// Best variant of this env, among best sweep points.
    pub best_variant: bool,
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregates final headline results per (env, variant, alpha, max_kl) and
/// flags the best sweep point and variant.
pub fn summary_table(runs: &[RunResult]) -> Vec<SummaryRow> {
    type Key = (String, Variant, u64, u64);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for r in runs {
        let key = (
            r.record.env.clone(),
            r.record.variant,
            r.record.alpha.to_bits(),
            r.record.max_kl.to_bits(),
        );
        let g = groups.entry(key).or_default();
        match (r.record.ok(), r.final_return(), r.final_success()) {
            (true, Some(ret), Some(succ)) => {
                g.0.push(ret);
                g.1.push(succ);
            }
            _ => g.2 += 1,
        }
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((env, variant, a, k), (rets, succs, failed))| {
            let (m, sd) = mean_sd(&rets);
            SummaryRow {
                env,
                variant,
                alpha: f64::from_bits(a),
                max_kl: f64::from_bits(k),
                seeds: rets.len(),
                failed_runs: failed,
                final_return_mean: m,
                final_return_sd: sd,
                final_success_mean: mean_sd(&succs).0,
                best_point: false,
                best_variant: false,
            }
        })
        .collect();
    let better =
        |a: &SummaryRow, b: &SummaryRow| a.seeds > 0 && (b.seeds == 0 || a.final_return_mean > b.final_return_mean);
    let mut best_point: BTreeMap<(String, Variant), usize> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let e = best_point.entry((r.env.clone(), r.variant)).or_insert(i);
        if better(r, &rows[*e]) {
            *e = i;
        }
    }
    let mut best_variant: BTreeMap<String, usize> = BTreeMap::new();
    for &i in best_point.values() {
        rows[i].best_point = true;
        let e = best_variant.entry(rows[i].env.clone()).or_insert(i);
        if better(&rows[i], &rows[*e]) {
            *e = i;
        }
    }
    for &i in best_variant.values() {
        rows[i].best_variant = true;
    }
    rows
}

/// Rebuilds `summary.csv` in `dir` from the run directories below it.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows = summary_table(&load_runs(dir)?);
    write_csv(&dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

/// Fixed-width text rendering of a summary.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<12} {:<16} {:>8} {:>8} {:>5} {:>24} {:>8}\n",
        "env", "variant", "alpha", "max_kl", "seeds", "final return", "success"
    );
    for r in rows {
        let flag = match (r.best_variant, r.best_point) {
            (true, _) => " **",
            (false, true) => " *",
            _ => "",
        };
        out.push_str(&format!(
            "{:<12} {:<16} {:>8} {:>8} {:>5} {:>12.3} ± {:<9.3} {:>8.3}{flag}\n",
            r.env,
            r.variant.as_str(),
            format_float(r.alpha),
            format_float(r.max_kl),
            r.seeds,
            r.final_return_mean,
            r.final_return_sd,
            r.final_success_mean,
        ));
    }
    out
}
