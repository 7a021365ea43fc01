//! Correlating transfer scores with measured transfer accuracy.
//!
//! Records are grouped by target; per-target coefficients are the primary
//! statistic and the pooled ones are secondary.

mod cache;
mod manifest;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use cache::{export_digest, ScoreCache, CACHE_DIR_ENV};
pub use manifest::{EvalManifest, ManifestRecord};
pub use report::{scatter_svg, write_report, ReportFiles};

use crate::container::{load_task_export, read_model_id};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::ot::SinkhornConfig;
use crate::otce::{otce_sampled, Preprocess, SamplingConfig, TransferScore};
use crate::pixelset::{flatten_to_pixelset, PixelSet};
use crate::stats::{pearson, spearman};

/// Fewest points a coefficient is reported over.
pub const MIN_POINTS: usize = 3;

/// Records are scored concurrently only below this many cost cells, so that
/// at most one large cost matrix is alive at a time.
const CONCURRENT_RECORD_CELLS: usize = 1_000_000;

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub cache: Option<ScoreCache>,
    pub preprocess: Preprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub target_id: String,
    pub source_id: String,
    pub otce: f64,
    pub accuracy: f64,
    pub converged_repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub target_id: String,
    pub source_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCorrelation {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric: String,
    /// Pooled over all targets.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub per_target: BTreeMap<String, TargetCorrelation>,
    pub points: Vec<ScorePoint>,
    pub failures: Vec<RecordFailure>,
    pub warnings: Vec<String>,
    pub sampling: SamplingConfig,
    pub solver: SinkhornConfig,
    pub preprocess: Preprocess,
}

impl CorrelationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Mean of the per-target coefficients that could be computed.
    pub fn mean_target_spearman(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .per_target
            .values()
            .filter_map(|t| t.spearman)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn load_pixels(path: &Path) -> Result<PixelSet> {
    flatten_to_pixelset(&load_task_export(path)?)
}

fn score_record(
    record: &ManifestRecord,
    sampling: &SamplingConfig,
    solver: &SinkhornConfig,
    options: &EvalOptions,
) -> Result<TransferScore> {
    let key = match &options.cache {
        Some(_) => Some(ScoreCache::key(
            &record.source_export_path,
            &record.target_export_path,
            sampling,
            solver,
            options.preprocess,
        )?),
        None => None,
    };
    if let (Some(cache), Some(key)) = (&options.cache, &key) {
        if let Some(hit) = cache.get(key) {
            log::debug!("cache hit for {} -> {}", record.source_id, record.target_id);
            return Ok(hit);
        }
    }
    let source = load_pixels(&record.source_export_path)?;
    let target = load_pixels(&record.target_export_path)?;
    let score = otce_sampled(&source, &target, sampling, solver, options.preprocess)?;
    if let (Some(cache), Some(key)) = (&options.cache, &key) {
        if let Err(e) = cache.put(key, &score) {
            log::warn!("could not write score cache: {e}");
        }
    }
    Ok(score)
}

fn model_mismatch(record: &ManifestRecord) -> Option<String> {
    let s = read_model_id(&record.source_export_path)?;
    let t = read_model_id(&record.target_export_path)?;
    (s != t).then(|| {
        format!(
            "{} -> {}: source export was produced by {s:?}, target export by {t:?}",
            record.source_id, record.target_id
        )
    })
}

fn coefficients(
    label: &str,
    x: &[f64],
    y: &[f64],
    warnings: &mut Vec<String>,
) -> (Option<f64>, Option<f64>) {
    if x.len() < MIN_POINTS {
        warnings.push(format!(
            "{label}: {} points, at least {MIN_POINTS} needed; correlation omitted",
            x.len()
        ));
        return (None, None);
    }
    let mut keep = |r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("{label}: {e}"));
            None
        }
    };
    let p = keep(pearson(x, y));
    let s = keep(spearman(x, y));
    (p, s)
}

/// Scores every record and correlates scores with accuracies.
///
/// Records that fail to load or score are listed under `failures`; the run
/// only errors when every record fails.
pub fn run_evaluation(
    manifest: &EvalManifest,
    sampling: &SamplingConfig,
    solver: &SinkhornConfig,
    options: &EvalOptions,
) -> Result<CorrelationReport> {
    manifest.validate()?;
    sampling.validate()?;
    solver.validate()?;

    let mut records: Vec<&ManifestRecord> = manifest.records.iter().collect();
    records.sort_by(|a, b| (&a.target_id, &a.source_id).cmp(&(&b.target_id, &b.source_id)));

    let n = sampling.pixels_per_sample;
    let exec = if n.saturating_mul(n) <= CONCURRENT_RECORD_CELLS {
        sampling.execution
    } else {
        Execution::Sequential
    };
    let results = exec::map_indices(exec, records.len(), |i| {
        score_record(records[i], sampling, solver, options)
    });

    let mut points = Vec::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    for (record, result) in records.iter().zip(results) {
        if let Some(w) = model_mismatch(record) {
            log::warn!("{w}");
            warnings.push(w);
        }
        match result {
            Ok(score) => {
                if score.converged_repetitions < score.config.repetitions {
                    warnings.push(format!(
                        "{} -> {}: {} of {} repetitions did not converge",
                        record.source_id,
                        record.target_id,
                        score.config.repetitions - score.converged_repetitions,
                        score.config.repetitions
                    ));
                }
                points.push(ScorePoint {
                    target_id: record.target_id.clone(),
                    source_id: record.source_id.clone(),
                    otce: score.otce,
                    accuracy: record.transfer_accuracy,
                    converged_repetitions: score.converged_repetitions,
                });
            }
            Err(e) => {
                log::warn!("{} -> {} failed: {e}", record.source_id, record.target_id);
                failures.push(RecordFailure {
                    target_id: record.target_id.clone(),
                    source_id: record.source_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if points.is_empty() {
        let first = failures.first().map(|f| f.error.as_str()).unwrap_or("");
        return Err(Error::Run(format!(
            "all {} records failed; first error: {first}",
            failures.len()
        )));
    }

    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for p in &points {
        let g = groups.entry(p.target_id.as_str()).or_default();
        g.0.push(p.otce);
        g.1.push(p.accuracy);
    }
    let mut per_target = BTreeMap::new();
    for (target, (x, y)) in &groups {
        let (pearson, spearman) = coefficients(&format!("target {target}"), x, y, &mut warnings);
        per_target.insert(
            target.to_string(),
            TargetCorrelation {
                pearson,
                spearman,
                n_pairs: x.len(),
            },
        );
    }
    let x: Vec<f64> = points.iter().map(|p| p.otce).collect();
    let y: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    let (pearson, spearman) = coefficients("pooled", &x, &y, &mut warnings);
    for w in &warnings {
        log::warn!("{w}");
    }

    Ok(CorrelationReport {
        metric: manifest.metric.clone(),
        pearson,
        spearman,
        per_target,
        points,
        failures,
        warnings,
        sampling: SamplingConfig {
            execution: Execution::default(),
            ..*sampling
        },
        solver: SinkhornConfig {
            execution: Execution::default(),
            ..*solver
        },
        preprocess: options.preprocess,
    })
}

/// Default location of the score cache: `$OTSEG_CACHE_DIR`, if set.
pub fn default_cache_dir() -> Option<PathBuf> {
    ScoreCache::from_env().map(|c| c.dir().to_path_buf())
}
