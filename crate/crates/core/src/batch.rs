//! Multi-run experiment driver: repeats generation runs (optionally across
//! a sweep of size parameters), tallies the per-run evaluations into count
//! columns, and writes a JSON report plus a readable text table.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::EvaluationReport;
use crate::pipeline::{self, ParagraphRange, PipelineError, RunConfig};

pub const DEFAULT_BATCH_RUNS: u32 = 10;
/// A run counts toward the coherence column when its judge score reaches
/// this.
pub const DEFAULT_COHERENCE_THRESHOLD: u8 = 70;

/// One sweep setting: how large the story, objective list, and important
/// set are asked to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub story_paragraphs: ParagraphRange,
    pub objective_count: u32,
    pub important_tile_cap: usize,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        format!(
            "{}-{}p/{}obj/cap{}",
            self.story_paragraphs.min,
            self.story_paragraphs.max,
            self.objective_count,
            self.important_tile_cap
        )
    }

    fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut config = base.clone();
        config.story_paragraphs = self.story_paragraphs;
        config.objective_count = self.objective_count;
        config.important_tile_cap = self.important_tile_cap;
        config
    }
}

/// What to run: the shared base config, how many repetitions, and an
/// optional parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSpec {
    pub runs: u32,
    pub base: RunConfig,
    pub sweep: Option<Vec<SweepPoint>>,
    pub output_root: PathBuf,
    /// Worker threads; defaults to the number of sweep points.
    pub workers: Option<usize>,
    pub coherence_threshold: u8,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            runs: DEFAULT_BATCH_RUNS,
            base: RunConfig::default(),
            sweep: None,
            output_root: PathBuf::from("runs"),
            workers: None,
            coherence_threshold: DEFAULT_COHERENCE_THRESHOLD,
        }
    }
}

/// How many runs satisfied each headline predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BatchCounts {
    pub novelty: u32,
    pub playability: u32,
    pub novel_and_playable: u32,
    pub completion: u32,
}

/// One run's contribution to a report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_index: u32,
    /// Run directory, relative to the batch output root.
    pub dir: String,
    pub completed: bool,
    /// The final world's evaluation; absent when the run never produced a
    /// world.
    pub evaluation: Option<EvaluationReport>,
    /// Populated when the run aborted with a hard error.
    pub error: Option<String>,
}

/// Aggregates for one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub label: String,
    pub runs: u32,
    pub counts: BatchCounts,
    /// Mean judge score over runs that were judged.
    pub coherence_mean: Option<f64>,
    /// Runs whose judge score met the threshold.
    pub coherence_count: u32,
    /// Mean and population standard deviation of the per-run agent
    /// rewards, over runs that played episodes.
    pub agent_reward_mean_std: Option<(f64, f64)>,
    pub per_run: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub spec: BatchSpec,
    pub rows: Vec<BatchRow>,
}

/// `"0.3421 ± 0.37"`: mean to four decimals, spread to two.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.2}")
}

/// Runs the whole batch. Sweep points execute in parallel; runs within a
/// point execute sequentially with seeds `base.seed + run_index`. A run
/// that fails hard is recorded as a non-completion and the batch moves on.
pub fn run_batch(spec: &BatchSpec) -> Result<BatchReport, PipelineError> {
    let points: Vec<(String, RunConfig, PathBuf)> = match &spec.sweep {
        Some(sweep) => sweep
            .iter()
            .enumerate()
            .map(|(index, point)| {
                (
                    point.label(),
                    point.apply(&spec.base),
                    PathBuf::from(format!("point_{index}")),
                )
            })
            .collect(),
        None => vec![("base".to_owned(), spec.base.clone(), PathBuf::new())],
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.unwrap_or(points.len()).max(1))
        .build()
        .expect("worker pool builds");
    let rows: Vec<BatchRow> = pool.install(|| {
        points
            .par_iter()
            .map(|(label, config, subdir)| run_point(spec, label, config, subdir))
            .collect()
    });

    let report = BatchReport { spec: spec.clone(), rows };
    fs::create_dir_all(&spec.output_root).map_err(|source| PipelineError::Artifact {
        path: spec.output_root.clone(),
        source,
    })?;
    let json_path = spec.output_root.join("batch_report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&json_path, json + "\n").map_err(|source| PipelineError::Artifact {
        path: json_path,
        source,
    })?;
    let table_path = spec.output_root.join("report.txt");
    fs::write(&table_path, render_table(&report)).map_err(|source| PipelineError::Artifact {
        path: table_path,
        source,
    })?;
    Ok(report)
}

fn run_point(spec: &BatchSpec, label: &str, config: &RunConfig, subdir: &Path) -> BatchRow {
    let mut per_run = Vec::with_capacity(spec.runs as usize);
    for run_index in 0..spec.runs {
        let mut run_config = config.clone();
        run_config.seed = config.seed.wrapping_add(run_index as u64);
        let relative = subdir.join(format!("run_{run_index}"));
        let dir = spec.output_root.join(&relative);
        let summary = match pipeline::run(&run_config, &dir) {
            Ok(artifact) => RunSummary {
                run_index,
                dir: relative.to_string_lossy().into_owned(),
                completed: artifact.completed,
                evaluation: artifact.final_evaluation().cloned(),
                error: None,
            },
            Err(error) => RunSummary {
                run_index,
                dir: relative.to_string_lossy().into_owned(),
                completed: false,
                evaluation: None,
                error: Some(error.to_string()),
            },
        };
        per_run.push(summary);
    }
    summarize_point(label, spec.runs, spec.coherence_threshold, per_run)
}

/// Collapses per-run results into one report row; factored out so reports
/// can be rebuilt from persisted run JSON.
pub fn summarize_point(
    label: &str,
    runs: u32,
    coherence_threshold: u8,
    per_run: Vec<RunSummary>,
) -> BatchRow {
    let mut counts = BatchCounts::default();
    let mut coherence_scores = Vec::new();
    let mut coherence_count = 0u32;
    let mut rewards = Vec::new();
    for summary in &per_run {
        if summary.completed {
            counts.completion += 1;
        }
        let Some(evaluation) = &summary.evaluation else { continue };
        if evaluation.is_novel {
            counts.novelty += 1;
        }
        if evaluation.playable {
            counts.playability += 1;
        }
        if evaluation.novel_and_playable {
            counts.novel_and_playable += 1;
        }
        if let Some(score) = evaluation.coherence {
            coherence_scores.push(score as f64);
            if score >= coherence_threshold {
                coherence_count += 1;
            }
        }
        if let Some(reward) = evaluation.agent_reward {
            rewards.push(reward);
        }
    }
    let coherence_mean = (!coherence_scores.is_empty())
        .then(|| coherence_scores.iter().sum::<f64>() / coherence_scores.len() as f64);
    let agent_reward_mean_std = (!rewards.is_empty()).then(|| mean_and_std(&rewards));
    BatchRow {
        label: label.to_owned(),
        runs,
        counts,
        coherence_mean,
        coherence_count,
        agent_reward_mean_std,
        per_run,
    }
}

/// Mean and population standard deviation.
fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, variance.sqrt())
}

/// Plain-text presentation of a batch report, one aligned row per setting.
pub fn render_table(report: &BatchReport) -> String {
    let headers = [
        "setting",
        "runs",
        "novel",
        "playable",
        "novel+playable",
        "completed",
        "coherence",
        "reward",
    ];
    let mut rows: Vec<[String; 8]> = Vec::new();
    for row in &report.rows {
        let coherence = match row.coherence_mean {
            Some(mean) => format!("{:.1} avg / {} ≥ {}", mean, row.coherence_count, report.spec.coherence_threshold),
            None => "n/a".to_owned(),
        };
        let reward = match row.agent_reward_mean_std {
            Some((mean, std)) => format_mean_std(mean, std),
            None => "n/a".to_owned(),
        };
        rows.push([
            row.label.clone(),
            row.runs.to_string(),
            row.counts.novelty.to_string(),
            row.counts.playability.to_string(),
            row.counts.novel_and_playable.to_string(),
            row.counts.completion.to_string(),
            coherence,
            reward,
        ]);
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (index, cell) in row.iter().enumerate() {
            widths[index] = widths[index].max(cell.chars().count());
        }
    }
    let render_line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(index, cell)| format!("{cell:<width$}", width = widths[index]))
            .collect();
        padded.join("  ").trim_end().to_owned() + "\n"
    };
    let mut out = render_line(&headers.map(str::to_owned));
    out.push_str(&render_line(
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
    ));
    for row in rows {
        out.push_str(&render_line(&row));
    }
    out
}
