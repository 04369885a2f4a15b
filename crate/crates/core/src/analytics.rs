//! Closed-form speedup models, dataset statistics, and throughput reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::PreferenceSample;

/// Ideal speedup of prefix sharing when runtime scales linearly with token
/// count: `2(p + c) / (p + 2c)` for prompt length `p` and completion length
/// `c` (both completions of length `c`).
pub fn ideal_linear_speedup(p: usize, c: usize) -> Result<f64> {
    if c == 0 {
        return Err(Error::Config(
            "ideal_linear_speedup requires completion length > 0".into(),
        ));
    }
    let p = p as f64;
    let c = c as f64;
    Ok(2.0 * (p + c) / (p + 2.0 * c))
}

/// Ideal speedup of the quadratic self-attention term:
/// `2(p + c)^2 / (2(p + c)^2 - p^2)`.
pub fn ideal_attention_speedup(p: usize, c: usize) -> Result<f64> {
    if c == 0 {
        return Err(Error::Config(
            "ideal_attention_speedup requires completion length > 0".into(),
        ));
    }
    let p = p as f64;
    let c = c as f64;
    let full = 2.0 * (p + c) * (p + c);
    Ok(full / (full - p * p))
}

/// How the "overall length" of a sample is measured. The headline statistic
/// is the length of the longer paired row; the alternatives are provided
/// because the choice is a convention, not a law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OverallLenDef {
    /// `p + max(c1, c2)`.
    #[default]
    PromptPlusMaxCompletion,
    /// `p + (c1 + c2) / 2`.
    PromptPlusMeanCompletion,
    /// Full shared-row length `p + c1 + c2`.
    SharedLength,
}

/// Token-accounting statistics of a preference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    /// Median over samples of the overall length (see [`OverallLenDef`]).
    pub median_overall_len: f64,
    /// Median over samples of `p / mean(c1, c2)`.
    pub median_prefix_completion_ratio: f64,
    pub total_paired_tokens: usize,
    pub total_shared_tokens: usize,
    /// `total_paired_tokens / total_shared_tokens`; the token-level speedup
    /// bound prefix sharing can deliver.
    pub predicted_token_reduction: f64,
}

/// Compute [`DatasetStats`]. Permutation-invariant over samples.
pub fn dataset_stats(
    samples: &[PreferenceSample],
    overall_def: OverallLenDef,
) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(Error::Data("dataset_stats over an empty dataset".into()));
    }
    let mut overall: Vec<f64> = Vec::with_capacity(samples.len());
    let mut ratios: Vec<f64> = Vec::with_capacity(samples.len());
    let mut total_paired = 0usize;
    let mut total_shared = 0usize;
    for sample in samples {
        let p = sample.prompt.len() as f64;
        let c1 = sample.chosen.len() as f64;
        let c2 = sample.rejected.len() as f64;
        overall.push(match overall_def {
            OverallLenDef::PromptPlusMaxCompletion => p + c1.max(c2),
            OverallLenDef::PromptPlusMeanCompletion => p + (c1 + c2) / 2.0,
            OverallLenDef::SharedLength => p + c1 + c2,
        });
        ratios.push(p / ((c1 + c2) / 2.0));
        total_paired += sample.paired_tokens();
        total_shared += sample.shared_tokens();
    }
    Ok(DatasetStats {
        n_samples: samples.len(),
        median_overall_len: median(&mut overall),
        median_prefix_completion_ratio: median(&mut ratios),
        total_paired_tokens: total_paired,
        total_shared_tokens: total_shared,
        predicted_token_reduction: total_paired as f64 / total_shared as f64,
    })
}

/// Median with midpoint interpolation for even counts. Sorts in place.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// One measured training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeasurement {
    pub label: String,
    pub samples_per_sec: f64,
    /// Timed steps (after warmup); must match across runs.
    pub steps: usize,
    /// Dataset size; must match across runs.
    pub n_samples: usize,
}

/// Throughput comparison across configurations, in samples per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub baseline: String,
    pub rows: Vec<ThroughputRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub label: String,
    pub samples_per_sec: f64,
    /// Rate relative to the first (baseline) configuration.
    pub speedup_vs_baseline: f64,
}

/// Build a comparison table. The first run is the baseline; all runs must
/// have measured the same dataset for the same number of timed steps.
pub fn throughput_report(runs: &[RunMeasurement]) -> Result<ThroughputReport> {
    if runs.len() < 2 {
        return Err(Error::Config(
            "throughput comparison needs at least two measured configs".into(),
        ));
    }
    let first = &runs[0];
    for run in runs {
        if run.steps != first.steps || run.n_samples != first.n_samples {
            return Err(Error::Config(format!(
                "config {} measured {} steps over {} samples; baseline used {} steps over {}",
                run.label, run.steps, run.n_samples, first.steps, first.n_samples
            )));
        }
        if !(run.samples_per_sec.is_finite() && run.samples_per_sec > 0.0) {
            return Err(Error::NonFinite(format!("throughput of {}", run.label)));
        }
    }
    Ok(ThroughputReport {
        baseline: first.label.clone(),
        rows: runs
            .iter()
            .map(|run| ThroughputRow {
                label: run.label.clone(),
                samples_per_sec: run.samples_per_sec,
                speedup_vs_baseline: run.samples_per_sec / first.samples_per_sec,
            })
            .collect(),
    })
}

impl ThroughputReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| config | samples/sec | speedup vs baseline |\n");
        out.push_str("|---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4}x |\n",
                row.label, row.samples_per_sec, row.speedup_vs_baseline
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,samples_per_sec,speedup_vs_baseline\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                row.label, row.samples_per_sec, row.speedup_vs_baseline
            ));
        }
        out
    }
}

/// Wall-clock measurement of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTiming {
    pub samples: usize,
    pub seconds: f64,
}

/// Samples/sec over timed steps: the first `warmup` steps are discarded and
/// the median per-step rate is reported.
pub fn harness_samples_per_sec(timings: &[StepTiming], warmup: usize) -> Result<f64> {
    if timings.len() <= warmup {
        return Err(Error::Config(format!(
            "need more than {warmup} warmup steps, got {} total",
            timings.len()
        )));
    }
    let mut rates: Vec<f64> = timings[warmup..]
        .iter()
        .map(|t| t.samples as f64 / t.seconds.max(1e-12))
        .collect();
    Ok(median(&mut rates))
}

/// Default number of untimed warmup steps.
pub const DEFAULT_WARMUP_STEPS: usize = 3;

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(p: usize, c1: usize, c2: usize) -> PreferenceSample {
        PreferenceSample {
            prompt: vec![0; p],
            chosen: vec![1; c1],
            rejected: vec![2; c2],
        }
    }

    #[test]
    fn linear_speedup_exact_values() {
        assert_eq!(ideal_linear_speedup(512, 512).unwrap(), 4.0 / 3.0);
        assert_eq!(ideal_linear_speedup(0, 100).unwrap(), 1.0);
        // p >> c approaches 2.
        assert!(ideal_linear_speedup(1_000_000, 1).unwrap() > 1.999);
        assert!(ideal_linear_speedup(1_000_000, 1).unwrap() < 2.0);
    }

    #[test]
    fn attention_speedup_exact_values() {
        assert_eq!(ideal_attention_speedup(512, 512).unwrap(), 8.0 / 7.0);
        assert_eq!(ideal_attention_speedup(0, 64).unwrap(), 1.0);
        assert!(ideal_attention_speedup(1_000_000, 1).unwrap() > 1.999);
    }

    #[test]
    fn zero_completion_is_a_domain_error() {
        assert!(ideal_linear_speedup(10, 0).is_err());
        assert!(ideal_attention_speedup(10, 0).is_err());
    }

    #[test]
    fn stats_single_sample() {
        let stats = dataset_stats(&[sample(512, 256, 256)], OverallLenDef::default()).unwrap();
        assert_eq!(stats.median_prefix_completion_ratio, 2.0);
        assert_eq!(stats.predicted_token_reduction, 1536.0 / 1024.0);
        assert_eq!(stats.median_overall_len, 768.0);
    }

    #[test]
    fn stats_empty_prompts_give_unity_reduction() {
        let stats = dataset_stats(
            &[sample(0, 4, 6), sample(0, 2, 2)],
            OverallLenDef::default(),
        )
        .unwrap();
        assert_eq!(stats.predicted_token_reduction, 1.0);
        assert_eq!(stats.median_prefix_completion_ratio, 0.0);
    }

    #[test]
    fn stats_median_ratio_hand_computed() {
        let samples = [sample(4, 2, 2), sample(6, 1, 1), sample(2, 4, 4)];
        let stats = dataset_stats(&samples, OverallLenDef::default()).unwrap();
        // Ratios 2.0, 6.0, 0.5 -> median 2.0.
        assert_eq!(stats.median_prefix_completion_ratio, 2.0);
    }

    #[test]
    fn stats_permutation_invariant() {
        let a = [sample(4, 2, 2), sample(6, 1, 1), sample(2, 4, 4)];
        let b = [sample(2, 4, 4), sample(4, 2, 2), sample(6, 1, 1)];
        assert_eq!(
            dataset_stats(&a, OverallLenDef::default()).unwrap(),
            dataset_stats(&b, OverallLenDef::default()).unwrap()
        );
    }

    #[test]
    fn stats_empty_dataset_errors() {
        assert!(dataset_stats(&[], OverallLenDef::default()).is_err());
    }

    #[test]
    fn reduction_matches_linear_speedup_for_symmetric_completions() {
        for (p, c) in [(512, 256), (100, 100), (0, 7), (1024, 32)] {
            let stats = dataset_stats(&[sample(p, c, c)], OverallLenDef::default()).unwrap();
            assert_eq!(
                stats.predicted_token_reduction,
                ideal_linear_speedup(p, c).unwrap()
            );
        }
    }

    #[test]
    fn throughput_report_basics() {
        let runs = vec![
            RunMeasurement {
                label: "paired".into(),
                samples_per_sec: 10.0,
                steps: 5,
                n_samples: 64,
            },
            RunMeasurement {
                label: "shared".into(),
                samples_per_sec: 15.0,
                steps: 5,
                n_samples: 64,
            },
        ];
        let report = throughput_report(&runs).unwrap();
        assert_eq!(report.rows[1].speedup_vs_baseline, 1.5);
        assert_eq!(report.rows[0].speedup_vs_baseline, 1.0);
        assert!(report.to_markdown().contains("shared"));
        assert!(report.to_csv().lines().count() == 3);
    }

    #[test]
    fn throughput_report_rejects_single_or_mismatched() {
        let one = vec![RunMeasurement {
            label: "only".into(),
            samples_per_sec: 1.0,
            steps: 5,
            n_samples: 64,
        }];
        assert!(throughput_report(&one).is_err());
        let mismatched = vec![
            RunMeasurement {
                label: "a".into(),
                samples_per_sec: 1.0,
                steps: 5,
                n_samples: 64,
            },
            RunMeasurement {
                label: "b".into(),
                samples_per_sec: 1.0,
                steps: 6,
                n_samples: 64,
            },
        ];
        assert!(throughput_report(&mismatched).is_err());
    }

    #[test]
    fn harness_drops_warmup_and_takes_median() {
        let timings = vec![
            StepTiming {
                samples: 4,
                seconds: 10.0,
            }, // warmup
            StepTiming {
                samples: 4,
                seconds: 1.0,
            },
            StepTiming {
                samples: 4,
                seconds: 2.0,
            },
            StepTiming {
                samples: 4,
                seconds: 4.0,
            },
        ];
        let rate = harness_samples_per_sec(&timings, 1).unwrap();
        assert_eq!(rate, 2.0); // median of 4, 2, 1
        assert!(harness_samples_per_sec(&timings, 4).is_err());
    }
}
