//! Robustness benchmarking: run an attack over a dataset, collect per-sample
//! records, and aggregate them into comparable robustness estimates.
//!
//! The headline estimate is the average perturbation-to-input norm ratio
//! over correctly classified samples (`rho_adv_l2`, with an infinity-norm
//! analog). Raw (pre-overshoot) norms feed the aggregates; overshoot norms
//! are carried as separate columns.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{resolve_attack_epsilon, run_attack, AttackSpec};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::models::{predict_label, Classifier};

/// One attacked sample. Field order is the CSV column order; keep them in
/// sync with serde's declaration-order serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub attack: String,
    pub fooled: bool,
    /// True when the attack raised a numerical failure on this sample; the
    /// norm and iteration fields are zero in that case.
    pub failed: bool,
    pub iterations: usize,
    pub norm2_raw: f64,
    pub norm2_overshoot: f64,
    pub norm_inf_raw: f64,
    pub x_norm2: f64,
    pub x_norm_inf: f64,
    pub rel2: f64,
    pub rel_inf: f64,
    pub wall_ms: f64,
}

/// Dataset-level summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples_total: usize,
    pub samples_evaluated: usize,
    pub excluded_misclassified: usize,
    pub failed: usize,
    /// Error rate of the model on the full dataset, before any attack.
    pub test_error: f64,
    pub fooling_rate: f64,
    pub mean_iterations: f64,
    /// Mean of rel2 over evaluated, non-failed samples.
    pub rho_adv_l2: f64,
    /// Mean of rel_inf over evaluated, non-failed samples.
    pub rho_adv_linf: f64,
    pub mean_norm2_raw: f64,
    pub mean_norm2_overshoot: f64,
    pub total_wall_ms: f64,
}

/// Provenance: exactly which attack ran against exactly which weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub attack: String,
    /// Fully resolved spec (sign-attack epsilon filled in by the search).
    pub attack_spec: AttackSpec,
    pub model_hash: String,
    pub seed: u64,
    pub exclude_misclassified: bool,
    pub threads: usize,
    pub deterministic_timing: bool,
    /// Caller-supplied provenance; the CLI stores its fully resolved
    /// invocation here so every report names the run that produced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub metadata: ReportMetadata,
    pub aggregates: Aggregates,
    pub records: Vec<SampleRecord>,
}

/// Evaluation controls.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Skip samples the model already misclassifies (they need no attack and
    /// would distort the robustness ratio). On by default.
    pub exclude_misclassified: bool,
    /// Attack only the first `limit` samples. Test error still uses all.
    pub limit: Option<usize>,
    /// Worker threads for the per-sample fan-out; 1 keeps everything on the
    /// caller's thread. Results are identical at any thread count.
    pub threads: usize,
    /// Zero out all wall-time fields so reports are byte-identical across
    /// runs and thread counts.
    pub deterministic_timing: bool,
    /// Recorded in the metadata; evaluation itself is deterministic.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exclude_misclassified: true,
            limit: None,
            threads: 1,
            deterministic_timing: false,
            seed: 0,
        }
    }
}

/// Fraction of `data` the model labels differently from the ground truth.
pub fn test_error<C: Classifier + ?Sized>(f: &C, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid_argument("test error needs a non-empty dataset"));
    }
    let mut wrong = 0usize;
    for s in data.samples() {
        if predict_label(f, &s.x)? != s.y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Relative norm with a documented fallback: inputs with zero norm
/// contribute their absolute perturbation norm instead of a ratio.
fn relative(norm: f64, x_norm: f64) -> f64 {
    if x_norm > 0.0 {
        norm / x_norm
    } else {
        norm
    }
}

fn attack_one<C: Classifier + ?Sized + Sync>(
    f: &C,
    s: &Sample,
    spec: &AttackSpec,
    opts: &EvalOptions,
) -> Result<Option<SampleRecord>> {
    let predicted = predict_label(f, &s.x)?;
    if opts.exclude_misclassified && predicted != s.y {
        return Ok(None);
    }
    let x_norm2 = s.x.norm_l2();
    let x_norm_inf = s.x.norm_linf();
    let record = match run_attack(f, &s.x, s.y, spec) {
        Ok(res) => SampleRecord {
            sample_id: s.id,
            attack: spec.name().to_string(),
            fooled: res.fooled,
            failed: false,
            iterations: res.iterations,
            norm2_raw: res.norm2_raw,
            norm2_overshoot: res.norm2_overshoot,
            norm_inf_raw: res.norm_inf_raw,
            x_norm2,
            x_norm_inf,
            rel2: relative(res.norm2_raw, x_norm2),
            rel_inf: relative(res.norm_inf_raw, x_norm_inf),
            wall_ms: if opts.deterministic_timing {
                0.0
            } else {
                res.wall_time_ms
            },
        },
        Err(Error::DegenerateGradient(_)) => SampleRecord {
            sample_id: s.id,
            attack: spec.name().to_string(),
            fooled: false,
            failed: true,
            iterations: 0,
            norm2_raw: 0.0,
            norm2_overshoot: 0.0,
            norm_inf_raw: 0.0,
            x_norm2,
            x_norm_inf,
            rel2: 0.0,
            rel_inf: 0.0,
            wall_ms: 0.0,
        },
        Err(other) => return Err(other),
    };
    Ok(Some(record))
}

/// Aggregation is a deterministic fold in ascending sample-id order, so the
/// same records give bit-identical aggregates regardless of how the dataset
/// was ordered or how many threads attacked it.
fn aggregate(
    records: &[SampleRecord],
    samples_total: usize,
    excluded: usize,
    test_error: f64,
) -> Aggregates {
    let evaluated = records.len();
    let ok: Vec<&SampleRecord> = records.iter().filter(|r| !r.failed).collect();
    let failed = evaluated - ok.len();
    // Empty f64 sums are -0.0 (the Sum identity); pin empty means to +0.0 so
    // degenerate reports do not serialize negative zeros.
    let mean_ok = |field: fn(&SampleRecord) -> f64| -> f64 {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|r| field(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let denom = ok.len().max(1) as f64;
    let fooling_rate = ok.iter().filter(|r| r.fooled).count() as f64 / denom;
    let mean_iterations = mean_ok(|r| r.iterations as f64);
    let rho_adv_l2 = mean_ok(|r| r.rel2);
    let rho_adv_linf = mean_ok(|r| r.rel_inf);
    let mean_norm2_raw = mean_ok(|r| r.norm2_raw);
    let mean_norm2_overshoot = mean_ok(|r| r.norm2_overshoot);
    let total_wall_ms = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.wall_ms).sum::<f64>()
    };
    Aggregates {
        samples_total,
        samples_evaluated: evaluated,
        excluded_misclassified: excluded,
        failed,
        test_error,
        fooling_rate,
        mean_iterations,
        rho_adv_l2,
        rho_adv_linf,
        mean_norm2_raw,
        mean_norm2_overshoot,
        total_wall_ms,
    }
}

/// Runs `spec` against (up to `limit` of) the dataset and produces a full
/// report. A sign attack without a fixed epsilon is first resolved by the
/// target-rate search over the same evaluation slice; the resolved value is
/// recorded in the metadata.
pub fn evaluate_robustness<C: Classifier + Sync + ?Sized>(
    f: &C,
    model_hash: &str,
    data: &Dataset,
    spec: &AttackSpec,
    opts: &EvalOptions,
) -> Result<RobustnessReport> {
    if data.is_empty() {
        return Err(Error::invalid_argument("evaluation needs a non-empty dataset"));
    }
    let eval_slice = data.head(opts.limit);

    // The epsilon search sees exactly the samples under evaluation.
    let resolved = if matches!(
        spec,
        AttackSpec::FastGradientSign { epsilon: None, .. }
    ) {
        let subset = Dataset::new(
            eval_slice.to_vec(),
            data.input_dim(),
            data.num_classes(),
            data.feature_range(),
        )?;
        resolve_attack_epsilon(f, &subset, spec)?
    } else {
        spec.clone()
    };

    let run = |samples: &[Sample]| -> Result<Vec<Option<SampleRecord>>> {
        samples
            .par_iter()
            .map(|s| attack_one(f, s, &resolved, opts))
            .collect()
    };
    let raw: Vec<Option<SampleRecord>> = if opts.threads == 1 {
        eval_slice
            .iter()
            .map(|s| attack_one(f, s, &resolved, opts))
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::invalid_argument(format!("thread pool: {e}")))?;
        pool.install(|| run(eval_slice))?
    };

    let excluded = raw.iter().filter(|r| r.is_none()).count();
    let mut records: Vec<SampleRecord> = raw.into_iter().flatten().collect();
    records.sort_by_key(|r| r.sample_id);

    let err = test_error(f, data)?;
    let aggregates = aggregate(&records, eval_slice.len(), excluded, err);
    Ok(RobustnessReport {
        metadata: ReportMetadata {
            attack: resolved.name().to_string(),
            attack_spec: resolved,
            model_hash: model_hash.to_string(),
            seed: opts.seed,
            exclude_misclassified: opts.exclude_misclassified,
            threads: opts.threads,
            deterministic_timing: opts.deterministic_timing,
            experiment: None,
        },
        aggregates,
        records,
    })
}

/// Convenience: the l2 robustness estimate alone, measured with DeepFool.
pub fn rho_adv<C: Classifier + Sync + ?Sized>(
    f: &C,
    data: &Dataset,
    config: &crate::attacks::AttackConfig,
) -> Result<f64> {
    let spec = AttackSpec::Deepfool {
        config: config.clone(),
    };
    let opts = EvalOptions {
        deterministic_timing: true,
        ..EvalOptions::default()
    };
    let report = evaluate_robustness(f, "", data, &spec, &opts)?;
    Ok(report.aggregates.rho_adv_l2)
}

/// Side-by-side summary of two reports over the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackComparison {
    pub attack_a: String,
    pub attack_b: String,
    pub model_hash_a: String,
    pub model_hash_b: String,
    /// Set when the reports were produced against different weights;
    /// per-sample ratios are still computed but compare different problems.
    pub model_mismatch: bool,
    pub paired_samples: usize,
    /// a-norm / b-norm per joined sample (raw l2), averaged two ways.
    pub mean_norm_ratio: f64,
    pub median_norm_ratio: f64,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub rho_l2_a: f64,
    pub rho_l2_b: f64,
    pub rho_linf_a: f64,
    pub rho_linf_b: f64,
    /// Present when the mean and median ratios sit on opposite sides of 1,
    /// meaning the aggregate trend is driven by outliers.
    pub caveat: Option<String>,
}

/// Joins two reports on sample id and summarizes their norm ratios.
pub fn compare_attacks(a: &RobustnessReport, b: &RobustnessReport) -> Result<AttackComparison> {
    let mut ratios = Vec::new();
    let mut wins_a = 0;
    let mut wins_b = 0;
    let mut ties = 0;
    let mut bi = b.records.iter().peekable();
    for ra in &a.records {
        while bi.peek().is_some_and(|rb| rb.sample_id < ra.sample_id) {
            bi.next();
        }
        let Some(rb) = bi.peek() else { break };
        if rb.sample_id != ra.sample_id {
            continue;
        }
        if ra.failed || rb.failed || rb.norm2_raw == 0.0 {
            continue;
        }
        let ratio = ra.norm2_raw / rb.norm2_raw;
        match ratio.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => wins_a += 1,
            Some(std::cmp::Ordering::Greater) => wins_b += 1,
            _ => ties += 1,
        }
        ratios.push(ratio);
    }
    if ratios.is_empty() {
        return Err(Error::invalid_argument(
            "reports share no comparable samples (check ids and failures)",
        ));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let median = {
        let mut sorted = ratios.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mid = sorted.len() / 2;
        if sorted.len() % 2 == 0 {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        }
    };
    let caveat = if (mean < 1.0) != (median < 1.0) {
        Some(
            "mean and median norm ratios disagree about which attack is tighter; \
             the distribution is skewed, inspect per-sample records"
                .to_string(),
        )
    } else {
        None
    };
    Ok(AttackComparison {
        attack_a: a.metadata.attack.clone(),
        attack_b: b.metadata.attack.clone(),
        model_hash_a: a.metadata.model_hash.clone(),
        model_hash_b: b.metadata.model_hash.clone(),
        model_mismatch: a.metadata.model_hash != b.metadata.model_hash,
        paired_samples: ratios.len(),
        mean_norm_ratio: mean,
        median_norm_ratio: median,
        wins_a,
        wins_b,
        ties,
        rho_l2_a: a.aggregates.rho_adv_l2,
        rho_l2_b: b.aggregates.rho_adv_l2,
        rho_linf_a: a.aggregates.rho_adv_linf,
        rho_linf_b: b.aggregates.rho_adv_linf,
        caveat,
    })
}

/// Writes the per-sample records as CSV. Report provenance (model hash and
/// the resolved attack spec) goes into `#`-prefixed comment lines above the
/// header, so the file is self-describing but still parses as plain CSV.
pub fn write_report_csv(report: &RobustnessReport, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# model_hash: {}", report.metadata.model_hash)?;
    writeln!(out, "# config: {}", serde_json::to_string(&report.metadata)?)?;
    writeln!(out, "# aggregates: {}", serde_json::to_string(&report.aggregates)?)?;
    let mut w = csv::Writer::from_writer(out);
    for record in &report.records {
        w.serialize(record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back the per-sample records of a CSV report (comments skipped).
pub fn read_report_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}

/// Reads back a complete report from CSV, recovering the metadata and
/// aggregates from the `#` provenance lines `write_report_csv` emits.
pub fn read_report_csv_full(path: &Path) -> Result<RobustnessReport> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let mut metadata: Option<ReportMetadata> = None;
    let mut aggregates: Option<Aggregates> = None;
    for line in text.lines() {
        if !line.starts_with('#') {
            break;
        }
        if let Some(rest) = line.strip_prefix("# config: ") {
            metadata = Some(serde_json::from_str(rest)?);
        } else if let Some(rest) = line.strip_prefix("# aggregates: ") {
            aggregates = Some(serde_json::from_str(rest)?);
        }
    }
    let (Some(metadata), Some(aggregates)) = (metadata, aggregates) else {
        return Err(Error::Parse {
            offset: 0,
            message: "report csv is missing its # config / # aggregates provenance lines"
                .to_string(),
        });
    };
    Ok(RobustnessReport {
        metadata,
        aggregates,
        records: read_report_csv(path)?,
    })
}

pub fn write_report_json(report: &RobustnessReport, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<RobustnessReport> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    Ok(serde_json::from_str(&text)?)
}
