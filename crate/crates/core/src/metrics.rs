//! Attack outcome metrics.
//!
//! Accuracy deltas are computed over the full split. Every rationale
//! metric is computed per sample and aggregated only over the kept set:
//! documents whose prediction survived the attack. A metric with a zero
//! denominator is absent for that sample, and aggregation reports how
//! many samples went absent next to the mean over the present ones. One
//! convention overrides this rule: the attack rate of an empty trigger
//! set is 0, not absent.

use serde::{Deserialize, Serialize};

use crate::attack::SampleOutcome;
use crate::error::{Error, Result};

/// Jaccard overlap |a and b| / |a or b|; absent when both masks are empty.
pub fn jaccard(a: &[u8], b: &[u8]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let x = x != 0;
        let y = y != 0;
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        None
    } else {
        Some(inter as f64 / union as f64)
    }
}

/// |a and reference| / |reference|; absent when the reference is empty.
pub fn overlap_ratio(a: &[u8], reference: &[u8]) -> Option<f64> {
    debug_assert_eq!(a.len(), reference.len());
    let denom = reference.iter().filter(|&&v| v != 0).count();
    if denom == 0 {
        return None;
    }
    let inter = a
        .iter()
        .zip(reference)
        .filter(|(&x, &y)| x != 0 && y != 0)
        .count();
    Some(inter as f64 / denom as f64)
}

/// Harmonic mean of precision and recall of `a` against `reference`;
/// absent when either mask is empty.
pub fn balanced_f1(a: &[u8], reference: &[u8]) -> Option<f64> {
    debug_assert_eq!(a.len(), reference.len());
    let na = a.iter().filter(|&&v| v != 0).count();
    let nr = reference.iter().filter(|&&v| v != 0).count();
    if na == 0 || nr == 0 {
        return None;
    }
    let inter = a
        .iter()
        .zip(reference)
        .filter(|(&x, &y)| x != 0 && y != 0)
        .count();
    let p = inter as f64 / na as f64;
    let r = inter as f64 / nr as f64;
    if p + r == 0.0 {
        Some(0.0)
    } else {
        Some(2.0 * p * r / (p + r))
    }
}

fn norm(mask: &[u8]) -> usize {
    mask.iter().filter(|&&v| v != 0).count()
}

/// Per-sample rationale metrics; `None` marks an absent value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    /// Selected fraction before minus after: |m_x|/U - |m_adv|/U_adv.
    pub delta_sparsity: Option<f64>,
    /// Jaccard of the clean rationale against the gold one.
    pub gold_jaccard_clean: Option<f64>,
    /// Jaccard of the attacked rationale against the gold one.
    pub gold_jaccard_adv: Option<f64>,
    /// Drop in gold overlap, clean minus attacked.
    pub gold_jaccard_drop: Option<f64>,
    /// The drop as a fraction of the clean overlap.
    pub gold_jaccard_drop_rel: Option<f64>,
    /// Fraction of trigger slots the attacked rationale selects.
    pub attack_rate: Option<f64>,
    /// Fraction of the displaced clean rationale still selected.
    pub shift_overlap: Option<f64>,
    /// Fraction of the gold rationale still selected after the attack.
    pub shift_overlap_human: Option<f64>,
    /// Balanced precision/recall diagnostic for `shift_overlap`.
    pub shift_f1: Option<f64>,
    /// Balanced precision/recall diagnostic for `shift_overlap_human`.
    pub shift_f1_human: Option<f64>,
}

pub fn sample_metrics(s: &SampleOutcome) -> Result<SampleMetrics> {
    if s.adv_mask.len() != s.m_star_nt.len()
        || s.adv_mask.len() != s.m_star_t.len()
        || s.clean_mask.len() != s.clean_units
    {
        return Err(Error::invalid("inconsistent sample mask lengths"));
    }
    if s.clean_units == 0 || s.adv_units == 0 {
        return Err(Error::invalid("sample with zero units"));
    }
    let delta_sparsity = Some(
        norm(&s.clean_mask) as f64 / s.clean_units as f64
            - norm(&s.adv_mask) as f64 / s.adv_units as f64,
    );
    let gold_jaccard_clean = s.human.as_ref().and_then(|h| jaccard(&s.clean_mask, h));
    let gold_jaccard_adv = s.human_adv.as_ref().and_then(|h| jaccard(&s.adv_mask, h));
    let gold_jaccard_drop = match (gold_jaccard_clean, gold_jaccard_adv) {
        (Some(c), Some(a)) => Some(c - a),
        _ => None,
    };
    let gold_jaccard_drop_rel = match (gold_jaccard_drop, gold_jaccard_clean) {
        (Some(d), Some(c)) if c > 0.0 => Some(d / c),
        _ => None,
    };
    // Empty trigger set: nothing can be attacked, rate is zero by
    // convention rather than absent.
    let attack_rate = if norm(&s.m_star_t) == 0 {
        Some(0.0)
    } else {
        overlap_ratio(&s.adv_mask, &s.m_star_t)
    };
    let shift_overlap = overlap_ratio(&s.adv_mask, &s.m_star_nt);
    let shift_overlap_human = s
        .human_adv
        .as_ref()
        .and_then(|h| overlap_ratio(&s.adv_mask, h));
    let shift_f1 = balanced_f1(&s.adv_mask, &s.m_star_nt);
    let shift_f1_human = s.human_adv.as_ref().and_then(|h| balanced_f1(&s.adv_mask, h));
    Ok(SampleMetrics {
        delta_sparsity,
        gold_jaccard_clean,
        gold_jaccard_adv,
        gold_jaccard_drop,
        gold_jaccard_drop_rel,
        attack_rate,
        shift_overlap,
        shift_overlap_human,
        shift_f1,
        shift_f1_human,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub acc_clean: f64,
    pub acc_adv: f64,
    pub delta_acc_abs: f64,
}

/// Accuracy against the labels over the full split, before and after.
pub fn accuracy_summary(samples: &[SampleOutcome]) -> Result<AccuracySummary> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy over an empty sample set"));
    }
    let n = samples.len() as f64;
    let acc_clean = samples.iter().filter(|s| s.clean_class == s.label).count() as f64 / n;
    let acc_adv = samples.iter().filter(|s| s.adv_class == s.label).count() as f64 / n;
    Ok(AccuracySummary {
        acc_clean,
        acc_adv,
        delta_acc_abs: (acc_clean - acc_adv).abs(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    /// Mean over samples where the metric is present.
    pub mean: Option<f64>,
    pub present: usize,
    pub absent: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: usize,
    pub flipped: usize,
    /// Samples whose prediction survived; rationale metrics cover these.
    pub kept: usize,
    pub accuracy: AccuracySummary,
    pub rationale: Option<Vec<MetricSummary>>,
    pub note: Option<String>,
}

/// Aggregation order of the per-sample rationale metrics.
pub const METRIC_NAMES: [&str; 10] = [
    "delta_sparsity",
    "gold_jaccard_clean",
    "gold_jaccard_adv",
    "gold_jaccard_drop",
    "gold_jaccard_drop_rel",
    "attack_rate",
    "shift_overlap",
    "shift_overlap_human",
    "shift_f1",
    "shift_f1_human",
];

fn metric_value(m: &SampleMetrics, name: &str) -> Option<f64> {
    match name {
        "delta_sparsity" => m.delta_sparsity,
        "gold_jaccard_clean" => m.gold_jaccard_clean,
        "gold_jaccard_adv" => m.gold_jaccard_adv,
        "gold_jaccard_drop" => m.gold_jaccard_drop,
        "gold_jaccard_drop_rel" => m.gold_jaccard_drop_rel,
        "attack_rate" => m.attack_rate,
        "shift_overlap" => m.shift_overlap,
        "shift_overlap_human" => m.shift_overlap_human,
        "shift_f1" => m.shift_f1,
        "shift_f1_human" => m.shift_f1_human,
        _ => unreachable!("unknown metric {}", name),
    }
}

pub fn aggregate(samples: &[SampleOutcome]) -> Result<MetricsReport> {
    let accuracy = accuracy_summary(samples)?;
    let total = samples.len();
    let kept_samples: Vec<&SampleOutcome> = samples.iter().filter(|s| !s.flipped).collect();
    let flipped = total - kept_samples.len();
    let kept = kept_samples.len();
    if kept == 0 {
        return Ok(MetricsReport {
            total,
            flipped,
            kept,
            accuracy,
            rationale: None,
            note: Some(
                "every prediction flipped; rationale metrics are undefined on an empty kept set"
                    .to_string(),
            ),
        });
    }
    let per_sample: Vec<SampleMetrics> = kept_samples
        .iter()
        .map(|s| sample_metrics(s))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(METRIC_NAMES.len());
    for name in METRIC_NAMES {
        let values: Vec<f64> = per_sample.iter().filter_map(|m| metric_value(m, name)).collect();
        let present = values.len();
        let absent = kept - present;
        let mean = if present == 0 {
            None
        } else {
            Some(values.iter().sum::<f64>() / present as f64)
        };
        rows.push(MetricSummary {
            name: name.to_string(),
            mean,
            present,
            absent,
        });
    }
    Ok(MetricsReport {
        total,
        flipped,
        kept,
        accuracy,
        rationale: Some(rows),
        note: None,
    })
}

/// CSV rendering. Floats print in shortest round-trip form, so the same
/// report always serializes to the same bytes.
pub fn report_to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("section,metric,value,present,absent\n");
    let mut push = |section: &str, metric: &str, value: String, p: String, a: String| {
        out.push_str(&format!("{},{},{},{},{}\n", section, metric, value, p, a));
    };
    push("counts", "total", report.total.to_string(), String::new(), String::new());
    push("counts", "flipped", report.flipped.to_string(), String::new(), String::new());
    push("counts", "kept", report.kept.to_string(), String::new(), String::new());
    push(
        "accuracy",
        "acc_clean",
        format!("{}", report.accuracy.acc_clean),
        String::new(),
        String::new(),
    );
    push(
        "accuracy",
        "acc_adv",
        format!("{}", report.accuracy.acc_adv),
        String::new(),
        String::new(),
    );
    push(
        "accuracy",
        "delta_acc_abs",
        format!("{}", report.accuracy.delta_acc_abs),
        String::new(),
        String::new(),
    );
    if let Some(rows) = &report.rationale {
        for row in rows {
            push(
                "rationale",
                &row.name,
                row.mean.map(|v| format!("{}", v)).unwrap_or_default(),
                row.present.to_string(),
                row.absent.to_string(),
            );
        }
    }
    if let Some(note) = &report.note {
        out.push_str(&format!("note,,{},,\n", note.replace(',', ";")));
    }
    out
}

/// One JSON object per line, in input order.
pub fn samples_to_jsonl(samples: &[SampleOutcome]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}
