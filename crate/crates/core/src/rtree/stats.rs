//! Per-sample tree statistics, histograms and correlations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ResponseTree, TreeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; the maximum falls in the last bin.
/// When all values are equal every value lands in the first bin.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<Bin>, TreeError> {
    if values.is_empty() {
        return Err(TreeError::EmptySeries);
    }
    if bins == 0 {
        return Err(TreeError::Precondition(
            "histogram needs at least one bin".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TreeError::Precondition(
            "histogram values must be finite".into(),
        ));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| {
            if width > 0.0 {
                Bin {
                    lower: min + width * i as f64,
                    upper: if i + 1 == bins {
                        max
                    } else {
                        min + width * (i + 1) as f64
                    },
                    count: 0,
                }
            } else {
                Bin {
                    lower: min,
                    upper: max,
                    count: 0,
                }
            }
        })
        .collect();
    for &v in values {
        let i = if width > 0.0 {
            (((v - min) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        out[i].count += 1;
    }
    Ok(out)
}

/// Pearson's product-moment correlation.
pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<f64, TreeError> {
    if xs.len() != ys.len() {
        return Err(TreeError::UndefinedCorrelation(format!(
            "series lengths differ ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(TreeError::UndefinedCorrelation(
            "fewer than two samples".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(TreeError::UndefinedCorrelation("non-finite value".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(TreeError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub source_id: String,
    pub leaf_count: usize,
    pub max_branch_logprob: f64,
    pub interaction_length_chars: usize,
    pub cut: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: Option<f64>,
    /// Why `r` is missing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub undefined: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    /// Every sample, cut trees included.
    pub records: Vec<TreeRecord>,
    /// Samples left out of the aggregates because their tree was cut.
    pub excluded: Vec<String>,
    pub leaf_histogram: Vec<Bin>,
    pub logprob_histogram: Vec<Bin>,
    pub correlations: BTreeMap<String, Correlation>,
}

impl TreeStats {
    /// Per-sample records as CSV.
    pub fn records_csv(&self) -> String {
        let mut out =
            String::from("source_id,leaf_count,max_branch_logprob,interaction_length_chars,cut\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&r.source_id),
                r.leaf_count,
                r.max_branch_logprob,
                r.interaction_length_chars,
                r.cut
            ));
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aggregates over `(source id, tree, interaction length)` triples. Trees cut
/// by budget or depth are excluded from histograms and correlations unless
/// `include_cut` is set.
pub fn tree_stats(
    trees: &[(String, ResponseTree, usize)],
    bins: usize,
    include_cut: bool,
) -> Result<TreeStats, TreeError> {
    if trees.is_empty() {
        return Err(TreeError::Precondition("no trees to summarize".into()));
    }
    let records: Vec<TreeRecord> = trees
        .iter()
        .map(|(id, t, len)| TreeRecord {
            source_id: id.clone(),
            leaf_count: t.leaf_count,
            max_branch_logprob: t.max_branch_logprob,
            interaction_length_chars: *len,
            cut: t.is_cut(),
        })
        .collect();
    let (kept, dropped): (Vec<&TreeRecord>, Vec<&TreeRecord>) =
        records.iter().partition(|r| include_cut || !r.cut);
    let leaves: Vec<f64> = kept.iter().map(|r| r.leaf_count as f64).collect();
    let logprobs: Vec<f64> = kept.iter().map(|r| r.max_branch_logprob).collect();
    let lengths: Vec<f64> = kept
        .iter()
        .map(|r| r.interaction_length_chars as f64)
        .collect();
    let (leaf_histogram, logprob_histogram) = if kept.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (histogram(&leaves, bins)?, histogram(&logprobs, bins)?)
    };
    let mut correlations = BTreeMap::new();
    for (name, xs, ys) in [
        ("max_logprob_vs_length", &logprobs, &lengths),
        ("max_logprob_vs_leaf_count", &logprobs, &leaves),
        ("leaf_count_vs_length", &leaves, &lengths),
    ] {
        let c = match correlate(xs, ys) {
            Ok(r) => Correlation {
                r: Some(r),
                undefined: None,
            },
            Err(e) => Correlation {
                r: None,
                undefined: Some(e.to_string()),
            },
        };
        correlations.insert(name.to_string(), c);
    }
    Ok(TreeStats {
        excluded: dropped.iter().map(|r| r.source_id.clone()).collect(),
        records,
        leaf_histogram,
        logprob_histogram,
        correlations,
    })
}
