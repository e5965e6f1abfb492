//! Agreement between two clusterings of the same samples.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ClusterSet, ClusteringError};

/// Co-occurrence counts with rows and columns permuted so that large entries
/// sit on the diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityMatrix {
    /// Cluster ids of run A, in aligned row order.
    pub row_ids: Vec<usize>,
    /// Cluster ids of run B, in aligned column order.
    pub col_ids: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl StabilityMatrix {
    pub fn trace(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .filter_map(|(i, row)| row.get(i))
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &c)| i == j || c == 0))
    }

    /// CSV with a header row of run-B ids and a leading column of run-A ids.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_a\\run_b");
        for id in &self.col_ids {
            out.push_str(&format!(",{id}"));
        }
        out.push('\n');
        for (id, row) in self.row_ids.iter().zip(&self.counts) {
            out.push_str(&id.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Row labels, column labels and the count table between them.
pub type Contingency = (Vec<usize>, Vec<usize>, Vec<Vec<u64>>);

/// Raw co-occurrence counts between two labelings of the same samples; rows
/// and columns ordered by label.
pub fn contingency(
    a: &BTreeMap<String, usize>,
    b: &BTreeMap<String, usize>,
) -> Result<Contingency, ClusteringError> {
    let ka: BTreeSet<&String> = a.keys().collect();
    let kb: BTreeSet<&String> = b.keys().collect();
    let diff = ka.symmetric_difference(&kb).count();
    if diff > 0 {
        return Err(ClusteringError::IdMismatch { count: diff });
    }
    let rows: Vec<usize> = a
        .values()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cols: Vec<usize> = b
        .values()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
    for (id, ca) in a {
        let i = rows.binary_search(ca).expect("row id present");
        let j = cols.binary_search(&b[id]).expect("col id present");
        counts[i][j] += 1;
    }
    Ok((rows, cols, counts))
}

/// Greedy alignment: repeatedly pair the largest remaining entry's row and
/// column (ties to the lowest row, then column). Unpaired rows or columns
/// follow in id order. Heuristic; see [`best_alignment_trace`].
pub fn align(rows: &[usize], cols: &[usize], counts: &[Vec<u64>]) -> StabilityMatrix {
    let mut row_used = vec![false; rows.len()];
    let mut col_used = vec![false; cols.len()];
    let mut row_order = Vec::new();
    let mut col_order = Vec::new();
    for _ in 0..rows.len().min(cols.len()) {
        let mut best: Option<(usize, usize, u64)> = None;
        for (i, row) in counts.iter().enumerate() {
            if row_used[i] {
                continue;
            }
            for (j, &c) in row.iter().enumerate() {
                if !col_used[j] && best.is_none_or(|(_, _, b)| c > b) {
                    best = Some((i, j, c));
                }
            }
        }
        let (i, j, _) = best.expect("unused row and column remain");
        row_used[i] = true;
        col_used[j] = true;
        row_order.push(i);
        col_order.push(j);
    }
    row_order.extend((0..rows.len()).filter(|&i| !row_used[i]));
    col_order.extend((0..cols.len()).filter(|&j| !col_used[j]));
    StabilityMatrix {
        row_ids: row_order.iter().map(|&i| rows[i]).collect(),
        col_ids: col_order.iter().map(|&j| cols[j]).collect(),
        counts: row_order
            .iter()
            .map(|&i| col_order.iter().map(|&j| counts[i][j]).collect())
            .collect(),
    }
}

pub fn stability_matrix(
    a: &ClusterSet,
    b: &ClusterSet,
) -> Result<StabilityMatrix, ClusteringError> {
    let (rows, cols, counts) = contingency(&a.assignments, &b.assignments)?;
    Ok(align(&rows, &cols, &counts))
}

/// Largest achievable diagonal sum over all column permutations, by
/// exhaustive search. `None` when the smaller side exceeds 8 clusters.
pub fn best_alignment_trace(counts: &[Vec<u64>]) -> Option<u64> {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    if rows.min(cols) > 8 {
        return None;
    }
    fn search(counts: &[Vec<u64>], row: usize, used: &mut Vec<bool>) -> u64 {
        if row == counts.len() {
            return 0;
        }
        // Leaving a row unmatched is only useful when rows outnumber columns.
        let mut best = if counts.len() > used.len() {
            search(counts, row + 1, used)
        } else {
            0
        };
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(counts[row][j] + search(counts, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    Some(search(counts, 0, &mut vec![false; cols]))
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand Index between two labelings of the same samples. Degenerate
/// cases with a zero denominator (for example both labelings putting every
/// sample in one cluster) count as perfect agreement.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same samples");
    let n = a.len() as u64;
    let mut pairs: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *pairs.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = pairs.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// ARI between two cluster assignments keyed by sample id.
pub fn assignment_ari(
    a: &BTreeMap<String, usize>,
    b: &BTreeMap<String, usize>,
) -> Result<f64, ClusteringError> {
    contingency(a, b)?;
    let la: Vec<usize> = a.values().copied().collect();
    let lb: Vec<usize> = b.values().copied().collect();
    Ok(adjusted_rand_index(&la, &lb))
}
