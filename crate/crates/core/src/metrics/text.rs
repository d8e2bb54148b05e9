use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Levenshtein distance with one optimal decomposition. `deletions` are
/// reference characters missing from the hypothesis, `insertions` extra
/// hypothesis characters; applying the inverse operations turns the
/// hypothesis into the reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub total: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub substitutions: usize,
}

/// Unit-cost edit distance over Unicode scalar values. The backtrace
/// prefers substitutions, then deletions, then insertions on ties.
pub fn edit_distance(reference: &str, hypothesis: &str) -> EditCounts {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    let (n, m) = (r.len(), h.len());
    let cols = m + 1;
    let mut d = vec![0usize; (n + 1) * cols];
    for i in 0..=n {
        d[i * cols] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * cols + j - 1] + usize::from(r[i - 1] != h[j - 1]);
            let del = d[(i - 1) * cols + j] + 1;
            let ins = d[i * cols + j - 1] + 1;
            d[i * cols + j] = sub.min(del).min(ins);
        }
    }
    let mut out = EditCounts {
        total: d[n * cols + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * cols + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * cols + j - 1];
            if r[i - 1] == h[j - 1] && here == diag {
                i -= 1;
                j -= 1;
                continue;
            }
            if here == diag + 1 {
                out.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * cols + j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// `(d + i + s) / N_c` with `N_c` the reference length in characters.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64, MetricsError> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(MetricsError::EmptyReference);
    }
    let e = edit_distance(reference, hypothesis);
    Ok((e.deletions + e.insertions + e.substitutions) as f64 / n as f64)
}
