use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Equal error rate with linear interpolation between adjacent operating
/// points. `scores` pairs a score with whether the trial is a target trial.
pub fn eer(scores: &[(f32, bool)]) -> Result<f64> {
    let n_t = scores.iter().filter(|s| s.1).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::invalid("EER needs both target and non-target trials"));
    }
    let mut sorted: Vec<(f32, bool)> = scores.to_vec();
    if sorted.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::invalid("non-finite trial score"));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Operating points for thresholds at each distinct score (accept
    // score >= threshold), then one above every score.
    let mut points = Vec::with_capacity(sorted.len() + 1);
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let far = (n_n - below_n) as f64 / n_n as f64;
        let frr = below_t as f64 / n_t as f64;
        points.push((far, frr));
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
    points.push((0.0, 1.0));

    let mut prev = points[0];
    for &(far, frr) in &points {
        if frr >= far {
            let (d0, d1) = (prev.0 - prev.1, far - frr);
            if d0 == d1 {
                return Ok(far);
            }
            let t = d0 / (d0 - d1);
            return Ok(prev.0 + t * (far - prev.0));
        }
        prev = (far, frr);
    }
    unreachable!("the last operating point has frr = 1 >= far = 0")
}

fn comb2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Chance-corrected pair-counting agreement of two labelings.
pub fn adjusted_rand_index<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Eq + std::hash::Hash,
    B: Eq + std::hash::Hash,
{
    if a.len() != b.len() {
        return Err(Error::shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let mut table: HashMap<(&A, &B), usize> = HashMap::new();
    let mut rows: HashMap<&A, usize> = HashMap::new();
    let mut cols: HashMap<&B, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|n| comb2(*n)).sum();
    let sum_a: f64 = rows.values().map(|n| comb2(*n)).sum();
    let sum_b: f64 = cols.values().map(|n| comb2(*n)).sum();
    let total = comb2(a.len());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both labelings are all-singletons or a single cluster.
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialPair {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// Lines of `<enroll_id> <test_id> <target|nontarget>`; `#` starts a comment.
pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<TrialPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", f.len())));
        }
        let target = match f[2] {
            "target" => true,
            "nontarget" => false,
            other => return Err(err(format!("trial label must be target or nontarget, got `{other}`"))),
        };
        out.push(TrialPair {
            enroll: f[0].to_string(),
            test: f[1].to_string(),
            target,
        });
    }
    Ok(out)
}
