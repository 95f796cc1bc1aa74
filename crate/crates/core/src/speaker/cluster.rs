use super::net::cosine_score;
use crate::error::{Error, Result};

/// Bottom-up average-linkage clustering on cosine distance, stopping at `k`
/// clusters. Labels are `0..k` in order of first appearance. Ties merge the
/// lowest-index pair first.
pub fn hac_cluster(embeddings: &[Vec<f32>], k: usize) -> Result<Vec<usize>> {
    let n = embeddings.len();
    if k < 1 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} points")));
    }
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine_score(&embeddings[i], &embeddings[j])? as f64;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    for _ in 0..n - k {
        let mut best = (f64::INFINITY, 0, 0);
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                if dist[i][j] < best.0 {
                    best = (dist[i][j], i, j);
                }
            }
        }
        let (_, i, j) = best;
        // Lance-Williams update for average linkage.
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for m in (0..n).filter(|&m| active[m] && m != i && m != j) {
            let d = (ni * dist[i][m] + nj * dist[j][m]) / (ni + nj);
            dist[i][m] = d;
            dist[m][i] = d;
        }
        size[i] += size[j];
        active[j] = false;
        owner.iter_mut().filter(|o| **o == j).for_each(|o| *o = i);
    }
    Ok(first_appearance(&owner))
}

/// Rename labels to `0, 1, …` in order of first occurrence.
pub fn first_appearance<L: PartialEq + Copy>(labels: &[L]) -> Vec<usize> {
    let mut seen: Vec<L> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(p) => p,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speaker::adjusted_rand_index;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    /// Reference: recompute average linkage from member sets at every merge.
    fn naive(points: &[Vec<f32>], k: usize) -> Vec<usize> {
        let d = |a: usize, b: usize| 1.0 - cosine_score(&points[a], &points[b]).unwrap() as f64;
        let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
        while clusters.len() > k {
            let mut best = (f64::INFINITY, 0, 0);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let mut s = 0.0;
                    for &a in &clusters[i] {
                        for &b in &clusters[j] {
                            s += d(a, b);
                        }
                    }
                    let avg = s / (clusters[i].len() * clusters[j].len()) as f64;
                    if avg < best.0 - 1e-12 {
                        best = (avg, i, j);
                    }
                }
            }
            let merged = clusters.remove(best.2);
            clusters[best.1].extend(merged);
        }
        let mut owner = vec![0; points.len()];
        for (c, members) in clusters.iter().enumerate() {
            for &m in members {
                owner[m] = c;
            }
        }
        first_appearance(&owner)
    }

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn trivial_cases() {
        let pts: Vec<Vec<f32>> = (0..5).map(|i| unit(&[1.0, i as f32, 0.5])).collect();
        assert_eq!(hac_cluster(&pts, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(hac_cluster(&pts, 1).unwrap(), vec![0; 5]);
        assert!(hac_cluster(&pts, 0).is_err());
        assert!(hac_cluster(&pts, 6).is_err());
    }

    #[test]
    fn two_tight_pairs() {
        // Pairs at cosine 0.99 internally, roughly 0.1 across.
        let a = 0.99f32.acos();
        let b = 0.1f32.acos();
        let pts = vec![
            vec![1.0, 0.0],
            vec![a.cos(), a.sin()],
            vec![b.cos(), b.sin()],
            vec![(b + a).cos(), (b + a).sin()],
        ];
        let labels = hac_cluster(&pts, 2).unwrap();
        assert_eq!(labels, vec![0, 0, 1, 1]);
        assert_eq!(labels, naive(&pts, 2));
    }

    #[test]
    fn matches_naive_oracle_on_small_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(2..=8);
            let dim = rng.random_range(2..=5);
            let pts: Vec<Vec<f32>> = (0..n)
                .map(|_| unit(&(0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()))
                .collect();
            let k = rng.random_range(1..=n);
            assert_eq!(hac_cluster(&pts, k).unwrap(), naive(&pts, k));
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant_up_to_renaming(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(3..20);
            let pts: Vec<Vec<f32>> = (0..n)
                .map(|_| unit(&(0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()))
                .collect();
            let k = rng.random_range(1..=n);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<Vec<f32>> = perm.iter().map(|&i| pts[i].clone()).collect();
            let base = hac_cluster(&pts, k).unwrap();
            let other = hac_cluster(&shuffled, k).unwrap();
            let mut back = vec![0; n];
            for (pos, &i) in perm.iter().enumerate() {
                back[i] = other[pos];
            }
            prop_assert_eq!(adjusted_rand_index(&base, &back).unwrap(), 1.0);
        }
    }
}
