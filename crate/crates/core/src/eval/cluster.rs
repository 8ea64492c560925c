//! Video-level pooling, k-means, optimal label assignment and homogeneity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 300;

/// Componentwise maximum over frame-level features.
pub fn pool_video_feature(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot pool an empty frame list".into()))?;
    let mut out = first.clone();
    for f in &frames[1..] {
        if f.len() != out.len() {
            return Err(Error::shape("pool_video_feature", out.len(), f.len()));
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o = o.max(*v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Distance to the second-nearest centroid minus distance to the nearest.
    pub margins: Vec<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed;
/// stops when assignments no longer change or after 300 iterations. An empty
/// cluster keeps its previous centroid.
pub fn kmeans(features: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > features.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the number of points ({})",
            features.len()
        )));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::shape("kmeans features", dim, bad.len()));
    }
    if !features.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("kmeans features".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..features.len())];
    let mut d2: Vec<f64> = features.iter().map(|x| sq_dist(x, &features[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if *w > 0.0 && acc > r {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).expect("positive mass"))
        } else {
            let free: Vec<usize> = (0..features.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, x) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &features[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| features[i].clone()).collect();

    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        let next: Vec<usize> = features
            .iter()
            .map(|x| {
                let (c, d) = nearest(x, &centroids);
                inertia += d;
                c
            })
            .collect();
        history.push(inertia);
        let stable = next == assignments;
        assignments = next;
        if stable || iterations == MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &c) in features.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }

    let margins = features
        .iter()
        .map(|x| {
            let mut d: Vec<f64> = centroids.iter().map(|mu| sq_dist(x, mu).sqrt()).collect();
            d.sort_by(f64::total_cmp);
            if d.len() > 1 {
                d[1] - d[0]
            } else {
                0.0
            }
        })
        .collect();
    let inertia = *history.last().expect("at least one assignment step");
    Ok(KMeansResult {
        k,
        assignments,
        centroids,
        margins,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// Minimum-cost assignment of every row to a distinct column (`rows <=
/// cols`), by the O(n^2 m) potentials method.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("cost matrix rows differ in length".into()));
    }
    if n > m {
        return Err(Error::InvalidArgument(format!("{n} rows cannot be assigned to {m} columns")));
    }
    const INF: i64 = i64::MAX / 4;
    // 1-indexed potentials; column 0 is the virtual start.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![0usize; n];
    for j in 1..=m {
        if owner[j] > 0 {
            rows[owner[j] - 1] = j - 1;
        }
    }
    Ok(rows)
}

/// Cluster-to-label mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    /// Label index for every cluster.
    pub mapping: Vec<usize>,
    /// Total count covered by the optimal one-to-one part of the mapping.
    pub total: u64,
}

/// Maps clusters (rows) to labels (columns) maximizing the total matched
/// count. With more clusters than labels, the clusters left over by the
/// optimal one-to-one assignment take their majority label.
pub fn hungarian_map(confusion: &[Vec<u64>]) -> Result<LabelMapping> {
    let k = confusion.len();
    if k == 0 {
        return Ok(LabelMapping {
            mapping: Vec::new(),
            total: 0,
        });
    }
    let labels = confusion[0].len();
    if labels == 0 || confusion.iter().any(|r| r.len() != labels) {
        return Err(Error::InvalidArgument("confusion matrix must be rectangular and non-empty".into()));
    }
    let size = k.max(labels);
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|r| {
            (0..size)
                .map(|c| if r < k && c < labels { -(confusion[r][c] as i64) } else { 0 })
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost)?;
    let mut total = 0;
    let mapping = (0..k)
        .map(|r| {
            let c = assignment[r];
            if c < labels {
                total += confusion[r][c];
                c
            } else {
                let row = &confusion[r];
                (0..labels).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            }
        })
        .collect();
    Ok(LabelMapping { mapping, total })
}

/// `k x L` count matrix for cluster ids against label indices.
pub fn confusion_matrix(assignments: &[usize], labels: &[usize], k: usize, num_labels: usize) -> Result<Vec<Vec<u64>>> {
    if assignments.len() != labels.len() {
        return Err(Error::shape("confusion_matrix", assignments.len(), labels.len()));
    }
    let mut m = vec![vec![0u64; num_labels]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        if a >= k || l >= num_labels {
            return Err(Error::InvalidArgument(format!("cluster {a} or label {l} out of range")));
        }
        m[a][l] += 1;
    }
    Ok(m)
}

fn entropy<I: IntoIterator<Item = usize>>(counts: I, n: f64) -> f64 {
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `1 - H(class | cluster) / H(class)`, defined as 1 when `H(class) = 0`.
pub fn homogeneity<C: Ord + Copy, L: Ord + Copy>(assignments: &[C], labels: &[L]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::shape("homogeneity", assignments.len(), labels.len()));
    }
    let n = labels.len() as f64;
    let mut class_counts: BTreeMap<L, usize> = BTreeMap::new();
    let mut cluster_counts: BTreeMap<C, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(C, L), usize> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *class_counts.entry(l).or_default() += 1;
        *cluster_counts.entry(a).or_default() += 1;
        *joint.entry((a, l)).or_default() += 1;
    }
    let h_class = entropy(class_counts.values().copied(), n);
    if h_class == 0.0 {
        return Ok(1.0);
    }
    let h_cond: f64 = joint
        .iter()
        .map(|(&(a, _), &c)| {
            let p = c as f64 / n;
            -p * (c as f64 / cluster_counts[&a] as f64).ln()
        })
        .sum();
    Ok((1.0 - h_cond / h_class).clamp(0.0, 1.0))
}
