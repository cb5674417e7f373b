//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library.
#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

pub fn l2(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nu * nv)
}

/// Ids within `eps` of `points[i]` by linear scan, self included.
pub fn linear_range(points: &[Vec<f64>], i: usize, eps: f64, dist: fn(&[f64], &[f64]) -> f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&j| j == i || dist(&points[i], &points[j]) <= eps)
        .collect()
}

/// Textbook DBSCAN: ascending scan, FIFO expansion, O(n^2) neighbor search.
/// `None` marks noise.
pub fn brute_dbscan(
    points: &[Vec<f64>],
    eps: f64,
    minpts: usize,
    dist: fn(&[f64], &[f64]) -> f64,
) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| linear_range(points, i, eps, dist)).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        if neighbors[i].len() < minpts {
            continue;
        }
        let c = next;
        next += 1;
        label[i] = Some(c);
        let mut queue: VecDeque<usize> = neighbors[i].iter().copied().collect();
        while let Some(q) = queue.pop_front() {
            if label[q].is_none() {
                label[q] = Some(c);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            if neighbors[q].len() >= minpts {
                queue.extend(neighbors[q].iter().copied());
            }
        }
    }
    label
}

/// Same noise set and a bijection between cluster ids.
pub fn same_partition<A: Copy + Eq + std::hash::Hash, B: Copy + Eq + std::hash::Hash>(
    a: &[Option<A>],
    b: &[Option<B>],
) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *fwd.entry(*x).or_insert(*y) != *y || *back.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// ARI by enumerating all pairs.
pub fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut total) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            total += 1;
            match (sa, sb) {
                (true, true) => both += 1,
                (true, false) => only_a += 1,
                (false, true) => only_b += 1,
                _ => {}
            }
        }
    }
    let same_a = (both + only_a) as f64;
    let same_b = (both + only_b) as f64;
    let expected = same_a * same_b / total as f64;
    let max = (same_a + same_b) / 2.0;
    if max - expected == 0.0 {
        return 1.0;
    }
    (both as f64 - expected) / (max - expected)
}

/// NMI from entropies computed by summing over label probabilities,
/// normalized by the arithmetic mean of the two entropies.
pub fn nmi_entropy(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    let mut pab: HashMap<(usize, usize), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *pa.entry(x).or_default() += 1.0 / n;
        *pb.entry(y).or_default() += 1.0 / n;
        *pab.entry((x, y)).or_default() += 1.0 / n;
    }
    let h = |p: &HashMap<usize, f64>| -p.values().map(|v| v * v.ln()).sum::<f64>();
    let (ha, hb) = (h(&pa), h(&pb));
    if pa.len() == 1 && pb.len() == 1 {
        return 1.0;
    }
    if pa.len() == 1 || pb.len() == 1 {
        return 0.0;
    }
    let mi: f64 = pab.iter().map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln()).sum();
    mi / ((ha + hb) / 2.0)
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues in
/// descending order with matching unit eigenvectors.
#[allow(clippy::needless_range_loop)]
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let akp = row[p];
                    let akq = row[q];
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Sample covariance with the n - 1 denominator.
pub fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1) as f64)
                .collect()
        })
        .collect()
}
