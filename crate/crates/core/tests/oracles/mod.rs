//! Brute-force reference computations shared by the integration tests.
//! None of these call into the library's numerics.

#![allow(dead_code)]

use std::cmp::Ordering;

/// AUC by counting every (positive, negative) pair, ties worth one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &p in pos {
        for &n in neg {
            twice += match p.partial_cmp(&n).unwrap() {
                Ordering::Greater => 2,
                Ordering::Equal => 1,
                Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * pos.len() * neg.len()) as f64
}

/// AP from explicit ranks: an item precedes another when it scores higher,
/// or scores the same and comes earlier in the positives-then-negatives list.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (i, &(s, is_pos)) in all.iter().enumerate() {
        if !is_pos {
            continue;
        }
        let ahead: Vec<usize> = (0..all.len())
            .filter(|&j| all[j].0 > s || (all[j].0 == s && j < i))
            .collect();
        let pos_ahead = ahead.iter().filter(|&&j| all[j].1).count();
        ranked.push((ahead.len() + 1, pos_ahead + 1));
    }
    ranked.sort();
    ranked
        .iter()
        .map(|&(rank, hits)| hits as f64 / rank as f64)
        .sum::<f64>()
        / pos.len() as f64
}

pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, k - 1);
            out.push(q);
        }
    }
    out
}

/// Largest number of agreements over every relabeling of `pred`.
pub fn best_matched_count(pred: &[usize], truth: &[usize], k: usize) -> usize {
    permutations(k)
        .iter()
        .map(|m| pred.iter().zip(truth).filter(|&(&p, &t)| m[p] == t).count())
        .max()
        .unwrap()
}

/// ARI from the four pair counts of two labelings.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    2.0 * (ss * dd - sd * ds) / ((ss + sd) * (sd + dd) + (ss + ds) * (ds + dd))
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            a.swap(piv, col);
            det = -det;
        }
        det *= a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    det
}

/// Jacobian of `f` at `x` by Richardson-extrapolated central differences.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let central = |j: usize, h: f64| {
        let (mut up, mut down) = (x.to_vec(), x.to_vec());
        up[j] += h;
        down[j] -= h;
        let (fu, fd) = (f(&up), f(&down));
        fu.iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect::<Vec<f64>>()
    };
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let (coarse, fine) = (central(j, h), central(j, h / 2.0));
        for i in 0..n {
            jac[i][j] = (4.0 * fine[i] - coarse[i]) / 3.0;
        }
    }
    jac
}

/// `ln |det J|` of `f` at `x`.
pub fn log_abs_det_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> f64 {
    determinant(jacobian(f, x, 1e-3)).abs().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 1e-12 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Channel (`p`) and neighbor (`q`) distributions of one directed edge.
#[derive(Clone, Debug)]
pub struct EdgeAssignment {
    pub u: usize,
    pub v: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Neighborhood routing written out per node and per edge.
///
/// `c[u]` holds `k` unit blocks of width `w`. Each iteration scores edge
/// `(u, v)` in channel `j` by `<z[u]_j, c[v]_j>`, normalizes those scores over
/// channels (`p`) and over the neighbors of `u` (`q`), and sets
/// `z[u]_j = unit(c[u]_j + sum_v (alpha p_j + beta q_j) c[v]_j)`.
/// Returns the final `z` and the distributions of every iteration.
pub fn route(
    c: &[Vec<f64>],
    neighbors: &[Vec<usize>],
    k: usize,
    w: usize,
    alpha: f64,
    beta: f64,
    iterations: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<EdgeAssignment>>) {
    let block = |x: &[f64], j: usize| x[j * w..(j + 1) * w].to_vec();
    let mut z = c.to_vec();
    let mut trace = Vec::new();
    for _ in 0..iterations {
        let mut next = Vec::with_capacity(z.len());
        let mut edges = Vec::new();
        for (u, nbrs) in neighbors.iter().enumerate() {
            let scores: Vec<Vec<f64>> = nbrs
                .iter()
                .map(|&v| {
                    (0..k)
                        .map(|j| dot(&block(&z[u], j), &block(&c[v], j)))
                        .collect()
                })
                .collect();
            let p: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s)).collect();
            let q_by_channel: Vec<Vec<f64>> = (0..k)
                .map(|j| softmax(&scores.iter().map(|s| s[j]).collect::<Vec<_>>()))
                .collect();
            let mut row = Vec::with_capacity(k * w);
            for j in 0..k {
                let mut acc = block(&c[u], j);
                for (e, &v) in nbrs.iter().enumerate() {
                    let weight = alpha * p[e][j] + beta * q_by_channel[j][e];
                    for (a, x) in acc.iter_mut().zip(block(&c[v], j)) {
                        *a += weight * x;
                    }
                }
                row.extend(unit(acc));
            }
            next.push(row);
            for (e, &v) in nbrs.iter().enumerate() {
                edges.push(EdgeAssignment {
                    u,
                    v,
                    p: p[e].clone(),
                    q: (0..k).map(|j| q_by_channel[j][e]).collect(),
                });
            }
        }
        z = next;
        trace.push(edges);
    }
    (z, trace)
}

/// Closed-form `KL(N(mu, exp(lv)) || N(0, 1))` summed over entries.
pub fn gaussian_kl(mu: &[f64], lv: &[f64]) -> f64 {
    mu.iter()
        .zip(lv)
        .map(|(&m, &l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum()
}
