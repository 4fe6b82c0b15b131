//! Latent-factor random graphs.
//!
//! Each factor partitions the nodes into classes and draws an Erdős–Rényi
//! style graph with intra-class probability `p` and inter-class probability
//! `q`. The returned graph is the union over factors, with node features set
//! to the rows of its adjacency matrix and one label column per factor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Labels};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub factors: usize,
    pub nodes: usize,
    pub classes: usize,
    pub p: f64,
    pub q: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(Error::Invalid("need at least one factor".into()));
        }
        if self.classes == 0 || self.classes > self.nodes {
            return Err(Error::Invalid(format!(
                "{} classes for {} nodes",
                self.classes, self.nodes
            )));
        }
        if !(0.0..=1.0).contains(&self.q) || !(self.q..=1.0).contains(&self.p) {
            return Err(Error::Invalid(format!(
                "need 0 <= q <= p <= 1, got p={} q={}",
                self.p, self.q
            )));
        }
        Ok(())
    }
}

/// Class of the node at position `i` of a factor's permuted order.
#[inline]
fn class_of_position(i: usize, n: usize, classes: usize) -> usize {
    i * classes / n
}

fn class_sizes(n: usize, classes: usize) -> Vec<usize> {
    let mut sizes = vec![0; classes];
    for i in 0..n {
        sizes[class_of_position(i, n, classes)] += 1;
    }
    sizes
}

/// Per-factor class assignment: a random permutation of the nodes, cut into
/// `classes` nearly equal consecutive runs.
fn assign_classes(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut labels = vec![0; n];
    for (pos, &node) in order.iter().enumerate() {
        labels[node] = class_of_position(pos, n, classes);
    }
    labels
}

pub fn synth_graph(spec: &SyntheticSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut columns = Vec::with_capacity(spec.factors);
    let mut edges = Vec::new();
    for _ in 0..spec.factors {
        let labels = assign_classes(n, spec.classes, &mut rng);
        if spec.p > 0.0 || spec.q > 0.0 {
            for i in 0..n {
                for j in i + 1..n {
                    let prob = if labels[i] == labels[j] {
                        spec.p
                    } else {
                        spec.q
                    };
                    if rng.random::<f64>() < prob {
                        edges.push((i, j));
                    }
                }
            }
        }
        columns.push(labels);
    }
    let mut g = Graph::new(n, edges, Tensor::zeros(n, 0))?;
    g.features = g.adjacency();
    g.with_labels(Labels { columns })
}

/// Intra-class probability giving an expected mean degree of `target` in the
/// union of `factors` independent factor graphs.
///
/// With `pi` the probability that two distinct nodes share a class within one
/// factor, a single factor links a random pair with probability
/// `r = pi * p + (1 - pi) * q`, and the union with `1 - (1 - r)^factors`.
/// Solving `(n - 1) * (1 - (1 - r)^factors) = target` for `p` is closed form.
pub fn tune_p_for_degree(
    n: usize,
    classes: usize,
    factors: usize,
    q: f64,
    target: f64,
) -> Result<f64> {
    if n < 2 || classes == 0 || classes > n || factors == 0 {
        return Err(Error::Invalid(format!(
            "cannot tune p for n={n}, classes={classes}, factors={factors}"
        )));
    }
    let max = (n - 1) as f64;
    if !(0.0..=max).contains(&target) {
        return Err(Error::Invalid(format!(
            "target degree {target} outside [0, {max}]"
        )));
    }
    let same: f64 = class_sizes(n, classes)
        .iter()
        .map(|&s| (s * s.saturating_sub(1)) as f64)
        .sum::<f64>()
        / (n * (n - 1)) as f64;
    let r = 1.0 - (1.0 - target / max).powf(1.0 / factors as f64);
    let infeasible = || {
        Error::Invalid(format!(
            "target degree {target} unreachable with q={q} ({classes} classes, {factors} factors)"
        ))
    };
    if same <= 0.0 {
        return if (r - q).abs() <= 1e-12 {
            Ok(q)
        } else {
            Err(infeasible())
        };
    }
    let p = (r - (1.0 - same) * q) / same;
    const SLACK: f64 = 1e-12;
    if p < q - SLACK || p > 1.0 + SLACK {
        return Err(infeasible());
    }
    Ok(p.clamp(q, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(factors: usize, p: f64, q: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            factors,
            nodes: 200,
            classes: 8,
            p,
            q,
            seed,
        }
    }

    #[test]
    fn zero_probabilities_give_no_edges() {
        let g = synth_graph(&spec(2, 0.0, 0.0, 1)).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.features.max_abs(), 0.0);
    }

    #[test]
    fn same_seed_same_graph() {
        let a = synth_graph(&spec(2, 0.2, 0.01, 5)).unwrap();
        let b = synth_graph(&spec(2, 0.2, 0.01, 5)).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn labels_have_one_column_per_factor_and_requested_classes() {
        let g = synth_graph(&spec(3, 0.1, 0.0, 2)).unwrap();
        let labels = g.labels.as_ref().unwrap();
        assert_eq!(labels.num_columns(), 3);
        for c in 0..3 {
            assert_eq!(labels.num_classes(c), 8);
        }
    }

    #[test]
    fn q_zero_keeps_edges_within_some_class() {
        let g = synth_graph(&spec(2, 0.3, 0.0, 3)).unwrap();
        let labels = g.labels.as_ref().unwrap();
        for &(a, b) in g.edges() {
            assert!(labels.columns.iter().any(|c| c[a] == c[b]));
        }
    }

    #[test]
    fn features_are_adjacency_rows() {
        let g = synth_graph(&spec(1, 0.2, 0.01, 4)).unwrap();
        assert_eq!(g.features, g.adjacency());
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        assert!(synth_graph(&spec(1, 0.1, 0.2, 0)).is_err());
        assert!(synth_graph(&spec(0, 0.1, 0.0, 0)).is_err());
    }

    #[test]
    fn single_factor_matches_hand_formula() {
        // 16 classes of 1000 nodes: eight of size 62 and eight of size 63, so
        // each node has on average 61.504 same-class peers.
        let q = 3e-5;
        let p = tune_p_for_degree(1000, 16, 1, q, 40.0).unwrap();
        let peers = (8.0 * 62.0 * 61.0 + 8.0 * 63.0 * 62.0) / 1000.0;
        let hand = (40.0 - q * (999.0 - peers)) / peers;
        assert!((p - hand).abs() < 1e-12, "{p} vs {hand}");
    }

    #[test]
    fn degenerate_targets() {
        assert_eq!(tune_p_for_degree(50, 5, 1, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(tune_p_for_degree(50, 5, 2, 1.0, 49.0).unwrap(), 1.0);
        assert!(tune_p_for_degree(50, 5, 1, 0.0, 60.0).is_err());
        assert!(tune_p_for_degree(50, 5, 1, 0.5, 1.0).is_err());
    }

    #[test]
    fn tuned_p_hits_target_on_a_sample() {
        for factors in [1, 4] {
            let q = 3e-5;
            let p = tune_p_for_degree(1000, 16, factors, q, 40.0).unwrap();
            let g = synth_graph(&SyntheticSpec {
                factors,
                nodes: 1000,
                classes: 16,
                p,
                q,
                seed: 11,
            })
            .unwrap();
            let d = g.mean_degree();
            assert!((d - 40.0).abs() < 2.0, "factors={factors} degree={d}");
        }
    }
}
