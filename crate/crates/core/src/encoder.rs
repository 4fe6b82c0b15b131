//! Disentangled encoder: per-channel subspace projection followed by dynamic
//! assignment of every edge to channels (`p`) and of every neighbor's weight
//! within a channel (`q`).

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, Neighborhoods};
use crate::model::{Bound, Mode};
use crate::tensor::Tensor;

/// Edge indices of a graph in the form the tape primitives consume.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    pub n: usize,
    pub sources: Arc<Vec<usize>>,
    pub targets: Arc<Vec<usize>>,
    pub offsets: Arc<Vec<usize>>,
}

impl GraphIndex {
    pub fn new(g: &Graph) -> Self {
        Self::from_neighborhoods(g.num_nodes(), g.neighborhoods())
    }

    pub fn from_neighborhoods(n: usize, nb: Neighborhoods) -> Self {
        Self {
            n,
            sources: Arc::new(nb.sources),
            targets: Arc::new(nb.targets),
            offsets: Arc::new(nb.offsets),
        }
    }

    pub fn num_directed_edges(&self) -> usize {
        self.sources.len()
    }
}

/// `d x K` matrix with a one in row `i`, column `i / width`: right-multiplying
/// sums each channel block.
pub fn block_indicator(channels: usize, width: usize) -> Tensor {
    Tensor::from_fn(channels * width, channels, |i, k| {
        if i / width == k {
            1.0
        } else {
            0.0
        }
    })
}

/// Channel and neighbor distributions recorded at each assignment iteration.
/// Row `e` of `p[t]` / `q[t]` belongs to directed edge `e` of the
/// [`GraphIndex`].
#[derive(Clone, Debug, Default)]
pub struct AssignmentTrace {
    pub p: Vec<Tensor>,
    pub q: Vec<Tensor>,
}

/// `c = normalize_blocks(x W + b)` on the tape.
pub fn project_on_tape(tape: &mut Tape, x: Var, w: Var, b: Var, width: usize) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    let h = tape.add(h, b)?;
    tape.normalize_blocks(h, width)
}

/// Iterative dynamic assignment on the tape. Returns the final channel-wise
/// normalized embedding and, per iteration, the `(p, q)` variables.
#[allow(clippy::too_many_arguments)]
pub fn assign_on_tape(
    tape: &mut Tape,
    c: Var,
    graph: &GraphIndex,
    alpha: Var,
    beta: Var,
    channels: usize,
    width: usize,
    iterations: usize,
) -> Result<(Var, Vec<(Var, Var)>)> {
    let (n, d) = tape.shape(c);
    if n != graph.n || d != channels * width {
        return Err(Error::shape(
            "dynamic_assignment",
            format!(
                "embedding {n}x{d} for {} nodes, {channels}x{width}",
                graph.n
            ),
        ));
    }
    if iterations == 0 {
        return Err(Error::Invalid(
            "assignment needs at least one iteration".into(),
        ));
    }
    if graph.num_directed_edges() == 0 {
        return Ok((c, Vec::new()));
    }
    let mut z = c;
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (sum, p, q) = tape.route(
            z,
            c,
            alpha,
            beta,
            graph.sources.clone(),
            graph.targets.clone(),
            graph.offsets.clone(),
            width,
        )?;
        z = tape.normalize_blocks(sum, width)?;
        trace.push((p, q));
    }
    Ok((z, trace))
}

/// Projection of `x` into `channels` unit-norm subspaces.
pub fn project_subspaces(x: &Tensor, w: &Tensor, b: &Tensor, channels: usize) -> Result<Tensor> {
    if channels == 0 || !w.cols().is_multiple_of(channels) {
        return Err(Error::shape(
            "project_subspaces",
            format!("{} columns into {channels} channels", w.cols()),
        ));
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let c = project_on_tape(&mut tape, xv, wv, bv, w.cols() / channels)?;
    Ok(tape.value(c).clone())
}

/// Dynamic assignment with fixed `α`, `β` on already normalized channel
/// embeddings `c`.
pub fn dynamic_assignment(
    c: &Tensor,
    graph: &GraphIndex,
    alpha: f64,
    beta: f64,
    channels: usize,
    iterations: usize,
) -> Result<(Tensor, AssignmentTrace)> {
    if channels == 0 || !c.cols().is_multiple_of(channels) {
        return Err(Error::shape(
            "dynamic_assignment",
            format!("{} columns into {channels} channels", c.cols()),
        ));
    }
    let mut tape = Tape::new();
    let cv = tape.constant(c.clone());
    let a = tape.constant(Tensor::scalar(alpha));
    let b = tape.constant(Tensor::scalar(beta));
    let (z, steps) = assign_on_tape(
        &mut tape,
        cv,
        graph,
        a,
        b,
        channels,
        c.cols() / channels,
        iterations,
    )?;
    let trace = AssignmentTrace {
        p: steps.iter().map(|&(p, _)| tape.value(p).clone()).collect(),
        q: steps.iter().map(|&(_, q)| tape.value(q).clone()).collect(),
    };
    Ok((tape.value(z).clone(), trace))
}

/// What [`encode`] produced.
pub struct Encoded {
    /// Embedding handed to the flows: `μ + ε∘σ` in variational training,
    /// `μ` at test time, the layer output in deterministic mode.
    pub z: Var,
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    /// Noise used for the sample, when one was drawn.
    pub eps: Option<Tensor>,
    /// First-layer projected channels, the discriminator's input.
    pub first_projection: Var,
    /// `(p, q)` per layer and iteration.
    pub trace: Vec<Vec<(Var, Var)>>,
}

/// Stochastic inputs of one forward pass. `None` means test-time behavior:
/// no dropout and `μ` in place of a sample.
pub struct Noise<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub dropout: f64,
}

/// Inverted dropout mask: zeros with probability `rate`, `1 / (1 - rate)`
/// elsewhere.
fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    Tensor::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `μ + ε∘exp(½ logσ²)`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
    let half = tape.affine(logvar, 0.5, 0.0)?;
    let sigma = tape.exp(half)?;
    let e = tape.constant(eps);
    let noise = tape.mul(sigma, e)?;
    tape.add(mu, noise)
}

/// Runs the stacked disentangle layers on features `x`, then the variational
/// heads in variational mode.
pub fn encode(
    tape: &mut Tape,
    bound: &Bound<'_>,
    x: Var,
    graph: &GraphIndex,
    mut noise: Option<Noise<'_>>,
) -> Result<Encoded> {
    let cfg = bound.config();
    let (k, w) = (cfg.channels, cfg.channel_dim);
    let (n, f) = tape.shape(x);
    if f != cfg.input_dim || n != graph.n {
        return Err(Error::shape(
            "encode",
            format!(
                "features {n}x{f}, model expects {} inputs for {} nodes",
                cfg.input_dim, graph.n
            ),
        ));
    }
    let mut h = x;
    let mut first = None;
    let mut trace = Vec::with_capacity(cfg.layers);
    for layer in &bound.layout().layers {
        if let Some(nz) = noise.as_mut() {
            if nz.dropout > 0.0 {
                let (r, c) = tape.shape(h);
                let mask = tape.constant(dropout_mask(r, c, nz.dropout, nz.rng));
                h = tape.mul(h, mask)?;
            }
        }
        let c = project_on_tape(tape, h, bound.var(layer.w), bound.var(layer.b), w)?;
        first.get_or_insert(c);
        let alpha = tape.sigmoid(bound.var(layer.alpha_raw))?;
        let beta = tape.sigmoid(bound.var(layer.beta_raw))?;
        let (z, steps) = assign_on_tape(tape, c, graph, alpha, beta, k, w, cfg.iterations)?;
        trace.push(steps);
        h = z;
    }
    let first_projection = first.expect("at least one layer");

    if cfg.mode == Mode::Dga {
        return Ok(Encoded {
            z: h,
            mu: None,
            logvar: None,
            eps: None,
            first_projection,
            trace,
        });
    }
    let heads = &bound.layout().heads;
    if heads.len() != k {
        return Err(Error::Invalid(
            "variational encoding needs one head per channel".into(),
        ));
    }
    let mut mus = Vec::with_capacity(k);
    let mut logvars = Vec::with_capacity(k);
    for (c, head) in heads.iter().enumerate() {
        let block = tape.slice_cols(h, c * w, w)?;
        let m = tape.matmul(block, bound.var(head.mu_w))?;
        mus.push(tape.add(m, bound.var(head.mu_b))?);
        let lv = tape.matmul(block, bound.var(head.logvar_w))?;
        logvars.push(tape.add(lv, bound.var(head.logvar_b))?);
    }
    let mu = tape.concat_cols(&mus)?;
    let logvar = tape.concat_cols(&logvars)?;
    let (z, eps) = match noise {
        Some(nz) => {
            let eps = standard_normal(n, k * w, nz.rng);
            (reparameterize(tape, mu, logvar, eps.clone())?, Some(eps))
        }
        None => (mu, None),
    };
    Ok(Encoded {
        z,
        mu: Some(mu),
        logvar: Some(logvar),
        eps,
        first_projection,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::autodiff::Axis;
    use crate::gradcheck;

    /// Assignment written with generic tape primitives.
    fn assign_composed(
        tape: &mut Tape,
        c: Var,
        graph: &GraphIndex,
        alpha: Var,
        beta: Var,
        channels: usize,
        width: usize,
        iterations: usize,
    ) -> (Var, Vec<(Var, Var)>) {
        let n = graph.n;
        let block = tape.constant(block_indicator(channels, width));
        let block_t = tape.constant(block_indicator(channels, width).transpose());
        let c_v = tape.gather_rows(c, graph.targets.clone()).unwrap();
        let mut z = c;
        let mut trace = Vec::new();
        for _ in 0..iterations {
            let z_u = tape.gather_rows(z, graph.sources.clone()).unwrap();
            let prod = tape.mul(z_u, c_v).unwrap();
            let scores = tape.matmul(prod, block).unwrap();
            let p = tape.softmax(scores, Axis::Cols).unwrap();
            let q = tape.segment_softmax(scores, graph.offsets.clone()).unwrap();
            let ap = tape.scale(p, alpha).unwrap();
            let bq = tape.scale(q, beta).unwrap();
            let weights = tape.add(ap, bq).unwrap();
            let spread = tape.matmul(weights, block_t).unwrap();
            let messages = tape.mul(spread, c_v).unwrap();
            let agg = tape
                .scatter_add_rows(messages, graph.sources.clone(), n)
                .unwrap();
            let sum = tape.add(c, agg).unwrap();
            z = tape.normalize_blocks(sum, width).unwrap();
            trace.push((p, q));
        }
        (z, trace)
    }

    fn ring_with_chords() -> GraphIndex {
        let mut edges: Vec<(usize, usize)> = (0..7).map(|i| (i, (i + 1) % 7)).collect();
        edges.extend([(0, 3), (2, 5), (1, 4)]);
        GraphIndex::new(&Graph::featureless(8, edges).unwrap())
    }

    #[test]
    fn fused_routing_matches_composed_primitives() {
        let graph = ring_with_chords();
        let raw = Tensor::from_fn(8, 6, |i, j| ((3 * i + 5 * j) as f64 * 0.37).sin());
        let weights = Tensor::from_fn(8, 6, |i, j| ((i + 2 * j) as f64 * 0.91).cos());
        let run = |fused: bool| {
            let mut tape = Tape::new();
            let x = tape.param(raw.clone());
            let c = tape.normalize_blocks(x, 2).unwrap();
            let a = tape.param(Tensor::scalar(0.3));
            let b = tape.param(Tensor::scalar(0.8));
            let (z, trace) = if fused {
                assign_on_tape(&mut tape, c, &graph, a, b, 3, 2, 3).unwrap()
            } else {
                assign_composed(&mut tape, c, &graph, a, b, 3, 2, 3)
            };
            let w = tape.constant(weights.clone());
            let prod = tape.mul(z, w).unwrap();
            let loss = tape.sum(prod).unwrap();
            let grads = tape.backward(loss).unwrap();
            let (p, q) = trace[2];
            (
                tape.value(z).clone(),
                tape.value(p).clone(),
                tape.value(q).clone(),
                [x, a, b].map(|v| grads.get(v).unwrap().clone()),
            )
        };
        let (z1, p1, q1, g1) = run(true);
        let (z2, p2, q2, g2) = run(false);
        let close = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| (x - y).abs() < 1e-12)
        };
        assert!(close(&z1, &z2) && close(&p1, &p2) && close(&q1, &q2));
        for (a, b) in g1.iter().zip(&g2) {
            assert!(close(a, b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn fused_routing_gradient_check() {
        let graph = ring_with_chords();
        let c0 = Tensor::from_fn(8, 4, |i, j| ((i * 4 + j) as f64 * 0.7).sin()).normalize_blocks(2);
        let z0 = Tensor::from_fn(8, 4, |i, j| ((i + j * 3) as f64 * 0.4).cos());
        let weights = Tensor::from_fn(8, 4, |i, j| (i as f64 - j as f64) * 0.1);
        let inputs = vec![c0, z0, Tensor::scalar(0.4), Tensor::scalar(0.6)];
        let report = gradcheck::grad_check(
            |tape: &mut Tape, v: &[Var]| {
                let (y, _, _) = tape.route(
                    v[1],
                    v[0],
                    v[2],
                    v[3],
                    graph.sources.clone(),
                    graph.targets.clone(),
                    graph.offsets.clone(),
                    2,
                )?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(y, w)?;
                tape.sum(prod)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn path2() -> GraphIndex {
        GraphIndex::new(&Graph::featureless(2, vec![(0, 1)]).unwrap())
    }

    #[test]
    fn identity_projection_restricts_to_block() {
        let x = Tensor::from_vec(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let c = project_subspaces(&x, &Tensor::identity(4), &Tensor::zeros(1, 4), 2).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_normalizes_and_guards_zero() {
        let x = Tensor::from_vec(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let c = project_subspaces(&x, &Tensor::identity(2), &Tensor::zeros(1, 2), 1).unwrap();
        assert_eq!(c.data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn isolated_node_keeps_its_projection() {
        let g = GraphIndex::new(&Graph::featureless(3, vec![(0, 1)]).unwrap());
        let c = Tensor::from_fn(3, 4, |i, j| ((i * 4 + j) as f64).sin()).normalize_blocks(2);
        let (z, _) = dynamic_assignment(&c, &g, 0.5, 0.5, 2, 3).unwrap();
        assert_eq!(z.row(2), c.row(2));
    }

    #[test]
    fn equal_channel_scores_split_evenly() {
        let c = Tensor::from_vec(2, 4, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let (_, trace) = dynamic_assignment(&c, &path2(), 0.5, 0.5, 2, 1).unwrap();
        assert_eq!(trace.p[0].data(), &[0.5; 4]);
    }

    #[test]
    fn two_node_path_single_channel() {
        let c = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let (z, trace) = dynamic_assignment(&c, &path2(), 0.5, 0.5, 1, 1).unwrap();
        assert_eq!(trace.p[0].data(), &[1.0, 1.0]);
        assert_eq!(trace.q[0].data(), &[1.0, 1.0]);
        let s = [1.6f64, 0.8];
        let norm = (s[0] * s[0] + s[1] * s[1]).sqrt();
        assert!((z.get(0, 0) - s[0] / norm).abs() < 1e-15);
        assert!((z.get(0, 1) - s[1] / norm).abs() < 1e-15);
        assert!((z.get(1, 0) - z.get(0, 0)).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_with_zero_noise_is_mean() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::from_fn(3, 2, |i, j| (i + j) as f64));
        let lv = tape.constant(Tensor::full(3, 2, 0.7));
        let z = reparameterize(&mut tape, mu, lv, Tensor::zeros(3, 2)).unwrap();
        assert_eq!(tape.value(z), tape.value(mu));
    }

    #[test]
    fn dropout_mask_scales_kept_entries() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = dropout_mask(50, 50, 0.2, &mut rng);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.25));
        let kept = m.data().iter().filter(|&&v| v > 0.0).count() as f64 / 2500.0;
        assert!((kept - 0.8).abs() < 0.05);
    }
}
