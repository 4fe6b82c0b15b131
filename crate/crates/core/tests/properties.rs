use std::collections::HashSet;
use std::sync::Arc;

use dga_core::checkpoint;
use dga_core::decoder::{decode, factor_similarities, score_pairs, sigmoid};
use dga_core::encoder::{standard_normal, GraphIndex, Noise};
use dga_core::eval::{apply_matching, clustering_metrics, munkres_match, rank_metrics};
use dga_core::flows::apply_flows;
use dga_core::gradcheck::grad_check;
use dga_core::graph::{canonical, split_edges};
use dga_core::objectives::gaussian_kl;
use dga_core::synth::synth_graph;
use dga_core::train::{embed, embed_graph, forward, train, TrainData};
use dga_core::{
    Axis, ExperimentConfig, Graph, Mode, ModelParams, SyntheticSpec, Tape, Tensor, TrainConfig,
    Var,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    standard_normal(rows, cols, rng)
}

fn random_graph(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < density {
                edges.push((a, b));
            }
        }
    }
    Graph::featureless(n, edges).unwrap()
}

fn random_features(g: Graph, f: usize, rng: &mut ChaCha8Rng) -> Graph {
    let x = Tensor::from_fn(g.num_nodes(), f, |_, _| rng.random::<f64>());
    Graph::new(g.num_nodes(), g.edges().to_vec(), x).unwrap()
}

/// Adds noise to every parameter so zero-initialized layers are exercised.
fn perturbed(cfg: &TrainConfig, input_dim: usize, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::init(cfg.model_config(input_dim), rng).unwrap();
    for t in &mut p.tensors {
        let noise = randn(t.rows(), t.cols(), rng).map(|v| 0.3 * v);
        t.axpy(1.0, &noise);
    }
    p
}

/// `sum(op(x) * r)` for a fixed random `r`, so every output entry matters.
fn weighted_sum(tape: &mut Tape, y: Var, rng_seed: u64) -> dga_core::Result<Var> {
    let (r, c) = tape.shape(y);
    let w = randn(r, c, &mut ChaCha8Rng::seed_from_u64(rng_seed));
    let w = tape.constant(w);
    let m = tape.mul(y, w)?;
    tape.sum(m)
}

type Primitive = fn(&mut Tape, &[Var]) -> dga_core::Result<Var>;

fn primitives() -> Vec<(&'static str, Vec<(usize, usize)>, Primitive)> {
    vec![
        ("matmul", vec![(4, 3), (3, 5)], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![(4, 3), (4, 3)], |t, v| t.add(v[0], v[1])),
        ("add_row_bias", vec![(4, 3), (1, 3)], |t, v| t.add(v[0], v[1])),
        ("sub", vec![(4, 3), (4, 3)], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![(4, 3), (4, 3)], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![(4, 3), (1, 1)], |t, v| t.scale(v[0], v[1])),
        ("affine", vec![(4, 3)], |t, v| t.affine(v[0], -1.7, 0.3)),
        ("relu", vec![(4, 3)], |t, v| t.relu(v[0])),
        ("sigmoid", vec![(4, 3)], |t, v| t.sigmoid(v[0])),
        ("tanh", vec![(4, 3)], |t, v| t.tanh(v[0])),
        ("exp", vec![(4, 3)], |t, v| t.exp(v[0])),
        ("log", vec![(4, 3)], |t, v| {
            let pos = t.exp(v[0])?;
            t.log(pos)
        }),
        ("softmax_cols", vec![(4, 3)], |t, v| t.softmax(v[0], Axis::Cols)),
        ("softmax_rows", vec![(4, 3)], |t, v| t.softmax(v[0], Axis::Rows)),
        ("segment_softmax", vec![(6, 2)], |t, v| {
            t.segment_softmax(v[0], Arc::new(vec![0, 2, 2, 5, 6]))
        }),
        ("normalize_rows", vec![(4, 3)], |t, v| t.normalize_rows(v[0])),
        ("normalize_blocks", vec![(4, 6)], |t, v| t.normalize_blocks(v[0], 2)),
        ("concat_cols", vec![(4, 3), (4, 2)], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("slice_cols", vec![(4, 5)], |t, v| t.slice_cols(v[0], 1, 3)),
        ("select_cols", vec![(4, 5)], |t, v| t.select_cols(v[0], Arc::new(vec![4, 0, 2]))),
        ("transpose", vec![(4, 3)], |t, v| t.transpose(v[0])),
        ("sum", vec![(4, 3)], |t, v| t.sum(v[0])),
        ("mean", vec![(4, 3)], |t, v| t.mean(v[0])),
        ("sum_rows", vec![(4, 3)], |t, v| t.sum_rows(v[0])),
        ("gather_rows", vec![(4, 3)], |t, v| t.gather_rows(v[0], Arc::new(vec![3, 0, 0, 2, 1]))),
        ("scatter_add_rows", vec![(5, 3)], |t, v| {
            t.scatter_add_rows(v[0], Arc::new(vec![1, 0, 1, 3, 1]), 4)
        }),
        // Every channel ties at similarity 1 on the diagonal, a kink of the
        // max; the mask keeps the check in the smooth region.
        ("factor_max_similarity", vec![(5, 6)], |t, v| {
            let y = t.factor_max_similarity(v[0], 3)?;
            let off = t.constant(Tensor::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 }));
            t.mul(y, off)
        }),
        ("cross_entropy", vec![(5, 3)], |t, v| t.cross_entropy(v[0], Arc::new(vec![0, 2, 1, 1, 0]))),
        ("bce_with_logits", vec![(3, 3)], |t, v| {
            let target = Tensor::from_rows(&[
                vec![0.0, 1.0, 0.0],
                vec![1.0, 0.0, 1.0],
                vec![0.0, 1.0, 1.0],
            ])
            .unwrap();
            t.bce_with_logits(v[0], Arc::new(target), 2.5, 0.7)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitive_gradients_match_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shapes, op) in primitives() {
            let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| randn(r, c, &mut rng)).collect();
            let report = grad_check(
                |tape, v| {
                    let y = op(tape, v)?;
                    weighted_sum(tape, y, seed)
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            prop_assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
        }
    }

    #[test]
    fn softmax_and_normalize_rows(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(rows, cols, &mut rng).map(|v| 5.0 * v);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = tape.softmax(xv, Axis::Cols).unwrap();
        let u = tape.normalize_rows(xv).unwrap();
        for i in 0..rows {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let norm: f64 = tape.value(u).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn split_partitions_edges(seed in any::<u64>(), n in 10usize..60, val in 0.0f64..0.3, test in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, 0.15, &mut rng);
        let s = split_edges(&g, val, test, seed).unwrap();
        let all: HashSet<_> = g.edges().iter().copied().collect();
        let train: HashSet<_> = s.train.edges().iter().copied().collect();
        let vp: HashSet<_> = s.val_pos.iter().map(|&(a, b)| canonical(a, b)).collect();
        let tp: HashSet<_> = s.test_pos.iter().map(|&(a, b)| canonical(a, b)).collect();
        prop_assert_eq!(train.len() + vp.len() + tp.len(), all.len());
        prop_assert!(train.is_disjoint(&vp) && train.is_disjoint(&tp) && vp.is_disjoint(&tp));
        let union: HashSet<_> = train.union(&vp).chain(&tp).copied().collect();
        prop_assert_eq!(union, all.clone());
        prop_assert_eq!(s.val_neg.len(), s.val_pos.len());
        prop_assert_eq!(s.test_neg.len(), s.test_pos.len());
        for &(a, b) in s.val_neg.iter().chain(&s.test_neg) {
            prop_assert!(a != b && !all.contains(&canonical(a, b)));
        }
    }

    #[test]
    fn synthetic_labels_have_one_column_per_factor(seed in any::<u64>(), factors in 1usize..5, classes in 1usize..6) {
        let g = synth_graph(&SyntheticSpec { factors, nodes: 40, classes, p: 0.3, q: 0.01, seed }).unwrap();
        let labels = g.labels.unwrap();
        prop_assert_eq!(labels.num_columns(), factors);
        for c in 0..factors {
            prop_assert_eq!(labels.num_classes(c), classes);
        }
    }

    #[test]
    fn encoder_blocks_are_unit_or_zero(seed in any::<u64>(), k in 1usize..4, w in 1usize..5, layers in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_features(random_graph(20, 0.15, &mut rng), 6, &mut rng);
        let cfg = TrainConfig { channels: k, channel_dim: w, layers, flow_steps: 0, ..TrainConfig::default() };
        let p = perturbed(&cfg, 6, &mut rng);
        let z = embed_graph(&p, &g).unwrap();
        for i in 0..z.rows() {
            for ch in 0..k {
                let n: f64 = z.row(i)[ch * w..(ch + 1) * w].iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6 || n < 1e-6, "block norm {n}");
            }
        }
    }

    #[test]
    fn permuting_channel_parameters_permutes_output(seed in any::<u64>(), k in 2usize..5, layers in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 3;
        let g = random_features(random_graph(16, 0.2, &mut rng), 5, &mut rng);
        let cfg = TrainConfig { channels: k, channel_dim: w, layers, flow_steps: 0, ..TrainConfig::default() };
        let p = perturbed(&cfg, 5, &mut rng);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        // column j of the permuted model is column src(j) of the original
        let src = |j: usize| perm[j / w] * w + j % w;
        let mut q = p.clone();
        for l in 0..layers {
            let wi = p.index_of(&format!("layer{l}.w")).unwrap();
            let bi = p.index_of(&format!("layer{l}.b")).unwrap();
            let (wt, bt) = (&p.tensors[wi], &p.tensors[bi]);
            q.tensors[wi] = Tensor::from_fn(wt.rows(), wt.cols(), |i, j| {
                wt.get(if l == 0 { i } else { src(i) }, src(j))
            });
            q.tensors[bi] = Tensor::from_fn(1, bt.cols(), |_, j| bt.get(0, src(j)));
        }
        let z = embed_graph(&p, &g).unwrap();
        let zq = embed_graph(&q, &g).unwrap();
        for i in 0..z.rows() {
            for j in 0..k * w {
                prop_assert!((zq.get(i, j) - z.get(i, src(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flows_keep_channels_separate(seed in any::<u64>(), k in 2usize..4, steps in 1usize..4, j in 0usize..4) {
        let j = j % k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 4;
        let cfg = TrainConfig { mode: Mode::Dvga, channels: k, channel_dim: w, flow_steps: steps, ..TrainConfig::default() };
        let p = perturbed(&cfg, 3, &mut rng);
        let z0 = randn(7, k * w, &mut rng);
        let mut z1 = z0.clone();
        for i in 0..7 {
            for c in j * w..(j + 1) * w {
                z1.set(i, c, z0.get(i, c) + rng.random_range(-1.0..1.0));
            }
        }
        let run = |z: &Tensor| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let zv = tape.constant(z.clone());
            let (out, _) = apply_flows(&mut tape, &bound, zv).unwrap();
            tape.value(out).clone()
        };
        let (a, b) = (run(&z0), run(&z1));
        for i in 0..7 {
            for c in 0..k * w {
                if c / w != j {
                    prop_assert_eq!(a.get(i, c), b.get(i, c));
                }
            }
        }
    }

    #[test]
    fn decoder_is_symmetric_bounded_and_max_fused(seed in any::<u64>(), n in 1usize..12, k in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = randn(n, k * w, &mut rng).normalize_blocks(w);
        let p = decode(&z, k, true).unwrap();
        let sims = factor_similarities(&z, k).unwrap();
        for u in 0..n {
            for v in 0..n {
                prop_assert!((p.get(u, v) - p.get(v, u)).abs() < 1e-9);
                prop_assert!(p.get(u, v) > 0.0 && p.get(u, v) < 1.0);
                let inner: f64 = (0..k * w).map(|i| z.get(u, i) * z.get(v, i)).sum();
                let best = sims.iter().map(|s| s.get(u, v)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!((p.get(u, v) - sigmoid(inner + best)).abs() < 1e-12);
                // Raising one channel's similarity can only raise the fused score.
                for (c, s) in sims.iter().enumerate() {
                    let raised = sims.iter().enumerate()
                        .map(|(d, t)| if d == c { s.get(u, v) + 0.5 } else { t.get(u, v) })
                        .fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(sigmoid(inner + raised) >= sigmoid(inner + best));
                }
            }
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_standard(seed in any::<u64>(), n in 1usize..6, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = randn(n, d, &mut rng);
        let lv = randn(n, d, &mut rng);
        prop_assert!(gaussian_kl(&mu, &lv).unwrap() > 0.0);
        prop_assert_eq!(gaussian_kl(&Tensor::zeros(n, d), &Tensor::zeros(n, d)).unwrap(), 0.0);
        let mut mu1 = Tensor::zeros(n, d);
        mu1.set(0, 0, 1e-3);
        prop_assert!(gaussian_kl(&mu1, &Tensor::zeros(n, d)).unwrap() > 0.0);
    }

    #[test]
    fn objective_decomposes_and_starts_at_ln_k(seed in any::<u64>(), k in 2usize..5, lambda in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_features(random_graph(12, 0.25, &mut rng), 4, &mut rng);
        let data = TrainData::new(&g);
        let cfg = TrainConfig { mode: Mode::Dvga, channels: k, channel_dim: 4, lambda, ..TrainConfig::default() };
        let fresh = ModelParams::init(cfg.model_config(4), &mut rng).unwrap();
        for (params, check_indep) in [(fresh, true), (perturbed(&cfg, 4, &mut rng), false)] {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let noise = Noise { rng: &mut rng, dropout: 0.0 };
            let fwd = forward(&mut tape, &bound, &data, lambda, Some(noise)).unwrap();
            let r = fwd.report(&tape, lambda);
            prop_assert!((r.total - lambda * r.indep - r.kl - r.recon).abs() < 1e-12);
            if check_indep {
                prop_assert!(r.indep <= (k as f64).ln() + 1e-12, "indep {}", r.indep);
            }
        }
    }

    #[test]
    fn clustering_metrics_ignore_predicted_ids(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..50).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..50).map(|_| rng.random_range(0..k)).collect();
        let mut relabel: Vec<usize> = (0..k).collect();
        relabel.shuffle(&mut rng);
        let renamed: Vec<usize> = pred.iter().map(|&p| relabel[p]).collect();
        let score = |p: &[usize]| {
            let m = munkres_match(p, &truth);
            clustering_metrics(&apply_matching(p, &m), &truth).unwrap()
        };
        let (a, b) = (score(&pred), score(&renamed));
        prop_assert_eq!(a.acc, b.acc);
        prop_assert!((a.nmi - b.nmi).abs() < 1e-12 && (a.ari - b.ari).abs() < 1e-12);
        // Precision and F1 depend on which matching wins a tie in matched
        // count, so they are only invariant when the optimum is unique.
        let agree = |m: &[usize]| pred.iter().zip(&truth).filter(|&(&p, &t)| m[p] == t).count();
        let counts: Vec<usize> = permutations(k).iter().map(|m| agree(m)).collect();
        let best = *counts.iter().max().unwrap();
        if counts.iter().filter(|&&c| c == best).count() == 1 {
            prop_assert!((a.f1 - b.f1).abs() < 1e-12 && (a.precision - b.precision).abs() < 1e-12);
        }
        for v in [a.acc, a.precision, a.f1, a.nmi] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
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

fn small_experiment() -> (ExperimentConfig, Graph) {
    let g = synth_graph(&SyntheticSpec {
        factors: 2,
        nodes: 40,
        classes: 3,
        p: 0.3,
        q: 0.01,
        seed: 5,
    })
    .unwrap();
    let mut ec = ExperimentConfig {
        feature_source: dga_core::config::FeatureSource::TrainAdjacency,
        val_frac: 0.15,
        test_frac: 0.15,
        ..Default::default()
    };
    ec.train.mode = Mode::Dvga;
    ec.train.channels = 2;
    ec.train.channel_dim = 4;
    ec.train.epochs = 15;
    ec.train.eval_every = 5;
    (ec, g)
}

#[test]
fn held_out_edges_never_reach_the_training_target() {
    let (ec, g) = small_experiment();
    let split = ec.split(&g).unwrap();
    let data = TrainData::new(&split.train);
    for &(a, b) in split.val_pos.iter().chain(&split.test_pos) {
        assert!(g.has_edge(a, b));
        assert_eq!(data.target.get(a, b), 0.0);
        assert_eq!(data.target.get(b, a), 0.0);
        assert_eq!(data.x.get(a, b), 0.0, "features leak held-out edges");
    }
    assert_eq!(data.target.sum(), 2.0 * split.train.num_edges() as f64);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let (ec, g) = small_experiment();
    let split = ec.split(&g).unwrap();
    let out = train(&split, &ec.train).unwrap();
    let (back, cfg) = checkpoint::from_str(&checkpoint::to_string(&out.params, &ec.train)).unwrap();
    assert_eq!(cfg, ec.train);
    let metrics = |p: &ModelParams| {
        let data = TrainData::new(&split.train);
        let z = embed(p, &data.x, &GraphIndex::new(&split.train)).unwrap();
        let c = &p.config;
        let pos = score_pairs(&z, c.channels, c.factor_decoder, &split.test_pos).unwrap();
        let neg = score_pairs(&z, c.channels, c.factor_decoder, &split.test_neg).unwrap();
        rank_metrics(&pos, &neg).unwrap()
    };
    let (a, b) = (metrics(&out.params), metrics(&back));
    assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
}

#[test]
fn validation_curve_trends_upward_on_synthetic_graph() {
    let g = synth_graph(&SyntheticSpec {
        factors: 4,
        nodes: 300,
        classes: 8,
        p: 0.12,
        q: 3e-5,
        seed: 2,
    })
    .unwrap();
    let mut ec = ExperimentConfig {
        feature_source: dga_core::config::FeatureSource::TrainAdjacency,
        val_frac: 0.2,
        test_frac: 0.2,
        ..Default::default()
    };
    ec.train.epochs = 200;
    ec.train.eval_every = 20;
    let split = ec.split(&g).unwrap();
    let h = train(&split, &ec.train).unwrap().history;
    let aucs: Vec<f64> = h.evals.iter().map(|e| e.val_auc).collect();
    assert!(aucs.iter().all(|a| a.is_finite()));
    let half = aucs.len() / 2;
    let early = aucs[..half].iter().sum::<f64>() / half as f64;
    let late = aucs[half..].iter().sum::<f64>() / (aucs.len() - half) as f64;
    assert!(late > early, "{aucs:?}");
    assert!(aucs.last().unwrap() > aucs.first().unwrap(), "{aucs:?}");
}
