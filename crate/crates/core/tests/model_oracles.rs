use milpdl::data::Bag;
use milpdl::model::{
    attention_pool, forward, gated_attention_pool, AggregatorKind, AggregatorParams, ModelConfig,
    ModelParams,
};
use milpdl::numerics::{Matrix, Rng};
use milpdl::pdl::Mode;

/// Direct evaluation of attention pooling with plain loops and an
/// unshifted softmax.
fn oracle_pool(v: &Matrix, p: &AggregatorParams) -> (Vec<f64>, Vec<f64>) {
    let (k, l) = v.shape();
    let d = p.w2.rows();
    let mut scores = vec![0.0; k];
    for i in 0..k {
        for j in 0..d {
            let mut h = 0.0;
            let mut g = 0.0;
            for c in 0..l {
                h += p.w2[(j, c)] * v[(i, c)];
                if let Some(u2) = &p.u2 {
                    g += u2[(j, c)] * v[(i, c)];
                }
            }
            let gate = if p.u2.is_some() {
                1.0 / (1.0 + (-g).exp())
            } else {
                1.0
            };
            scores[i] += p.w1[(j, 0)] * h.tanh() * gate;
        }
    }
    let total: f64 = scores.iter().map(|s| s.exp()).sum();
    let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / total).collect();
    let mut z = vec![0.0; l];
    for i in 0..k {
        for c in 0..l {
            z[c] += alpha[i] * v[(i, c)];
        }
    }
    (z, alpha)
}

fn random_aggregator(kind: AggregatorKind, l: usize, d: usize, rng: &mut Rng) -> AggregatorParams {
    let cfg = ModelConfig {
        input_dim: l,
        projector_dims: vec![l],
        attention_dim: d,
        aggregator: kind,
    };
    ModelParams::init(&cfg, rng).unwrap().aggregator
}

#[test]
fn pooling_matches_direct_evaluation() {
    let mut rng = Rng::new(21);
    for (kind, pool) in [
        (AggregatorKind::Attention, attention_pool as fn(&_, &_) -> _),
        (AggregatorKind::Gated, gated_attention_pool),
    ] {
        for (k, l, d) in [(4, 3, 2), (1, 5, 3), (9, 6, 7)] {
            let p = random_aggregator(kind, l, d, &mut rng);
            let v = rng.gaussian_matrix(k, l, 1.0);
            let (z, alpha) = pool(&v, &p).unwrap();
            let (z_ref, alpha_ref) = oracle_pool(&v, &p);
            for (a, b) in alpha.weights().iter().zip(&alpha_ref) {
                assert!((a - b).abs() <= 1e-12, "{kind}: {a} vs {b}");
            }
            for (a, b) in z.iter().zip(&z_ref) {
                assert!((a - b).abs() <= 1e-12, "{kind}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn gate_at_zero_input_gives_uniform_attention() {
    let mut rng = Rng::new(22);
    let p = random_aggregator(AggregatorKind::Gated, 4, 3, &mut rng);
    let (_, alpha) = gated_attention_pool(&Matrix::zeros(6, 4), &p).unwrap();
    assert!(alpha
        .weights()
        .iter()
        .all(|&a| (a - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn eval_prediction_ignores_instance_order() {
    let mut rng = Rng::new(23);
    for kind in [AggregatorKind::Attention, AggregatorKind::Gated] {
        let cfg = ModelConfig {
            projector_dims: vec![16, 8],
            attention_dim: 6,
            aggregator: kind,
            ..ModelConfig::new(5)
        };
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        for _ in 0..20 {
            let k = 1 + (rng.next_u64() % 12) as usize;
            let bag = Bag::new("b", rng.gaussian_matrix(k, 5, 1.0), false, None).unwrap();
            let mut order: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut order);
            let a = forward(&bag, &params, &[], Mode::Eval, &mut rng).unwrap();
            let b = forward(&bag.permuted(&order), &params, &[], Mode::Eval, &mut rng).unwrap();
            assert!((a.probability - b.probability).abs() <= 1e-12);
            for (i, &j) in order.iter().enumerate() {
                assert!((b.alpha.weights()[i] - a.alpha.weights()[j]).abs() <= 1e-12);
            }
        }
    }
}
