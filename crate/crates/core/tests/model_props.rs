use proptest::prelude::*;
use recency_lab::augmentation::{make_training_example, DropoutSampler};
use recency_lab::numerics::RngState;
use recency_lab::seqmodel::{
    backward, forward, hidden_state_gradients, loss_nll, step_jacobian, ModelConfig, ModelParams,
    PredictiveDistribution,
};
use recency_lab::simulator::{ClusterLayout, MarkovChain, Trajectory, TransitionSpec};
use recency_lab::training::{make_batch, TrainConfig};

/// Small models over a `clusters × per` vocabulary of at most 20 items.
fn small_config() -> impl Strategy<Value = (ModelConfig, ClusterLayout)> {
    (
        2usize..=4,
        2usize..=5,
        1usize..=8,
        1usize..=8,
        1usize..=8,
        1usize..=8,
        0.5f64..2.0,
    )
        .prop_map(|(k, m, e, h, d1, d2, t)| {
            let layout = ClusterLayout::new(k, m).unwrap();
            let config = ModelConfig {
                vocab_size: k * m,
                embed_dim: e,
                hidden_dim: h,
                head_dims: [d1, d2],
                temperature: t,
            };
            (config, layout)
        })
}

fn random_sequence(vocab: usize, len: usize, seed: u64) -> Trajectory {
    let mut rng = RngState::new(seed);
    Trajectory::new((0..len).map(|_| rng.uniform_index(vocab)).collect()).unwrap()
}

/// Smallest |pre-activation| over both ReLU layers for the example that
/// `gradient_check` draws. Finite differences are meaningless near zero.
fn relu_margin(config: &TrainConfig) -> f64 {
    let chain = MarkovChain::from_spec(&config.transitions).unwrap();
    let example = make_batch(&chain, config, 0).unwrap().swap_remove(0);
    let params = ModelParams::init(
        config.model,
        &mut RngState::new(config.seed).substream("init"),
    )
    .unwrap();
    let (trace, _) = forward(&params, &example.input).unwrap();
    let layer = |w: &recency_lab::numerics::Matrix, b: &[f64], x: &[f64]| -> Vec<f64> {
        let mut y = w.matvec(x);
        y.iter_mut().zip(b).for_each(|(y, b)| *y += b);
        y
    };
    let a1 = layer(&params.head1, &params.head1_bias, trace.hidden(trace.len()));
    let s1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
    let a2 = layer(&params.head2, &params.head2_bias, &s1);
    a1.iter()
        .chain(&a2)
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn model(config: ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(config, &mut RngState::new(seed)).unwrap()
}

/// Largest relative disagreement between `backward` and a Richardson
/// extrapolated central difference, whose error is O(ε⁴) rather than O(ε²).
fn richardson_gradient_error(config: &TrainConfig) -> f64 {
    let chain = MarkovChain::from_spec(&config.transitions).unwrap();
    let example = make_batch(&chain, config, 0).unwrap().swap_remove(0);
    let params = ModelParams::init(
        config.model,
        &mut RngState::new(config.seed).substream("init"),
    )
    .unwrap();
    let (trace, _) = forward(&params, &example.input).unwrap();
    let analytic = backward(&params, &trace, example.target).unwrap();
    let loss = |p: &ModelParams| {
        let (_, d) = forward(p, &example.input).unwrap();
        loss_nll(&d, example.target)
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (ti, view) in analytic.tensors().iter().enumerate() {
        for (idx, &a) in view.data.iter().enumerate() {
            let orig = probe.tensors_mut()[ti].1[idx];
            let mut central = |eps: f64| {
                probe.tensors_mut()[ti].1[idx] = orig + eps;
                let up = loss(&probe);
                probe.tensors_mut()[ti].1[idx] = orig - eps;
                let down = loss(&probe);
                probe.tensors_mut()[ti].1[idx] = orig;
                (up - down) / (2.0 * eps)
            };
            let (coarse, fine) = (central(1e-3), central(5e-4));
            let numeric = (4.0 * fine - coarse) / 3.0;
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, max_global_rejects: 100_000, ..ProptestConfig::default() })]

    #[test]
    fn analytic_gradients_match_finite_differences(
        (model, layout) in small_config(),
        length in 3usize..=12,
        seed in any::<u64>(),
    ) {
        let config = TrainConfig {
            sequence_length: length,
            model,
            transitions: TransitionSpec { layout, p_same: 0.7 },
            seed,
            ..TrainConfig::default()
        };
        prop_assume!(relu_margin(&config) > 1e-2);
        let err = richardson_gradient_error(&config);
        prop_assert!(err <= 1e-4, "relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictions_are_distributions((config, _) in small_config(), len in 1usize..=12, seed in any::<u64>()) {
        let params = model(config, seed);
        let (_, dist) = forward(&params, &random_sequence(config.vocab_size, len, seed ^ 1)).unwrap();
        let sum: f64 = dist.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(dist.probs().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn temperature_keeps_the_argmax(logits in prop::collection::vec(-20.0f64..20.0, 1..50), t1 in 0.05f64..20.0, t2 in 0.05f64..20.0) {
        let a = PredictiveDistribution::from_logits(&logits, t1).argmax();
        let b = PredictiveDistribution::from_logits(&logits, t2).argmax();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn chained_jacobians_reproduce_backprop((config, _) in small_config(), len in 2usize..=12, seed in any::<u64>()) {
        let params = model(config, seed);
        let seq = random_sequence(config.vocab_size, len, seed ^ 2);
        let target = (seed % config.vocab_size as u64) as usize;
        let (trace, _) = forward(&params, &seq).unwrap();
        let bptt = hidden_state_gradients(&params, &trace, target).unwrap();
        let last = bptt.len() - 1;
        // walk ∂L/∂h_T backwards through each step Jacobian
        let mut g = bptt[last].clone();
        for t in (0..last).rev() {
            let j = step_jacobian(&params, &trace, t).unwrap();
            let mut next = vec![0.0; g.len()];
            for (r, gr) in g.iter().enumerate() {
                for (c, n) in next.iter_mut().enumerate() {
                    *n += gr * j[(r, c)];
                }
            }
            g = next;
            for (x, y) in g.iter().zip(&bptt[t]) {
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "step {t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn forward_and_backward_are_bit_reproducible((config, _) in small_config(), len in 1usize..=12, seed in any::<u64>()) {
        let params = model(config, seed);
        let seq = random_sequence(config.vocab_size, len, seed ^ 3);
        let (t1, d1) = forward(&params, &seq).unwrap();
        let (t2, d2) = forward(&params, &seq).unwrap();
        prop_assert_eq!(&d1, &d2);
        let g1 = backward(&params, &t1, 0).unwrap();
        let g2 = backward(&params, &t2, 0).unwrap();
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn dropout_keeps_a_prefix_and_the_target(
        len in 2usize..60,
        seed in any::<u64>(),
        sampler in prop_oneof![
            (0usize..70).prop_map(DropoutSampler::Fixed),
            (0usize..10, 0usize..40, any::<bool>()).prop_map(|(lo, w, inc)| DropoutSampler::Uniform {
                low: lo,
                high: lo + w + usize::from(!inc),
                upper_inclusive: inc,
            }),
        ],
    ) {
        let seq = random_sequence(100, len, seed);
        let ex = make_training_example(&seq, &sampler, &mut RngState::new(seed ^ 4)).unwrap();
        let items = seq.items();
        prop_assert_eq!(ex.target, items[len - 1]);
        prop_assert!(!ex.input.is_empty());
        prop_assert_eq!(ex.input.items(), &items[..ex.input.len()]);
        prop_assert_eq!(ex.input.len() + ex.dropped_count, len - 1);
    }
}
