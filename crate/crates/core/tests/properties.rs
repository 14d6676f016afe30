//! Property tests for the stated invariants of the engine, data and training.

use dinet::data::{generate_clip, make_batches, Clip, Domain, NightParams, SyntheticConfig};
use dinet::metrics::ConfusionMatrix;
use dinet::nn::conv::output_extent;
use dinet::train::{lambda_schedule, lr_schedule, progress, sgd_update, OptimizerState};
use dinet::{Graph, ParamGroup, ParamStore, Tensor};
use proptest::prelude::*;

fn clips(n: usize, domain: Domain) -> Vec<Clip> {
    (0..n)
        .map(|i| Clip {
            id: format!("{domain:?}{i}"),
            video: Tensor::zeros(&[1, 1, 1, 1]),
            action: (domain == Domain::Source).then_some(i % 3),
            domain,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_extent_counts_window_positions(input in 1usize..20, k in 1usize..6, s in 1usize..4, p in 0usize..3) {
        let positions = (0..=input + 2 * p).filter(|&start| start % s == 0 && start + k <= input + 2 * p).count();
        match output_extent(input, k, s, p) {
            Ok(n) => prop_assert_eq!(n, positions),
            Err(_) => prop_assert_eq!(positions, 0),
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_softmax_minus_onehot(
        rows in 1usize..5,
        k in 2usize..7,
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let logits: Vec<f64> = (0..rows * k).map(|_| next() * 8.0 - 4.0).collect();
        let labels: Vec<usize> = (0..rows).map(|_| (next() * k as f64) as usize % k).collect();
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::new(&[rows, k], logits.clone()).unwrap());
        let loss = g.softmax_cross_entropy(z, &labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(z).unwrap().to_f64_vec();
        for r in 0..rows {
            let row = &logits[r * k..(r + 1) * k];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..k {
                let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                let want = (row[c].exp() / denom - onehot) / rows as f64;
                prop_assert!((grad[r * k + c] - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn bce_is_finite_for_large_logits(z in -1e4f64..1e4, target in 0u8..2) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[1, 1], vec![z]).unwrap());
        let loss = g.bce_with_logits(x, &[target]).unwrap();
        g.backward(loss).unwrap();
        prop_assert!(g.value(loss).item().is_finite());
        prop_assert!(g.grad(x).unwrap().data()[0].is_finite());
    }

    #[test]
    fn fan_out_gradients_add(values in prop::collection::vec(-2.0f64..2.0, 1..12)) {
        let n = values.len();
        let grad_of = |use_f: bool, use_g: bool| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::new(&[n], values.clone()).unwrap());
            let t = g.activation(x, dinet::nn::Activation::Tanh).unwrap();
            let f = g.sum(t);
            let sq = g.mul(x, x).unwrap();
            let h = g.sum(sq);
            let loss = match (use_f, use_g) {
                (true, true) => g.add(f, h).unwrap(),
                (true, false) => f,
                _ => h,
            };
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_f64_vec()
        };
        let both = grad_of(true, true);
        let (gf, gh) = (grad_of(true, false), grad_of(false, true));
        for i in 0..n {
            prop_assert!((both[i] - (gf[i] + gh[i])).abs() <= 1e-15 * (1.0 + both[i].abs()));
        }
    }

    #[test]
    fn lambda_is_increasing_and_below_one(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (l_lo, l_hi) = (lambda_schedule(lo, 10.0).unwrap(), lambda_schedule(hi, 10.0).unwrap());
        prop_assert!(l_hi < 1.0 && l_lo >= 0.0);
        if hi - lo > 1e-9 {
            prop_assert!(l_lo < l_hi);
        }
    }

    #[test]
    fn lr_is_decreasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0, base in 1e-4f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (r_lo, r_hi) = (lr_schedule(lo, base, 10.0, 0.75).unwrap(), lr_schedule(hi, base, 10.0, 0.75).unwrap());
        prop_assert!(r_hi <= base);
        if hi - lo > 1e-9 {
            prop_assert!(r_hi < r_lo);
        }
    }

    #[test]
    fn progress_is_nondecreasing_and_spans_the_unit_interval(total in 2usize..500) {
        prop_assert_eq!(progress(0, total), 0.0);
        prop_assert_eq!(progress(total - 1, total), 1.0);
        for s in 1..total {
            prop_assert!(progress(s, total) >= progress(s - 1, total));
        }
    }

    #[test]
    fn generated_clips_stay_in_unit_range(
        action in 0usize..6,
        night in any::<bool>(),
        seed in any::<u64>(),
        instance in any::<u64>(),
        gain in 0.0f64..=1.0,
        sigma in 0.0f64..0.5,
    ) {
        let cfg = SyntheticConfig {
            seed,
            clip_shape: [1, 4, 16, 16],
            shape_radius: [2.0, 3.0],
            night: NightParams { gain, noise_sigma: sigma, gamma_curve: 1.5 },
            ..SyntheticConfig::default()
        };
        let domain = if night { Domain::Target } else { Domain::Source };
        let clip = generate_clip(action, domain, &cfg, instance).unwrap();
        prop_assert!(clip.video.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batches_are_half_and_half_and_balanced(
        n_source in 1usize..60,
        n_target in 1usize..60,
        half in 1usize..6,
        seed in any::<u64>(),
    ) {
        let (s, t) = (clips(n_source, Domain::Source), clips(n_target, Domain::Target));
        match make_batches(&s, &t, 2 * half, seed) {
            Ok(plans) => {
                prop_assert_eq!(plans.len(), n_source.min(n_target) / half);
                let mut seen_s = vec![false; n_source];
                let mut seen_t = vec![false; n_target];
                for p in &plans {
                    prop_assert_eq!(p.source.len(), half);
                    prop_assert_eq!(p.target.len(), half);
                    for &i in &p.source {
                        prop_assert!(!seen_s[i]);
                        seen_s[i] = true;
                    }
                    for &i in &p.target {
                        prop_assert!(!seen_t[i]);
                        seen_t[i] = true;
                    }
                }
                let (cs, ct) = (seen_s.iter().filter(|&&b| b).count(), seen_t.iter().filter(|&&b| b).count());
                prop_assert!(cs.abs_diff(ct) <= half);
            }
            Err(_) => prop_assert!(n_source.min(n_target) < half),
        }
    }

    #[test]
    fn accuracy_is_trace_over_total(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = ConfusionMatrix::from_predictions(&preds, &labels, 5).unwrap();
        prop_assert_eq!(m.accuracy(), m.trace() as f64 / m.total() as f64);
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as u64;
        prop_assert_eq!(m.trace(), correct);
        for (k, &row) in m.row_sums().iter().enumerate() {
            prop_assert_eq!(row, labels.iter().filter(|&&l| l == k).count() as u64);
            match m.per_class_accuracy()[k] {
                None => prop_assert_eq!(row, 0),
                Some(a) => prop_assert_eq!(a, m.counts[k][k] as f64 / row as f64),
            }
        }
    }
}

/// On `θ²/2` the momentum iterates obey `[v, θ]ₖ₊₁ = A·[v, θ]ₖ` with
/// `A = [[m, 1], [−α·m, 1 − α]]`; the closed form is `Aᵏ·[0, θ₀]`.
#[test]
fn momentum_matches_closed_form_on_a_quadratic() {
    fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut c = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        c
    }
    fn mat_pow(a: [[f64; 2]; 2], mut k: u32) -> [[f64; 2]; 2] {
        let (mut result, mut base) = ([[1.0, 0.0], [0.0, 1.0]], a);
        while k > 0 {
            if k & 1 == 1 {
                result = mat_mul(result, base);
            }
            base = mat_mul(base, base);
            k >>= 1;
        }
        result
    }
    let (alpha, m, theta0) = (0.1, 0.9, 1.5);
    let mut store = ParamStore::<f64>::new();
    let id = store.add_param("theta".into(), ParamGroup::Features, Tensor::new(&[1], vec![theta0]).unwrap());
    let mut opt = OptimizerState::new(&store);
    let a = [[m, 1.0], [-alpha * m, 1.0 - alpha]];
    for k in 1..=100u32 {
        let theta = store.value(id).data()[0];
        store.params_mut()[id.index()].grad = Tensor::new(&[1], vec![theta]).unwrap();
        sgd_update(&mut store, &mut opt, alpha, m, &[ParamGroup::Features]).unwrap();
        let p = mat_pow(a, k);
        let want = p[1][1] * theta0;
        let got = store.value(id).data()[0];
        assert!((got - want).abs() <= 1e-10, "step {k}: {got} vs {want}");
    }
}

#[test]
fn schedule_grid() {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let lambdas: Vec<f64> = grid.iter().map(|&p| lambda_schedule(p, 10.0).unwrap()).collect();
    let lrs: Vec<f64> = grid.iter().map(|&p| lr_schedule(p, 0.01, 10.0, 0.75).unwrap()).collect();
    assert_eq!(lambdas[0], 0.0);
    assert!((lambdas[100] - 0.9999092).abs() <= 1e-6);
    assert!((lambdas[50] - 0.9866143).abs() <= 1e-6);
    assert!(lambdas.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(lrs[0], 0.01);
    assert!((lrs[100] - 0.01 / 11f64.powf(0.75)).abs() <= 1e-12);
    assert!((lrs[100] - 0.0016556).abs() <= 1e-6);
    assert!(lrs.windows(2).all(|w| w[0] > w[1]));
    assert!(lambda_schedule(1.01, 10.0).is_err());
    assert!(lambda_schedule(-0.01, 10.0).is_err());
}
