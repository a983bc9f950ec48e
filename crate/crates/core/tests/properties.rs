mod common;

use common::RandomGraph;
use difftune::diffusion::{BaseDistribution, Schedule};
use difftune::finetune::mle_weights;
use difftune::harness::{eval_metrics, Reference};
use difftune::oracle::{grid_soft_solve, tilted_gaussian_target, verify_theorems, GridMDP};
use difftune::rewards::classifier_log_likelihood;
use difftune::rng::Stream;
use difftune::tensor::{DenseArray, Graph};
use proptest::prelude::*;

fn stochastic_row(rng: &mut Stream, n: usize, sparse: bool) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.01).collect();
    if sparse && n > 2 {
        row[rng.index(n)] = 0.0;
    }
    let z: f64 = row.iter().sum();
    let mut row: Vec<f64> = row.iter().map(|v| v / z).collect();
    // absorb rounding so the row sums to 1 within a few ulps
    let fix = 1.0 - row.iter().sum::<f64>();
    let top = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    row[top] += fix;
    row
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    #[test]
    fn reverse_mode_matches_central_differences(seed in any::<u64>()) {
        let g = RandomGraph::new(seed, 6);
        let err = g.relative_error();
        prop_assert!(err < 1e-5, "relative error {err:e} for {:?}", g.ops);
    }

    #[test]
    fn evaluation_is_pure(seed in any::<u64>()) {
        let g = RandomGraph::new(seed, 6);
        let (a, ga) = g.reverse();
        let (b, gb) = g.reverse();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(ga, gb);
    }

    #[test]
    fn gradient_of_independent_sum_concatenates(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (RandomGraph::new(s1, 6), RandomGraph::new(s2, 6));
        let mut g = Graph::new();
        let (oa, la) = a.build(&mut g, &a.inputs);
        let (ob, lb) = b.build(&mut g, &b.inputs);
        let total = g.add(oa, ob);
        let leaves: Vec<_> = la.iter().chain(&lb).cloned().collect();
        let joint = g.gradient(total, &leaves).unwrap();
        let mut separate = a.reverse().1;
        separate.extend(b.reverse().1);
        prop_assert_eq!(joint, separate);
    }

    #[test]
    fn schedule_moment_tables(steps in 1usize..200, horizon in 0.05f64..12.0) {
        let s = Schedule::new(steps, horizon).unwrap();
        prop_assert_eq!(s.mu(0).unwrap(), 1.0);
        prop_assert_eq!(s.sigma(0).unwrap(), 0.0);
        for t in 1..=steps {
            prop_assert!(s.mu(t).unwrap() < s.mu(t - 1).unwrap());
            prop_assert!(s.sigma(t).unwrap() > s.sigma(t - 1).unwrap());
            prop_assert!(s.mu(t).unwrap().powi(2) + s.sigma(t).unwrap().powi(2) <= 1.0 + 1e-12);
        }
        for t in 1..=steps + 1 {
            prop_assert!(s.reverse_var(t).unwrap() > 0.0);
        }
    }

    #[test]
    fn mixture_density_integrates_to_one(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = Stream::new(seed, 0);
        let w: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.1).collect();
        let z: f64 = w.iter().sum();
        let means = (0..k).map(|_| vec![rng.uniform_range(-2.0, 2.0)]).collect();
        let vars = (0..k).map(|_| rng.uniform_range(0.3, 2.0)).collect();
        let base = BaseDistribution::new(w.iter().map(|v| v / z).collect(), means, vars).unwrap();
        let (lo, hi, n) = (-15.0, 15.0, 30_001);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for i in 0..n {
            let x = lo + h * i as f64;
            let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            total += wt * base.density(&[x]).unwrap();
        }
        prop_assert!((total * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn classifier_likelihood_normalizes(seed in any::<u64>(), x in -6.0f64..6.0) {
        let mut rng = Stream::new(seed, 1);
        let base = BaseDistribution::new(
            vec![0.3, 0.7],
            vec![vec![rng.uniform_range(-3.0, 0.0)], vec![rng.uniform_range(0.0, 3.0)]],
            vec![rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0)],
        ).unwrap();
        let total: f64 = (0..2).map(|y| classifier_log_likelihood(&base, &[x], y).unwrap().exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    // Dyadic rewards and integer offsets keep `(r + c) - (max + c)` exact,
    // so the normalized weights must agree bit for bit.
    #[test]
    fn mle_weights_ignore_reward_offsets(
        raw in prop::collection::vec(-4096i32..4096, 1..50),
        offset in -1000i32..1000,
        alpha in prop::sample::select(vec![0.25, 0.5, 1.0, 2.0]),
    ) {
        let r: Vec<f64> = raw.iter().map(|v| *v as f64 / 1024.0).collect();
        let shifted: Vec<f64> = r.iter().map(|v| v + offset as f64).collect();
        let a = mle_weights(&r, alpha).unwrap();
        let b = mle_weights(&shifted, alpha).unwrap();
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn linear_tilt_shifts_mean_only(m in -3.0f64..3.0, v in 0.1f64..4.0, a in -2.0f64..2.0, alpha in 0.1f64..5.0) {
        let t = tilted_gaussian_target(&[m], v, &[a], alpha).unwrap();
        prop_assert_eq!(t.variance, v);
        prop_assert!((t.mean[0] - (m + v * a / alpha)).abs() < 1e-12);
    }

    #[test]
    fn random_finite_mdps_satisfy_the_exactness_identities(
        seed in any::<u64>(),
        n in 2usize..7,
        steps in 1usize..5,
        alpha in 0.2f64..4.0,
    ) {
        let mut rng = Stream::new(seed, 2);
        let transitions = (0..steps)
            .map(|_| (0..n).flat_map(|_| stochastic_row(&mut rng, n, true)).collect())
            .collect();
        let initial = stochastic_row(&mut rng, n, false);
        let reward: Vec<f64> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let nodes = (0..n).map(|i| i as f64).collect();
        let mdp = GridMDP::from_parts(nodes, transitions, initial, reward.clone(), alpha).unwrap();
        let sol = grid_soft_solve(&mdp).unwrap();
        prop_assert_eq!(&sol.values[0], &reward);
        for p in &sol.policies {
            for row in p.chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
        let rep = verify_theorems(&sol, &mdp);
        prop_assert!(rep.terminal_tilt < 1e-10 && rep.marginal_tilt < 1e-10, "{rep:?}");
        prop_assert!(rep.constant_spread < 1e-10 && rep.posterior < 1e-10, "{rep:?}");
        prop_assert!(rep.bellman < 1e-12, "{rep:?}");
    }

    #[test]
    fn metrics_are_permutation_invariant(seed in any::<u64>()) {
        let mut rng = Stream::new(seed, 3);
        let a: Vec<f64> = rng.normals(200);
        let mut b = a.clone();
        for i in (1..b.len()).rev() {
            b.swap(i, rng.index(i + 1));
        }
        let xa = DenseArray::matrix(200, 1, a).unwrap();
        let xb = DenseArray::matrix(200, 1, b).unwrap();
        let m = eval_metrics(&xa, &Reference::Samples(xb), None).unwrap();
        for (k, v) in m.entries() {
            prop_assert!(v.abs() < 1e-12, "{k} = {v}");
        }
    }
}
