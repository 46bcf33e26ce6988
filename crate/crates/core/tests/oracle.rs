mod common;

use common::{formula_strategy, naive_solutions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satdiff::diffusion::CategoricalState;
use satdiff::formula::{Assignment, CnfFormula};
use satdiff::oracle::{enumerate_solutions, exact_denoiser, sample_solution};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn enumeration_matches_truth_table(f in formula_strategy(12, 30)) {
        let e = enumerate_solutions(&f, 1 << 13);
        prop_assert!(!e.truncated);
        prop_assert_eq!(e.solutions, naive_solutions(&f));
    }

    #[test]
    fn exact_denoiser_rows_are_convex_combinations(
        f in formula_strategy(8, 10),
        seed in any::<u64>(),
        alpha_bar in 0.0f64..=1.0,
    ) {
        let sols = naive_solutions(&f);
        prop_assume!(!sols.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_t = CategoricalState::one_hot(&CategoricalState::uniform(f.num_vars()).sample(&mut rng));
        let out = exact_denoiser(&sols, &x_t, alpha_bar).unwrap();
        for (i, r) in out.rows().iter().enumerate() {
            prop_assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
            // Inside the range spanned by the solutions' values of variable i.
            let any_true = sols.iter().any(|s| s.get(i));
            let any_false = sols.iter().any(|s| !s.get(i));
            if !any_true { prop_assert!(r[1] == 0.0); }
            if !any_false { prop_assert!(r[0] == 0.0); }
        }
    }
}

/// Posterior marginals by direct Bayes sums over the solution list.
fn brute_marginals(sols: &[Assignment], x_t: &Assignment, alpha_bar: f64) -> Vec<f64> {
    let lik = |s: &Assignment| -> f64 {
        (0..s.len())
            .map(|i| alpha_bar * f64::from(u8::from(s.get(i) == x_t.get(i))) + (1.0 - alpha_bar) / 2.0)
            .product()
    };
    let w: Vec<f64> = sols.iter().map(lik).collect();
    let z: f64 = w.iter().sum();
    (0..x_t.len())
        .map(|i| sols.iter().zip(&w).filter(|(s, _)| s.get(i)).map(|(_, w)| w).sum::<f64>() / z)
        .collect()
}

#[test]
fn exact_denoiser_matches_direct_bayes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.gen_range(2..=8);
        let clauses: Vec<Vec<i64>> = (0..rng.gen_range(0..6))
            .map(|_| {
                let v = rng.gen_range(1..=n as i64);
                vec![if rng.gen() { v } else { -v }]
            })
            .collect();
        let Ok(f) = CnfFormula::from_dimacs_clauses(n, &clauses) else { continue };
        let sols = naive_solutions(&f);
        if sols.is_empty() {
            continue;
        }
        let x = CategoricalState::uniform(n).sample(&mut rng);
        let ab = rng.gen_range(0.0..1.0);
        let out = exact_denoiser(&sols, &CategoricalState::one_hot(&x), ab).unwrap();
        for (p, q) in out.rows().iter().zip(brute_marginals(&sols, &x, ab)) {
            assert!((p[1] - q).abs() < 1e-12);
        }
    }
}

#[test]
fn sharp_noise_level_prefers_consistent_solutions() {
    let f = CnfFormula::from_dimacs_clauses(3, &[vec![1, 2, 3]]).unwrap();
    let sols = enumerate_solutions(&f, 100).solutions;
    let target = Assignment::new(vec![false, true, false]);
    let out = exact_denoiser(&sols, &CategoricalState::one_hot(&target), 1.0 - 1e-9).unwrap();
    assert_eq!(out.argmax(), target);
    assert!(out.rows().iter().all(|r| r[0].max(r[1]) > 1.0 - 1e-6));
}

#[test]
fn uniform_sampling_frequencies() {
    let f = CnfFormula::from_dimacs_clauses(2, &[vec![1, 2]]).unwrap();
    let sols = enumerate_solutions(&f, 10).solutions;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 30_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let s = sample_solution(&sols, &mut rng).unwrap();
        counts[sols.iter().position(|x| x == s).unwrap()] += 1;
    }
    let tol = 4.0 * (1.0 / (4.0 * n as f64)).sqrt();
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < tol, "{counts:?}");
    }
}
