mod common;

use common::{all_assignments, bayes_posterior, chained_kernel, exact_chain_distribution, naive_solutions, tv_from_uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satdiff::diffusion::{
    kl_categorical, posterior, posterior_row, q_sample, reverse_sample, reverse_sample_batch, CategoricalState,
    NoiseSchedule, ReverseMode,
};
use satdiff::formula::{Assignment, CnfFormula};
use satdiff::oracle::ExactDenoiser;

#[test]
fn posterior_matches_bayes_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let big_t = rng.gen_range(1..=256);
        let sched = NoiseSchedule::new(big_t).unwrap();
        let t = rng.gen_range(1..=big_t);
        let x_t = usize::from(rng.gen::<bool>());
        let p: f64 = rng.gen();
        let x0 = [1.0 - p, p];
        let mut one_hot = [0.0; 2];
        one_hot[x_t] = 1.0;
        let got = posterior_row(one_hot, x0, sched.alpha(t), sched.alpha_bar(t - 1));
        let want = bayes_posterior(x_t, x0, sched.alpha(t), sched.alpha_bar(t - 1));
        worst = worst.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
    }
    assert!(worst < 1e-9, "max abs error {worst}");
}

#[test]
fn posterior_over_a_state_uses_schedule_entries() {
    let sched = NoiseSchedule::new(10).unwrap();
    let x_t = CategoricalState::one_hot(&Assignment::new(vec![true, false, true]));
    let x0 = CategoricalState::new(vec![[0.2, 0.8], [0.5, 0.5], [1.0, 0.0]]).unwrap();
    let post = posterior(&x_t, &x0, 4, &sched).unwrap();
    for (i, row) in post.rows().iter().enumerate() {
        let want = bayes_posterior(usize::from(x_t.rows()[i][1] == 1.0), x0.rows()[i], sched.alpha(4), sched.alpha_bar(3));
        assert!((row[1] - want[1]).abs() < 1e-12);
    }
    assert!(posterior(&x_t, &x0, 0, &sched).is_err());
    assert!(posterior(&x_t, &x0, 11, &sched).is_err());
}

#[test]
fn chained_steps_reproduce_cumulative_kernel() {
    for big_t in 1..=6 {
        let sched = NoiseSchedule::new(big_t).unwrap();
        for t in 0..=big_t {
            let alphas: Vec<f64> = (1..=t).map(|s| sched.alpha(s)).collect();
            for from in 0..2 {
                for to in 0..2 {
                    let closed = sched.alpha_bar(t) * f64::from(u8::from(from == to)) + (1.0 - sched.alpha_bar(t)) / 2.0;
                    assert!((chained_kernel(&alphas, from, to) - closed).abs() < 1e-9, "T={big_t} t={t}");
                }
            }
        }
    }
}

#[test]
fn q_sample_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = CategoricalState::one_hot(&Assignment::new(vec![true; 20_000]));
    for ab in [0.0, 0.3, 0.9] {
        let x = q_sample(&x0, ab, &mut rng);
        let kept = x.rows().iter().filter(|r| r[1] == 1.0).count() as f64 / 20_000.0;
        assert!((kept - (ab + (1.0 - ab) / 2.0)).abs() < 0.015, "ᾱ={ab}: {kept}");
    }
}

#[test]
fn kl_is_zero_only_on_equal_states() {
    let a = CategoricalState::new(vec![[0.3, 0.7], [0.9, 0.1]]).unwrap();
    let b = CategoricalState::new(vec![[0.5, 0.5], [0.9, 0.1]]).unwrap();
    assert_eq!(kl_categorical(&a, &a).unwrap(), 0.0);
    assert!(kl_categorical(&a, &b).unwrap() > 0.0);
}

// The factorized chain is not exactly uniform over solutions: on (x1 ∨ x2)
// the all-True solution collects about 0.416 of the mass. Frequencies are
// checked against the exact chain distribution instead.
#[test]
fn oracle_chain_on_two_variable_or_matches_exact_chain() {
    let f = CnfFormula::from_dimacs_clauses(2, &[vec![1, 2]]).unwrap();
    let oracle = ExactDenoiser::new();
    let sched = NoiseSchedule::new(128).unwrap();
    let sols = naive_solutions(&f);
    let alpha_bar: Vec<f64> = (0..=128).map(|t| sched.alpha_bar(t)).collect();
    let exact = exact_chain_distribution(&sols, 2, &alpha_bar);
    assert!(exact[0] < 1e-12, "the invalid state is never the final argmax");
    assert!((exact[3] - 0.4157).abs() < 1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let runs = 3000;
    let finals: Vec<Assignment> = (0..runs)
        .map(|_| reverse_sample(&f, &oracle, &sched, &mut rng).unwrap().final_assignment)
        .collect();
    for (k, a) in all_assignments(2).enumerate() {
        let freq = finals.iter().filter(|x| **x == a).count() as f64 / runs as f64;
        let sigma = (exact[k] * (1.0 - exact[k]) / runs as f64).sqrt();
        assert!((freq - exact[k]).abs() <= 4.0 * sigma + 1e-12, "{a:?}: {freq} vs {}", exact[k]);
    }
    assert!(tv_from_uniform(&finals, &sols) < 0.15);
}

#[test]
fn exact_chain_distribution_sums_to_one() {
    let sched = NoiseSchedule::new(16).unwrap();
    let alpha_bar: Vec<f64> = (0..=16).map(|t| sched.alpha_bar(t)).collect();
    let f = CnfFormula::from_dimacs_clauses(3, &[vec![1, -2], vec![2, 3]]).unwrap();
    let dist = exact_chain_distribution(&naive_solutions(&f), 3, &alpha_bar);
    assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn batched_chains_do_not_depend_on_grouping() {
    let f = CnfFormula::from_dimacs_clauses(4, &[vec![1, -2], vec![2, 3, -4]]).unwrap();
    let oracle = ExactDenoiser::new();
    let sched = NoiseSchedule::new(16).unwrap();
    let mut rngs: Vec<ChaCha8Rng> = (0..6).map(ChaCha8Rng::seed_from_u64).collect();
    let all = reverse_sample_batch(&[&f; 6], &oracle, &sched, &mut rngs, ReverseMode::Stochastic).unwrap();
    for (i, trace) in all.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        assert_eq!(&reverse_sample(&f, &oracle, &sched, &mut rng).unwrap(), trace);
    }
}

#[test]
fn greedy_mode_is_deterministic() {
    let f = CnfFormula::from_dimacs_clauses(3, &[vec![1, 2], vec![-1, 3]]).unwrap();
    let oracle = ExactDenoiser::new();
    let sched = NoiseSchedule::new(32).unwrap();
    let mut a: Vec<ChaCha8Rng> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
    let traces = reverse_sample_batch(&[&f; 4], &oracle, &sched, &mut a, ReverseMode::Greedy).unwrap();
    assert!(traces.windows(2).all(|w| w[0] == w[1]));
    assert!(traces[0].steps.iter().all(|s| s.t >= 1));
    assert_eq!(traces[0].steps.len(), 32);
}
