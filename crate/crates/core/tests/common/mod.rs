#![allow(dead_code)]

use proptest::prelude::*;
use satdiff::formula::{Assignment, CnfFormula};

/// Random formula with `1..=max_vars` variables and clauses of 1–4 distinct
/// variables.
pub fn formula_strategy(max_vars: usize, max_clauses: usize) -> impl Strategy<Value = CnfFormula> {
    (1..=max_vars).prop_flat_map(move |n| {
        let clause = proptest::sample::subsequence((1..=n as i64).collect::<Vec<_>>(), 1..=n.min(4))
            .prop_flat_map(|vars| {
                let k = vars.len();
                (Just(vars), proptest::collection::vec(any::<bool>(), k))
            })
            .prop_map(|(vars, signs)| {
                vars.into_iter()
                    .zip(signs)
                    .map(|(v, s)| if s { v } else { -v })
                    .collect::<Vec<i64>>()
            });
        proptest::collection::vec(clause, 0..=max_clauses)
            .prop_map(move |clauses| CnfFormula::from_dimacs_clauses(n, &clauses).unwrap())
    })
}

/// All 2ⁿ assignments in lexicographic order (False first, variable 1 most
/// significant).
pub fn all_assignments(n: usize) -> impl Iterator<Item = Assignment> {
    (0u64..1 << n).map(move |bits| Assignment::new((0..n).map(|i| bits >> (n - 1 - i) & 1 == 1).collect()))
}

/// Satisfying assignments by truth-table scan, checked literal by literal.
pub fn naive_solutions(f: &CnfFormula) -> Vec<Assignment> {
    all_assignments(f.num_vars())
        .filter(|a| {
            f.clauses()
                .iter()
                .all(|c| c.iter().any(|l| a.get(l.var()) == l.is_positive()))
        })
        .collect()
}

/// One forward step `q(x_t = to | x_{t−1} = from)` with keep probability `alpha`.
pub fn step_kernel(alpha: f64, from: usize, to: usize) -> f64 {
    alpha * f64::from(u8::from(from == to)) + (1.0 - alpha) / 2.0
}

/// `q(x_{t−1} | x_t, x_0)` by Bayes' rule: the one-step likelihood of the
/// observed `x_t` times the cumulative prior from a (possibly soft) `x_0`,
/// each built from explicit transition entries rather than vector formulas.
pub fn bayes_posterior(x_t: usize, x0: [f64; 2], alpha_t: f64, alpha_bar_prev: f64) -> [f64; 2] {
    let prior = |k: usize| -> f64 { (0..2).map(|j| x0[j] * step_kernel(alpha_bar_prev, j, k)).sum() };
    let joint = [step_kernel(alpha_t, 0, x_t) * prior(0), step_kernel(alpha_t, 1, x_t) * prior(1)];
    let z = joint[0] + joint[1];
    [joint[0] / z, joint[1] / z]
}

/// `q(x_t = to | x_0 = from)` by summing over every path of intermediate
/// states through the per-step kernels `alphas[0..t]`.
pub fn chained_kernel(alphas: &[f64], from: usize, to: usize) -> f64 {
    let t = alphas.len();
    if t == 0 {
        return f64::from(u8::from(from == to));
    }
    let mut total = 0.0;
    for path in 0u32..1 << (t - 1) {
        let mut prev = from;
        let mut p = 1.0;
        for (s, &a) in alphas.iter().enumerate() {
            let next = if s + 1 == t { to } else { (path >> s & 1) as usize };
            p *= step_kernel(a, prev, next);
            prev = next;
        }
        total += p;
    }
    total
}

/// Total-variation distance between the empirical distribution of
/// `samples` over `support` and uniform on `support`. Samples outside the
/// support count as mass on an extra outcome.
pub fn tv_from_uniform(samples: &[Assignment], support: &[Assignment]) -> f64 {
    let n = samples.len() as f64;
    let u = 1.0 / support.len() as f64;
    let mut inside = 0usize;
    let mut tv = 0.0;
    for s in support {
        let c = samples.iter().filter(|x| *x == s).count();
        inside += c;
        tv += (c as f64 / n - u).abs();
    }
    tv += (samples.len() - inside) as f64 / n;
    tv / 2.0
}

/// Exact distribution of the final argmax of a factorized reverse chain
/// driven by the Bayes-optimal marginal denoiser over `solutions`, by
/// propagating probability mass over all 2ⁿ states. Indexed like
/// [`all_assignments`]. `alpha_bar[t]` for `t ∈ 0..=T`.
pub fn exact_chain_distribution(solutions: &[Assignment], n: usize, alpha_bar: &[f64]) -> Vec<f64> {
    let states: Vec<Assignment> = all_assignments(n).collect();
    let index = |a: &Assignment| a.values().iter().fold(0usize, |acc, &b| acc << 1 | usize::from(b));
    let big_t = alpha_bar.len() - 1;
    let mut mass = vec![1.0 / states.len() as f64; states.len()];
    let mut finals = vec![0.0; states.len()];
    for t in (1..=big_t).rev() {
        let ab = alpha_bar[t];
        let mut next = vec![0.0; states.len()];
        for (s, &p) in states.iter().zip(&mass) {
            if p == 0.0 {
                continue;
            }
            let w: Vec<f64> = solutions
                .iter()
                .map(|x0| (0..n).map(|i| step_kernel(ab, usize::from(x0.get(i)), usize::from(s.get(i)))).product())
                .collect();
            let z: f64 = w.iter().sum();
            let marginal: Vec<f64> = (0..n)
                .map(|i| solutions.iter().zip(&w).filter(|(x, _)| x.get(i)).map(|(_, w)| w).sum::<f64>() / z)
                .collect();
            if t == 1 {
                let argmax = Assignment::new(marginal.iter().map(|&m| m > 0.5).collect());
                finals[index(&argmax)] += p;
                continue;
            }
            let alpha = ab / alpha_bar[t - 1];
            let p_true: Vec<f64> = (0..n)
                .map(|i| bayes_posterior(usize::from(s.get(i)), [1.0 - marginal[i], marginal[i]], alpha, alpha_bar[t - 1])[1])
                .collect();
            for (k, s2) in states.iter().enumerate() {
                next[k] += p * (0..n).map(|i| if s2.get(i) { p_true[i] } else { 1.0 - p_true[i] }).product::<f64>();
            }
        }
        mass = next;
    }
    finals
}
