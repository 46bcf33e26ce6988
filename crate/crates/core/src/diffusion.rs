//! Categorical (K = 2) diffusion over variable assignments.
//!
//! The forward process resamples each variable uniformly with probability
//! `β_t` at step `t`, so after `t` steps a variable keeps its clean value with
//! probability `ᾱ_t` and is uniform otherwise:
//!
//! ```text
//! q(x_t | x_0)          = C(ᾱ_t · x_0 + (1 − ᾱ_t) / K)
//! q(x_{t−1} | x_t, x_0) ∝ [α_t · x_t + (1 − α_t) / K] ⊙ [ᾱ_{t−1} · x_0 + (1 − ᾱ_{t−1}) / K]
//! ```
//!
//! Sampling runs the reverse chain from uniform noise at `t = T` down to
//! `t = 1`, asking a [`Denoiser`] for an estimate of `x_0` at every step.
//! All probabilities are `f64`.

use rand::Rng;
use thiserror::Error;

use crate::formula::{Assignment, CnfFormula};

/// Number of categories: index 0 is False, index 1 is True.
pub const K: usize = 2;

/// Lower clamp applied to probabilities inside logarithms and to posterior
/// normalizers.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    ZeroSteps,
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("size mismatch: expected {expected} variables, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("row {row} is not a probability pair: {probs:?}")]
    InvalidRow { row: usize, probs: [f64; 2] },
    #[error("denoiser returned {found} states for {expected} requests")]
    BatchMismatch { expected: usize, found: usize },
    #[error("denoiser failed: {0}")]
    Denoiser(#[source] Box<dyn std::error::Error + Send + Sync>),
}

/// `ᾱ_t = 1 − sqrt(t / T)` with the per-step `α_t = ᾱ_t / ᾱ_{t−1}` and
/// `β_t = 1 − α_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::ZeroSteps);
        }
        let big_t = steps as f64;
        let mut alpha_bar: Vec<f64> = (0..=steps).map(|t| 1.0 - (t as f64 / big_t).sqrt()).collect();
        alpha_bar[0] = 1.0;
        alpha_bar[steps] = 0.0;
        let mut alpha = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha[t] = alpha_bar[t] / alpha_bar[t - 1];
        }
        Ok(NoiseSchedule {
            steps,
            alpha_bar,
            alpha,
        })
    }

    /// Total number of steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `α_t` for `t ∈ 1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "alpha is defined on 1..=T");
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps {
            return Err(DiffusionError::StepOutOfRange { t, steps: self.steps });
        }
        Ok(())
    }
}

/// Per-variable probabilities over {False, True}.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalState {
    probs: Vec<[f64; 2]>,
}

impl CategoricalState {
    /// Validates that every row is a probability pair (sum within 1e-9).
    pub fn new(probs: Vec<[f64; 2]>) -> Result<Self, DiffusionError> {
        for (row, p) in probs.iter().enumerate() {
            let ok = p.iter().all(|&x| x >= 0.0 && x.is_finite()) && (p[0] + p[1] - 1.0).abs() <= 1e-9;
            if !ok {
                return Err(DiffusionError::InvalidRow { row, probs: *p });
            }
        }
        Ok(CategoricalState { probs })
    }

    /// Normalizes each row of nonnegative weights. Rows summing to less
    /// than [`PROB_EPS`] become uniform.
    pub fn from_weights(weights: Vec<[f64; 2]>) -> Self {
        let probs = weights.into_iter().map(normalize_pair).collect();
        CategoricalState { probs }
    }

    pub fn one_hot(a: &Assignment) -> Self {
        let probs = a
            .values()
            .iter()
            .map(|&v| if v { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        CategoricalState { probs }
    }

    pub fn uniform(num_vars: usize) -> Self {
        CategoricalState {
            probs: vec![[0.5, 0.5]; num_vars],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.probs.len()
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.probs
    }

    pub fn p_true(&self, var: usize) -> f64 {
        self.probs[var][1]
    }

    pub fn is_one_hot(&self) -> bool {
        self.probs.iter().all(|p| *p == [1.0, 0.0] || *p == [0.0, 1.0])
    }

    /// Most likely category per variable; ties go to False.
    pub fn argmax(&self) -> Assignment {
        Assignment::new(self.probs.iter().map(|p| p[1] > p[0]).collect())
    }

    /// Draws one category per variable.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Assignment {
        Assignment::new(self.probs.iter().map(|p| rng.gen::<f64>() < p[1]).collect())
    }

    /// Concatenates states along the variable axis.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a CategoricalState>) -> Self {
        let probs = parts.into_iter().flat_map(|s| s.probs.iter().copied()).collect();
        CategoricalState { probs }
    }
}

fn normalize_pair(w: [f64; 2]) -> [f64; 2] {
    let sum = w[0] + w[1];
    if !(sum >= PROB_EPS) {
        return [0.5, 0.5];
    }
    [w[0] / sum, w[1] / sum]
}

/// Draws `x_t ~ C(ᾱ_t · x_0 + (1 − ᾱ_t)/K)` independently per variable.
pub fn q_sample<R: Rng + ?Sized>(x0: &CategoricalState, alpha_bar: f64, rng: &mut R) -> CategoricalState {
    let noise = (1.0 - alpha_bar) / K as f64;
    let a = Assignment::new(
        x0.probs
            .iter()
            .map(|p| rng.gen::<f64>() < alpha_bar * p[1] + noise)
            .collect(),
    );
    CategoricalState::one_hot(&a)
}

/// Posterior `q(x_{t−1} | x_t, x_0)` for one variable given `α_t` and
/// `ᾱ_{t−1}`. `x0` may be soft.
pub fn posterior_row(x_t: [f64; 2], x0: [f64; 2], alpha_t: f64, alpha_bar_prev: f64) -> [f64; 2] {
    let kf = K as f64;
    let mut theta = [0.0; 2];
    for k in 0..K {
        theta[k] = (alpha_t * x_t[k] + (1.0 - alpha_t) / kf) * (alpha_bar_prev * x0[k] + (1.0 - alpha_bar_prev) / kf);
    }
    normalize_pair(theta)
}

pub fn posterior(
    x_t: &CategoricalState,
    x0: &CategoricalState,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<CategoricalState, DiffusionError> {
    schedule.check_step(t)?;
    same_size(x_t.num_vars(), x0.num_vars())?;
    let (a, ab) = (schedule.alpha(t), schedule.alpha_bar(t - 1));
    let probs = x_t
        .probs
        .iter()
        .zip(&x0.probs)
        .map(|(&xt, &x0)| posterior_row(xt, x0, a, ab))
        .collect();
    Ok(CategoricalState { probs })
}

fn same_size(expected: usize, found: usize) -> Result<(), DiffusionError> {
    if expected != found {
        return Err(DiffusionError::SizeMismatch { expected, found });
    }
    Ok(())
}

/// `KL(p ‖ q)` of one row, with both sides clamped to `[ε, 1]` inside the
/// logarithms. Zero-probability entries of `p` contribute nothing.
pub fn kl_row(p: [f64; 2], q: [f64; 2]) -> f64 {
    let mut kl = 0.0;
    for k in 0..K {
        if p[k] > 0.0 {
            kl += p[k] * (p[k].clamp(PROB_EPS, 1.0).ln() - q[k].clamp(PROB_EPS, 1.0).ln());
        }
    }
    kl
}

/// Sum over variables of the per-variable KL divergence.
pub fn kl_categorical(p: &CategoricalState, q: &CategoricalState) -> Result<f64, DiffusionError> {
    same_size(p.num_vars(), q.num_vars())?;
    Ok(p.probs.iter().zip(&q.probs).map(|(&a, &b)| kl_row(a, b)).sum())
}

/// [`kl_categorical`] divided by the number of variables.
pub fn kl_categorical_mean(p: &CategoricalState, q: &CategoricalState) -> Result<f64, DiffusionError> {
    let total = kl_categorical(p, q)?;
    Ok(if p.num_vars() == 0 { 0.0 } else { total / p.num_vars() as f64 })
}

/// One denoiser query: estimate `x_0` for `formula` from `x_t` at noise
/// level `ᾱ_t`.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseRequest<'a> {
    pub formula: &'a CnfFormula,
    pub x_t: &'a CategoricalState,
    pub alpha_bar: f64,
}

/// Estimates the clean assignment distribution `x̂_0`.
///
/// Implementations that profit from batching (the GNN) override
/// [`Denoiser::denoise_batch`]; others only need [`Denoiser::denoise`].
pub trait Denoiser {
    fn denoise(&self, formula: &CnfFormula, x_t: &CategoricalState, alpha_bar: f64) -> Result<CategoricalState, DiffusionError>;

    fn denoise_batch(&self, requests: &[DenoiseRequest<'_>]) -> Result<Vec<CategoricalState>, DiffusionError> {
        requests
            .iter()
            .map(|r| self.denoise(r.formula, r.x_t, r.alpha_bar))
            .collect()
    }
}

/// Adapts a plain function `(formula, x_t, ᾱ_t) → x̂_0` to [`Denoiser`].
#[derive(Clone, Copy, Debug)]
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&CnfFormula, &CategoricalState, f64) -> CategoricalState,
{
    fn denoise(&self, formula: &CnfFormula, x_t: &CategoricalState, alpha_bar: f64) -> Result<CategoricalState, DiffusionError> {
        Ok((self.0)(formula, x_t, alpha_bar))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, formula: &CnfFormula, x_t: &CategoricalState, alpha_bar: f64) -> Result<CategoricalState, DiffusionError> {
        (**self).denoise(formula, x_t, alpha_bar)
    }

    fn denoise_batch(&self, requests: &[DenoiseRequest<'_>]) -> Result<Vec<CategoricalState>, DiffusionError> {
        (**self).denoise_batch(requests)
    }
}

/// The `x̂_0` argmax observed at one reverse step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub prediction: Assignment,
    pub valid: bool,
}

/// Everything one reverse chain produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    /// One record per step, in sampling order `t = T, T−1, …, 1`.
    pub steps: Vec<StepRecord>,
    /// Argmax of `x̂_0` at `t = 1`.
    pub final_assignment: Assignment,
    /// Step `t` of the first (highest-`t`) valid prediction.
    pub first_valid: Option<usize>,
}

impl SampleTrace {
    pub fn final_is_valid(&self) -> bool {
        self.steps.last().is_some_and(|s| s.valid)
    }

    /// Whether any step's prediction satisfied the formula.
    pub fn solved(&self) -> bool {
        self.first_valid.is_some()
    }

    /// First valid prediction in sampling order, if any.
    pub fn first_solution(&self) -> Option<&Assignment> {
        self.steps.iter().find(|s| s.valid).map(|s| &s.prediction)
    }
}

/// How `x_T` is initialized and `x_{t−1}` is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReverseMode {
    /// Uniform `x_T`, `x_{t−1}` sampled from the posterior.
    #[default]
    Stochastic,
    /// All-False `x_T`, `x_{t−1}` set to the posterior argmax. Fully
    /// deterministic; used as the no-diversity baseline.
    Greedy,
}

pub fn reverse_sample<D, R>(
    formula: &CnfFormula,
    denoiser: &D,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<SampleTrace, DiffusionError>
where
    D: Denoiser + ?Sized,
    R: Rng,
{
    let mut traces = reverse_sample_batch(&[formula], denoiser, schedule, std::slice::from_mut(rng), ReverseMode::Stochastic)?;
    Ok(traces.pop().expect("one chain"))
}

/// Runs one reverse chain per formula in lockstep, issuing a single batched
/// denoiser call per step. Chain `i` draws only from `rngs[i]`, so results do
/// not depend on how chains are grouped into batches.
pub fn reverse_sample_batch<D, R>(
    formulas: &[&CnfFormula],
    denoiser: &D,
    schedule: &NoiseSchedule,
    rngs: &mut [R],
    mode: ReverseMode,
) -> Result<Vec<SampleTrace>, DiffusionError>
where
    D: Denoiser + ?Sized,
    R: Rng,
{
    assert_eq!(formulas.len(), rngs.len(), "one rng per chain");
    let mut states: Vec<CategoricalState> = formulas
        .iter()
        .zip(rngs.iter_mut())
        .map(|(f, rng)| match mode {
            ReverseMode::Stochastic => {
                CategoricalState::one_hot(&CategoricalState::uniform(f.num_vars()).sample(rng))
            }
            ReverseMode::Greedy => CategoricalState::one_hot(&Assignment::all_false(f.num_vars())),
        })
        .collect();
    let mut steps: Vec<Vec<StepRecord>> = vec![Vec::with_capacity(schedule.steps()); formulas.len()];

    for t in (1..=schedule.steps()).rev() {
        let alpha_bar = schedule.alpha_bar(t);
        let requests: Vec<DenoiseRequest<'_>> = formulas
            .iter()
            .zip(&states)
            .map(|(f, x)| DenoiseRequest {
                formula: f,
                x_t: x,
                alpha_bar,
            })
            .collect();
        let estimates = denoiser.denoise_batch(&requests)?;
        if estimates.len() != formulas.len() {
            return Err(DiffusionError::BatchMismatch {
                expected: formulas.len(),
                found: estimates.len(),
            });
        }
        for (i, x0_hat) in estimates.iter().enumerate() {
            same_size(formulas[i].num_vars(), x0_hat.num_vars())?;
            let prediction = x0_hat.argmax();
            let valid = formulas[i].is_satisfied_by(&prediction);
            steps[i].push(StepRecord { t, prediction, valid });
            if t > 1 {
                let post = posterior(&states[i], x0_hat, t, schedule)?;
                let next = match mode {
                    ReverseMode::Stochastic => post.sample(&mut rngs[i]),
                    ReverseMode::Greedy => post.argmax(),
                };
                states[i] = CategoricalState::one_hot(&next);
            }
        }
    }

    Ok(steps
        .into_iter()
        .map(|steps| {
            let final_assignment = steps.last().expect("T >= 1").prediction.clone();
            let first_valid = steps.iter().find(|s| s.valid).map(|s| s.t);
            SampleTrace {
                steps,
                final_assignment,
                first_valid,
            }
        })
        .collect())
}
