//! Exact solution enumeration and the Bayes-optimal denoiser built on it.
//!
//! These are test oracles for small instances: enumeration is exponential in
//! the worst case and [`exact_denoiser`] walks the whole solution list.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use thiserror::Error;

use crate::diffusion::{CategoricalState, DiffusionError, Denoiser, K};
use crate::formula::{Assignment, CnfFormula, Lit};

pub const DEFAULT_CAP: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("solution set is empty")]
    EmptySolutionSet,
    #[error("x_t has {found} variables, solutions have {expected}")]
    SizeMismatch { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Enumeration {
    pub solutions: Vec<Assignment>,
    /// Set when enumeration stopped at the cap.
    pub truncated: bool,
}

/// All satisfying assignments in lexicographic order (False < True, variable
/// 0 most significant), by backtracking over variables in index order with
/// unit propagation.
pub fn enumerate_solutions(formula: &CnfFormula, cap: usize) -> Enumeration {
    let mut search = Search::new(formula, cap);
    if cap > 0 && search.initial_units() {
        search.descend(0);
    }
    Enumeration {
        truncated: search.truncated,
        solutions: search.solutions,
    }
}

struct Search<'a> {
    formula: &'a CnfFormula,
    /// Clauses containing each literal, indexed by `2·var + positive`.
    occurs: Vec<Vec<usize>>,
    values: Vec<Option<bool>>,
    trail: Vec<usize>,
    solutions: Vec<Assignment>,
    cap: usize,
    truncated: bool,
}

fn lit_slot(l: Lit) -> usize {
    2 * l.var() + l.is_positive() as usize
}

impl<'a> Search<'a> {
    fn new(formula: &'a CnfFormula, cap: usize) -> Self {
        let mut occurs = vec![Vec::new(); 2 * formula.num_vars()];
        for (ci, clause) in formula.clauses().iter().enumerate() {
            for &l in clause {
                occurs[lit_slot(l)].push(ci);
            }
        }
        Search {
            formula,
            occurs,
            values: vec![None; formula.num_vars()],
            trail: Vec::new(),
            solutions: Vec::new(),
            cap,
            truncated: false,
        }
    }

    fn lit_value(&self, l: Lit) -> Option<bool> {
        self.values[l.var()].map(|v| l.agrees(v))
    }

    fn initial_units(&mut self) -> bool {
        let units: Vec<Lit> = self
            .formula
            .clauses()
            .iter()
            .filter(|c| c.len() == 1)
            .map(|c| c[0])
            .collect();
        units.into_iter().all(|l| match self.lit_value(l) {
            Some(v) => v,
            None => self.assign(l),
        })
    }

    /// Makes `lit` true and propagates. Returns false on conflict; the
    /// caller undoes the trail.
    fn assign(&mut self, lit: Lit) -> bool {
        let mut queue = vec![lit];
        self.values[lit.var()] = Some(lit.is_positive());
        self.trail.push(lit.var());
        while let Some(l) = queue.pop() {
            // Clauses where `l` just became false.
            for &ci in &self.occurs[lit_slot(!l)] {
                let mut unassigned = None;
                let mut open = 0;
                let mut satisfied = false;
                for &other in &self.formula.clauses()[ci] {
                    match self.lit_value(other) {
                        Some(true) => {
                            satisfied = true;
                            break;
                        }
                        Some(false) => {}
                        None => {
                            open += 1;
                            unassigned = Some(other);
                        }
                    }
                }
                if satisfied {
                    continue;
                }
                match (open, unassigned) {
                    (0, _) => return false,
                    (1, Some(unit)) => {
                        self.values[unit.var()] = Some(unit.is_positive());
                        self.trail.push(unit.var());
                        queue.push(unit);
                    }
                    _ => {}
                }
            }
        }
        true
    }

    fn undo_to(&mut self, mark: usize) {
        for var in self.trail.drain(mark..) {
            self.values[var] = None;
        }
    }

    fn descend(&mut self, from: usize) {
        if self.truncated {
            return;
        }
        let Some(var) = (from..self.values.len()).find(|&v| self.values[v].is_none()) else {
            let values = self.values.iter().map(|v| v.expect("complete")).collect();
            self.solutions.push(Assignment::new(values));
            if self.solutions.len() >= self.cap {
                self.truncated = true;
            }
            return;
        };
        for value in [false, true] {
            let mark = self.trail.len();
            if self.assign(Lit::new(var as u32, value)) {
                self.descend(var + 1);
            }
            self.undo_to(mark);
            if self.truncated {
                return;
            }
        }
    }
}

/// Uniform draw from a solution list.
pub fn sample_solution<'s, R: Rng + ?Sized>(solutions: &'s [Assignment], rng: &mut R) -> Result<&'s Assignment, OracleError> {
    if solutions.is_empty() {
        return Err(OracleError::EmptySolutionSet);
    }
    Ok(&solutions[rng.gen_range(0..solutions.len())])
}

/// Posterior-mean estimate of `x_0` under a uniform prior on `solutions`:
/// `p(s | x_t) ∝ Π_i [ᾱ·x_t,i(s_i) + (1 − ᾱ)/K]`, returned as per-variable
/// marginals.
///
/// When no solution has positive likelihood (only possible at `ᾱ = 1`) the
/// prior marginals are returned.
pub fn exact_denoiser(solutions: &[Assignment], x_t: &CategoricalState, alpha_bar: f64) -> Result<CategoricalState, OracleError> {
    let first = solutions.first().ok_or(OracleError::EmptySolutionSet)?;
    let n = first.len();
    if x_t.num_vars() != n {
        return Err(OracleError::SizeMismatch {
            expected: n,
            found: x_t.num_vars(),
        });
    }
    let noise = (1.0 - alpha_bar) / K as f64;
    // log-likelihood of x_t,i given s_i = False / True
    let log_lik: Vec<[f64; 2]> = x_t
        .rows()
        .iter()
        .map(|p| [(alpha_bar * p[0] + noise).ln(), (alpha_bar * p[1] + noise).ln()])
        .collect();
    let log_w: Vec<f64> = solutions
        .iter()
        .map(|s| {
            s.values()
                .iter()
                .zip(&log_lik)
                .map(|(&v, ll)| ll[v as usize])
                .sum()
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = if max == f64::NEG_INFINITY {
        vec![1.0; solutions.len()]
    } else {
        log_w.iter().map(|&w| (w - max).exp()).collect()
    };
    let total: f64 = weights.iter().sum();
    let mut p_true = vec![0.0; n];
    for (s, &w) in solutions.iter().zip(&weights) {
        for (acc, &v) in p_true.iter_mut().zip(s.values()) {
            if v {
                *acc += w;
            }
        }
    }
    let probs = p_true
        .into_iter()
        .map(|p| {
            let t = (p / total).clamp(0.0, 1.0);
            [1.0 - t, t]
        })
        .collect();
    Ok(CategoricalState::new(probs).expect("convex combination of one-hots"))
}

/// [`Denoiser`] backed by [`exact_denoiser`]. Solutions are enumerated on
/// first use per formula and cached. For an unsatisfiable formula it answers
/// with the uniform state, so chains run to completion and stay unsolved.
#[derive(Default)]
pub struct ExactDenoiser {
    cap: usize,
    cache: Mutex<HashMap<CnfFormula, Arc<Vec<Assignment>>>>,
}

impl ExactDenoiser {
    pub fn new() -> Self {
        ExactDenoiser::with_cap(DEFAULT_CAP)
    }

    pub fn with_cap(cap: usize) -> Self {
        ExactDenoiser {
            cap,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Seeds the cache with a known solution list (e.g. from a `.solutions`
    /// file).
    pub fn insert(&self, formula: CnfFormula, solutions: Vec<Assignment>) {
        self.cache.lock().expect("cache lock").insert(formula, Arc::new(solutions));
    }

    pub fn solutions(&self, formula: &CnfFormula) -> Arc<Vec<Assignment>> {
        if let Some(s) = self.cache.lock().expect("cache lock").get(formula) {
            return Arc::clone(s);
        }
        let sols = Arc::new(enumerate_solutions(formula, self.cap).solutions);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(formula.clone(), Arc::clone(&sols));
        sols
    }
}

impl Denoiser for ExactDenoiser {
    fn denoise(&self, formula: &CnfFormula, x_t: &CategoricalState, alpha_bar: f64) -> Result<CategoricalState, DiffusionError> {
        let sols = self.solutions(formula);
        if sols.is_empty() {
            return Ok(CategoricalState::uniform(formula.num_vars()));
        }
        exact_denoiser(&sols, x_t, alpha_bar).map_err(|e| DiffusionError::Denoiser(Box::new(e)))
    }
}
