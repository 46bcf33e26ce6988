//! Evaluation metrics: accuracy, solution uniqueness, pairwise agreement,
//! and sampling time.
//!
//! Every chain draws from its own stream derived from
//! `(seed, instance index, draw index)`, so results do not depend on batch
//! sizes or thread counts.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffusion::{reverse_sample_batch, CategoricalState, Denoiser, DiffusionError, NoiseSchedule, ReverseMode};
use crate::formula::{Assignment, CnfFormula};
use crate::generate::instance_rng;
use crate::oracle::{enumerate_solutions, DEFAULT_CAP};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no instances to evaluate")]
    NoInstances,
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Stream for draw `draw` on instance `instance`.
pub fn chain_rng(seed: u64, instance: usize, draw: usize) -> ChaCha8Rng {
    instance_rng(seed, ((instance as u64) << 32) ^ draw as u64)
}

/// One sampler output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Draw {
    /// The returned assignment; which step of a diffusion chain it comes
    /// from is set by [`SampleOutput`].
    pub assignment: Assignment,
    /// Whether the chain found a satisfying assignment at any step.
    pub solved: bool,
}

/// Something that draws assignments for formulas, one chain per rng.
pub trait Sampler: Sync {
    fn sample(&self, formulas: &[&CnfFormula], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Draw>, EvalError>;
}

/// Which prediction of a reverse chain a [`DiffusionSampler`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SampleOutput {
    /// The argmax of `x̂_0` at `t = 1`, the end of the chain.
    #[default]
    Final,
    /// The first satisfying prediction if any step produced one, otherwise
    /// the final prediction.
    FirstValid,
}

/// Reverse diffusion with any denoiser.
pub struct DiffusionSampler<D> {
    pub denoiser: D,
    pub schedule: NoiseSchedule,
    pub mode: ReverseMode,
    pub output: SampleOutput,
}

impl<D: Denoiser + Sync> DiffusionSampler<D> {
    pub fn new(denoiser: D, schedule: NoiseSchedule) -> Self {
        DiffusionSampler {
            denoiser,
            schedule,
            mode: ReverseMode::Stochastic,
            output: SampleOutput::default(),
        }
    }

    /// Deterministic argmax-at-every-step variant from an all-False start.
    pub fn greedy(denoiser: D, schedule: NoiseSchedule) -> Self {
        DiffusionSampler {
            denoiser,
            schedule,
            mode: ReverseMode::Greedy,
            output: SampleOutput::default(),
        }
    }

    pub fn with_output(mut self, output: SampleOutput) -> Self {
        self.output = output;
        self
    }
}

impl<D: Denoiser + Sync> Sampler for DiffusionSampler<D> {
    fn sample(&self, formulas: &[&CnfFormula], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Draw>, EvalError> {
        let traces = reverse_sample_batch(formulas, &self.denoiser, &self.schedule, rngs, self.mode)?;
        Ok(traces
            .into_iter()
            .map(|t| {
                let solved = t.solved();
                let assignment = match self.output {
                    SampleOutput::Final => t.final_assignment,
                    SampleOutput::FirstValid => t.first_solution().cloned().unwrap_or(t.final_assignment),
                };
                Draw { assignment, solved }
            })
            .collect())
    }
}

/// Uniform draws from the enumerated solution set (cached per formula).
/// Unsatisfiable formulas yield a uniformly random, unsolved assignment.
#[derive(Default)]
pub struct UniformOracleSampler {
    cache: Mutex<HashMap<CnfFormula, std::sync::Arc<Vec<Assignment>>>>,
}

impl UniformOracleSampler {
    pub fn new() -> Self {
        Self::default()
    }

    fn solutions(&self, f: &CnfFormula) -> std::sync::Arc<Vec<Assignment>> {
        if let Some(s) = self.cache.lock().expect("cache lock").get(f) {
            return s.clone();
        }
        let s = std::sync::Arc::new(enumerate_solutions(f, DEFAULT_CAP).solutions);
        self.cache.lock().expect("cache lock").insert(f.clone(), s.clone());
        s
    }
}

impl Sampler for UniformOracleSampler {
    fn sample(&self, formulas: &[&CnfFormula], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Draw>, EvalError> {
        Ok(formulas
            .iter()
            .zip(rngs.iter_mut())
            .map(|(f, rng)| {
                let sols = self.solutions(f);
                match sols.choose(rng) {
                    Some(s) => Draw {
                        assignment: s.clone(),
                        solved: true,
                    },
                    None => Draw {
                        assignment: CategoricalState::uniform(f.num_vars()).sample(rng),
                        solved: false,
                    },
                }
            })
            .collect())
    }
}

/// Chains per sampler call.
pub const DEFAULT_CHAINS_PER_BATCH: usize = 256;

/// Runs `jobs` = (instance, draw) chains in batches of `chunk`, in parallel
/// across batches.
fn run_chains<S: Sampler + ?Sized>(
    sampler: &S,
    instances: &[CnfFormula],
    jobs: &[(usize, usize)],
    seed: u64,
    chunk: usize,
) -> Result<Vec<Draw>, EvalError> {
    let parts: Vec<Result<Vec<Draw>, EvalError>> = jobs
        .par_chunks(chunk.max(1))
        .map(|batch| {
            let formulas: Vec<&CnfFormula> = batch.iter().map(|&(i, _)| &instances[i]).collect();
            let mut rngs: Vec<ChaCha8Rng> = batch.iter().map(|&(i, d)| chain_rng(seed, i, d)).collect();
            sampler.sample(&formulas, &mut rngs)
        })
        .collect();
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub chains_per_batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            chains_per_batch: DEFAULT_CHAINS_PER_BATCH,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    /// Percent of instances solved, per run.
    pub per_run: Vec<f64>,
    /// Runs (out of `per_run.len()`) in which each instance was solved.
    pub solved_runs: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl AccuracyReport {
    pub fn summary(&self) -> String {
        format!(
            "accuracy: {:.1} ± {:.1} % solved over {} runs of {} instances",
            self.mean,
            self.std,
            self.per_run.len(),
            self.solved_runs.len()
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,percent_solved\n");
        for (i, p) in self.per_run.iter().enumerate() {
            let _ = writeln!(s, "{i},{p}");
        }
        s
    }
}

/// Percent of instances for which a chain finds a solution at any step,
/// per run; run `r` uses draw index `r`.
pub fn eval_accuracy<S: Sampler + ?Sized>(
    sampler: &S,
    instances: &[CnfFormula],
    runs: usize,
    opts: EvalOptions,
) -> Result<AccuracyReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    if runs == 0 {
        return Err(EvalError::ZeroCount("runs"));
    }
    let jobs: Vec<(usize, usize)> = (0..runs).flat_map(|r| (0..instances.len()).map(move |i| (i, r))).collect();
    let draws = run_chains(sampler, instances, &jobs, opts.seed, opts.chains_per_batch)?;
    let mut solved_runs = vec![0; instances.len()];
    let mut per_run = vec![0.0; runs];
    for (&(i, r), d) in jobs.iter().zip(&draws) {
        if d.solved {
            solved_runs[i] += 1;
            per_run[r] += 100.0 / instances.len() as f64;
        }
    }
    let (mean, std) = mean_std(&per_run);
    Ok(AccuracyReport {
        per_run,
        solved_runs,
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceUniqueness {
    pub valid: usize,
    pub invalid: usize,
    pub distinct: usize,
    /// `100 · distinct / samples`.
    pub unique_percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniquenessReport {
    pub samples_per_instance: usize,
    pub per_instance: Vec<InstanceUniqueness>,
    pub mean: f64,
    pub std: f64,
}

impl UniquenessReport {
    pub fn total_invalid(&self) -> usize {
        self.per_instance.iter().map(|p| p.invalid).sum()
    }

    pub fn summary(&self) -> String {
        format!(
            "uniqueness: {:.1} ± {:.1} % unique valid solutions from {} samples over {} instances ({} invalid samples filtered)",
            self.mean,
            self.std,
            self.samples_per_instance,
            self.per_instance.len(),
            self.total_invalid()
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance,valid,invalid,distinct,unique_percent\n");
        for (i, p) in self.per_instance.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{},{}", p.valid, p.invalid, p.distinct, p.unique_percent);
        }
        s
    }
}

/// Distinct valid assignments among `samples` draws per instance, as a
/// percentage of `samples`. Invalid draws are filtered before counting.
pub fn eval_uniqueness<S: Sampler + ?Sized>(
    sampler: &S,
    instances: &[CnfFormula],
    samples: usize,
    opts: EvalOptions,
) -> Result<UniquenessReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    if samples == 0 {
        return Err(EvalError::ZeroCount("samples per instance"));
    }
    let jobs: Vec<(usize, usize)> = (0..instances.len()).flat_map(|i| (0..samples).map(move |d| (i, d))).collect();
    let draws = run_chains(sampler, instances, &jobs, opts.seed, opts.chains_per_batch)?;
    let per_instance: Vec<InstanceUniqueness> = draws
        .chunks(samples)
        .zip(instances)
        .map(|(ds, f)| unique_stats(f, ds.iter().map(|d| &d.assignment), samples))
        .collect();
    let values: Vec<f64> = per_instance.iter().map(|p| p.unique_percent).collect();
    let (mean, std) = mean_std(&values);
    Ok(UniquenessReport {
        samples_per_instance: samples,
        per_instance,
        mean,
        std,
    })
}

/// Uniqueness statistics of one instance's samples.
pub fn unique_stats<'a>(f: &CnfFormula, samples: impl IntoIterator<Item = &'a Assignment>, n: usize) -> InstanceUniqueness {
    let mut distinct = BTreeSet::new();
    let (mut valid, mut invalid) = (0, 0);
    for a in samples {
        if f.is_satisfied_by(a) {
            valid += 1;
            distinct.insert(a.clone());
        } else {
            invalid += 1;
        }
    }
    InstanceUniqueness {
        valid,
        invalid,
        distinct: distinct.len(),
        unique_percent: 100.0 * distinct.len() as f64 / n as f64,
    }
}

/// Expected percentage of distinct values among `n` uniform draws from `s`
/// equally likely values.
pub fn expected_unique_percent(s: usize, n: usize) -> f64 {
    let s = s as f64;
    100.0 * s * (1.0 - (1.0 - 1.0 / s).powi(n as i32)) / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementReport {
    /// Mean agreement over repetitions, per evaluated instance.
    pub per_instance: Vec<(usize, f64)>,
    /// Instances for which a valid pair could not be drawn within the budget.
    pub skipped: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl AgreementReport {
    pub fn summary(&self) -> String {
        format!(
            "agreement: {:.1} ± {:.1} % equal variables over {} instances ({} skipped)",
            self.mean,
            self.std,
            self.per_instance.len(),
            self.skipped.len()
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance,agreement_percent\n");
        for (i, a) in &self.per_instance {
            let _ = writeln!(s, "{i},{a}");
        }
        s
    }
}

/// Percent of variables on which two assignments agree.
pub fn agreement_percent(a: &Assignment, b: &Assignment) -> f64 {
    if a.is_empty() {
        return 100.0;
    }
    100.0 * a.agreement(b) as f64 / a.len() as f64
}

pub const DEFAULT_AGREEMENT_REPS: usize = 10;
pub const DEFAULT_RETRY_BUDGET: usize = 10;

/// For each instance and repetition, draws until two valid samples are in
/// hand (at most `retry_budget` draws per needed sample) and records their
/// agreement. Instances that run out of budget in any repetition are
/// skipped.
pub fn eval_agreement<S: Sampler + ?Sized>(
    sampler: &S,
    instances: &[CnfFormula],
    reps: usize,
    retry_budget: usize,
    opts: EvalOptions,
) -> Result<AgreementReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::NoInstances);
    }
    if reps == 0 {
        return Err(EvalError::ZeroCount("repetitions"));
    }
    let budget = 2 * retry_budget.max(1);
    // Each (instance, rep) slot owns draw indices rep·budget .. (rep+1)·budget.
    let mut found: Vec<Vec<Assignment>> = vec![Vec::new(); instances.len() * reps];
    let mut attempts = vec![0usize; instances.len() * reps];
    loop {
        let mut jobs = Vec::new();
        let mut owners = Vec::new();
        for slot in 0..found.len() {
            let need = 2usize.saturating_sub(found[slot].len());
            let left = budget - attempts[slot];
            for _ in 0..need.min(left) {
                let (i, r) = (slot / reps, slot % reps);
                jobs.push((i, r * budget + attempts[slot]));
                owners.push(slot);
                attempts[slot] += 1;
            }
        }
        if jobs.is_empty() {
            break;
        }
        let draws = run_chains(sampler, instances, &jobs, opts.seed, opts.chains_per_batch)?;
        for ((slot, &(i, _)), d) in owners.into_iter().zip(&jobs).zip(draws) {
            if found[slot].len() < 2 && instances[i].is_satisfied_by(&d.assignment) {
                found[slot].push(d.assignment);
            }
        }
    }
    let mut per_instance = Vec::new();
    let mut skipped = Vec::new();
    for (i, slots) in found.chunks(reps).enumerate() {
        if slots.iter().any(|s| s.len() < 2) {
            skipped.push(i);
            continue;
        }
        let sum: f64 = slots.iter().map(|s| agreement_percent(&s[0], &s[1])).sum();
        per_instance.push((i, sum / reps as f64));
    }
    let values: Vec<f64> = per_instance.iter().map(|p| p.1).collect();
    let (mean, std) = mean_std(&values);
    Ok(AgreementReport {
        per_instance,
        skipped,
        mean,
        std,
    })
}

/// One size in a timing sweep.
#[derive(Clone, Debug)]
pub struct TimingCase {
    pub family: String,
    pub formula: CnfFormula,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub family: String,
    pub n: usize,
    pub m: usize,
    pub batch: usize,
    pub sec_per_sample: f64,
}

pub const TIMING_HEADER: &str = "family,n,m,batch,sec_per_sample";

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = format!("{TIMING_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.6e}", r.family, r.n, r.m, r.batch, r.sec_per_sample);
    }
    s
}

/// Times `batch` chains on each case in one sampler call and reports wall
/// time divided by `batch`. Each case is timed `repeats` times and the
/// fastest repeat is kept.
pub fn eval_timing<S: Sampler + ?Sized>(
    sampler: &S,
    cases: &[TimingCase],
    batch: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<TimingRow>, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoInstances);
    }
    if batch == 0 {
        return Err(EvalError::ZeroCount("batch size"));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let formulas = vec![&case.formula; batch];
        let mut best = f64::INFINITY;
        for rep in 0..repeats.max(1) {
            let mut rngs: Vec<ChaCha8Rng> = (0..batch).map(|d| chain_rng(seed, i, rep * batch + d)).collect();
            let start = Instant::now();
            sampler.sample(&formulas, &mut rngs)?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        rows.push(TimingRow {
            family: case.family.clone(),
            n: case.formula.num_vars(),
            m: case.formula.num_clauses(),
            batch,
            sec_per_sample: best / batch as f64,
        });
    }
    Ok(rows)
}

/// Writes a CSV file, creating parent directories.
pub fn write_csv(path: impl AsRef<Path>, text: &str) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

/// Uniformly random assignment sampler, a reference point for agreement
/// (two independent uniform assignments agree on half the variables).
pub struct RandomAssignmentSampler;

impl Sampler for RandomAssignmentSampler {
    fn sample(&self, formulas: &[&CnfFormula], rngs: &mut [ChaCha8Rng]) -> Result<Vec<Draw>, EvalError> {
        Ok(formulas
            .iter()
            .zip(rngs.iter_mut())
            .map(|(f, rng)| {
                let a = Assignment::new((0..f.num_vars()).map(|_| rng.gen()).collect());
                Draw {
                    solved: f.is_satisfied_by(&a),
                    assignment: a,
                }
            })
            .collect())
    }
}
