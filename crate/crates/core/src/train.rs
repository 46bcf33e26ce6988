//! Training: batch construction, the diffusion loss, AdaBelief, and the loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{q_sample, CategoricalState, DiffusionError, NoiseSchedule};
use crate::formula::{Assignment, CnfFormula};
use crate::generate::instance_rng;
use crate::gnn::{forward_graph, Checkpoint, DenoiserModel, GnnError, ModelConfig, ModelInput, ParamNodes};
use crate::oracle::{enumerate_solutions, DEFAULT_CAP};
use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    EmptyDataset,
    #[error("solution does not satisfy the formula")]
    NotASolution,
    #[error("instance with {num_vars} variables exceeds the batch limit of {max_vars}")]
    InstanceTooLarge { num_vars: usize, max_vars: usize },
    #[error("parameter `{0}` has no matching gradient or optimizer state")]
    ParamMismatch(String),
    #[error("checkpoint has no optimizer state")]
    MissingOptimizerState,
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A formula paired with one of its solutions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    formula: CnfFormula,
    solution: Assignment,
}

impl TrainExample {
    pub fn new(formula: CnfFormula, solution: Assignment) -> Result<Self, TrainError> {
        if !formula.is_satisfied_by(&solution) {
            return Err(TrainError::NotASolution);
        }
        Ok(TrainExample { formula, solution })
    }

    pub fn formula(&self) -> &CnfFormula {
        &self.formula
    }

    pub fn solution(&self) -> &Assignment {
        &self.solution
    }

    pub fn num_vars(&self) -> usize {
        self.formula.num_vars()
    }
}

/// Which enumerated solution becomes the training target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SolutionMode {
    /// The lexicographically first solution, a fixed target per formula.
    #[default]
    First,
    /// A uniform draw from all solutions.
    Uniform,
}

impl FromStr for SolutionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(SolutionMode::First),
            "uniform" => Ok(SolutionMode::Uniform),
            other => Err(format!("unknown solution mode `{other}` (expected first|uniform)")),
        }
    }
}

/// Pairs each formula with a solution chosen by `mode`. Unsatisfiable
/// formulas are dropped. With [`SolutionMode::Uniform`], formula `i` draws
/// from stream `(seed, i)`.
pub fn examples_from_formulas(formulas: &[CnfFormula], mode: SolutionMode, seed: u64) -> Vec<TrainExample> {
    formulas
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let sols = enumerate_solutions(f, DEFAULT_CAP).solutions;
            let pick = match mode {
                SolutionMode::First => sols.into_iter().next()?,
                SolutionMode::Uniform => sols.choose(&mut instance_rng(seed, i as u64))?.clone(),
            };
            Some(TrainExample {
                formula: f.clone(),
                solution: pick,
            })
        })
        .collect()
}

/// Several noised instances merged into one block-diagonal input.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Merged factor graph, `x_t` and per-variable `ᾱ_t`.
    pub input: ModelInput,
    /// Merged one-hot `x_0`.
    pub x0: Vec<[f64; 2]>,
    /// Diffusion step of each instance.
    pub steps: Vec<usize>,
    /// Variable offsets; instance `i` owns `boundaries[i]..boundaries[i + 1]`.
    pub boundaries: Vec<usize>,
    alpha: Vec<f64>,
    alpha_bar_prev: Vec<f64>,
}

impl Batch {
    /// Merges examples with explicitly given steps and noisy states.
    pub fn assemble(
        examples: &[&TrainExample],
        steps: &[usize],
        x_t: &[CategoricalState],
        schedule: &NoiseSchedule,
    ) -> Result<Batch, TrainError> {
        if examples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        assert_eq!(examples.len(), steps.len());
        assert_eq!(examples.len(), x_t.len());
        let mut parts = Vec::with_capacity(examples.len());
        let mut x0 = Vec::new();
        let mut boundaries = vec![0];
        let mut alpha = Vec::new();
        let mut alpha_bar_prev = Vec::new();
        for ((ex, &t), xt) in examples.iter().zip(steps).zip(x_t) {
            if t == 0 || t > schedule.steps() {
                return Err(DiffusionError::StepOutOfRange {
                    t,
                    steps: schedule.steps(),
                }
                .into());
            }
            let n = ex.num_vars();
            parts.push(ModelInput::new(&ex.formula, xt, schedule.alpha_bar(t))?);
            x0.extend_from_slice(CategoricalState::one_hot(&ex.solution).rows());
            boundaries.push(boundaries.last().unwrap() + n);
            alpha.extend(std::iter::repeat_n(schedule.alpha(t), n));
            alpha_bar_prev.extend(std::iter::repeat_n(schedule.alpha_bar(t - 1), n));
        }
        Ok(Batch {
            input: ModelInput::merge(&parts),
            x0,
            steps: steps.to_vec(),
            boundaries,
            alpha,
            alpha_bar_prev,
        })
    }

    pub fn num_instances(&self) -> usize {
        self.steps.len()
    }

    pub fn num_vars(&self) -> usize {
        self.x0.len()
    }
}

/// Packs examples in order until the next one would push the variable count
/// past `max_vars`, drawing `t ~ U{1..T}` and `x_t ~ q(x_t | x_0)` per
/// instance. Returns the batch and the number of examples consumed.
pub fn make_batch<R: Rng + ?Sized>(
    examples: &[&TrainExample],
    schedule: &NoiseSchedule,
    rng: &mut R,
    max_vars: usize,
) -> Result<(Batch, usize), TrainError> {
    let first = examples.first().ok_or(TrainError::EmptyDataset)?;
    if first.num_vars() > max_vars {
        return Err(TrainError::InstanceTooLarge {
            num_vars: first.num_vars(),
            max_vars,
        });
    }
    let mut total = 0;
    let mut taken = 0;
    for ex in examples {
        if total + ex.num_vars() > max_vars {
            break;
        }
        total += ex.num_vars();
        taken += 1;
    }
    let chosen = &examples[..taken];
    let mut steps = Vec::with_capacity(taken);
    let mut x_t = Vec::with_capacity(taken);
    for ex in chosen {
        let t = rng.gen_range(1..=schedule.steps());
        let x0 = CategoricalState::one_hot(&ex.solution);
        x_t.push(q_sample(&x0, schedule.alpha_bar(t), rng));
        steps.push(t);
    }
    Ok((Batch::assemble(chosen, &steps, &x_t, schedule)?, taken))
}

fn per_var_tensor<T: Scalar>(values: impl Iterator<Item = [f64; 2]>, n: usize) -> Tensor<T> {
    let data = values.flat_map(|r| r.map(T::from_f64)).collect();
    Tensor::new(vec![n, 2], data).expect("two columns per variable")
}

/// Posterior `θ_post(x_t, x0)` on the graph for every variable of `batch`.
fn posterior_node<T: Scalar>(g: &mut Graph<T>, batch: &Batch, x0: NodeId) -> Result<NodeId, TensorError> {
    let n = batch.num_vars();
    let from_xt = per_var_tensor(
        batch
            .input
            .x_t
            .iter()
            .zip(&batch.alpha)
            .map(|(r, &a)| r.map(|v| a * v + (1.0 - a) / 2.0)),
        n,
    );
    let scale = per_var_tensor(batch.alpha_bar_prev.iter().map(|&a| [a, a]), n);
    let shift = per_var_tensor(batch.alpha_bar_prev.iter().map(|&a| [(1.0 - a) / 2.0; 2]), n);
    let from_xt = g.constant(from_xt);
    let scale = g.constant(scale);
    let shift = g.constant(shift);
    let scaled = g.mul(x0, scale)?;
    let from_x0 = g.add(scaled, shift)?;
    let unnormalized = g.mul(from_xt, from_x0)?;
    g.normalize_rows(unnormalized)
}

/// Mean over variables of `KL(θ_post(x_t, x_0) ‖ θ_post(x_t, x̂_0))` for a
/// given `x̂_0` node.
pub fn loss_from_prediction<T: Scalar>(g: &mut Graph<T>, batch: &Batch, x0_hat: NodeId) -> Result<NodeId, TensorError> {
    let x0 = g.constant(per_var_tensor(batch.x0.iter().copied(), batch.num_vars()));
    let target = posterior_node(g, batch, x0)?;
    let predicted = posterior_node(g, batch, x0_hat)?;
    g.kl_div(target, predicted)
}

/// Builds the full model-plus-loss graph and returns the loss node.
pub fn loss_graph<T: Scalar>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    params: &ParamNodes,
    batch: &Batch,
) -> Result<NodeId, TrainError> {
    let x0_hat = forward_graph(config, g, params, &batch.input)?;
    Ok(loss_from_prediction(g, batch, x0_hat)?)
}

/// Loss value and parameter gradients for one batch.
pub fn loss_and_gradients(model: &DenoiserModel, batch: &Batch) -> Result<(f64, BTreeMap<String, Tensor<f32>>), TrainError> {
    let mut g = Graph::<f32>::new();
    let params = model.register(&mut g);
    let loss = loss_graph(model.config(), &mut g, &params, batch)?;
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?.into_params();
    Ok((value, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaBeliefConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        AdaBeliefConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-16,
        }
    }
}

/// AdaBelief moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub hyper: AdaBeliefConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub s: BTreeMap<String, Vec<f32>>,
}

impl OptState {
    pub fn new(hyper: AdaBeliefConfig, params: &BTreeMap<String, Tensor<f32>>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        OptState {
            hyper,
            step: 0,
            m: zeros(),
            s: zeros(),
        }
    }
}

/// One AdaBelief update of every parameter.
pub fn adabelief_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptState,
) -> Result<(), TrainError> {
    for (name, p) in params.iter() {
        let ok = grads.get(name).is_some_and(|g| g.shape() == p.shape())
            && state.m.get(name).is_some_and(|m| m.len() == p.len())
            && state.s.get(name).is_some_and(|s| s.len() == p.len());
        if !ok {
            return Err(TrainError::ParamMismatch(name.clone()));
        }
    }
    state.step += 1;
    let AdaBeliefConfig { lr, beta1, beta2, eps } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above");
        let s = state.s.get_mut(name).expect("checked above");
        for (((theta, &gi), mi), si) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(s.iter_mut()) {
            let gi = gi as f64;
            let m_new = beta1 * *mi as f64 + (1.0 - beta1) * gi;
            let s_new = beta2 * *si as f64 + (1.0 - beta2) * (gi - m_new).powi(2) + eps;
            let m_hat = m_new / bc1;
            let s_hat = s_new / bc2;
            *theta = (*theta as f64 - lr * m_hat / (s_hat.sqrt() + eps)) as f32;
            *mi = m_new as f32;
            *si = s_new as f32;
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub max_vars: usize,
    /// Length `T` of the training noise schedule.
    pub schedule_steps: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: AdaBeliefConfig,
    /// Global gradient-norm clip; off by default (1.0 is the usual value).
    pub clip_norm: Option<f64>,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            max_vars: 2000,
            schedule_steps: 128,
            seed: 0,
            model: ModelConfig::default(),
            optimizer: AdaBeliefConfig::default(),
            clip_norm: None,
            log_every: 100,
            checkpoint_every: 1000,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

/// One record of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Mean loss over the steps since the previous record.
    pub loss: f64,
    /// Wall-clock seconds since training (or resumption) started.
    pub seconds: f64,
}

const STEP_RECORD: &str = "meta.step";

/// Model, optimizer, and data for one training run.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    model: DenoiserModel,
    opt: OptState,
    examples: Vec<TrainExample>,
}

impl Trainer {
    pub fn new(config: TrainConfig, examples: Vec<TrainExample>) -> Result<Self, TrainError> {
        let model = DenoiserModel::init(config.model, config.schedule_steps)?;
        let opt = OptState::new(config.optimizer, model.params());
        Trainer::from_parts(config, examples, model, opt)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]; the
    /// model configuration and step counter come from the checkpoint.
    pub fn resume(mut config: TrainConfig, examples: Vec<TrainExample>, ckpt: Checkpoint) -> Result<Self, TrainError> {
        config.model = ckpt.config;
        config.schedule_steps = ckpt.schedule_steps;
        let model = DenoiserModel::from_tensors(ckpt.config, ckpt.schedule_steps, &ckpt.tensors)?;
        let mut opt = OptState::new(config.optimizer, model.params());
        let step = ckpt.tensors.get(STEP_RECORD).ok_or(TrainError::MissingOptimizerState)?;
        opt.step = decode_step(step.data());
        for (name, p) in model.params() {
            for (prefix, store) in [("opt.m.", &mut opt.m), ("opt.s.", &mut opt.s)] {
                let t = ckpt
                    .tensors
                    .get(&format!("{prefix}{name}"))
                    .ok_or(TrainError::MissingOptimizerState)?;
                if t.len() != p.len() {
                    return Err(TrainError::ParamMismatch(name.clone()));
                }
                store.insert(name.clone(), t.data().to_vec());
            }
        }
        Trainer::from_parts(config, examples, model, opt)
    }

    fn from_parts(config: TrainConfig, examples: Vec<TrainExample>, model: DenoiserModel, opt: OptState) -> Result<Self, TrainError> {
        if examples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if let Some(big) = examples.iter().find(|e| e.num_vars() > config.max_vars) {
            return Err(TrainError::InstanceTooLarge {
                num_vars: big.num_vars(),
                max_vars: config.max_vars,
            });
        }
        let schedule = NoiseSchedule::new(config.schedule_steps)?;
        Ok(Trainer {
            config,
            schedule,
            model,
            opt,
            examples,
        })
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn into_model(self) -> DenoiserModel {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn opt_state(&self) -> &OptState {
        &self.opt
    }

    /// The batch used at a given step. Every step draws from its own stream
    /// `(seed, step)`, so a resumed run sees the same batches.
    pub fn batch_for_step(&self, step: u64) -> Result<Batch, TrainError> {
        let mut rng = instance_rng(self.config.seed, step);
        let mut order: Vec<&TrainExample> = Vec::new();
        let mut total = 0;
        loop {
            let ex = &self.examples[rng.gen_range(0..self.examples.len())];
            if total + ex.num_vars() > self.config.max_vars || order.len() == self.examples.len() {
                break;
            }
            total += ex.num_vars();
            order.push(ex);
        }
        Ok(make_batch(&order, &self.schedule, &mut rng, self.config.max_vars)?.0)
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let batch = self.batch_for_step(self.opt.step)?;
        let (loss, mut grads) = loss_and_gradients(&self.model, &batch)?;
        if let Some(max) = self.config.clip_norm {
            clip_gradients(&mut grads, max);
        }
        adabelief_step(self.model.params_mut(), &grads, &mut self.opt)?;
        Ok(loss)
    }

    /// Model parameters, optimizer moments, and step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        for (name, p) in self.model.params() {
            let shape = p.shape().to_vec();
            for (prefix, store) in [("opt.m.", &self.opt.m), ("opt.s.", &self.opt.s)] {
                let t = Tensor::new(shape.clone(), store[name].clone()).expect("moment matches parameter");
                ckpt.tensors.insert(format!("{prefix}{name}"), t);
            }
        }
        ckpt.tensors.insert(STEP_RECORD.into(), encode_step(self.opt.step));
        ckpt
    }

    fn save_checkpoint(&self) -> Result<(), TrainError> {
        if let Some(path) = &self.config.checkpoint_path {
            self.checkpoint().save(path).map_err(|e| match e {
                GnnError::Io(source) => TrainError::Io {
                    path: path.clone(),
                    source,
                },
                other => other.into(),
            })?;
        }
        Ok(())
    }

    /// Trains until the step counter reaches `config.steps`, logging and
    /// checkpointing periodically; always writes a final checkpoint.
    pub fn run(&mut self) -> Result<Vec<LogRecord>, TrainError> {
        let mut log = match &self.config.log_path {
            Some(path) => {
                let io_err = |source| TrainError::Io {
                    path: path.clone(),
                    source,
                };
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(io_err)?;
                Some((BufWriter::new(file), path.clone()))
            }
            None => None,
        };
        let start = Instant::now();
        let mut records = Vec::new();
        let mut window = (0.0, 0u64);
        while self.opt.step < self.config.steps {
            let loss = self.train_step()?;
            window.0 += loss;
            window.1 += 1;
            let step = self.opt.step;
            if step % self.config.log_every.max(1) == 0 || step == self.config.steps {
                let record = LogRecord {
                    step,
                    loss: window.0 / window.1 as f64,
                    seconds: start.elapsed().as_secs_f64(),
                };
                window = (0.0, 0);
                if let Some((w, path)) = log.as_mut() {
                    let line = serde_json::to_string(&record).expect("plain struct");
                    writeln!(w, "{line}")
                        .and_then(|_| w.flush())
                        .map_err(|source| TrainError::Io {
                            path: path.clone(),
                            source,
                        })?;
                }
                records.push(record);
            }
            if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
                self.save_checkpoint()?;
            }
        }
        self.save_checkpoint()?;
        Ok(records)
    }
}

// The step counter is split into two 24-bit halves so each is exact in f32.
fn encode_step(step: u64) -> Tensor<f32> {
    let lo = (step & 0xFF_FFFF) as f32;
    let hi = (step >> 24) as f32;
    Tensor::new(vec![2], vec![lo, hi]).expect("two values")
}

fn decode_step(data: &[f32]) -> u64 {
    let lo = data.first().copied().unwrap_or(0.0) as u64;
    let hi = data.get(1).copied().unwrap_or(0.0) as u64;
    (hi << 24) | lo
}
