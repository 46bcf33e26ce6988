//! The recurrent message-passing denoiser.
//!
//! Each of the `R` iterations (weights shared across iterations):
//!
//! 1. a query head turns every variable state into a soft guess
//!    `q = sigmoid(h_v · w_q)`, and every clause gets the probability
//!    `u_c = Π_{+i ∈ c} (1 − q_i) · Π_{−i ∈ c} q_i` that the guess leaves it
//!    unsatisfied;
//! 2. variables send polarity-specific linear messages to their clauses; a
//!    clause sums them, appends `u_c` and updates its state with a two-layer
//!    MLP and a layer-normalized residual;
//! 3. clauses send polarity-specific messages back and variables update the
//!    same way, also seeing their input features.
//!
//! Input features per variable are the one-hot `x_t` concatenated with a
//! learned linear embedding of `(ᾱ, ᾱ², sin 2πᾱ, cos 2πᾱ)`. The output is a
//! per-variable softmax over {False, True}.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::{CategoricalState, DenoiseRequest, Denoiser, DiffusionError};
use crate::formula::{CnfFormula, FactorGraph};
use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};

pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_ITERATIONS: usize = 32;
/// Variables per forward pass when answering batched denoiser requests.
pub const DEFAULT_MAX_BATCH_VARS: usize = 4096;

const MAGIC: &[u8; 4] = b"DSAT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input has {found} rows for {expected} variables")]
    SizeMismatch { expected: usize, found: usize },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        if self.hidden_dim < 2 || self.hidden_dim % 2 != 0 {
            return Err(GnnError::InvalidConfig(format!(
                "hidden dimension must be even and at least 2, got {}",
                self.hidden_dim
            )));
        }
        if self.iterations == 0 {
            return Err(GnnError::InvalidConfig("iterations must be at least 1".into()));
        }
        Ok(())
    }

    fn noise_dim(&self) -> usize {
        self.hidden_dim / 2
    }

    fn feature_dim(&self) -> usize {
        2 + self.noise_dim()
    }

    /// Every parameter with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.hidden_dim;
        let f = self.feature_dim();
        vec![
            ("noise.w", vec![4, self.noise_dim()]),
            ("noise.b", vec![self.noise_dim()]),
            ("input.w", vec![f, d]),
            ("input.b", vec![d]),
            ("query.w", vec![d, 1]),
            ("query.b", vec![1]),
            ("v2c.pos.w", vec![d, d]),
            ("v2c.neg.w", vec![d, d]),
            ("clause.mlp1.w", vec![2 * d + 1, d]),
            ("clause.mlp1.b", vec![d]),
            ("clause.mlp2.w", vec![d, d]),
            ("clause.mlp2.b", vec![d]),
            ("c2v.pos.w", vec![d, d]),
            ("c2v.neg.w", vec![d, d]),
            ("var.mlp1.w", vec![2 * d + f, d]),
            ("var.mlp1.b", vec![d]),
            ("var.mlp2.w", vec![d, d]),
            ("var.mlp2.b", vec![d]),
            ("output.w", vec![d, 2]),
            ("output.b", vec![2]),
        ]
    }
}

/// One (possibly merged) forward-pass input.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub graph: FactorGraph,
    /// `x_t` rows, `[p(False), p(True)]`.
    pub x_t: Vec<[f64; 2]>,
    /// Noise level of each variable's instance.
    pub alpha_bar: Vec<f64>,
}

impl ModelInput {
    pub fn new(formula: &CnfFormula, x_t: &CategoricalState, alpha_bar: f64) -> Result<Self, GnnError> {
        if x_t.num_vars() != formula.num_vars() {
            return Err(GnnError::SizeMismatch {
                expected: formula.num_vars(),
                found: x_t.num_vars(),
            });
        }
        Ok(ModelInput {
            graph: formula.factor_graph(),
            x_t: x_t.rows().to_vec(),
            alpha_bar: vec![alpha_bar; formula.num_vars()],
        })
    }

    /// Block-diagonal merge.
    pub fn merge(parts: &[ModelInput]) -> ModelInput {
        ModelInput {
            graph: FactorGraph::disjoint_union(parts.iter().map(|p| &p.graph)),
            x_t: parts.iter().flat_map(|p| p.x_t.iter().copied()).collect(),
            alpha_bar: parts.iter().flat_map(|p| p.alpha_bar.iter().copied()).collect(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.graph.num_vars
    }

    fn validate(&self) -> Result<(), GnnError> {
        for len in [self.x_t.len(), self.alpha_bar.len()] {
            if len != self.graph.num_vars {
                return Err(GnnError::SizeMismatch {
                    expected: self.graph.num_vars,
                    found: len,
                });
            }
        }
        Ok(())
    }
}

/// The four-dimensional noise feature of `ᾱ`.
pub fn noise_features(alpha_bar: f64) -> [f64; 4] {
    [
        alpha_bar,
        alpha_bar * alpha_bar,
        (TAU * alpha_bar).sin(),
        (TAU * alpha_bar).cos(),
    ]
}

/// Parameter leaves of one graph, by name.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes(BTreeMap<String, NodeId>);

impl ParamNodes {
    fn get(&self, name: &str) -> NodeId {
        self.0[name]
    }
}

/// Lets callers supply their own leaves, e.g. differentiable inputs for a
/// gradient check.
impl FromIterator<(String, NodeId)> for ParamNodes {
    fn from_iter<I: IntoIterator<Item = (String, NodeId)>>(iter: I) -> Self {
        ParamNodes(iter.into_iter().collect())
    }
}

/// Per-clause probability that the soft assignment `q` (an `[n, 1]` node)
/// leaves the clause unsatisfied.
pub fn unsat_probability<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    graph: &FactorGraph,
) -> Result<NodeId, TensorError> {
    unsat_from_index(g, q, &EdgeIndex::new(graph), graph.num_clauses)
}

fn unsat_from_index<T: Scalar>(g: &mut Graph<T>, q: NodeId, idx: &EdgeIndex, m: usize) -> Result<NodeId, TensorError> {
    let q_pos = g.gather(q, idx.pos_vars.clone())?;
    let miss_pos = g.affine(q_pos, -1.0, 1.0);
    let prod_pos = g.segment_prod(miss_pos, idx.pos_clauses.clone(), m)?;
    let q_neg = g.gather(q, idx.neg_vars.clone())?;
    let prod_neg = g.segment_prod(q_neg, idx.neg_clauses.clone(), m)?;
    g.mul(prod_pos, prod_neg)
}

struct EdgeIndex {
    pos_vars: Arc<[usize]>,
    pos_clauses: Arc<[usize]>,
    neg_vars: Arc<[usize]>,
    neg_clauses: Arc<[usize]>,
}

impl EdgeIndex {
    fn new(graph: &FactorGraph) -> Self {
        let idx = graph.polarity_index();
        EdgeIndex {
            pos_vars: Arc::from(idx.pos_vars),
            pos_clauses: Arc::from(idx.pos_clauses),
            neg_vars: Arc::from(idx.neg_vars),
            neg_clauses: Arc::from(idx.neg_clauses),
        }
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, TensorError> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Projects `from` states with `w_pos`/`w_neg`, routes them along positive and
/// negative edges and sums them per receiver.
#[allow(clippy::too_many_arguments)]
fn messages<T: Scalar>(
    g: &mut Graph<T>,
    from: NodeId,
    w_pos: NodeId,
    w_neg: NodeId,
    (src_pos, dst_pos): (&Arc<[usize]>, &Arc<[usize]>),
    (src_neg, dst_neg): (&Arc<[usize]>, &Arc<[usize]>),
    receivers: usize,
) -> Result<NodeId, TensorError> {
    let proj_pos = g.matmul(from, w_pos)?;
    let routed_pos = g.gather(proj_pos, src_pos.clone())?;
    let sum_pos = g.segment_sum(routed_pos, dst_pos.clone(), receivers)?;
    let proj_neg = g.matmul(from, w_neg)?;
    let routed_neg = g.gather(proj_neg, src_neg.clone())?;
    let sum_neg = g.segment_sum(routed_neg, dst_neg.clone(), receivers)?;
    g.add(sum_pos, sum_neg)
}

fn mlp_residual<T: Scalar>(g: &mut Graph<T>, p: &ParamNodes, prefix: &str, state: NodeId, input: NodeId) -> Result<NodeId, TensorError> {
    let w1 = p.get(&format!("{prefix}.mlp1.w"));
    let b1 = p.get(&format!("{prefix}.mlp1.b"));
    let w2 = p.get(&format!("{prefix}.mlp2.w"));
    let b2 = p.get(&format!("{prefix}.mlp2.b"));
    let hidden = linear(g, input, w1, Some(b1))?;
    let hidden = g.relu(hidden);
    let delta = linear(g, hidden, w2, Some(b2))?;
    let sum = g.add(state, delta)?;
    g.layer_norm(sum)
}

/// Builds the forward pass on `g` and returns the `[n, 2]` probability node.
pub fn forward_graph<T: Scalar>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    p: &ParamNodes,
    input: &ModelInput,
) -> Result<NodeId, GnnError> {
    input.validate()?;
    let n = input.num_vars();
    let m = input.graph.num_clauses;
    let d = config.hidden_dim;
    let idx = EdgeIndex::new(&input.graph);

    let x_t = Tensor::new(
        vec![n, 2],
        input.x_t.iter().flat_map(|r| r.iter().map(|&v| T::from_f64(v))).collect(),
    )?;
    let noise = Tensor::new(
        vec![n, 4],
        input
            .alpha_bar
            .iter()
            .flat_map(|&a| noise_features(a).map(T::from_f64))
            .collect(),
    )?;
    let x_t = g.constant(x_t);
    let noise = g.constant(noise);
    let noise_emb = linear(g, noise, p.get("noise.w"), Some(p.get("noise.b")))?;
    let features = g.concat(&[x_t, noise_emb])?;

    let mut h_v = linear(g, features, p.get("input.w"), Some(p.get("input.b")))?;
    let mut h_c = g.constant(Tensor::zeros(vec![m, d]));

    for _ in 0..config.iterations {
        let q_logit = linear(g, h_v, p.get("query.w"), Some(p.get("query.b")))?;
        let q = g.sigmoid(q_logit);
        let unsat = unsat_from_index(g, q, &idx, m)?;

        let to_clauses = messages(
            g,
            h_v,
            p.get("v2c.pos.w"),
            p.get("v2c.neg.w"),
            (&idx.pos_vars, &idx.pos_clauses),
            (&idx.neg_vars, &idx.neg_clauses),
            m,
        )?;
        let clause_in = g.concat(&[h_c, to_clauses, unsat])?;
        h_c = mlp_residual(g, p, "clause", h_c, clause_in)?;

        let to_vars = messages(
            g,
            h_c,
            p.get("c2v.pos.w"),
            p.get("c2v.neg.w"),
            (&idx.pos_clauses, &idx.pos_vars),
            (&idx.neg_clauses, &idx.neg_vars),
            n,
        )?;
        let var_in = g.concat(&[h_v, to_vars, features])?;
        h_v = mlp_residual(g, p, "var", h_v, var_in)?;
    }

    let logits = linear(g, h_v, p.get("output.w"), Some(p.get("output.b")))?;
    Ok(g.softmax(logits)?)
}

/// The trained (or freshly initialized) denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    /// Length `T` of the schedule the model was trained with.
    schedule_steps: usize,
    params: BTreeMap<String, Tensor<f32>>,
    max_batch_vars: usize,
}

impl DenoiserModel {
    /// Glorot-uniform weights, zero biases, deterministic in `config.seed`.
    pub fn init(config: ModelConfig, schedule_steps: usize) -> Result<Self, GnnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if shape.len() == 2 {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let len = shape[0] * shape[1];
                    let data = (0..len).map(|_| rng.gen_range(-bound..=bound) as f32).collect();
                    Tensor::new(shape, data).expect("length matches shape")
                } else {
                    Tensor::zeros(shape)
                };
                (name.to_string(), tensor)
            })
            .collect();
        Ok(DenoiserModel {
            config,
            schedule_steps,
            params,
            max_batch_vars: DEFAULT_MAX_BATCH_VARS,
        })
    }

    /// Assembles a model from named tensors, checking every expected name and
    /// shape. Extra tensors are ignored.
    pub fn from_tensors(
        config: ModelConfig,
        schedule_steps: usize,
        tensors: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self, GnnError> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = tensors.get(name).ok_or_else(|| GnnError::MissingTensor(name.to_string()))?;
            if t.shape() != shape.as_slice() {
                return Err(GnnError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            params.insert(name.to_string(), t.clone());
        }
        Ok(DenoiserModel {
            config,
            schedule_steps,
            params,
            max_batch_vars: DEFAULT_MAX_BATCH_VARS,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule_steps(&self) -> usize {
        self.schedule_steps
    }

    pub fn set_schedule_steps(&mut self, steps: usize) {
        self.schedule_steps = steps;
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Caps the number of variables merged into one forward pass by
    /// [`Denoiser::denoise_batch`].
    pub fn with_max_batch_vars(mut self, max_vars: usize) -> Self {
        self.max_batch_vars = max_vars.max(1);
        self
    }

    /// Adds every parameter to `g` as a named differentiable leaf.
    pub fn register<T: Scalar>(&self, g: &mut Graph<T>) -> ParamNodes {
        ParamNodes(
            self.params
                .iter()
                .map(|(name, t)| (name.clone(), g.param(name.clone(), t.cast())))
                .collect(),
        )
    }

    /// Per-variable `[p(False), p(True)]`.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<[f64; 2]>, GnnError> {
        let mut g = Graph::<f32>::new();
        let p = self.register(&mut g);
        let out = forward_graph(&self.config, &mut g, &p, input)?;
        Ok(g.value(out)
            .data()
            .chunks(2)
            .map(|r| [r[0] as f64, r[1] as f64])
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GnnError> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GnnError> {
        Checkpoint::load(path)?.into_model()
    }

    /// Loads a checkpoint but validates it against `config` instead of the
    /// configuration recorded in its header.
    pub fn load_with_config(path: impl AsRef<Path>, config: ModelConfig) -> Result<Self, GnnError> {
        let ckpt = Checkpoint::load(path)?;
        DenoiserModel::from_tensors(config, ckpt.schedule_steps, &ckpt.tensors)
    }
}

fn to_state(rows: &[[f64; 2]]) -> CategoricalState {
    CategoricalState::from_weights(rows.to_vec())
}

impl Denoiser for DenoiserModel {
    fn denoise(&self, formula: &CnfFormula, x_t: &CategoricalState, alpha_bar: f64) -> Result<CategoricalState, DiffusionError> {
        let input = ModelInput::new(formula, x_t, alpha_bar).map_err(|e| DiffusionError::Denoiser(Box::new(e)))?;
        let rows = self.predict(&input).map_err(|e| DiffusionError::Denoiser(Box::new(e)))?;
        Ok(to_state(&rows))
    }

    fn denoise_batch(&self, requests: &[DenoiseRequest<'_>]) -> Result<Vec<CategoricalState>, DiffusionError> {
        let wrap = |e: GnnError| DiffusionError::Denoiser(Box::new(e));
        let mut out = Vec::with_capacity(requests.len());
        let mut chunk: Vec<ModelInput> = Vec::new();
        let mut chunk_vars = 0;
        let flush = |chunk: &mut Vec<ModelInput>, out: &mut Vec<CategoricalState>| -> Result<(), DiffusionError> {
            if chunk.is_empty() {
                return Ok(());
            }
            let merged = ModelInput::merge(chunk);
            let rows = self.predict(&merged).map_err(wrap)?;
            let mut offset = 0;
            for part in chunk.iter() {
                let n = part.num_vars();
                out.push(to_state(&rows[offset..offset + n]));
                offset += n;
            }
            chunk.clear();
            Ok(())
        };
        for r in requests {
            let input = ModelInput::new(r.formula, r.x_t, r.alpha_bar).map_err(wrap)?;
            if chunk_vars + input.num_vars() > self.max_batch_vars {
                flush(&mut chunk, &mut out)?;
                chunk_vars = 0;
            }
            chunk_vars += input.num_vars();
            chunk.push(input);
        }
        flush(&mut chunk, &mut out)?;
        Ok(out)
    }
}

/// Checkpoint contents: header fields plus named tensors. Besides model
/// parameters a checkpoint may carry extra records (optimizer moments and
/// counters written by the trainer).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub schedule_steps: usize,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &DenoiserModel) -> Self {
        Checkpoint {
            config: model.config,
            schedule_steps: model.schedule_steps,
            tensors: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<DenoiserModel, GnnError> {
        DenoiserModel::from_tensors(self.config, self.schedule_steps, &self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = [
            CHECKPOINT_VERSION,
            self.config.hidden_dim as u32,
            self.config.iterations as u32,
            self.schedule_steps as u32,
        ];
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GnnError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(GnnError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(GnnError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hidden_dim = read_u32(&mut r)? as usize;
        let iterations = read_u32(&mut r)? as usize;
        let schedule_steps = read_u32(&mut r)? as usize;
        let mut seed = [0u8; 8];
        read_exact(&mut r, &mut seed)?;
        let config = ModelConfig {
            hidden_dim,
            iterations,
            seed: u64::from_le_bytes(seed),
        };
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(GnnError::Truncated);
            }
            let name = String::from_utf8(r[..len].to_vec())
                .map_err(|_| GnnError::Malformed("tensor name is not UTF-8".into()))?;
            r = &r[len..];
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(GnnError::Malformed(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u32(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            if numel.checked_mul(4).is_none_or(|b| b > r.len()) {
                return Err(GnnError::Truncated);
            }
            let data = r[..numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[numel * 4..];
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(GnnError::Malformed(format!("duplicate tensor `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(GnnError::Malformed(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            config,
            schedule_steps,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GnnError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GnnError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), GnnError> {
    r.read_exact(buf).map_err(|_| GnnError::Truncated)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, GnnError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::Assignment;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            iterations: 3,
            seed: 5,
        }
    }

    fn formula() -> CnfFormula {
        CnfFormula::from_dimacs_clauses(4, &[vec![1, -2, 3], vec![-1, 4], vec![2, 3, -4], vec![-3]]).unwrap()
    }

    #[test]
    fn config_validation() {
        for (d, r) in [(0, 1), (3, 1), (1, 1), (4, 0)] {
            let c = ModelConfig {
                hidden_dim: d,
                iterations: r,
                seed: 0,
            };
            assert!(c.validate().is_err(), "d={d} r={r}");
        }
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn default_shapes_and_count() {
        let m = DenoiserModel::init(ModelConfig::default(), 128).unwrap();
        assert_eq!(m.params()["output.w"].shape(), &[64, 2]);
        // noise 4·32+32, input 34·64+64, query 65, v2c 2·4096,
        // clause mlp 129·64+64+4096+64, c2v 2·4096, var mlp 162·64+64+4096+64,
        // output 130.
        assert_eq!(m.num_parameters(), 160 + 2240 + 65 + 8192 + 12480 + 8192 + 14592 + 130);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = DenoiserModel::init(small(), 16).unwrap();
        let b = DenoiserModel::init(small(), 16).unwrap();
        assert_eq!(a, b);
        let c = DenoiserModel::init(ModelConfig { seed: 6, ..small() }, 16).unwrap();
        assert_ne!(a, c);
        let w = &a.params()["clause.mlp1.w"];
        let bound = (6.0f32 / (17 + 8) as f32).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.params()["var.mlp1.b"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_rows_are_distributions() {
        let m = DenoiserModel::init(small(), 16).unwrap();
        let f = formula();
        let x = CategoricalState::one_hot(&Assignment::new(vec![true, false, false, true]));
        let rows = m.predict(&ModelInput::new(&f, &x, 0.3).unwrap()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unsat_probability_is_zero_when_a_literal_is_certain() {
        let f = formula();
        let fg = f.factor_graph();
        let mut g = Graph::<f64>::new();
        // x1 certainly true satisfies clause 0; x3 certainly false satisfies clause 3.
        let q = g.constant(Tensor::matrix(4, 1, vec![1.0, 0.3, 0.0, 0.6]).unwrap());
        let u = unsat_probability(&mut g, q, &fg).unwrap();
        let u = g.value(u).data();
        assert_eq!(u[0], 0.0);
        assert_eq!(u[3], 0.0);
        // clause 1 = (¬x1 ∨ x4): unsatisfied iff x1 ∧ ¬x4.
        assert!((u[1] - 1.0 * 0.4).abs() < 1e-15);
        assert!(u.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batch_matches_individual_calls() {
        let m = DenoiserModel::init(small(), 16).unwrap().with_max_batch_vars(6);
        let f1 = formula();
        let f2 = CnfFormula::from_dimacs_clauses(3, &[vec![1, 2], vec![-2, -3]]).unwrap();
        let x1 = CategoricalState::one_hot(&Assignment::new(vec![true, true, false, false]));
        let x2 = CategoricalState::one_hot(&Assignment::new(vec![false, true, true]));
        let reqs = [
            DenoiseRequest { formula: &f1, x_t: &x1, alpha_bar: 0.2 },
            DenoiseRequest { formula: &f2, x_t: &x2, alpha_bar: 0.7 },
            DenoiseRequest { formula: &f2, x_t: &x2, alpha_bar: 0.1 },
        ];
        let batched = m.denoise_batch(&reqs).unwrap();
        for (r, b) in reqs.iter().zip(&batched) {
            let single = m.denoise(r.formula, r.x_t, r.alpha_bar).unwrap();
            for (p, q) in single.rows().iter().zip(b.rows()) {
                assert!((p[1] - q[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = DenoiserModel::init(small(), 32).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap().into_model().unwrap();
        assert_eq!(back, m);
        for (a, b) in back.params().values().zip(m.params().values()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(GnnError::BadMagic)));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_version),
            Err(GnnError::Version { found: 9, .. })
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(GnnError::Truncated)
        ));
    }

    #[test]
    fn loading_into_a_wider_config_names_the_tensor() {
        let ckpt = Checkpoint::from_model(&DenoiserModel::init(small(), 32).unwrap());
        let wider = ModelConfig { hidden_dim: 16, ..small() };
        let err = DenoiserModel::from_tensors(wider, 32, &ckpt.tensors).unwrap_err();
        match err {
            GnnError::ShapeMismatch { name, .. } => assert_eq!(name, "noise.w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
