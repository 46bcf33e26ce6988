//! Random 3-SAT and 3-Clique instance families.
//!
//! Every generator takes an explicit RNG. Datasets derive one stream per
//! instance with [`instance_rng`], so instance `i` of a dataset is the same
//! no matter how many instances are generated or in which order.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::formula::{Assignment, CnfFormula, Lit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("3-SAT needs at least 3 variables, got {0}")]
    TooFewVariables(usize),
    #[error("clause ratio {ratio} yields no clauses for {n} variables")]
    NoClauses { n: usize, ratio: f64 },
    #[error("{requested} distinct 3-clauses requested but only {available} exist over {n} variables")]
    TooManyClauses { n: usize, requested: usize, available: u64 },
    #[error("clique graphs need at least 4 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("invalid mode '{0}' (expected 'threshold' or 'ratio:R')")]
    InvalidMode(String),
}

/// Mixes a dataset seed and an instance index into an independent stream.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(0x5eed))))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Clause count at the 3-SAT satisfiability threshold,
/// `4.258 n + 58.26 n^(-2/3)` rounded to nearest with ties up.
pub fn threshold_clause_count(n: usize) -> Result<usize, GenError> {
    if n < 3 {
        return Err(GenError::TooFewVariables(n));
    }
    let n = n as f64;
    let raw = 4.258 * n + 58.26 * n.powf(-2.0 / 3.0);
    Ok((raw + 0.5).floor() as usize)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThreeSatMode {
    Threshold,
    FixedRatio(f64),
}

impl ThreeSatMode {
    pub fn clause_count(self, n: usize) -> Result<usize, GenError> {
        match self {
            ThreeSatMode::Threshold => threshold_clause_count(n),
            ThreeSatMode::FixedRatio(r) => {
                if n < 3 {
                    return Err(GenError::TooFewVariables(n));
                }
                if !(r * n as f64 >= 1.0) {
                    return Err(GenError::NoClauses { n, ratio: r });
                }
                Ok((r * n as f64).round() as usize)
            }
        }
    }
}

impl FromStr for ThreeSatMode {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "threshold" {
            return Ok(ThreeSatMode::Threshold);
        }
        s.strip_prefix("ratio:")
            .and_then(|r| r.parse::<f64>().ok())
            .filter(|r| r.is_finite() && *r > 0.0)
            .map(ThreeSatMode::FixedRatio)
            .ok_or_else(|| GenError::InvalidMode(s.to_string()))
    }
}

impl fmt::Display for ThreeSatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThreeSatMode::Threshold => write!(f, "threshold"),
            ThreeSatMode::FixedRatio(r) => write!(f, "ratio:{r}"),
        }
    }
}

/// Uniform random 3-SAT: three distinct variables per clause, independent
/// fair signs, no repeated clause.
pub fn gen_3sat<R: Rng + ?Sized>(n: usize, mode: ThreeSatMode, rng: &mut R) -> Result<CnfFormula, GenError> {
    let m = mode.clause_count(n)?;
    let available = (n as u64) * (n as u64 - 1) * (n as u64 - 2) / 6 * 8;
    if m as u64 > available {
        return Err(GenError::TooManyClauses {
            n,
            requested: m,
            available,
        });
    }
    let mut seen: HashSet<[Lit; 3]> = HashSet::with_capacity(m);
    let mut clauses = Vec::with_capacity(m);
    while clauses.len() < m {
        let mut vars = [0u32; 3];
        for i in 0..3 {
            vars[i] = loop {
                let v = rng.gen_range(0..n as u32);
                if !vars[..i].contains(&v) {
                    break v;
                }
            };
        }
        let clause = vars.map(|v| Lit::new(v, rng.gen_bool(0.5)));
        let mut key = clause;
        key.sort();
        if seen.insert(key) {
            clauses.push(clause.to_vec());
        }
    }
    Ok(CnfFormula::new(n, clauses).expect("generated clauses are valid"))
}

/// Edge probability `3^(1/3) / (v(v^2 - 3v + 2))^(1/3)` for which a few
/// triangles are expected in `G(v, p)`.
pub fn clique_edge_probability(v: usize) -> Result<f64, GenError> {
    if v < 4 {
        return Err(GenError::TooFewVertices(v));
    }
    let v = v as f64;
    // 3 / (v(v-1)(v-2)) is exact for moderate v, so perfect cubes stay exact.
    let p = (3.0 / (v * (v - 1.0) * (v - 2.0))).cbrt();
    Ok(p.min(1.0))
}

/// An undirected simple graph on vertices `1..=v`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    pub v: usize,
    pub p: f64,
    edges: BTreeSet<(usize, usize)>,
}

impl GraphSpec {
    /// Builds a graph from vertex pairs; pairs are normalized to `(min, max)`.
    ///
    /// # Panics
    /// On self-loops or endpoints outside `1..=v`.
    pub fn new(v: usize, p: f64, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let edges = pairs
            .into_iter()
            .map(|(a, b)| {
                assert!(a != b, "self-loop at {a}");
                assert!((1..=v).contains(&a) && (1..=v).contains(&b), "endpoint out of range");
                (a.min(b), a.max(b))
            })
            .collect();
        GraphSpec { v, p, edges }
    }

    pub fn complete(v: usize) -> Self {
        let pairs = (1..=v).flat_map(|a| (a + 1..=v).map(move |b| (a, b)));
        GraphSpec::new(v, 1.0, pairs)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Erdős–Rényi graph at [`clique_edge_probability`].
pub fn gen_er_graph<R: Rng + ?Sized>(v: usize, rng: &mut R) -> Result<GraphSpec, GenError> {
    let p = clique_edge_probability(v)?;
    Ok(gen_er_graph_with_p(v, p, rng))
}

pub fn gen_er_graph_with_p<R: Rng + ?Sized>(v: usize, p: f64, rng: &mut R) -> GraphSpec {
    let mut edges = BTreeSet::new();
    for a in 1..=v {
        for b in a + 1..=v {
            if rng.gen_bool(p) {
                edges.insert((a, b));
            }
        }
    }
    GraphSpec { v, p, edges }
}

/// Slot/vertex to variable table of the triangle encoding. Slots are
/// `1..=3`, vertices `1..=v`; variable `s(i, u)` is `(i-1)·v + (u-1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CliqueEncodingMap {
    pub v: usize,
}

impl CliqueEncodingMap {
    pub fn var(&self, slot: usize, vertex: usize) -> usize {
        debug_assert!((1..=3).contains(&slot) && (1..=self.v).contains(&vertex));
        (slot - 1) * self.v + (vertex - 1)
    }

    pub fn slot_vertex(&self, var: usize) -> (usize, usize) {
        (var / self.v + 1, var % self.v + 1)
    }

    pub fn num_vars(&self) -> usize {
        3 * self.v
    }
}

/// Encodes "pick an ordered triangle" as CNF: each slot picks exactly one
/// vertex, and any two slots pick distinct adjacent vertices.
pub fn encode_3clique(g: &GraphSpec) -> (CnfFormula, CliqueEncodingMap) {
    let map = CliqueEncodingMap { v: g.v };
    let s = |i, u| map.var(i, u) as u32;
    let mut clauses: Vec<Vec<Lit>> = Vec::new();
    for i in 1..=3 {
        clauses.push((1..=g.v).map(|u| Lit::pos(s(i, u))).collect());
    }
    for i in 1..=3 {
        for u in 1..=g.v {
            for w in u + 1..=g.v {
                clauses.push(vec![Lit::neg(s(i, u)), Lit::neg(s(i, w))]);
            }
        }
    }
    for i in 1..=3 {
        for j in i + 1..=3 {
            for u in 1..=g.v {
                for w in 1..=g.v {
                    if u == w || !g.has_edge(u, w) {
                        clauses.push(vec![Lit::neg(s(i, u)), Lit::neg(s(j, w))]);
                    }
                }
            }
        }
    }
    let formula = CnfFormula::new(map.num_vars(), clauses).expect("encoding clauses are valid");
    (formula, map)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("assignment has {found} values, encoding has {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("slot {0} has no vertex selected")]
    EmptySlot(usize),
    #[error("slot {slot} selects several vertices ({first} and {second})")]
    AmbiguousSlot { slot: usize, first: usize, second: usize },
}

/// Reads back the vertex chosen for each slot.
pub fn decode_clique(map: &CliqueEncodingMap, a: &Assignment) -> Result<[usize; 3], DecodeError> {
    if a.len() != map.num_vars() {
        return Err(DecodeError::LengthMismatch {
            expected: map.num_vars(),
            found: a.len(),
        });
    }
    let mut triple = [0; 3];
    for (slot, out) in (1..=3).zip(triple.iter_mut()) {
        let mut chosen = None;
        for u in 1..=map.v {
            if a.get(map.var(slot, u)) {
                if let Some(first) = chosen {
                    return Err(DecodeError::AmbiguousSlot {
                        slot,
                        first,
                        second: u,
                    });
                }
                chosen = Some(u);
            }
        }
        *out = chosen.ok_or(DecodeError::EmptySlot(slot))?;
    }
    Ok(triple)
}
