//! CNF formulas, assignments, DIMACS and solution-file I/O, and the
//! variable/clause factor graph.
//!
//! Variables are 0-indexed everywhere inside the crate. The only places that
//! see 1-indexed DIMACS literals are the parsers and writers in this module
//! and [`Lit::from_dimacs`] / [`Lit::to_dimacs`].

use std::fmt;

use thiserror::Error;

/// A literal: a 0-indexed variable with a polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Lit {
    var: u32,
    positive: bool,
}

impl Lit {
    pub const fn new(var: u32, positive: bool) -> Self {
        Lit { var, positive }
    }

    pub const fn pos(var: u32) -> Self {
        Lit::new(var, true)
    }

    pub const fn neg(var: u32) -> Self {
        Lit::new(var, false)
    }

    /// Converts a signed DIMACS literal (1-indexed, nonzero).
    pub fn from_dimacs(lit: i64) -> Option<Self> {
        if lit == 0 || lit.unsigned_abs() > u32::MAX as u64 {
            return None;
        }
        Some(Lit::new((lit.unsigned_abs() - 1) as u32, lit > 0))
    }

    pub fn to_dimacs(self) -> i64 {
        let v = self.var as i64 + 1;
        if self.positive {
            v
        } else {
            -v
        }
    }

    pub fn var(self) -> usize {
        self.var as usize
    }

    pub fn is_positive(self) -> bool {
        self.positive
    }

    /// Whether this literal is true under the given variable value.
    pub fn agrees(self, value: bool) -> bool {
        self.positive == value
    }
}

impl std::ops::Not for Lit {
    type Output = Lit;

    fn not(self) -> Lit {
        Lit::new(self.var, !self.positive)
    }
}

impl fmt::Display for Lit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_dimacs())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormulaError {
    #[error("formula must have at least one variable")]
    NoVariables,
    #[error("clause {clause} is empty")]
    EmptyClause { clause: usize },
    #[error("literal out of range: {literal} with {num_vars} variables")]
    LiteralOutOfRange { literal: i64, num_vars: usize },
    #[error("literal 0 inside clause {clause}")]
    ZeroLiteral { clause: usize },
    #[error("clause {clause} is tautological in variable {var}")]
    Tautology { clause: usize, var: i64 },
    #[error("assignment has {found} values but the formula has {expected} variables")]
    LengthMismatch { expected: usize, found: usize },
}

/// A CNF formula over `num_vars` variables.
///
/// Construction canonicalizes each clause: repeated literals are dropped
/// (first occurrence kept, order otherwise preserved) and clauses containing
/// both polarities of a variable are rejected.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CnfFormula {
    num_vars: usize,
    clauses: Vec<Vec<Lit>>,
}

impl CnfFormula {
    pub fn new(num_vars: usize, clauses: Vec<Vec<Lit>>) -> Result<Self, FormulaError> {
        if num_vars == 0 {
            return Err(FormulaError::NoVariables);
        }
        let mut canonical = Vec::with_capacity(clauses.len());
        for (ci, clause) in clauses.into_iter().enumerate() {
            canonical.push(canonicalize_clause(ci, clause, num_vars)?);
        }
        Ok(CnfFormula {
            num_vars,
            clauses: canonical,
        })
    }

    /// Builds a formula from signed DIMACS literals.
    pub fn from_dimacs_clauses(num_vars: usize, clauses: &[Vec<i64>]) -> Result<Self, FormulaError> {
        let mut out = Vec::with_capacity(clauses.len());
        for (ci, clause) in clauses.iter().enumerate() {
            let mut lits = Vec::with_capacity(clause.len());
            for &l in clause {
                if l == 0 {
                    return Err(FormulaError::ZeroLiteral { clause: ci });
                }
                if l.unsigned_abs() as usize > num_vars {
                    return Err(FormulaError::LiteralOutOfRange {
                        literal: l,
                        num_vars,
                    });
                }
                lits.push(Lit::from_dimacs(l).expect("nonzero literal"));
            }
            out.push(lits);
        }
        CnfFormula::new(num_vars, out)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_clauses(&self) -> usize {
        self.clauses.len()
    }

    pub fn clauses(&self) -> &[Vec<Lit>] {
        &self.clauses
    }

    pub fn num_literals(&self) -> usize {
        self.clauses.iter().map(Vec::len).sum()
    }

    /// Counts clauses with no true literal under `a`.
    pub fn evaluate(&self, a: &Assignment) -> Result<Evaluation, FormulaError> {
        if a.len() != self.num_vars {
            return Err(FormulaError::LengthMismatch {
                expected: self.num_vars,
                found: a.len(),
            });
        }
        let unsat_count = self
            .clauses
            .iter()
            .filter(|c| !c.iter().any(|l| l.agrees(a.values[l.var()])))
            .count();
        Ok(Evaluation {
            satisfied: unsat_count == 0,
            unsat_count,
        })
    }

    /// Shorthand for `evaluate(a)?.satisfied` that treats a size mismatch as
    /// unsatisfied.
    pub fn is_satisfied_by(&self, a: &Assignment) -> bool {
        self.evaluate(a).map(|e| e.satisfied).unwrap_or(false)
    }

    pub fn factor_graph(&self) -> FactorGraph {
        build_factor_graph(self)
    }
}

fn canonicalize_clause(ci: usize, clause: Vec<Lit>, num_vars: usize) -> Result<Vec<Lit>, FormulaError> {
    if clause.is_empty() {
        return Err(FormulaError::EmptyClause { clause: ci });
    }
    let mut out: Vec<Lit> = Vec::with_capacity(clause.len());
    for lit in clause {
        if lit.var() >= num_vars {
            return Err(FormulaError::LiteralOutOfRange {
                literal: lit.to_dimacs(),
                num_vars,
            });
        }
        if out.contains(&lit) {
            continue;
        }
        if out.contains(&!lit) {
            return Err(FormulaError::Tautology {
                clause: ci,
                var: lit.var() as i64 + 1,
            });
        }
        out.push(lit);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Evaluation {
    pub satisfied: bool,
    pub unsat_count: usize,
}

/// A complete truth assignment, indexed by 0-based variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    values: Vec<bool>,
}

impl Assignment {
    pub fn new(values: Vec<bool>) -> Self {
        Assignment { values }
    }

    pub fn all_false(n: usize) -> Self {
        Assignment::new(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, var: usize) -> bool {
        self.values[var]
    }

    pub fn into_values(self) -> Vec<bool> {
        self.values
    }

    /// Number of positions where the two assignments agree.
    pub fn agreement(&self, other: &Assignment) -> usize {
        self.values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| a == b)
            .count()
    }

    /// Signed DIMACS literals, one per variable.
    pub fn to_dimacs_literals(&self) -> Vec<i64> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| if v { i as i64 + 1 } else { -(i as i64 + 1) })
            .collect()
    }
}

impl From<Vec<bool>> for Assignment {
    fn from(values: Vec<bool>) -> Self {
        Assignment::new(values)
    }
}

/// One variable occurrence in one clause.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub var: u32,
    pub clause: u32,
    pub positive: bool,
}

/// Bipartite variable/clause graph with polarity-typed edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorGraph {
    pub num_vars: usize,
    pub num_clauses: usize,
    pub edges: Vec<Edge>,
}

/// Edge endpoints split by polarity, as flat index arrays.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PolarityIndex {
    pub pos_vars: Vec<usize>,
    pub pos_clauses: Vec<usize>,
    pub neg_vars: Vec<usize>,
    pub neg_clauses: Vec<usize>,
}

impl FactorGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn polarity_index(&self) -> PolarityIndex {
        let mut idx = PolarityIndex::default();
        for e in &self.edges {
            if e.positive {
                idx.pos_vars.push(e.var as usize);
                idx.pos_clauses.push(e.clause as usize);
            } else {
                idx.neg_vars.push(e.var as usize);
                idx.neg_clauses.push(e.clause as usize);
            }
        }
        idx
    }

    /// Block-diagonal union: variable and clause indices of later graphs are
    /// offset by the sizes of the earlier ones.
    pub fn disjoint_union<'a>(graphs: impl IntoIterator<Item = &'a FactorGraph>) -> FactorGraph {
        let mut out = FactorGraph {
            num_vars: 0,
            num_clauses: 0,
            edges: Vec::new(),
        };
        for g in graphs {
            let (vo, co) = (out.num_vars as u32, out.num_clauses as u32);
            out.edges.extend(g.edges.iter().map(|e| Edge {
                var: e.var + vo,
                clause: e.clause + co,
                positive: e.positive,
            }));
            out.num_vars += g.num_vars;
            out.num_clauses += g.num_clauses;
        }
        out
    }
}

pub fn build_factor_graph(formula: &CnfFormula) -> FactorGraph {
    let mut edges = Vec::with_capacity(formula.num_literals());
    for (ci, clause) in formula.clauses.iter().enumerate() {
        for lit in clause {
            edges.push(Edge {
                var: lit.var,
                clause: ci as u32,
                positive: lit.positive,
            });
        }
    }
    FactorGraph {
        num_vars: formula.num_vars,
        num_clauses: formula.num_clauses(),
        edges,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    #[error("missing 'p cnf' header")]
    MissingHeader,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("duplicate header")]
    DuplicateHeader,
    #[error("invalid token '{0}'")]
    InvalidToken(String),
    #[error("literal out of range: {literal} with {num_vars} variables")]
    LiteralOutOfRange { literal: i64, num_vars: usize },
    #[error("unterminated final clause")]
    UnterminatedClause,
    #[error("header declares {declared} clauses but {found} were read")]
    ClauseCountMismatch { declared: usize, found: usize },
    #[error("empty clause")]
    EmptyClause,
    #[error("tautological clause in variable {0}")]
    Tautology(i64),
    #[error("solution line does not assign every variable exactly once")]
    IncompleteSolution,
    #[error("solution line is not terminated by 0")]
    UnterminatedSolution,
}

fn perr(line: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { line, kind }
}

/// Parses DIMACS CNF text.
///
/// Clauses may span several lines. Parsing stops at a line consisting of `%`
/// (the SATLIB trailer).
pub fn parse_dimacs(text: &str) -> Result<CnfFormula, ParseError> {
    let mut header: Option<(usize, usize)> = None;
    let mut clauses: Vec<Vec<Lit>> = Vec::new();
    let mut current: Vec<Lit> = Vec::new();
    let mut clause_line = 0;
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        if line.starts_with('%') {
            break;
        }
        if line.starts_with('p') {
            if header.is_some() {
                return Err(perr(line_no, ParseErrorKind::DuplicateHeader));
            }
            header = Some(parse_header(line).map_err(|k| perr(line_no, k))?);
            continue;
        }
        let (num_vars, _) = header.ok_or_else(|| perr(line_no, ParseErrorKind::MissingHeader))?;
        for tok in line.split_whitespace() {
            let lit: i64 = tok
                .parse()
                .map_err(|_| perr(line_no, ParseErrorKind::InvalidToken(tok.to_string())))?;
            if lit == 0 {
                let clause = std::mem::take(&mut current);
                let line = if clause.is_empty() { line_no } else { clause_line };
                let canonical = canonicalize_clause(clauses.len(), clause, num_vars).map_err(|e| {
                    perr(
                        line,
                        match e {
                            FormulaError::EmptyClause { .. } => ParseErrorKind::EmptyClause,
                            FormulaError::Tautology { var, .. } => ParseErrorKind::Tautology(var),
                            other => unreachable!("range checked before: {other}"),
                        },
                    )
                })?;
                clauses.push(canonical);
                continue;
            }
            if lit.unsigned_abs() as usize > num_vars {
                return Err(perr(
                    line_no,
                    ParseErrorKind::LiteralOutOfRange {
                        literal: lit,
                        num_vars,
                    },
                ));
            }
            if current.is_empty() {
                clause_line = line_no;
            }
            current.push(Lit::from_dimacs(lit).expect("nonzero"));
        }
    }

    let (num_vars, declared) = header.ok_or_else(|| perr(last_line.max(1), ParseErrorKind::MissingHeader))?;
    if !current.is_empty() {
        return Err(perr(clause_line, ParseErrorKind::UnterminatedClause));
    }
    if clauses.len() != declared {
        return Err(perr(
            last_line,
            ParseErrorKind::ClauseCountMismatch {
                declared,
                found: clauses.len(),
            },
        ));
    }
    Ok(CnfFormula { num_vars, clauses })
}

fn parse_header(line: &str) -> Result<(usize, usize), ParseErrorKind> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let bad = || ParseErrorKind::MalformedHeader(line.to_string());
    if parts.len() != 4 || parts[0] != "p" || parts[1] != "cnf" {
        return Err(bad());
    }
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    let m: usize = parts[3].parse().map_err(|_| bad())?;
    if n == 0 || n > u32::MAX as usize {
        return Err(bad());
    }
    Ok((n, m))
}

pub fn write_dimacs(formula: &CnfFormula) -> String {
    let mut out = format!("p cnf {} {}\n", formula.num_vars, formula.num_clauses());
    for clause in &formula.clauses {
        for lit in clause {
            out.push_str(&lit.to_dimacs().to_string());
            out.push(' ');
        }
        out.push_str("0\n");
    }
    out
}

/// Parses a solution file: one assignment per line as signed literals
/// covering every variable, terminated by `0`. Lines starting with `c` and
/// blank lines are skipped.
pub fn parse_solutions(text: &str, num_vars: usize) -> Result<Vec<Assignment>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        let mut values: Vec<Option<bool>> = vec![None; num_vars];
        let mut terminated = false;
        for tok in line.split_whitespace() {
            if terminated {
                return Err(perr(line_no, ParseErrorKind::InvalidToken(tok.to_string())));
            }
            let lit: i64 = tok
                .parse()
                .map_err(|_| perr(line_no, ParseErrorKind::InvalidToken(tok.to_string())))?;
            if lit == 0 {
                terminated = true;
                continue;
            }
            let var = lit.unsigned_abs() as usize;
            if var > num_vars {
                return Err(perr(
                    line_no,
                    ParseErrorKind::LiteralOutOfRange {
                        literal: lit,
                        num_vars,
                    },
                ));
            }
            if values[var - 1].replace(lit > 0).is_some() {
                return Err(perr(line_no, ParseErrorKind::IncompleteSolution));
            }
        }
        if !terminated {
            return Err(perr(line_no, ParseErrorKind::UnterminatedSolution));
        }
        let values: Option<Vec<bool>> = values.into_iter().collect();
        let values = values.ok_or_else(|| perr(line_no, ParseErrorKind::IncompleteSolution))?;
        out.push(Assignment::new(values));
    }
    Ok(out)
}

pub fn write_solution_line(a: &Assignment) -> String {
    let mut line = String::with_capacity(a.len() * 4 + 2);
    for lit in a.to_dimacs_literals() {
        line.push_str(&lit.to_string());
        line.push(' ');
    }
    line.push('0');
    line
}

pub fn write_solutions(solutions: &[Assignment]) -> String {
    let mut out = String::new();
    for s in solutions {
        out.push_str(&write_solution_line(s));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(n: usize, clauses: &[&[i64]]) -> CnfFormula {
        let c: Vec<Vec<i64>> = clauses.iter().map(|c| c.to_vec()).collect();
        CnfFormula::from_dimacs_clauses(n, &c).unwrap()
    }

    fn a(v: &[bool]) -> Assignment {
        Assignment::new(v.to_vec())
    }

    #[test]
    fn parse_simple() {
        let formula = parse_dimacs("p cnf 2 1\n1 -2 0").unwrap();
        assert_eq!(formula.num_vars(), 2);
        assert_eq!(formula.clauses(), &[vec![Lit::pos(0), Lit::neg(1)]]);
    }

    #[test]
    fn parse_dedups_literals() {
        let formula = parse_dimacs("c hi\np cnf 1 1\n1 1 0").unwrap();
        assert_eq!(formula.num_vars(), 1);
        assert_eq!(formula.clauses(), &[vec![Lit::pos(0)]]);
    }

    #[test]
    fn parse_rejects_out_of_range() {
        let err = parse_dimacs("p cnf 2 1\n3 0").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.to_string().contains("literal out of range"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_dimacs("c x\n1 2 0\n").unwrap_err();
        assert_eq!(err, perr(2, ParseErrorKind::MissingHeader));

        let err = parse_dimacs("p cnf x 1\n").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::MalformedHeader(_)));
        assert_eq!(err.line, 1);

        let err = parse_dimacs("p cnf 3 2\n1 2 0\n\n3 -1").unwrap_err();
        assert_eq!(err, perr(4, ParseErrorKind::UnterminatedClause));

        let err = parse_dimacs("p cnf 3 2\n1 2 0\n").unwrap_err();
        assert_eq!(
            err,
            perr(2, ParseErrorKind::ClauseCountMismatch { declared: 2, found: 1 })
        );

        let err = parse_dimacs("p cnf 3 1\n1 -1 0\n").unwrap_err();
        assert_eq!(err, perr(2, ParseErrorKind::Tautology(1)));

        let err = parse_dimacs("p cnf 3 1\n0\n").unwrap_err();
        assert_eq!(err, perr(2, ParseErrorKind::EmptyClause));

        let err = parse_dimacs("p cnf 3 1\n1 a 0\n").unwrap_err();
        assert_eq!(err, perr(2, ParseErrorKind::InvalidToken("a".into())));

        let err = parse_dimacs("p cnf 3 1\np cnf 3 1\n").unwrap_err();
        assert_eq!(err, perr(2, ParseErrorKind::DuplicateHeader));
    }

    #[test]
    fn parse_multiline_clause_and_trailer() {
        let formula = parse_dimacs("p cnf 3 2\n1\n2 0 -3\n0\n%\n0\n").unwrap();
        assert_eq!(formula.num_clauses(), 2);
        assert_eq!(formula.clauses()[0], vec![Lit::pos(0), Lit::pos(1)]);
    }

    #[test]
    fn write_examples() {
        assert_eq!(write_dimacs(&f(2, &[&[1, -2]])), "p cnf 2 1\n1 -2 0\n");
        assert_eq!(write_dimacs(&f(3, &[])), "p cnf 3 0\n");
    }

    #[test]
    fn evaluate_examples() {
        let e = f(2, &[&[1, -2]]).evaluate(&a(&[true, false])).unwrap();
        assert_eq!(e, Evaluation { satisfied: true, unsat_count: 0 });

        let contradiction = f(1, &[&[1], &[-1]]);
        for v in [true, false] {
            let e = contradiction.evaluate(&a(&[v])).unwrap();
            assert_eq!(e, Evaluation { satisfied: false, unsat_count: 1 });
        }

        let e = f(3, &[&[1, 2, 3]]).evaluate(&a(&[false, false, false])).unwrap();
        assert_eq!(e, Evaluation { satisfied: false, unsat_count: 1 });

        let err = f(3, &[&[1]]).evaluate(&a(&[true])).unwrap_err();
        assert_eq!(err, FormulaError::LengthMismatch { expected: 3, found: 1 });
    }

    #[test]
    fn factor_graph_examples() {
        let fg = build_factor_graph(&f(2, &[&[1, -2]]));
        assert_eq!(
            fg.edges,
            vec![
                Edge { var: 0, clause: 0, positive: true },
                Edge { var: 1, clause: 0, positive: false },
            ]
        );
        let fg = build_factor_graph(&f(4, &[&[1, 2, 3], &[-2, 3, -4]]));
        assert_eq!(fg.num_edges(), 6);
        let fg = build_factor_graph(&parse_dimacs("p cnf 1 1\n1 1 0").unwrap());
        assert_eq!(fg.num_edges(), 1);
    }

    #[test]
    fn disjoint_union_offsets_indices() {
        let g1 = build_factor_graph(&f(3, &[&[1, -2]]));
        let g2 = build_factor_graph(&f(5, &[&[1], &[-5, 2]]));
        let u = FactorGraph::disjoint_union([&g1, &g2]);
        assert_eq!((u.num_vars, u.num_clauses, u.num_edges()), (8, 3, 5));
        assert_eq!(u.edges[3], Edge { var: 7, clause: 2, positive: false });
    }

    #[test]
    fn constructor_rejects_invalid_clauses() {
        assert_eq!(
            CnfFormula::from_dimacs_clauses(2, &[vec![]]),
            Err(FormulaError::EmptyClause { clause: 0 })
        );
        assert_eq!(
            CnfFormula::from_dimacs_clauses(2, &[vec![1, 0]]),
            Err(FormulaError::ZeroLiteral { clause: 0 })
        );
        assert_eq!(
            CnfFormula::from_dimacs_clauses(2, &[vec![2, -2]]),
            Err(FormulaError::Tautology { clause: 0, var: 2 })
        );
        assert_eq!(CnfFormula::new(0, vec![]), Err(FormulaError::NoVariables));
    }

    #[test]
    fn solution_lines() {
        let text = "c produced elsewhere\n1 -2 3 0\n\n-1 -2 -3 0\n";
        let sols = parse_solutions(text, 3).unwrap();
        assert_eq!(sols, vec![a(&[true, false, true]), a(&[false, false, false])]);
        assert_eq!(write_solutions(&sols), "1 -2 3 0\n-1 -2 -3 0\n");

        let err = parse_solutions("1 2 0\n", 3).unwrap_err();
        assert_eq!(err, perr(1, ParseErrorKind::IncompleteSolution));
        let err = parse_solutions("1 -1 2 0\n", 2).unwrap_err();
        assert_eq!(err, perr(1, ParseErrorKind::IncompleteSolution));
        let err = parse_solutions("c\n1 2\n", 2).unwrap_err();
        assert_eq!(err, perr(2, ParseErrorKind::UnterminatedSolution));
    }
}
