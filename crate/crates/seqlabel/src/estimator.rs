//! Closed-form recovery of source accuracy and correlation tables from
//! agreement statistics, with no access to true labels.
//!
//! The estimator works on agreement variables `a = prod(lambda) * y`: products
//! of observed votes with one latent label. Pairwise products of agreement
//! variables are fully observable (the latent labels square away), and for
//! conditionally independent voters the expectation of a product factorizes,
//! so log-magnitudes of the unobservable `E[a]` satisfy a linear system built
//! from observable pair statistics. Signs follow by propagating the signs of
//! those pair statistics, and each recovered `E[a]` pins down a joint
//! vote/label distribution through a parity linear map that is inverted
//! directly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::model::{find_independent_partners, LabelModel, TieCell};
use crate::moments::{pool_stats, ProductOracle, ProductRequest, ProductStats};

/// Largest supported variable count for parity matrices; 2^t doubles per step.
pub const T_MAX: usize = 12;
/// Floor applied to near-zero agreement magnitudes before taking logarithms.
pub const EPS_B: f64 = 1e-6;
/// Probability mass that may be clipped away silently when inverting a
/// parity system; anything larger is surfaced as a warning.
pub const TOL_CLAMP: f64 = 0.05;
/// Allowed drift between a correlation table's marginals and the accuracy
/// tables of its two sources; three times this is a hard failure.
pub const TOL_MARG: f64 = 0.05;
/// Recovered agreement magnitudes are capped strictly below one.
pub const MAG_CAP: f64 = 1.0 - 1e-9;

/// Parity matrix of order `2^t`: entry `(i, j)` is one when `popcount(i & j)`
/// is even, zero otherwise. Row `U`, applied to a joint sign distribution,
/// yields the probability that the product of the variables in subset `U`
/// is positive.
pub fn build_b(t: usize) -> Result<DMatrix<f64>> {
    if t > T_MAX {
        return Err(Error::SizeExceeded(format!(
            "parity system over {t} variables needs a {0}x{0} matrix (limit t = {T_MAX})",
            1usize << t
        )));
    }
    let n = 1usize << t;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Spectral norm of the inverse parity matrix, `1 / sigma_min(B_t)`.
pub fn b_inverse_spectral_norm(t: usize) -> Result<f64> {
    let b = build_b(t)?;
    let svd = b.svd(false, false);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        return Err(Error::NotInvertible(format!(
            "parity matrix of order {} is singular",
            1usize << t
        )));
    }
    Ok(1.0 / smin)
}

/// One observed pair statistic: the mean product of the agreement variables
/// behind columns `a` and `b` (`a == b` encodes a pooled self-pair whose
/// population value is the squared column magnitude).
#[derive(Debug, Clone)]
pub struct AgreementRow {
    pub a: usize,
    pub b: usize,
    pub value: f64,
    pub support: u64,
}

/// A least-squares system over log agreement magnitudes.
#[derive(Debug, Clone)]
pub struct AgreementSystem {
    pub labels: Vec<String>,
    pub rows: Vec<AgreementRow>,
    /// Column whose sign is resolved by pooling its rows instead of strict
    /// propagation. Product-vote columns go here: their mean agreement scales
    /// with the label-class imbalance, so it can sit at sampling-noise level
    /// even when every underlying source is healthy, and a per-row sign
    /// consistency check would reject ordinary noise.
    pub pooled_query: Option<usize>,
}

/// Recovered agreement expectations for every column of a system.
#[derive(Debug, Clone)]
pub struct AgreementSolution {
    pub magnitudes: Vec<f64>,
    pub signs: Vec<f64>,
    /// Spectral norm of the pseudo-inverse of the design matrix; large values
    /// flag ill-conditioned pooling structures.
    pub pinv_norm: f64,
}

impl AgreementSolution {
    pub fn expectation(&self, column: usize) -> f64 {
        self.signs[column] * self.magnitudes[column]
    }
}

/// Solves a pair-statistics system for per-column agreement expectations:
/// log-magnitudes by linear least squares, signs by propagation along rows
/// whose magnitudes were not floored. A `pooled_query` column is excluded
/// from propagation and verification; its sign is the majority direction of
/// its own rows after orienting each by the partner column's sign.
pub fn solve_agreements(
    sys: &AgreementSystem,
    warnings: &mut Vec<Warning>,
) -> Result<AgreementSolution> {
    let n = sys.labels.len();
    if sys.rows.is_empty() {
        return Err(Error::InsufficientData(
            "agreement system has no observed pair statistics".into(),
        ));
    }
    let mut m = DMatrix::zeros(sys.rows.len(), n);
    let mut q = DVector::zeros(sys.rows.len());
    let mut clamped = vec![false; sys.rows.len()];
    for (i, row) in sys.rows.iter().enumerate() {
        if row.a == row.b {
            m[(i, row.a)] = 2.0;
        } else {
            m[(i, row.a)] = 1.0;
            m[(i, row.b)] = 1.0;
        }
        let mut mag = row.value.abs();
        if mag < EPS_B {
            clamped[i] = true;
            warnings.push(Warning::NearZeroAgreement {
                context: format!(
                    "pair ({}, {})",
                    sys.labels[row.a], sys.labels[row.b]
                ),
                value: row.value,
            });
            mag = EPS_B;
        }
        q[i] = (mag * mag).ln();
    }
    let svd = m.clone().svd(true, true);
    let rank = svd.rank(1e-9);
    if rank < n {
        return Err(Error::NotInvertible(format!(
            "agreement system over columns [{}] has rank {rank} < {n}; the pooled pair \
             statistics cannot separate all magnitudes",
            sys.labels.join(", ")
        )));
    }
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .filter(|s| *s > 1e-9)
        .fold(f64::INFINITY, f64::min);
    let pinv_norm = 1.0 / smin;
    let ell = svd
        .solve(&q, 1e-12)
        .map_err(|e| Error::NotInvertible(format!("log least squares failed: {e}")))?;
    let magnitudes: Vec<f64> = ell.iter().map(|l| (l / 2.0).exp().min(MAG_CAP)).collect();

    // Sign graph over distinct-column rows with trustworthy magnitudes.
    let pooled = sys.pooled_query;
    let mut signs = vec![0.0f64; n];
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in sys.rows.iter().enumerate() {
        let touches_pooled = Some(row.a) == pooled || Some(row.b) == pooled;
        if row.a != row.b && !clamped[i] && !touches_pooled {
            let s = if row.value >= 0.0 { 1.0 } else { -1.0 };
            adj[row.a].push((row.b, s));
            adj[row.b].push((row.a, s));
        }
    }
    for start in 0..n {
        if signs[start] != 0.0 || Some(start) == pooled {
            continue;
        }
        signs[start] = 1.0;
        let mut queue = vec![start];
        while let Some(u) = queue.pop() {
            for &(v, s) in &adj[u] {
                if signs[v] == 0.0 {
                    signs[v] = signs[u] * s;
                    queue.push(v);
                }
            }
        }
    }
    if let Some(qc) = pooled {
        let mut vote = 0.0;
        for (i, row) in sys.rows.iter().enumerate() {
            if clamped[i] || row.a == row.b {
                continue;
            }
            let other = match (row.a == qc, row.b == qc) {
                (true, false) => row.b,
                (false, true) => row.a,
                _ => continue,
            };
            vote += row.value * signs[other];
        }
        signs[qc] = if vote < 0.0 { -1.0 } else { 1.0 };
    }
    for (i, row) in sys.rows.iter().enumerate() {
        if row.a == row.b
            || clamped[i]
            || Some(row.a) == pooled
            || Some(row.b) == pooled
        {
            continue;
        }
        let expected = if row.value >= 0.0 { 1.0 } else { -1.0 };
        if signs[row.a] * signs[row.b] != expected {
            return Err(Error::AssumptionViolation(format!(
                "agreement signs are inconsistent: pair ({}, {}) has mean product {:+.6}, \
                 which contradicts the signs implied by the other pairs",
                sys.labels[row.a], sys.labels[row.b], row.value
            )));
        }
    }
    let total: f64 = signs
        .iter()
        .zip(&magnitudes)
        .map(|(s, m)| s * m)
        .sum();
    if total.abs() < 1e-12 {
        return Err(Error::AssumptionViolation(
            "aggregate agreement direction is ambiguous: the signed magnitudes cancel, so \
             neither global sign assignment is better than its mirror"
                .into(),
        ));
    }
    if total < 0.0 {
        for s in &mut signs {
            *s = -*s;
        }
    }
    Ok(AgreementSolution {
        magnitudes,
        signs,
        pinv_norm,
    })
}

fn solve_parity(t: usize, r: &[f64]) -> Result<Vec<f64>> {
    let b = build_b(t)?;
    let rhs = DVector::from_column_slice(r);
    let e = b
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotInvertible("parity matrix failed to factorize".into()))?;
    Ok(e.iter().cloned().collect())
}

fn clip_and_normalize(e: &mut [f64], context: &str, warnings: &mut Vec<Warning>) -> Result<()> {
    let mut excess = 0.0;
    for v in e.iter_mut() {
        if !v.is_finite() {
            return Err(Error::NotInvertible(format!(
                "{context}: joint distribution entry is not finite"
            )));
        }
        if *v < 0.0 {
            excess += -*v;
            *v = 0.0;
        } else if *v > 1.0 {
            excess += *v - 1.0;
            *v = 1.0;
        }
    }
    let total: f64 = e.iter().sum();
    if total <= 0.0 {
        return Err(Error::NotInvertible(format!(
            "{context}: joint distribution collapsed to zero mass"
        )));
    }
    for v in e.iter_mut() {
        *v /= total;
    }
    if excess > TOL_CLAMP {
        warnings.push(Warning::Clamped {
            context: context.to_string(),
            value: total,
            excess,
        });
    }
    Ok(())
}

/// Recovers a voting-conditional accuracy table `P(vote = z | y = w)` from
/// the vote mean, the label marginal, and the recovered agreement
/// probability `rho = P(vote * y = +1)`.
pub fn mu_from_joint(
    p_lambda: f64,
    p_y: f64,
    rho: f64,
    context: &str,
    warnings: &mut Vec<Warning>,
) -> Result<[[f64; 2]; 2]> {
    let r = [1.0, p_lambda, p_y, rho];
    let mut e = solve_parity(2, &r)?;
    clip_and_normalize(&mut e, context, warnings)?;
    let p_w = [p_y, 1.0 - p_y];
    let mut table = [[0.0f64; 2]; 2];
    for w in 0..2 {
        let mut col = [e[2 * w], e[1 + 2 * w]];
        let mass: f64 = col[0] + col[1];
        if mass <= 0.0 || p_w[w] <= 0.0 {
            warnings.push(Warning::Clamped {
                context: format!("{context}: no mass on label class {}", if w == 0 { "+1" } else { "-1" }),
                value: mass,
                excess: 0.5,
            });
            col = [0.5, 0.5];
        } else {
            col[0] /= mass;
            col[1] /= mass;
        }
        table[0][w] = col[0];
        table[1][w] = col[1];
    }
    Ok(table)
}

/// Agreement probability a fitted accuracy table implies for its own task:
/// `P(vote * y = +1 | vote != 0)`.
pub fn implied_agreement(mu: &[[f64; 2]; 2], p_y: f64) -> f64 {
    mu[0][0] * p_y + mu[1][1] * (1.0 - p_y)
}

/// Inputs for recovering one pairwise correlation table.
#[derive(Debug, Clone, Copy)]
pub struct PairJoints {
    /// `P(lambda_j = +1 | votes)`.
    pub p_j: f64,
    /// `P(lambda_k = +1 | votes)`.
    pub p_k: f64,
    /// Marginal of the shared task's label.
    pub p_y: f64,
    /// `P(lambda_j * lambda_k = +1 | both vote)`.
    pub p_prod: f64,
    /// Single-source agreement probabilities implied by the fitted tables.
    pub rho_j: f64,
    pub rho_k: f64,
    /// Composite agreement probability `P(lambda_j * lambda_k * y = +1)`.
    pub rho_jk: f64,
}

/// Recovers a voting-conditional correlation table
/// `phi[z1][z2][w] = P(lambda_j = z1, lambda_k = z2 | y = w)` by inverting
/// the parity system over `(lambda_j, lambda_k, y, y)`. The duplicated label
/// variable gives every subset of the four variables an observable or
/// already-recovered product probability.
pub fn phi_from_joints(
    joints: &PairJoints,
    context: &str,
    warnings: &mut Vec<Warning>,
) -> Result<[[[f64; 2]; 2]; 2]> {
    let mut r = [0.0f64; 16];
    for (mask, slot) in r.iter_mut().enumerate() {
        let lam = mask & 3;
        let ys = (mask >> 2 & 1) + (mask >> 3 & 1);
        *slot = match (lam, ys) {
            (0, 0) => 1.0,
            (0, 1) => joints.p_y,
            (0, 2) => 1.0,
            (1, 0) | (1, 2) => joints.p_j,
            (2, 0) | (2, 2) => joints.p_k,
            (3, 0) | (3, 2) => joints.p_prod,
            (1, 1) => joints.rho_j,
            (2, 1) => joints.rho_k,
            (3, 1) => joints.rho_jk,
            _ => unreachable!(),
        };
    }
    let mut e = solve_parity(4, &r)?;
    clip_and_normalize(&mut e, context, warnings)?;
    let p_w = [joints.p_y, 1.0 - joints.p_y];
    let mut phi = [[[0.0f64; 2]; 2]; 2];
    for (idx, mass) in e.iter().enumerate() {
        let y1 = idx >> 2 & 1;
        let y2 = idx >> 3 & 1;
        if y1 != y2 {
            continue;
        }
        let z1 = idx & 1;
        let z2 = idx >> 1 & 1;
        phi[z1][z2][y1] = *mass;
    }
    for w in 0..2 {
        let mass: f64 = (0..2)
            .flat_map(|z1| (0..2).map(move |z2| (z1, z2)))
            .map(|(z1, z2)| phi[z1][z2][w])
            .sum();
        if mass <= 0.0 || p_w[w] <= 0.0 {
            return Err(Error::NotInvertible(format!(
                "{context}: correlation table has no mass on label class {}",
                if w == 0 { "+1" } else { "-1" }
            )));
        }
        for z1 in 0..2 {
            for z2 in 0..2 {
                phi[z1][z2][w] /= mass;
            }
        }
    }
    Ok(phi)
}

fn marginal_deviation(
    phi: &[[[f64; 2]; 2]; 2],
    mu_j: &[[f64; 2]; 2],
    mu_k: &[[f64; 2]; 2],
) -> f64 {
    let mut dev = 0.0f64;
    for w in 0..2 {
        for z1 in 0..2 {
            let row: f64 = phi[z1][0][w] + phi[z1][1][w];
            dev = dev.max((row - mu_j[z1][w]).abs());
        }
        for z2 in 0..2 {
            let col: f64 = phi[0][z2][w] + phi[1][z2][w];
            dev = dev.max((col - mu_k[z2][w]).abs());
        }
    }
    dev
}

fn ipf_to_marginals(phi: &mut [[[f64; 2]; 2]; 2], mu_j: &[[f64; 2]; 2], mu_k: &[[f64; 2]; 2]) {
    for w in 0..2 {
        for _ in 0..100 {
            for z1 in 0..2 {
                let s = phi[z1][0][w] + phi[z1][1][w];
                if s > 1e-300 {
                    let f = mu_j[z1][w] / s;
                    phi[z1][0][w] *= f;
                    phi[z1][1][w] *= f;
                }
            }
            for z2 in 0..2 {
                let s = phi[0][z2][w] + phi[1][z2][w];
                if s > 1e-300 {
                    let f = mu_k[z2][w] / s;
                    phi[0][z2][w] *= f;
                    phi[1][z2][w] *= f;
                }
            }
        }
    }
}

/// Fitted parameters for one tied accuracy cell. `table[z][w]` stores the
/// full conditional `P(vote = z | y = w)` including the abstention scaling,
/// so each column plus the abstain rate sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub group: String,
    pub offset: usize,
    pub members: Vec<(usize, usize)>,
    pub table: [[f64; 2]; 2],
    pub abstain: f64,
}

impl CellParams {
    /// The voting-conditional table `P(vote = z | y = w, vote != 0)`.
    pub fn conditional(&self) -> [[f64; 2]; 2] {
        let c = 1.0 - self.abstain;
        if c <= 0.0 {
            return [[0.5, 0.5], [0.5, 0.5]];
        }
        let mut t = self.table;
        for row in &mut t {
            for v in row {
                *v /= c;
            }
        }
        t
    }
}

/// Fitted correlation table for one edge on one shared task, scaled by both
/// sources' voting probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeParams {
    pub j: usize,
    pub k: usize,
    pub task: usize,
    pub table: [[[f64; 2]; 2]; 2],
}

impl EdgeParams {
    /// The voting-conditional joint table.
    pub fn conditional(&self, abstain_j: f64, abstain_k: f64) -> [[[f64; 2]; 2]; 2] {
        let c = (1.0 - abstain_j) * (1.0 - abstain_k);
        if c <= 0.0 {
            return [[[0.25, 0.25], [0.25, 0.25]], [[0.25, 0.25], [0.25, 0.25]]];
        }
        let mut t = self.table;
        for plane in &mut t {
            for row in plane {
                for v in row {
                    *v /= c;
                }
            }
        }
        t
    }
}

/// Numeric health indicators recorded alongside fitted parameters.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    /// Smallest recovered agreement magnitude; estimation error scales with
    /// its inverse square.
    pub b_min: f64,
    /// Largest pseudo-inverse norm across solved agreement systems.
    pub pinv_norm_max: f64,
    #[serde(default)]
    pub warnings: Vec<Warning>,
}

/// Complete fitted parameter set: accuracy tables, correlation tables,
/// abstention rates, and fit diagnostics.
#[derive(Debug, Clone)]
pub struct LabelModelParams {
    pub cells: Vec<CellParams>,
    pub edges: Vec<EdgeParams>,
    pub diagnostics: Diagnostics,
}

impl LabelModelParams {
    /// Locates the cell that parameterizes `(source, task)`.
    pub fn cell_for(&self, source: usize, task: usize) -> Option<&CellParams> {
        self.cells
            .iter()
            .find(|c| c.members.contains(&(source, task)))
    }

    pub fn edge_for(&self, j: usize, k: usize, task: usize) -> Option<&EdgeParams> {
        let (a, b) = if j <= k { (j, k) } else { (k, j) };
        self.edges
            .iter()
            .find(|e| e.j == a && e.k == b && e.task == task)
    }

    /// Stacks every member's full accuracy table into one flat vector in
    /// deterministic `(source, task, z, w)` order, for parameter-distance
    /// metrics.
    pub fn stacked_mu(&self) -> Vec<f64> {
        let mut entries: Vec<((usize, usize), [f64; 4])> = Vec::new();
        for cell in &self.cells {
            for &(j, t) in &cell.members {
                entries.push((
                    (j, t),
                    [
                        cell.table[0][0],
                        cell.table[0][1],
                        cell.table[1][0],
                        cell.table[1][1],
                    ],
                ));
            }
        }
        entries.sort_by_key(|(k, _)| *k);
        entries.into_iter().flat_map(|(_, v)| v).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file: ParamsFile = self.into();
        let mut out = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Parse(format!("could not serialize parameters: {e}")))?;
        out.push('\n');
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LabelModelParams> {
        let text = fs::read_to_string(path)?;
        let file: ParamsFile = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("invalid parameter file: {e}")))?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct MuEntry {
    group: String,
    offset: usize,
    members: Vec<MemberRef>,
    /// Rows are vote signs (+1 then -1), columns label signs (+1 then -1).
    table: [[f64; 2]; 2],
}

#[derive(Serialize, Deserialize)]
struct MemberRef {
    source: usize,
    task: usize,
}

#[derive(Serialize, Deserialize)]
struct PhiEntry {
    source_a: usize,
    source_b: usize,
    task: usize,
    table: [[[f64; 2]; 2]; 2],
}

#[derive(Serialize, Deserialize)]
struct AbstainEntry {
    group: String,
    offset: usize,
    rate: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    mu: Vec<MuEntry>,
    phi: Vec<PhiEntry>,
    abstain: Vec<AbstainEntry>,
    diagnostics: Diagnostics,
}

impl From<&LabelModelParams> for ParamsFile {
    fn from(p: &LabelModelParams) -> ParamsFile {
        ParamsFile {
            mu: p
                .cells
                .iter()
                .map(|c| MuEntry {
                    group: c.group.clone(),
                    offset: c.offset,
                    members: c
                        .members
                        .iter()
                        .map(|&(j, t)| MemberRef {
                            source: j + 1,
                            task: t + 1,
                        })
                        .collect(),
                    table: c.table,
                })
                .collect(),
            phi: p
                .edges
                .iter()
                .map(|e| PhiEntry {
                    source_a: e.j + 1,
                    source_b: e.k + 1,
                    task: e.task + 1,
                    table: e.table,
                })
                .collect(),
            abstain: p
                .cells
                .iter()
                .map(|c| AbstainEntry {
                    group: c.group.clone(),
                    offset: c.offset,
                    rate: c.abstain,
                })
                .collect(),
            diagnostics: p.diagnostics.clone(),
        }
    }
}

impl TryFrom<ParamsFile> for LabelModelParams {
    type Error = Error;

    fn try_from(f: ParamsFile) -> Result<LabelModelParams> {
        let mut abstains: BTreeMap<(String, usize), f64> = BTreeMap::new();
        for a in &f.abstain {
            abstains.insert((a.group.clone(), a.offset), a.rate);
        }
        let mut cells = Vec::with_capacity(f.mu.len());
        for m in f.mu {
            let abstain = *abstains.get(&(m.group.clone(), m.offset)).ok_or_else(|| {
                Error::Validate(format!(
                    "parameter file lists no abstain rate for cell ({}, {})",
                    m.group, m.offset
                ))
            })?;
            if !(0.0..=1.0).contains(&abstain) {
                return Err(Error::Validate(format!(
                    "abstain rate {abstain} for cell ({}, {}) is outside [0, 1]",
                    m.group, m.offset
                )));
            }
            for w in 0..2 {
                let col = m.table[0][w] + m.table[1][w] + abstain;
                if (col - 1.0).abs() > 1e-9 {
                    return Err(Error::Validate(format!(
                        "accuracy column for cell ({}, {}) sums to {col} with abstention \
                         included; expected 1",
                        m.group, m.offset
                    )));
                }
            }
            let members: Vec<(usize, usize)> = m
                .members
                .iter()
                .map(|r| {
                    if r.source == 0 || r.task == 0 {
                        Err(Error::Validate(
                            "parameter file uses 1-based source and task ids".into(),
                        ))
                    } else {
                        Ok((r.source - 1, r.task - 1))
                    }
                })
                .collect::<Result<_>>()?;
            cells.push(CellParams {
                group: m.group,
                offset: m.offset,
                members,
                table: m.table,
                abstain,
            });
        }
        let edges = f
            .phi
            .into_iter()
            .map(|e| {
                if e.source_a == 0 || e.source_b == 0 || e.task == 0 {
                    return Err(Error::Validate(
                        "parameter file uses 1-based source and task ids".into(),
                    ));
                }
                Ok(EdgeParams {
                    j: e.source_a - 1,
                    k: e.source_b - 1,
                    task: e.task - 1,
                    table: e.table,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelModelParams {
            cells,
            edges,
            diagnostics: f.diagnostics,
        })
    }
}

/// Estimation options shared by the fitting entry points.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Pool statistics across tie-group members before solving. Disabling
    /// this fits every (source, task) pair separately.
    pub tying: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tying: true }
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum ColKey {
    Cell(usize),
    Composite { j: usize, k: usize, task: usize },
}

impl fmt::Display for ColKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColKey::Cell(c) => write!(f, "cell {c}"),
            ColKey::Composite { j, k, task } => write!(f, "pair ({j}, {k}) on task {task}"),
        }
    }
}

struct Plan {
    requests: Vec<ProductRequest>,
    index: BTreeMap<Vec<(usize, usize)>, usize>,
}

impl Plan {
    fn new() -> Self {
        Self {
            requests: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn req(&mut self, terms: Vec<(usize, usize)>) -> usize {
        let request = ProductRequest::new(terms);
        let key = request.key();
        *self.index.entry(key).or_insert_with(|| {
            self.requests.push(request);
            self.requests.len() - 1
        })
    }
}

struct SystemPlan {
    columns: Vec<ColKey>,
    query: usize,
    rows: BTreeMap<(usize, usize), Vec<usize>>,
}

impl SystemPlan {
    fn new(query: ColKey) -> Self {
        Self {
            columns: vec![query],
            query: 0,
            rows: BTreeMap::new(),
        }
    }

    fn column(&mut self, key: ColKey) -> usize {
        if let Some(pos) = self.columns.iter().position(|c| *c == key) {
            pos
        } else {
            self.columns.push(key);
            self.columns.len() - 1
        }
    }

    fn add_row(&mut self, a: usize, b: usize, req: usize) {
        let key = (a.min(b), a.max(b));
        let reqs = self.rows.entry(key).or_default();
        if !reqs.contains(&req) {
            reqs.push(req);
        }
    }

    fn build(&self, stats: &[ProductStats]) -> Result<AgreementSystem> {
        let labels = self.columns.iter().map(|c| c.to_string()).collect();
        let mut rows = Vec::with_capacity(self.rows.len());
        for (&(a, b), reqs) in &self.rows {
            let parts: Vec<ProductStats> = reqs.iter().map(|&r| stats[r]).collect();
            let pooled = pool_stats(
                &parts,
                &format!("pair ({}, {})", self.columns[a], self.columns[b]),
            )?;
            rows.push(AgreementRow {
                a,
                b,
                value: pooled.value,
                support: pooled.support,
            });
        }
        Ok(AgreementSystem {
            labels,
            rows,
            pooled_query: None,
        })
    }
}

struct CellPlan {
    cell: usize,
    member_means: Vec<usize>,
    system: SystemPlan,
}

struct EdgePlan {
    j: usize,
    k: usize,
    task: usize,
    mean_j: usize,
    mean_k: usize,
    pair: usize,
    system: SystemPlan,
}

fn untied_cells(model: &LabelModel) -> Vec<TieCell> {
    let mut cells = Vec::new();
    for source in model.sources() {
        for (slot, &task) in source.coverage.iter().enumerate() {
            cells.push(TieCell {
                group: format!("_solo_{:04}", source.id),
                offset: slot,
                members: vec![(source.id, task)],
            });
        }
    }
    cells
}

/// Fits accuracy and correlation tables from agreement statistics alone.
///
/// Every tied cell gets one agreement system whose columns are the cells
/// reachable through its members' independent partners; statistics that are
/// equal under tying are pooled support-weighted before the solve. Edges get
/// composite systems whose query column is the product of the two correlated
/// votes.
pub fn fit_closed_form(
    model: &LabelModel,
    oracle: &dyn ProductOracle,
    opts: &FitOptions,
) -> Result<LabelModelParams> {
    let report = crate::model::validate_model(model);
    if !report.ok {
        let details: Vec<String> = report
            .findings
            .iter()
            .map(|f| format!("{}: {}", f.assumption, f.detail))
            .collect();
        return Err(Error::Validate(format!(
            "model violates estimability assumptions: {}",
            details.join("; ")
        )));
    }
    let mut warnings: Vec<Warning> = report.warnings;

    let cells: Vec<TieCell> = if opts.tying {
        model.cells().to_vec()
    } else {
        untied_cells(model)
    };
    let mut cell_key: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (c, cell) in cells.iter().enumerate() {
        for &(j, task) in &cell.members {
            cell_key.insert((j, task), c);
        }
    }

    let layout = model.layout();
    let sources = model.sources();
    let graph = model.graph();
    let mut plan = Plan::new();

    let mut cell_plans = Vec::with_capacity(cells.len());
    for (c, cell) in cells.iter().enumerate() {
        let mut system = SystemPlan::new(ColKey::Cell(c));
        let mut member_means = Vec::with_capacity(cell.members.len());
        for &(j, task) in &cell.members {
            let slot = sources[j].slot_of(task).expect("member covers its task");
            member_means.push(plan.req(vec![(j, slot)]));
            let partners = find_independent_partners(layout, sources, graph, &[j], task)?;
            let on_task: Vec<_> = partners.iter().filter(|p| p.task == task).cloned().collect();
            let chosen = if on_task.len() >= 2 { on_task } else { partners };
            let mut raw_cols: Vec<(usize, usize, usize)> = vec![(j, slot, system.query)];
            for p in &chosen {
                let p_slot = sources[p.source].slot_of(p.task).expect("partner coverage");
                let col = system.column(ColKey::Cell(cell_key[&(p.source, p.task)]));
                raw_cols.push((p.source, p_slot, col));
            }
            for x in 0..raw_cols.len() {
                for y in (x + 1)..raw_cols.len() {
                    let (ja, sa, ca) = raw_cols[x];
                    let (jb, sb, cb) = raw_cols[y];
                    let req = plan.req(vec![(ja, sa), (jb, sb)]);
                    system.add_row(ca, cb, req);
                }
            }
        }
        cell_plans.push(CellPlan {
            cell: c,
            member_means,
            system,
        });
    }

    let mut edge_plans = Vec::new();
    for ((j, k), tasks) in model.edges_with_tasks() {
        for task in tasks {
            let slot_j = sources[j].slot_of(task).expect("edge endpoint coverage");
            let slot_k = sources[k].slot_of(task).expect("edge endpoint coverage");
            let mut system = SystemPlan::new(ColKey::Composite { j, k, task });
            let partners = find_independent_partners(layout, sources, graph, &[j, k], task)?;
            let on_task: Vec<_> = partners.iter().filter(|p| p.task == task).cloned().collect();
            let chosen = if on_task.len() >= 2 { on_task } else { partners };
            let mut raw_cols: Vec<(usize, usize, usize)> = Vec::with_capacity(chosen.len());
            for p in &chosen {
                let p_slot = sources[p.source].slot_of(p.task).expect("partner coverage");
                let col = system.column(ColKey::Cell(cell_key[&(p.source, p.task)]));
                raw_cols.push((p.source, p_slot, col));
            }
            for (x, &(jf, sf, cf)) in raw_cols.iter().enumerate() {
                let req = plan.req(vec![(j, slot_j), (k, slot_k), (jf, sf)]);
                system.add_row(system.query, cf, req);
                for &(jg, sg, cg) in raw_cols.iter().skip(x + 1) {
                    let req = plan.req(vec![(jf, sf), (jg, sg)]);
                    system.add_row(cf, cg, req);
                }
            }
            edge_plans.push(EdgePlan {
                j,
                k,
                task,
                mean_j: plan.req(vec![(j, slot_j)]),
                mean_k: plan.req(vec![(k, slot_k)]),
                pair: plan.req(vec![(j, slot_j), (k, slot_k)]),
                system,
            });
        }
    }

    let stats = oracle.products(&plan.requests)?;

    let mut b_min = f64::INFINITY;
    let mut pinv_norm_max: f64 = 0.0;
    let mut fitted_cells: Vec<CellParams> = Vec::with_capacity(cells.len());
    let mut conditionals: Vec<[[f64; 2]; 2]> = Vec::with_capacity(cells.len());
    let mut abstains: Vec<f64> = Vec::with_capacity(cells.len());

    for cp in &cell_plans {
        let cell = &cells[cp.cell];
        let context = format!("cell ({}, {})", cell.group, cell.offset);
        let system = cp.system.build(&stats)?;
        let solution = solve_agreements(&system, &mut warnings)?;
        pinv_norm_max = pinv_norm_max.max(solution.pinv_norm);
        for m in &solution.magnitudes {
            b_min = b_min.min(*m);
        }
        let ea = solution.expectation(cp.query_pos());
        let rho = (1.0 + ea) / 2.0;

        let mean_parts: Vec<ProductStats> =
            cp.member_means.iter().map(|&r| stats[r]).collect();
        let pooled_mean = pool_stats(&mean_parts, &context)?;
        let p_lambda = (1.0 + pooled_mean.value) / 2.0;

        let mut weighted_py = 0.0;
        let mut weight = 0.0;
        let mut gamma = 0.0;
        for (i, &(j, task)) in cell.members.iter().enumerate() {
            let w = mean_parts[i].support as f64;
            weighted_py += w * model.prior().task_marginal(layout, task);
            weight += w;
            let slot = sources[j].slot_of(task).expect("member coverage");
            gamma += oracle.abstain_rate(j, slot)?;
        }
        let p_y = weighted_py / weight;
        gamma /= cell.members.len() as f64;

        let mu_tilde = mu_from_joint(p_lambda, p_y, rho, &context, &mut warnings)?;
        conditionals.push(mu_tilde);
        abstains.push(gamma);
        let mut table = mu_tilde;
        for row in &mut table {
            for v in row {
                *v *= 1.0 - gamma;
            }
        }
        fitted_cells.push(CellParams {
            group: cell.group.clone(),
            offset: cell.offset,
            members: cell.members.clone(),
            table,
            abstain: gamma,
        });
    }

    let mut fitted_edges: Vec<EdgeParams> = Vec::with_capacity(edge_plans.len());
    for ep in &edge_plans {
        let context = format!("sources ({}, {}) on task {}", ep.j, ep.k, ep.task);
        let mut system = ep.system.build(&stats)?;
        system.pooled_query = Some(ep.system.query);
        let solution = solve_agreements(&system, &mut warnings)?;
        pinv_norm_max = pinv_norm_max.max(solution.pinv_norm);
        for m in &solution.magnitudes {
            b_min = b_min.min(*m);
        }
        let rho_jk = (1.0 + solution.expectation(ep.system.query)) / 2.0;
        let p_y = model.prior().task_marginal(layout, ep.task);
        let cell_j = cell_key[&(ep.j, ep.task)];
        let cell_k = cell_key[&(ep.k, ep.task)];
        let joints = PairJoints {
            p_j: (1.0 + stats[ep.mean_j].value) / 2.0,
            p_k: (1.0 + stats[ep.mean_k].value) / 2.0,
            p_y,
            p_prod: (1.0 + stats[ep.pair].value) / 2.0,
            rho_j: implied_agreement(&conditionals[cell_j], p_y),
            rho_k: implied_agreement(&conditionals[cell_k], p_y),
            rho_jk,
        };
        let mut phi = phi_from_joints(&joints, &context, &mut warnings)?;
        let dev = marginal_deviation(&phi, &conditionals[cell_j], &conditionals[cell_k]);
        if dev > 3.0 * TOL_MARG {
            return Err(Error::MarginalMismatch {
                j: ep.j,
                k: ep.k,
                task: ep.task,
                deviation: dev,
            });
        }
        if dev > TOL_MARG {
            ipf_to_marginals(&mut phi, &conditionals[cell_j], &conditionals[cell_k]);
            warnings.push(Warning::MarginalAdjusted {
                j: ep.j,
                k: ep.k,
                task: ep.task,
                deviation: dev,
            });
        }
        let scale = (1.0 - abstains[cell_j]) * (1.0 - abstains[cell_k]);
        let mut table = phi;
        for plane in &mut table {
            for row in plane {
                for v in row {
                    *v *= scale;
                }
            }
        }
        fitted_edges.push(EdgeParams {
            j: ep.j,
            k: ep.k,
            task: ep.task,
            table,
        });
    }

    Ok(LabelModelParams {
        cells: fitted_cells,
        edges: fitted_edges,
        diagnostics: Diagnostics {
            method: "closed_form".into(),
            n: oracle.n().map(|n| n as u64),
            b_min,
            pinv_norm_max,
            warnings,
        },
    })
}

impl CellPlan {
    fn query_pos(&self) -> usize {
        self.system.query
    }
}
