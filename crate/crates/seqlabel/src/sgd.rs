//! Gradient-descent variant of the fitter: the same observable moments the
//! closed form solves for are posed as squared-loss constraints over the
//! accuracy and correlation tables and minimized directly.
//!
//! Everything the closed form recovers through agreement systems appears
//! here as a residual: per-instance means, conditionally independent pair
//! products, correlated pair products through the joint table, and
//! third-source products that separate the joint table's two label-class
//! slices. Simplex and marginal-consistency penalties keep the parameters
//! probabilities.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, Warning};
use crate::estimator::{CellParams, Diagnostics, EdgeParams, LabelModelParams};
use crate::model::{LabelModel, TieCell};
use crate::moments::{ProductOracle, ProductRequest};

/// Final full-set loss above which a fit is flagged as not converged.
pub const TOL_LOSS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SgdOptions {
    pub lr: f64,
    pub epochs: usize,
    /// Constraints per mini-batch step; 0 runs full-batch steps.
    pub batch: usize,
    pub seed: u64,
    /// Clamp parameters to [0, 1] after every step.
    pub projection: bool,
}

impl Default for SgdOptions {
    fn default() -> Self {
        SgdOptions {
            lr: 0.05,
            epochs: 2000,
            batch: 0,
            seed: 0,
            projection: true,
        }
    }
}

#[derive(Debug, Clone)]
struct MeanCon {
    cell: usize,
    marg: [f64; 2],
    obs: f64,
    weight: f64,
}

#[derive(Debug, Clone)]
struct PairCon {
    a: usize,
    b: usize,
    joint: [[f64; 2]; 2],
    obs: f64,
    weight: f64,
}

#[derive(Debug, Clone)]
struct EdgeCon {
    slice: usize,
    marg: [f64; 2],
    obs: f64,
    weight: f64,
}

#[derive(Debug, Clone)]
struct CompCon {
    slice: usize,
    cell: usize,
    joint: [[f64; 2]; 2],
    obs: f64,
    weight: f64,
}

/// Moment residuals and probability penalties tying the parameters to the
/// observed vote products.
pub struct ConstraintSet {
    cells: Vec<TieCell>,
    slices: Vec<(usize, usize, usize)>,
    means: Vec<MeanCon>,
    pairs: Vec<PairCon>,
    edge_pairs: Vec<EdgeCon>,
    composites: Vec<CompCon>,
    /// (slice, cell of endpoint j, cell of endpoint k).
    consistency: Vec<(usize, usize, usize)>,
    cell_abstain: Vec<f64>,
    slice_abstain: Vec<(f64, f64)>,
    n: Option<usize>,
}

const GRAD_SIGN: [[f64; 2]; 2] = [[1.0, -1.0], [-1.0, 1.0]];

impl ConstraintSet {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    /// Data-driven constraint counts: (means, independent pairs, correlated
    /// pairs, third-source products).
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (
            self.means.len(),
            self.pairs.len(),
            self.edge_pairs.len(),
            self.composites.len(),
        )
    }

    fn n_data(&self) -> usize {
        self.means.len() + self.pairs.len() + self.edge_pairs.len() + self.composites.len()
    }

    /// Total loss and its analytic gradient at flat parameter vectors
    /// (`mu[cell*4 + z*2 + w]`, `phi[slice*8 + z1*4 + z2*2 + w]`).
    pub fn loss_grad(&self, mu: &[f64], phi: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        self.loss_grad_subset(mu, phi, None)
    }

    /// Signed residuals of the data-driven constraints, in the order means,
    /// independent pairs, correlated pairs, third-source products.
    pub fn residuals(&self, mu: &[f64], phi: &[f64]) -> Vec<f64> {
        let m = |c: usize, w: usize| mu[c * 4 + w] - mu[c * 4 + 2 + w];
        let g = |s: usize, w: usize| {
            phi[s * 8 + w] - phi[s * 8 + 2 + w] - phi[s * 8 + 4 + w] + phi[s * 8 + 6 + w]
        };
        let mut out = Vec::with_capacity(self.n_data());
        for con in &self.means {
            out.push(con.marg[0] * m(con.cell, 0) + con.marg[1] * m(con.cell, 1) - con.obs);
        }
        for con in &self.pairs {
            let mut pred = 0.0;
            for (wa, row) in con.joint.iter().enumerate() {
                for (wb, &j) in row.iter().enumerate() {
                    pred += m(con.a, wa) * j * m(con.b, wb);
                }
            }
            out.push(pred - con.obs);
        }
        for con in &self.edge_pairs {
            out.push(con.marg[0] * g(con.slice, 0) + con.marg[1] * g(con.slice, 1) - con.obs);
        }
        for con in &self.composites {
            let mut pred = 0.0;
            for (wa, row) in con.joint.iter().enumerate() {
                for (wb, &j) in row.iter().enumerate() {
                    pred += g(con.slice, wa) * j * m(con.cell, wb);
                }
            }
            out.push(pred - con.obs);
        }
        out
    }

    fn loss_grad_subset(
        &self,
        mu: &[f64],
        phi: &[f64],
        subset: Option<&[usize]>,
    ) -> (f64, Vec<f64>, Vec<f64>) {
        debug_assert_eq!(mu.len(), self.cells.len() * 4);
        debug_assert_eq!(phi.len(), self.slices.len() * 8);
        let mut loss = 0.0;
        let mut gmu = vec![0.0; mu.len()];
        let mut gphi = vec![0.0; phi.len()];
        let m = |c: usize, w: usize| mu[c * 4 + w] - mu[c * 4 + 2 + w];
        let g = |s: usize, w: usize| {
            phi[s * 8 + w] - phi[s * 8 + 2 + w] - phi[s * 8 + 4 + w] + phi[s * 8 + 6 + w]
        };

        let apply_mean = |con: &MeanCon, loss: &mut f64, gmu: &mut Vec<f64>| {
            let r = con.marg[0] * m(con.cell, 0) + con.marg[1] * m(con.cell, 1) - con.obs;
            *loss += con.weight * r * r;
            for w in 0..2 {
                let d = 2.0 * con.weight * r * con.marg[w];
                gmu[con.cell * 4 + w] += d;
                gmu[con.cell * 4 + 2 + w] -= d;
            }
        };
        let apply_pair = |con: &PairCon, loss: &mut f64, gmu: &mut Vec<f64>| {
            let mb = [m(con.b, 0), m(con.b, 1)];
            let ma = [m(con.a, 0), m(con.a, 1)];
            let mut pred = 0.0;
            for wa in 0..2 {
                for wb in 0..2 {
                    pred += ma[wa] * con.joint[wa][wb] * mb[wb];
                }
            }
            let r = pred - con.obs;
            *loss += con.weight * r * r;
            for wa in 0..2 {
                let da = 2.0 * con.weight * r * (con.joint[wa][0] * mb[0] + con.joint[wa][1] * mb[1]);
                gmu[con.a * 4 + wa] += da;
                gmu[con.a * 4 + 2 + wa] -= da;
            }
            for wb in 0..2 {
                let db = 2.0 * con.weight * r * (con.joint[0][wb] * ma[0] + con.joint[1][wb] * ma[1]);
                gmu[con.b * 4 + wb] += db;
                gmu[con.b * 4 + 2 + wb] -= db;
            }
        };
        let apply_edge = |con: &EdgeCon, loss: &mut f64, gphi: &mut Vec<f64>| {
            let r = con.marg[0] * g(con.slice, 0) + con.marg[1] * g(con.slice, 1) - con.obs;
            *loss += con.weight * r * r;
            for z1 in 0..2 {
                for z2 in 0..2 {
                    for w in 0..2 {
                        gphi[con.slice * 8 + z1 * 4 + z2 * 2 + w] +=
                            2.0 * con.weight * r * GRAD_SIGN[z1][z2] * con.marg[w];
                    }
                }
            }
        };
        let apply_comp =
            |con: &CompCon, loss: &mut f64, gmu: &mut Vec<f64>, gphi: &mut Vec<f64>| {
                let gs = [g(con.slice, 0), g(con.slice, 1)];
                let mf = [m(con.cell, 0), m(con.cell, 1)];
                let mut pred = 0.0;
                for wa in 0..2 {
                    for wb in 0..2 {
                        pred += gs[wa] * con.joint[wa][wb] * mf[wb];
                    }
                }
                let r = pred - con.obs;
                *loss += con.weight * r * r;
                for wa in 0..2 {
                    let dg = 2.0 * con.weight * r * (con.joint[wa][0] * mf[0] + con.joint[wa][1] * mf[1]);
                    for z1 in 0..2 {
                        for z2 in 0..2 {
                            gphi[con.slice * 8 + z1 * 4 + z2 * 2 + wa] += GRAD_SIGN[z1][z2] * dg;
                        }
                    }
                }
                for wb in 0..2 {
                    let dm = 2.0 * con.weight * r * (con.joint[0][wb] * gs[0] + con.joint[1][wb] * gs[1]);
                    gmu[con.cell * 4 + wb] += dm;
                    gmu[con.cell * 4 + 2 + wb] -= dm;
                }
            };

        match subset {
            None => {
                for con in &self.means {
                    apply_mean(con, &mut loss, &mut gmu);
                }
                for con in &self.pairs {
                    apply_pair(con, &mut loss, &mut gmu);
                }
                for con in &self.edge_pairs {
                    apply_edge(con, &mut loss, &mut gphi);
                }
                for con in &self.composites {
                    apply_comp(con, &mut loss, &mut gmu, &mut gphi);
                }
            }
            Some(indices) => {
                let (nm, np, ne) = (self.means.len(), self.pairs.len(), self.edge_pairs.len());
                for &i in indices {
                    if i < nm {
                        apply_mean(&self.means[i], &mut loss, &mut gmu);
                    } else if i < nm + np {
                        apply_pair(&self.pairs[i - nm], &mut loss, &mut gmu);
                    } else if i < nm + np + ne {
                        apply_edge(&self.edge_pairs[i - nm - np], &mut loss, &mut gphi);
                    } else {
                        apply_comp(
                            &self.composites[i - nm - np - ne],
                            &mut loss,
                            &mut gmu,
                            &mut gphi,
                        );
                    }
                }
            }
        }

        for c in 0..self.cells.len() {
            for w in 0..2 {
                let s = mu[c * 4 + w] + mu[c * 4 + 2 + w] - 1.0;
                loss += s * s;
                gmu[c * 4 + w] += 2.0 * s;
                gmu[c * 4 + 2 + w] += 2.0 * s;
                for z in 0..2 {
                    let p = mu[c * 4 + z * 2 + w];
                    if p < 0.0 {
                        loss += p * p;
                        gmu[c * 4 + z * 2 + w] += 2.0 * p;
                    }
                }
            }
        }
        for s in 0..self.slices.len() {
            for w in 0..2 {
                let mut mass = -1.0;
                for z1 in 0..2 {
                    for z2 in 0..2 {
                        mass += phi[s * 8 + z1 * 4 + z2 * 2 + w];
                    }
                }
                loss += mass * mass;
                for z1 in 0..2 {
                    for z2 in 0..2 {
                        gphi[s * 8 + z1 * 4 + z2 * 2 + w] += 2.0 * mass;
                        let p = phi[s * 8 + z1 * 4 + z2 * 2 + w];
                        if p < 0.0 {
                            loss += p * p;
                            gphi[s * 8 + z1 * 4 + z2 * 2 + w] += 2.0 * p;
                        }
                    }
                }
            }
        }
        for &(sl, ca, cb) in &self.consistency {
            for w in 0..2 {
                for z1 in 0..2 {
                    let s = phi[sl * 8 + z1 * 4 + w] + phi[sl * 8 + z1 * 4 + 2 + w]
                        - mu[ca * 4 + z1 * 2 + w];
                    loss += s * s;
                    gphi[sl * 8 + z1 * 4 + w] += 2.0 * s;
                    gphi[sl * 8 + z1 * 4 + 2 + w] += 2.0 * s;
                    gmu[ca * 4 + z1 * 2 + w] -= 2.0 * s;
                }
                for z2 in 0..2 {
                    let s = phi[sl * 8 + z2 * 2 + w] + phi[sl * 8 + 4 + z2 * 2 + w]
                        - mu[cb * 4 + z2 * 2 + w];
                    loss += s * s;
                    gphi[sl * 8 + z2 * 2 + w] += 2.0 * s;
                    gphi[sl * 8 + 4 + z2 * 2 + w] += 2.0 * s;
                    gmu[cb * 4 + z2 * 2 + w] -= 2.0 * s;
                }
            }
        }
        (loss, gmu, gphi)
    }

    /// Diagonal-0.7 accuracy start with joint tables at the independence
    /// product of the initial accuracies.
    pub fn default_init(&self) -> (Vec<f64>, Vec<f64>) {
        let mut mu = vec![0.0; self.cells.len() * 4];
        for c in 0..self.cells.len() {
            mu[c * 4] = 0.7;
            mu[c * 4 + 1] = 0.3;
            mu[c * 4 + 2] = 0.3;
            mu[c * 4 + 3] = 0.7;
        }
        let mut cell_key: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (c, cell) in self.cells.iter().enumerate() {
            for &(j, task) in &cell.members {
                cell_key.insert((j, task), c);
            }
        }
        let mut phi = vec![0.0; self.slices.len() * 8];
        for (si, &(j, k, task)) in self.slices.iter().enumerate() {
            let ca = cell_key[&(j, task)];
            let cb = cell_key[&(k, task)];
            for z1 in 0..2 {
                for z2 in 0..2 {
                    for w in 0..2 {
                        phi[si * 8 + z1 * 4 + z2 * 2 + w] =
                            mu[ca * 4 + z1 * 2 + w] * mu[cb * 4 + z2 * 2 + w];
                    }
                }
            }
        }
        (mu, phi)
    }

    /// Starts from previously fitted parameters (for example the closed
    /// form's output), converted back to voting-conditional form.
    pub fn init_from_params(&self, params: &LabelModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut mu = vec![0.0; self.cells.len() * 4];
        for (c, cell) in self.cells.iter().enumerate() {
            let (j, task) = cell.members[0];
            let cp = params.cell_for(j, task).ok_or_else(|| {
                Error::Validate(format!(
                    "initial parameters carry no table for source {} on task {}",
                    j + 1,
                    task + 1
                ))
            })?;
            let cond = cp.conditional();
            for z in 0..2 {
                for w in 0..2 {
                    mu[c * 4 + z * 2 + w] = cond[z][w];
                }
            }
        }
        let mut phi = vec![0.0; self.slices.len() * 8];
        for (si, &(j, k, task)) in self.slices.iter().enumerate() {
            let ep = params.edge_for(j, k, task).ok_or_else(|| {
                Error::Validate(format!(
                    "initial parameters carry no joint table for ({}, {}) on task {}",
                    j + 1,
                    k + 1,
                    task + 1
                ))
            })?;
            let gj = params.cell_for(j, task).map(|c| c.abstain).unwrap_or(0.0);
            let gk = params.cell_for(k, task).map(|c| c.abstain).unwrap_or(0.0);
            let cond = ep.conditional(gj, gk);
            for z1 in 0..2 {
                for z2 in 0..2 {
                    for w in 0..2 {
                        phi[si * 8 + z1 * 4 + z2 * 2 + w] = cond[z1][z2][w];
                    }
                }
            }
        }
        Ok((mu, phi))
    }
}

/// Collects every moment constraint the model's structure admits, with one
/// oracle batch for all observations. Weights normalize each residual class
/// by its size so step sizes transfer across model shapes; when
/// `weight_by_support` is set, constraints within a class are additionally
/// weighted by their relative sample support.
pub fn build_constraints(
    model: &LabelModel,
    oracle: &dyn ProductOracle,
    weight_by_support: bool,
) -> Result<ConstraintSet> {
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

    let sources = model.sources();
    let layout = model.layout();
    let prior = model.prior();
    let mut adjacent: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &(j, k) in model.graph().source_edges() {
        adjacent.insert((j.min(k), j.max(k)));
    }
    let connected =
        |a: usize, b: usize| a == b || adjacent.contains(&(a.min(b), a.max(b)));

    let cells = model.cells().to_vec();
    let mut cell_key: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (c, cell) in cells.iter().enumerate() {
        for &(j, task) in &cell.members {
            cell_key.insert((j, task), c);
        }
    }

    let instances: Vec<(usize, usize, usize)> = sources
        .iter()
        .enumerate()
        .flat_map(|(j, s)| {
            s.coverage
                .iter()
                .enumerate()
                .map(move |(slot, &task)| (j, slot, task))
        })
        .collect();

    let mut requests: Vec<ProductRequest> = Vec::new();
    let mut index: BTreeMap<Vec<(usize, usize)>, usize> = BTreeMap::new();
    let mut req = |terms: Vec<(usize, usize)>, requests: &mut Vec<ProductRequest>| -> usize {
        let r = ProductRequest::new(terms);
        *index.entry(r.key()).or_insert_with(|| {
            requests.push(r);
            requests.len() - 1
        })
    };

    struct MeanPlan {
        cell: usize,
        marg: [f64; 2],
        req: usize,
    }
    struct PairPlan {
        a: usize,
        b: usize,
        joint: [[f64; 2]; 2],
        req: usize,
    }
    struct EdgePlan {
        slice: usize,
        marg: [f64; 2],
        req: usize,
    }
    struct CompPlan {
        slice: usize,
        cell: usize,
        joint: [[f64; 2]; 2],
        req: usize,
    }

    let mut mean_plans = Vec::new();
    for &(j, slot, task) in &instances {
        let p = prior.task_marginal(layout, task);
        mean_plans.push(MeanPlan {
            cell: cell_key[&(j, task)],
            marg: [p, 1.0 - p],
            req: req(vec![(j, slot)], &mut requests),
        });
    }

    let mut pair_plans = Vec::new();
    for (x, &(j, slot_j, tj)) in instances.iter().enumerate() {
        for &(k, slot_k, tk) in instances.iter().skip(x + 1) {
            if connected(j, k) {
                continue;
            }
            pair_plans.push(PairPlan {
                a: cell_key[&(j, tj)],
                b: cell_key[&(k, tk)],
                joint: prior.pair_table(layout, tj, tk),
                req: req(vec![(j, slot_j), (k, slot_k)], &mut requests),
            });
        }
    }

    let mut slices = Vec::new();
    let mut slice_members = Vec::new();
    let mut edge_plans = Vec::new();
    let mut comp_plans = Vec::new();
    let mut consistency = Vec::new();
    for ((j, k), tasks) in model.edges_with_tasks() {
        for task in tasks {
            let slice = slices.len();
            slices.push((j, k, task));
            let slot_j = sources[j].slot_of(task).expect("edge coverage");
            let slot_k = sources[k].slot_of(task).expect("edge coverage");
            slice_members.push(((j, slot_j), (k, slot_k)));
            let p = prior.task_marginal(layout, task);
            edge_plans.push(EdgePlan {
                slice,
                marg: [p, 1.0 - p],
                req: req(vec![(j, slot_j), (k, slot_k)], &mut requests),
            });
            for &(f, slot_f, tf) in &instances {
                if connected(f, j) || connected(f, k) {
                    continue;
                }
                comp_plans.push(CompPlan {
                    slice,
                    cell: cell_key[&(f, tf)],
                    joint: prior.pair_table(layout, task, tf),
                    req: req(vec![(j, slot_j), (k, slot_k), (f, slot_f)], &mut requests),
                });
            }
            consistency.push((slice, cell_key[&(j, task)], cell_key[&(k, task)]));
        }
    }

    let stats = oracle.products(&requests)?;

    let class_weight = |count: usize, scale: f64| {
        if count == 0 {
            0.0
        } else {
            scale / count as f64
        }
    };
    let support_scale = |reqs: &[usize]| -> Vec<f64> {
        if !weight_by_support {
            return vec![1.0; reqs.len()];
        }
        let total: f64 = reqs.iter().map(|&r| stats[r].support as f64).sum();
        let mean = total / reqs.len().max(1) as f64;
        reqs.iter()
            .map(|&r| {
                if mean > 0.0 {
                    stats[r].support as f64 / mean
                } else {
                    1.0
                }
            })
            .collect()
    };

    let mean_scale = support_scale(&mean_plans.iter().map(|p| p.req).collect::<Vec<_>>());
    let w_mean = class_weight(mean_plans.len(), 1.0);
    let means = mean_plans
        .into_iter()
        .zip(mean_scale)
        .map(|(p, s)| MeanCon {
            cell: p.cell,
            marg: p.marg,
            obs: stats[p.req].value,
            weight: w_mean * s,
        })
        .collect();

    let pair_scale = support_scale(&pair_plans.iter().map(|p| p.req).collect::<Vec<_>>());
    let w_pair = class_weight(pair_plans.len(), 4.0);
    let pairs = pair_plans
        .into_iter()
        .zip(pair_scale)
        .map(|(p, s)| PairCon {
            a: p.a,
            b: p.b,
            joint: p.joint,
            obs: stats[p.req].value,
            weight: w_pair * s,
        })
        .collect();

    let edge_scale = support_scale(&edge_plans.iter().map(|p| p.req).collect::<Vec<_>>());
    let w_edge = class_weight(edge_plans.len(), 1.0);
    let edge_pairs = edge_plans
        .into_iter()
        .zip(edge_scale)
        .map(|(p, s)| EdgeCon {
            slice: p.slice,
            marg: p.marg,
            obs: stats[p.req].value,
            weight: w_edge * s,
        })
        .collect();

    let comp_scale = support_scale(&comp_plans.iter().map(|p| p.req).collect::<Vec<_>>());
    let w_comp = class_weight(comp_plans.len(), 4.0);
    let composites = comp_plans
        .into_iter()
        .zip(comp_scale)
        .map(|(p, s)| CompCon {
            slice: p.slice,
            cell: p.cell,
            joint: p.joint,
            obs: stats[p.req].value,
            weight: w_comp * s,
        })
        .collect();

    let mut cell_abstain = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut total = 0.0;
        for &(j, task) in &cell.members {
            let slot = sources[j].slot_of(task).expect("member coverage");
            total += oracle.abstain_rate(j, slot)?;
        }
        cell_abstain.push(total / cell.members.len() as f64);
    }
    let mut slice_abstain = Vec::with_capacity(slices.len());
    for &((j, slot_j), (k, slot_k)) in &slice_members {
        slice_abstain.push((oracle.abstain_rate(j, slot_j)?, oracle.abstain_rate(k, slot_k)?));
    }

    Ok(ConstraintSet {
        cells,
        slices,
        means,
        pairs,
        edge_pairs,
        composites,
        consistency,
        cell_abstain,
        slice_abstain,
        n: oracle.n(),
    })
}

/// Minimizes the constraint loss by (mini-batch) gradient descent and packs
/// the optimum into stored-parameter form. Returns the fitted parameters and
/// the per-epoch full-set loss curve (with the final loss appended).
pub fn fit_sgd(
    constraints: &ConstraintSet,
    init: Option<(Vec<f64>, Vec<f64>)>,
    opts: &SgdOptions,
) -> Result<(LabelModelParams, Vec<f64>)> {
    let (mut mu, mut phi) = match init {
        Some((mu, phi)) => {
            if mu.len() != constraints.cells.len() * 4
                || phi.len() != constraints.slices.len() * 8
            {
                return Err(Error::Validate(format!(
                    "initial parameter vectors have lengths {} and {}, constraints need {} and {}",
                    mu.len(),
                    phi.len(),
                    constraints.cells.len() * 4,
                    constraints.slices.len() * 8
                )));
            }
            (mu, phi)
        }
        None => constraints.default_init(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut curve = Vec::with_capacity(opts.epochs + 1);
    let project = |v: &mut [f64]| {
        for x in v {
            *x = x.clamp(0.0, 1.0);
        }
    };

    for epoch in 0..opts.epochs {
        let (loss, gmu, gphi) = constraints.loss_grad(&mu, &phi);
        curve.push(loss);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        if opts.batch == 0 {
            for (x, g) in mu.iter_mut().zip(&gmu) {
                *x -= opts.lr * g;
            }
            for (x, g) in phi.iter_mut().zip(&gphi) {
                *x -= opts.lr * g;
            }
            if opts.projection {
                project(&mut mu);
                project(&mut phi);
            }
        } else {
            let mut order: Vec<usize> = (0..constraints.n_data()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(opts.batch) {
                let (_, gmu, gphi) = constraints.loss_grad_subset(&mu, &phi, Some(chunk));
                for (x, g) in mu.iter_mut().zip(&gmu) {
                    *x -= opts.lr * g;
                }
                for (x, g) in phi.iter_mut().zip(&gphi) {
                    *x -= opts.lr * g;
                }
                if opts.projection {
                    project(&mut mu);
                    project(&mut phi);
                }
            }
        }
    }

    let (final_loss, _, _) = constraints.loss_grad(&mu, &phi);
    curve.push(final_loss);
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: opts.epochs,
            loss: final_loss,
        });
    }
    let mut warnings = Vec::new();
    if final_loss > TOL_LOSS {
        warnings.push(Warning::NotConverged {
            loss: final_loss,
            epochs: opts.epochs,
        });
    }

    let cells = constraints
        .cells
        .iter()
        .enumerate()
        .map(|(c, cell)| {
            let gamma = constraints.cell_abstain[c];
            let mut table = [[0.0; 2]; 2];
            for z in 0..2 {
                for w in 0..2 {
                    table[z][w] = mu[c * 4 + z * 2 + w] * (1.0 - gamma);
                }
            }
            CellParams {
                group: cell.group.clone(),
                offset: cell.offset,
                members: cell.members.clone(),
                table,
                abstain: gamma,
            }
        })
        .collect();
    let edges = constraints
        .slices
        .iter()
        .enumerate()
        .map(|(si, &(j, k, task))| {
            let (gj, gk) = constraints.slice_abstain[si];
            let scale = (1.0 - gj) * (1.0 - gk);
            let mut table = [[[0.0; 2]; 2]; 2];
            for z1 in 0..2 {
                for z2 in 0..2 {
                    for w in 0..2 {
                        table[z1][z2][w] = phi[si * 8 + z1 * 4 + z2 * 2 + w] * scale;
                    }
                }
            }
            EdgeParams { j, k, task, table }
        })
        .collect();

    Ok((
        LabelModelParams {
            cells,
            edges,
            diagnostics: Diagnostics {
                method: "sgd".into(),
                n: constraints.n.map(|v| v as u64),
                b_min: 0.0,
                pinv_norm_max: 0.0,
                warnings,
            },
        },
        curve,
    ))
}
