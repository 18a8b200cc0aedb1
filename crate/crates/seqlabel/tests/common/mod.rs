//! Shared helpers for the integration suites: a brute-force posterior
//! written independently of the inference engine, and a randomized
//! instance builder covering edges, coarse tasks, and abstentions.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use seqlabel::estimator::{CellParams, Diagnostics, EdgeParams, LabelModelParams};
use seqlabel::model::{AggregationRule, LabelModel, Prior, SourceSpec, TaskLayout, VoteTensor};

/// Factor floor mirrored from the engine's documented contract: a zero
/// parameter entry must not veto a configuration outright.
const FLOOR: f64 = 1e-9;

/// Posterior over the `2^T` configurations of one sequence by direct
/// probability-space multiplication. Correlated pairs contribute their
/// joint table once when both members vote; a member voting alone falls
/// back to its own accuracy table.
pub fn brute_posterior(
    model: &LabelModel,
    params: &LabelModelParams,
    votes: &VoteTensor,
    seq: usize,
) -> Vec<f64> {
    let layout = model.layout();
    let n_configs = layout.n_configs();

    let mut paired: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    for ((j, k), tasks) in model.edges_with_tasks() {
        for task in tasks {
            let slot_j = model.sources()[j].slot_of(task).unwrap();
            let slot_k = model.sources()[k].slot_of(task).unwrap();
            paired.push((j, slot_j, k, slot_k, task));
        }
    }

    let mut weights = vec![0.0f64; n_configs];
    for (config, weight) in weights.iter_mut().enumerate() {
        let config = config as u32;
        let mut w = model.prior().prob(config);
        let mut consumed: Vec<(usize, usize)> = Vec::new();
        for &(j, slot_j, k, slot_k, task) in &paired {
            let zj = votes.get(seq, j, slot_j);
            let zk = votes.get(seq, k, slot_k);
            if zj != 0 && zk != 0 {
                let table = &params.edge_for(j, k, task).unwrap().table;
                let wi = usize::from(layout.derived_label(task, config) < 0);
                w *= table[usize::from(zj < 0)][usize::from(zk < 0)][wi].max(FLOOR);
                consumed.push((j, slot_j));
                consumed.push((k, slot_k));
            }
        }
        for (j, source) in model.sources().iter().enumerate() {
            for (slot, &task) in source.coverage.iter().enumerate() {
                let z = votes.get(seq, j, slot);
                if z == 0 || consumed.contains(&(j, slot)) {
                    continue;
                }
                let cell = params.cell_for(j, task).unwrap();
                let wi = usize::from(layout.derived_label(task, config) < 0);
                w *= cell.table[usize::from(z < 0)][wi].max(FLOOR);
            }
        }
        *weight = w;
    }

    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return model.prior().table().to_vec();
    }
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// One randomized inference problem: a model, parameters for it, and a
/// small batch of arbitrary votes.
pub struct Instance {
    pub model: LabelModel,
    pub params: LabelModelParams,
    pub votes: VoteTensor,
}

/// Draws a model with 1–5 elements, optional coarse tasks, 3–6 element
/// sources (plus coarse sources when coarse tasks exist), asymmetric
/// accuracy tables with abstention mass, and votes with roughly 30%
/// abstentions. With `edge_boost > 0` the correlated pair's joint tables
/// move that fraction of the available mass onto the agreement diagonal;
/// at exactly zero they are the independent products.
pub fn random_instance(seed: u64, with_edge: bool, edge_boost: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(1..=5usize);
    let rule = if rng.gen_bool(0.5) {
        AggregationRule::AnyPositive
    } else {
        AggregationRule::AllPositive
    };
    let mut coarse: Vec<(usize, Vec<usize>)> = Vec::new();
    if t >= 2 && rng.gen_bool(0.7) {
        coarse.push((2, (0..t).collect()));
        if t >= 3 && rng.gen_bool(0.5) {
            let lo = rng.gen_range(0..t - 1);
            let hi = rng.gen_range(lo + 1..t);
            coarse.push((2, (lo..=hi).collect()));
        }
    }
    let layout = TaskLayout::new(t, rule, &coarse).unwrap();

    let m_elem = rng.gen_range(3..=6usize);
    let mut sources = Vec::new();
    for j in 0..m_elem {
        sources.push(SourceSpec::new(j, 1, (0..t).collect(), format!("g{j}"), &layout).unwrap());
    }
    if !coarse.is_empty() {
        let coarse_tasks: Vec<usize> = (t..layout.n_tasks()).collect();
        for q in 0..rng.gen_range(1..=2usize) {
            let j = m_elem + q;
            sources
                .push(SourceSpec::new(j, 2, coarse_tasks.clone(), format!("g{j}"), &layout).unwrap());
        }
    }

    let n_configs = 1usize << t;
    let mut table: Vec<f64> = (0..n_configs).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = table.iter().sum();
    for p in &mut table {
        *p /= total;
    }
    let prior = Prior::from_table(table, false).unwrap().0;

    let edges: Vec<(usize, usize)> = if with_edge { vec![(0, 1)] } else { Vec::new() };
    let model = LabelModel::new(layout, sources, &edges, prior).unwrap();

    let mut mu: Vec<Vec<[[f64; 2]; 2]>> = Vec::new();
    let mut gamma: Vec<Vec<f64>> = Vec::new();
    for source in model.sources() {
        let mut per_slot = Vec::new();
        let mut per_gamma = Vec::new();
        for _ in 0..source.arity() {
            let g = rng.gen_range(0.0..0.35);
            let a_pos = rng.gen_range(0.55..0.95);
            let a_neg = rng.gen_range(0.55..0.95);
            per_slot.push([
                [a_pos * (1.0 - g), (1.0 - a_neg) * (1.0 - g)],
                [(1.0 - a_pos) * (1.0 - g), a_neg * (1.0 - g)],
            ]);
            per_gamma.push(g);
        }
        mu.push(per_slot);
        gamma.push(per_gamma);
    }

    let cells: Vec<CellParams> = model
        .cells()
        .iter()
        .map(|c| {
            let (j, task) = c.members[0];
            let slot = model.sources()[j].slot_of(task).unwrap();
            CellParams {
                group: c.group.clone(),
                offset: c.offset,
                members: c.members.clone(),
                table: mu[j][slot],
                abstain: gamma[j][slot],
            }
        })
        .collect();

    let mut edge_params = Vec::new();
    for ((j, k), tasks) in model.edges_with_tasks() {
        for task in tasks {
            let slot_j = model.sources()[j].slot_of(task).unwrap();
            let slot_k = model.sources()[k].slot_of(task).unwrap();
            let mut table = [[[0.0f64; 2]; 2]; 2];
            for w in 0..2 {
                for z1 in 0..2 {
                    for z2 in 0..2 {
                        table[z1][z2][w] = mu[j][slot_j][z1][w] * mu[k][slot_k][z2][w];
                    }
                }
                let d = edge_boost * table[0][1][w].min(table[1][0][w]);
                table[0][0][w] += d;
                table[1][1][w] += d;
                table[0][1][w] -= d;
                table[1][0][w] -= d;
            }
            edge_params.push(EdgeParams { j, k, task, table });
        }
    }

    let params = LabelModelParams {
        cells,
        edges: edge_params,
        diagnostics: Diagnostics::default(),
    };

    let n = rng.gen_range(3..=8usize);
    let mut votes = VoteTensor::new(n, model.sources());
    for seq in 0..n {
        for (j, source) in model.sources().iter().enumerate() {
            for slot in 0..source.arity() {
                let z: i8 = match rng.gen_range(0..10) {
                    0..=2 => 0,
                    3..=6 => 1,
                    _ => -1,
                };
                votes.set(seq, j, slot, z).unwrap();
            }
        }
    }

    Instance {
        model,
        params,
        votes,
    }
}
