//! Posterior inference over label configurations, probabilistic label
//! emission at any resolution, majority-vote baselines, and evaluation.

use std::collections::BTreeMap;
use std::io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::estimator::LabelModelParams;
use crate::kahan::KahanSum;
use crate::model::{LabelModel, TaskLayout, VoteTensor};

/// Floor applied to probability factors before taking logarithms, so a
/// single zero parameter cell cannot veto a configuration outright.
pub const EPS_INF: f64 = 1e-9;

/// A posterior distribution over the `2^T` element-label configurations of
/// one sequence.
#[derive(Debug, Clone)]
pub struct Posterior {
    probs: Vec<f64>,
}

impl Posterior {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability that the task's derived label is positive.
    pub fn task_marginal(&self, layout: &TaskLayout, task: usize) -> f64 {
        let mut sum = KahanSum::default();
        for (config, p) in self.probs.iter().enumerate() {
            if layout.derived_label(task, config as u32) == 1 {
                sum.add(*p);
            }
        }
        sum.value().clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy)]
struct PairRef {
    partner: usize,
    partner_slot: usize,
    edge: usize,
    first: bool,
}

/// Precomputed lookup structure for scoring sequences under fitted
/// parameters. Constant abstention factors cancel in the posterior
/// normalization, so the stored full-conditional tables are used directly.
pub struct InferenceEngine<'a> {
    model: &'a LabelModel,
    log_prior: Vec<f64>,
    mu: Vec<Vec<[[f64; 2]; 2]>>,
    pairing: Vec<Vec<Option<PairRef>>>,
    phi: Vec<[[[f64; 2]; 2]; 2]>,
}

impl<'a> InferenceEngine<'a> {
    pub fn new(model: &'a LabelModel, params: &'a LabelModelParams) -> Result<InferenceEngine<'a>> {
        let sources = model.sources();
        let mut mu = Vec::with_capacity(sources.len());
        for source in sources {
            let mut per_slot = Vec::with_capacity(source.coverage.len());
            for &task in &source.coverage {
                let cell = params.cell_for(source.id, task).ok_or_else(|| {
                    Error::Validate(format!(
                        "parameters carry no accuracy table for source {} on task {}",
                        source.id + 1,
                        task + 1
                    ))
                })?;
                per_slot.push(cell.table);
            }
            mu.push(per_slot);
        }
        let mut pairing: Vec<Vec<Option<PairRef>>> = sources
            .iter()
            .map(|s| vec![None; s.coverage.len()])
            .collect();
        let mut phi = Vec::new();
        for ((j, k), tasks) in model.edges_with_tasks() {
            for task in tasks {
                let edge = params.edge_for(j, k, task).ok_or_else(|| {
                    Error::Validate(format!(
                        "parameters carry no correlation table for sources ({}, {}) on task {}",
                        j + 1,
                        k + 1,
                        task + 1
                    ))
                })?;
                let slot_j = sources[j].slot_of(task).expect("edge endpoint coverage");
                let slot_k = sources[k].slot_of(task).expect("edge endpoint coverage");
                let idx = phi.len();
                phi.push(edge.table);
                pairing[j][slot_j] = Some(PairRef {
                    partner: k,
                    partner_slot: slot_k,
                    edge: idx,
                    first: true,
                });
                pairing[k][slot_k] = Some(PairRef {
                    partner: j,
                    partner_slot: slot_j,
                    edge: idx,
                    first: false,
                });
            }
        }
        let log_prior = model
            .prior()
            .table()
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        Ok(InferenceEngine {
            model,
            log_prior,
            mu,
            pairing,
            phi,
        })
    }

    /// Scores every label configuration for one sequence. Factors from
    /// correlated pairs use the joint table when both members vote and the
    /// member's own accuracy table when it votes alone, so removing an edge
    /// whose partner always abstains leaves the posterior unchanged.
    pub fn posterior(&self, votes: &VoteTensor, seq: usize) -> (Posterior, Option<Warning>) {
        let layout = self.model.layout();
        let n_configs = layout.n_configs();
        let mut scores = self.log_prior.clone();
        for (j, source) in self.model.sources().iter().enumerate() {
            for (slot, &task) in source.coverage.iter().enumerate() {
                let z = votes.get(seq, j, slot);
                if z == 0 {
                    continue;
                }
                let zi = usize::from(z < 0);
                match self.pairing[j][slot] {
                    Some(pair) => {
                        let zk = votes.get(seq, pair.partner, pair.partner_slot);
                        if zk != 0 && !pair.first {
                            continue;
                        }
                        if zk != 0 {
                            let zki = usize::from(zk < 0);
                            let table = &self.phi[pair.edge];
                            for (config, score) in scores.iter_mut().enumerate() {
                                let w = layout.derived_label(task, config as u32);
                                let wi = usize::from(w < 0);
                                *score += table[zi][zki][wi].max(EPS_INF).ln();
                            }
                        } else {
                            let table = &self.mu[j][slot];
                            for (config, score) in scores.iter_mut().enumerate() {
                                let w = layout.derived_label(task, config as u32);
                                let wi = usize::from(w < 0);
                                *score += table[zi][wi].max(EPS_INF).ln();
                            }
                        }
                    }
                    None => {
                        let table = &self.mu[j][slot];
                        for (config, score) in scores.iter_mut().enumerate() {
                            let w = layout.derived_label(task, config as u32);
                            let wi = usize::from(w < 0);
                            *score += table[zi][wi].max(EPS_INF).ln();
                        }
                    }
                }
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return (
                Posterior {
                    probs: self.model.prior().table().to_vec(),
                },
                Some(Warning::NearZeroAgreement {
                    context: format!(
                        "sequence {}: every configuration scored zero; returning the prior",
                        votes.seq_ids()[seq]
                    ),
                    value: 0.0,
                }),
            );
        }
        let mut probs = vec![0.0f64; n_configs];
        let mut total = KahanSum::default();
        for (p, s) in probs.iter_mut().zip(&scores) {
            *p = (s - max).exp();
            total.add(*p);
        }
        let total = total.value();
        if !(total.is_finite() && total > 0.0) {
            return (
                Posterior {
                    probs: self.model.prior().table().to_vec(),
                },
                Some(Warning::NearZeroAgreement {
                    context: format!(
                        "sequence {}: posterior normalization collapsed; returning the prior",
                        votes.seq_ids()[seq]
                    ),
                    value: total,
                }),
            );
        }
        for p in &mut probs {
            *p /= total;
        }
        (Posterior { probs }, None)
    }
}

/// One emitted probabilistic label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub seq_id: u64,
    /// 0-based task index.
    pub task: usize,
    pub p_positive: f64,
}

/// Emits `P(task = +1)` for every sequence at the requested resolution.
/// Sequences whose posterior collapses fall back to the prior and are
/// reported through the warning list rather than aborting the batch.
pub fn emit_labels(
    engine: &InferenceEngine<'_>,
    votes: &VoteTensor,
    resolution: usize,
) -> Result<(Vec<LabelRow>, Vec<Warning>)> {
    let layout = engine.model.layout();
    let tasks = layout.tasks_at(resolution);
    if tasks.is_empty() {
        return Err(Error::Validate(format!(
            "no tasks exist at resolution {resolution}"
        )));
    }
    let per_seq: Vec<(Vec<LabelRow>, Option<Warning>)> = (0..votes.n())
        .into_par_iter()
        .map(|seq| {
            let (posterior, warning) = engine.posterior(votes, seq);
            let rows = tasks
                .iter()
                .map(|&task| LabelRow {
                    seq_id: votes.seq_ids()[seq],
                    task,
                    p_positive: posterior.task_marginal(layout, task),
                })
                .collect();
            (rows, warning)
        })
        .collect();
    let mut rows = Vec::with_capacity(votes.n() * tasks.len());
    let mut warnings = Vec::new();
    for (r, w) in per_seq {
        rows.extend(r);
        warnings.extend(w);
    }
    Ok((rows, warnings))
}

/// Writes emitted labels as `seq_id,task_index,p_positive` with 1-based task
/// ids and floats carrying 17 significant digits.
pub fn write_labels_csv<W: io::Write>(rows: &[LabelRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["seq_id", "task_index", "p_positive"])
        .map_err(|e| Error::Parse(format!("could not write labels: {e}")))?;
    for row in rows {
        w.write_record([
            row.seq_id.to_string(),
            (row.task + 1).to_string(),
            format!("{:.16e}", row.p_positive),
        ])
        .map_err(|e| Error::Parse(format!("could not write labels: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads labels written by [`write_labels_csv`].
pub fn read_labels_csv<R: io::Read>(reader: R) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r
        .headers()
        .map_err(|e| Error::Parse(format!("invalid label csv: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != ["seq_id", "task_index", "p_positive"] {
        return Err(Error::Parse(format!(
            "label csv header must be seq_id,task_index,p_positive, got {headers:?}"
        )));
    }
    let mut rows = Vec::new();
    for record in r.deserialize() {
        let (seq_id, task, p): (u64, usize, f64) =
            record.map_err(|e| Error::Parse(format!("invalid label csv row: {e}")))?;
        if task == 0 {
            return Err(Error::Validate(
                "label csv task indices are 1-based; found 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validate(format!(
                "label probability {p} for sequence {seq_id} is outside [0, 1]"
            )));
        }
        rows.push(LabelRow {
            seq_id,
            task: task - 1,
            p_positive: p,
        });
    }
    Ok(rows)
}

/// Hard labels by unweighted vote counting: every vote is broadcast to the
/// element tasks under its own task, elements take the sign of their vote
/// sum (ties break negative), and coarser tasks aggregate the element labels
/// through the layout's rule.
pub fn majority_vote(
    votes: &VoteTensor,
    model: &LabelModel,
    resolution: usize,
) -> Result<Vec<Vec<i8>>> {
    let layout = model.layout();
    let tasks = layout.tasks_at(resolution);
    if tasks.is_empty() {
        return Err(Error::Validate(format!(
            "no tasks exist at resolution {resolution}"
        )));
    }
    let t = layout.t();
    let out: Vec<Vec<i8>> = (0..votes.n())
        .into_par_iter()
        .map(|seq| {
            let mut sums = vec![0i64; t];
            for (j, source) in model.sources().iter().enumerate() {
                for (slot, &task) in source.coverage.iter().enumerate() {
                    let z = votes.get(seq, j, slot);
                    if z == 0 {
                        continue;
                    }
                    let support = layout.support(task);
                    for (e, sum) in sums.iter_mut().enumerate() {
                        if support >> e & 1 == 1 {
                            *sum += i64::from(z);
                        }
                    }
                }
            }
            let element: Vec<i8> = sums.iter().map(|&s| if s > 0 { 1 } else { -1 }).collect();
            let mut config: u32 = 0;
            for (e, &label) in element.iter().enumerate() {
                if label == -1 {
                    config |= 1 << e;
                }
            }
            tasks
                .iter()
                .map(|&task| layout.derived_label(task, config))
                .collect()
        })
        .collect();
    Ok(out)
}

/// Precision / recall / F1 for thresholded probabilistic labels. Fields are
/// `null` where the counts leave them undefined.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub n_eval: u64,
    pub threshold: f64,
}

/// Joins predictions with gold labels on `(sequence, task)` and scores the
/// thresholded predictions. Gold must contain both classes; otherwise
/// precision and recall cannot both be defined.
pub fn evaluate(
    predictions: &[LabelRow],
    gold: &[(u64, usize, i8)],
    threshold: f64,
) -> Result<Metrics> {
    let mut gold_map: BTreeMap<(u64, usize), i8> = BTreeMap::new();
    for &(seq, task, label) in gold {
        gold_map.insert((seq, task), label);
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fng = 0u64;
    let mut tn = 0u64;
    let mut gold_pos = 0u64;
    let mut gold_neg = 0u64;
    let mut matched = 0u64;
    for row in predictions {
        let Some(&g) = gold_map.get(&(row.seq_id, row.task)) else {
            continue;
        };
        matched += 1;
        let predicted_pos = row.p_positive > threshold;
        if g == 1 {
            gold_pos += 1;
            if predicted_pos {
                tp += 1;
            } else {
                fng += 1;
            }
        } else {
            gold_neg += 1;
            if predicted_pos {
                fp += 1;
            } else {
                tn += 1;
            }
        }
    }
    let _ = tn;
    if matched == 0 {
        return Err(Error::DegenerateGold(
            "predictions and gold labels share no (sequence, task) pairs".into(),
        ));
    }
    if gold_pos == 0 || gold_neg == 0 {
        return Err(Error::DegenerateGold(format!(
            "gold labels are single-class ({gold_pos} positive, {gold_neg} negative); \
             precision and recall are not both defined"
        )));
    }
    let precision = if tp + fp > 0 {
        Some(tp as f64 / (tp + fp) as f64)
    } else {
        None
    };
    let recall = Some(tp as f64 / (tp + fng) as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        n_eval: matched,
        threshold,
    })
}

/// Plain F1 over hard labels; zero when nothing is jointly positive.
pub fn f1_score(pred: &[i8], gold: &[i8]) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fng = 0u64;
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fng += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fng) as f64;
    2.0 * p * r / (p + r)
}

/// Reads gold labels in `seq_id,task_index,label` form with 1-based task ids
/// and labels in {-1, +1}.
pub fn read_gold_csv<R: io::Read>(reader: R) -> Result<Vec<(u64, usize, i8)>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r
        .headers()
        .map_err(|e| Error::Parse(format!("invalid gold csv: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != ["seq_id", "task_index", "label"] {
        return Err(Error::Parse(format!(
            "gold csv header must be seq_id,task_index,label, got {headers:?}"
        )));
    }
    let mut rows = Vec::new();
    for record in r.deserialize() {
        let (seq_id, task, label): (u64, usize, i8) =
            record.map_err(|e| Error::Parse(format!("invalid gold csv row: {e}")))?;
        if task == 0 {
            return Err(Error::Validate(
                "gold csv task indices are 1-based; found 0".into(),
            ));
        }
        if label != 1 && label != -1 {
            return Err(Error::Validate(format!(
                "gold label {label} for sequence {seq_id} is not in {{-1, +1}}"
            )));
        }
        rows.push((seq_id, task - 1, label));
    }
    Ok(rows)
}
