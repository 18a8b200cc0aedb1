//! Synthetic truth: vote generators with known parameters, analytic
//! population statistics, latent-label oracles, and the experiment harnesses
//! built on top of them.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::estimator::{CellParams, Diagnostics, EdgeParams, FitOptions, LabelModelParams};
use crate::inference::{f1_score, majority_vote, InferenceEngine};
use crate::model::{
    AggregationRule, LabelModel, ModelConfig, Prior, SourceSpec, TaskLayout, VoteTensor,
};
use crate::moments::{ProductOracle, ProductRequest, ProductStats, VotesOracle};

/// True voting-conditional tables and abstention rates behind a generator.
#[derive(Debug, Clone)]
pub struct TruthTables {
    /// `mu[source][slot][z][w]`, conditional on voting.
    pub mu: Vec<Vec<[[f64; 2]; 2]>>,
    /// `abstain[source][slot]`.
    pub abstain: Vec<Vec<f64>>,
    /// Joint voting-conditional tables per `(j, k, shared task)`.
    pub phi: BTreeMap<(usize, usize, usize), [[[f64; 2]; 2]; 2]>,
}

/// A label model together with the true parameters used to sample votes.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    model: LabelModel,
    truth: TruthTables,
}

fn check_simplex(col: &[f64], context: &str) -> Result<()> {
    let sum: f64 = col.iter().sum();
    if col.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validate(format!(
            "{context}: entries must be probabilities summing to 1, got {col:?}"
        )));
    }
    Ok(())
}

impl GeneratorSpec {
    /// Validates shapes, probability simplexes, and the exact agreement of
    /// every joint table's marginals with the member accuracy tables.
    pub fn new(model: LabelModel, truth: TruthTables) -> Result<GeneratorSpec> {
        if truth.mu.len() != model.n_sources() || truth.abstain.len() != model.n_sources() {
            return Err(Error::Validate(format!(
                "truth tables cover {} sources, model has {}",
                truth.mu.len(),
                model.n_sources()
            )));
        }
        for (j, source) in model.sources().iter().enumerate() {
            if truth.mu[j].len() != source.arity() || truth.abstain[j].len() != source.arity() {
                return Err(Error::Validate(format!(
                    "truth tables for source {j} cover {} slots, coverage has {}",
                    truth.mu[j].len(),
                    source.arity()
                )));
            }
            for (slot, table) in truth.mu[j].iter().enumerate() {
                for w in 0..2 {
                    check_simplex(
                        &[table[0][w], table[1][w]],
                        &format!("accuracy column for source {j} slot {slot}"),
                    )?;
                }
                let gamma = truth.abstain[j][slot];
                if !(0.0..1.0).contains(&gamma) {
                    return Err(Error::Validate(format!(
                        "abstain rate {gamma} for source {j} slot {slot} is outside [0, 1)"
                    )));
                }
            }
        }
        let mut required: BTreeMap<(usize, usize, usize), ()> = BTreeMap::new();
        for ((j, k), tasks) in model.edges_with_tasks() {
            for task in tasks {
                required.insert((j, k, task), ());
            }
        }
        for key in truth.phi.keys() {
            if !required.contains_key(key) {
                return Err(Error::Validate(format!(
                    "joint table declared for ({}, {}) on task {}, but the model draws no \
                     such edge",
                    key.0, key.1, key.2
                )));
            }
        }
        let mut governed: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for &(j, k, task) in required.keys() {
            let slot_j = model.sources()[j].slot_of(task).expect("edge coverage");
            let slot_k = model.sources()[k].slot_of(task).expect("edge coverage");
            for (source, slot) in [(j, slot_j), (k, slot_k)] {
                if let Some((oj, ok)) = governed.insert((source, slot), (j, k)) {
                    return Err(Error::Validate(format!(
                        "source {source} slot {slot} is governed by joint tables for both \
                         ({oj}, {ok}) and ({j}, {k}); a vote can follow only one joint \
                         distribution"
                    )));
                }
            }
        }
        for (&(j, k, task), _) in required.iter() {
            let Some(phi) = truth.phi.get(&(j, k, task)) else {
                return Err(Error::Validate(format!(
                    "edge ({j}, {k}) shares task {task} but no joint table is declared for it"
                )));
            };
            let slot_j = model.sources()[j].slot_of(task).expect("edge coverage");
            let slot_k = model.sources()[k].slot_of(task).expect("edge coverage");
            for w in 0..2 {
                let slice: Vec<f64> = (0..2)
                    .flat_map(|z1| (0..2).map(move |z2| (z1, z2)))
                    .map(|(z1, z2)| phi[z1][z2][w])
                    .collect();
                check_simplex(
                    &slice,
                    &format!("joint column for edge ({j}, {k}) task {task}"),
                )?;
                for z1 in 0..2 {
                    let row = phi[z1][0][w] + phi[z1][1][w];
                    if (row - truth.mu[j][slot_j][z1][w]).abs() > 1e-9 {
                        return Err(Error::Validate(format!(
                            "joint table for edge ({j}, {k}) task {task} disagrees with \
                             source {j}'s accuracy table in its marginals"
                        )));
                    }
                }
                for z2 in 0..2 {
                    let col = phi[0][z2][w] + phi[1][z2][w];
                    if (col - truth.mu[k][slot_k][z2][w]).abs() > 1e-9 {
                        return Err(Error::Validate(format!(
                            "joint table for edge ({j}, {k}) task {task} disagrees with \
                             source {k}'s accuracy table in its marginals"
                        )));
                    }
                }
            }
        }
        Ok(GeneratorSpec { model, truth })
    }

    pub fn model(&self) -> &LabelModel {
        &self.model
    }

    pub fn truth(&self) -> &TruthTables {
        &self.truth
    }

    /// The true parameters in fitted-parameter form, tied exactly as the
    /// model's cells are.
    pub fn true_params(&self) -> LabelModelParams {
        let cells = self
            .model
            .cells()
            .iter()
            .map(|cell| {
                let (j0, t0) = cell.members[0];
                let slot0 = self.model.sources()[j0].slot_of(t0).expect("member coverage");
                let gamma = self.truth.abstain[j0][slot0];
                let mut table = self.truth.mu[j0][slot0];
                for row in &mut table {
                    for v in row {
                        *v *= 1.0 - gamma;
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
        let edges = self
            .truth
            .phi
            .iter()
            .map(|(&(j, k, task), phi)| {
                let slot_j = self.model.sources()[j].slot_of(task).expect("edge coverage");
                let slot_k = self.model.sources()[k].slot_of(task).expect("edge coverage");
                let scale =
                    (1.0 - self.truth.abstain[j][slot_j]) * (1.0 - self.truth.abstain[k][slot_k]);
                let mut table = *phi;
                for plane in &mut table {
                    for row in plane {
                        for v in row {
                            *v *= scale;
                        }
                    }
                }
                EdgeParams { j, k, task, table }
            })
            .collect();
        LabelModelParams {
            cells,
            edges,
            diagnostics: Diagnostics {
                method: "truth".into(),
                n: None,
                b_min: 0.0,
                pinv_norm_max: 0.0,
                warnings: Vec::new(),
            },
        }
    }

    /// Strips every correlation edge; sampling is unaffected, but fitting
    /// and inference against the returned model treat all sources as
    /// conditionally independent.
    pub fn independent_model(&self) -> Result<LabelModel> {
        LabelModel::new(
            self.model.layout().clone(),
            self.model.sources().to_vec(),
            &[],
            self.model.prior().clone(),
        )
    }

    /// Reads a generator description: a model configuration plus a `truth`
    /// section holding the sampling tables and the sample plan.
    pub fn load(path: &Path) -> Result<LoadedGenerator> {
        let text = std::fs::read_to_string(path)?;
        let config: TruthConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let (model, warnings) = LabelModel::from_config(config.model, path.parent())?;
        let n_sources = model.n_sources();
        let section = config.truth;
        let abstain = match section.abstain {
            Some(a) => a,
            None => model.sources().iter().map(|s| vec![0.0; s.arity()]).collect(),
        };
        let mut phi = BTreeMap::new();
        for entry in &section.phi {
            let [a, b] = entry.edge;
            if a == 0 || b == 0 || a > n_sources || b > n_sources || entry.task == 0 {
                return Err(Error::Validate(format!(
                    "truth phi entry references edge {:?} on task {}; source and task ids are 1-based",
                    entry.edge, entry.task
                )));
            }
            let (j, k) = (a - 1, b - 1);
            let (key, table) = if j <= k {
                ((j, k, entry.task - 1), entry.table)
            } else {
                let mut t = [[[0.0f64; 2]; 2]; 2];
                for z1 in 0..2 {
                    for z2 in 0..2 {
                        t[z1][z2] = entry.table[z2][z1];
                    }
                }
                ((k, j, entry.task - 1), t)
            };
            if phi.insert(key, table).is_some() {
                return Err(Error::Validate(format!(
                    "truth phi entry for edge {:?} task {} appears twice",
                    entry.edge, entry.task
                )));
            }
        }
        let spec = GeneratorSpec::new(
            model,
            TruthTables {
                mu: section.mu,
                abstain,
                phi,
            },
        )?;
        Ok(LoadedGenerator {
            spec,
            n: section.n,
            seed: section.seed,
            warnings,
        })
    }

    /// Writes the generator in the form [`GeneratorSpec::load`] reads.
    pub fn save(&self, path: &Path, n: usize, seed: u64) -> Result<()> {
        let config = TruthConfig {
            model: self.model.to_config(),
            truth: TruthSection {
                n,
                seed,
                mu: self.truth.mu.clone(),
                abstain: Some(self.truth.abstain.clone()),
                phi: self
                    .truth
                    .phi
                    .iter()
                    .map(|(&(j, k, task), &table)| PhiEntry {
                        edge: [j + 1, k + 1],
                        task: task + 1,
                        table,
                    })
                    .collect(),
            },
        };
        let text = serde_json::to_string_pretty(&config)
            .map_err(|e| Error::Parse(format!("could not serialize generator: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// On-disk generator description: the model configuration with a `truth`
/// section alongside it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub truth: TruthSection,
}

/// Sampling tables plus the declared sample plan. Tables are positional and
/// 0-based like the in-memory forms; source and task ids inside [`PhiEntry`]
/// follow the 1-based file convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSection {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// `mu[source][slot][z][w]`, indices ordered +1 before −1.
    pub mu: Vec<Vec<[[f64; 2]; 2]>>,
    /// `abstain[source][slot]`; omitted means never abstain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstain: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phi: Vec<PhiEntry>,
}

/// One joint voting table for a correlated pair on one shared task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhiEntry {
    /// 1-based source ids.
    pub edge: [usize; 2],
    /// 1-based task id.
    pub task: usize,
    /// `table[z1][z2][w]`, indices ordered +1 before −1.
    pub table: [[[f64; 2]; 2]; 2],
}

/// A generator read from disk together with its declared sample plan.
#[derive(Debug)]
pub struct LoadedGenerator {
    pub spec: GeneratorSpec,
    pub n: usize,
    pub seed: u64,
    pub warnings: Vec<Warning>,
}

const SALT_LABELS: u64 = 0x6c61_62656c;
const SALT_VOTE: u64 = 1 << 32;
const SALT_ABSTAIN: u64 = 2 << 32;
const SALT_EDGE: u64 = 3 << 32;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One independent random stream per (master seed, sequence, role), so each
/// sequence-source pair owns its randomness and adding sources or sequences
/// never perturbs existing draws.
fn stream(master: u64, seq: u64, salt: u64) -> ChaCha8Rng {
    let mut state = splitmix(master);
    state = splitmix(state ^ seq);
    state = splitmix(state ^ salt);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn sample_config(cumulative: &[f64], u: f64) -> u32 {
    cumulative.partition_point(|&c| c < u) as u32
}

/// Draws `n` sequences of votes plus their latent element configurations.
pub fn generate(spec: &GeneratorSpec, n: usize, seed: u64) -> Result<(VoteTensor, Vec<u32>)> {
    let model = spec.model();
    let layout = model.layout();
    let sources = model.sources();
    let truth = spec.truth();

    let mut cumulative = Vec::with_capacity(layout.n_configs());
    let mut acc = crate::kahan::KahanSum::default();
    for &p in model.prior().table() {
        acc.add(p);
        cumulative.push(acc.value());
    }

    let mut edge_slots: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut edge_order: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for ((j, k), tasks) in model.edges_with_tasks() {
        for &task in &tasks {
            let slot_j = sources[j].slot_of(task).expect("edge coverage");
            let slot_k = sources[k].slot_of(task).expect("edge coverage");
            edge_slots.insert((j, slot_j));
            edge_slots.insert((k, slot_k));
        }
        edge_order.push((j, k, tasks));
    }

    let total: usize = sources.iter().map(|s| s.arity()).sum();
    let offsets: Vec<usize> = sources
        .iter()
        .scan(0usize, |acc, s| {
            let o = *acc;
            *acc += s.arity();
            Some(o)
        })
        .collect();

    let per_seq: Vec<(Vec<i8>, u32)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let u = stream(seed, i, SALT_LABELS).gen::<f64>();
            let config = sample_config(&cumulative, u).min(layout.n_configs() as u32 - 1);
            let mut row = vec![0i8; total];

            for (j, k, tasks) in &edge_order {
                let mut rng = stream(seed, i, SALT_EDGE ^ ((*j as u64) << 16) ^ (*k as u64));
                for &task in tasks {
                    let w = layout.derived_label(task, config);
                    let wi = usize::from(w < 0);
                    let phi = &truth.phi[&(*j, *k, task)];
                    let u = rng.gen::<f64>();
                    let probs = [
                        phi[0][0][wi],
                        phi[0][1][wi],
                        phi[1][0][wi],
                        phi[1][1][wi],
                    ];
                    let mut cdf = 0.0;
                    let mut idx = 3;
                    for (q, &p) in probs.iter().enumerate() {
                        cdf += p;
                        if u < cdf {
                            idx = q;
                            break;
                        }
                    }
                    let z1: i8 = if idx < 2 { 1 } else { -1 };
                    let z2: i8 = if idx % 2 == 0 { 1 } else { -1 };
                    let slot_j = sources[*j].slot_of(task).expect("edge coverage");
                    let slot_k = sources[*k].slot_of(task).expect("edge coverage");
                    row[offsets[*j] + slot_j] = z1;
                    row[offsets[*k] + slot_k] = z2;
                }
            }

            for (j, source) in sources.iter().enumerate() {
                let mut rng = stream(seed, i, SALT_VOTE ^ j as u64);
                for (slot, &task) in source.coverage.iter().enumerate() {
                    if edge_slots.contains(&(j, slot)) {
                        continue;
                    }
                    let w = layout.derived_label(task, config);
                    let wi = usize::from(w < 0);
                    let p_pos = truth.mu[j][slot][0][wi];
                    let u = rng.gen::<f64>();
                    row[offsets[j] + slot] = if u < p_pos { 1 } else { -1 };
                }
            }

            for (j, source) in sources.iter().enumerate() {
                let mut rng = stream(seed, i, SALT_ABSTAIN ^ j as u64);
                for slot in 0..source.arity() {
                    let u = rng.gen::<f64>();
                    if u < truth.abstain[j][slot] {
                        row[offsets[j] + slot] = 0;
                    }
                }
            }
            (row, config)
        })
        .collect();

    let mut votes = VoteTensor::new(n, sources);
    let mut latent = Vec::with_capacity(n);
    for (i, (row, config)) in per_seq.into_iter().enumerate() {
        let mut cursor = 0;
        for (j, source) in sources.iter().enumerate() {
            for slot in 0..source.arity() {
                votes.set(i, j, slot, row[cursor])?;
                cursor += 1;
            }
        }
        latent.push(config);
    }
    Ok((votes, latent))
}

/// Frequency-counted parameters conditioned on the latent labels the
/// generator actually drew: the strongest available reference short of the
/// specification itself.
pub fn oracle_params(
    model: &LabelModel,
    votes: &VoteTensor,
    latent: &[u32],
) -> Result<LabelModelParams> {
    let layout = model.layout();
    let n = votes.n();
    if n == 0 || latent.len() != n {
        return Err(Error::InsufficientData(
            "latent configurations must cover every sequence".into(),
        ));
    }
    let mut cells = Vec::new();
    for (j, source) in model.sources().iter().enumerate() {
        for (slot, &task) in source.coverage.iter().enumerate() {
            let mut counts = [[0u64; 2]; 3];
            for (seq, &config) in latent.iter().enumerate() {
                let w = layout.derived_label(task, config);
                let wi = usize::from(w < 0);
                let z = votes.get(seq, j, slot);
                let zi = match z {
                    1 => 0,
                    -1 => 1,
                    _ => 2,
                };
                counts[zi][wi] += 1;
            }
            let mut table = [[0.0f64; 2]; 2];
            for w in 0..2 {
                let total = counts[0][w] + counts[1][w] + counts[2][w];
                if total == 0 {
                    return Err(Error::InsufficientData(format!(
                        "no sequences with label class {} on task {task}",
                        if w == 0 { "+1" } else { "-1" }
                    )));
                }
                table[0][w] = counts[0][w] as f64 / total as f64;
                table[1][w] = counts[1][w] as f64 / total as f64;
            }
            let abstain = (counts[2][0] + counts[2][1]) as f64 / n as f64;
            cells.push(CellParams {
                group: format!("_oracle_{:04}", j),
                offset: slot,
                members: vec![(j, task)],
                table,
                abstain,
            });
        }
    }
    let mut edges = Vec::new();
    for ((j, k), tasks) in model.edges_with_tasks() {
        for task in tasks {
            let slot_j = model.sources()[j].slot_of(task).expect("edge coverage");
            let slot_k = model.sources()[k].slot_of(task).expect("edge coverage");
            let mut counts = [[[0u64; 2]; 2]; 2];
            let mut class_totals = [0u64; 2];
            for (seq, &config) in latent.iter().enumerate() {
                let w = layout.derived_label(task, config);
                let wi = usize::from(w < 0);
                class_totals[wi] += 1;
                let z1 = votes.get(seq, j, slot_j);
                let z2 = votes.get(seq, k, slot_k);
                if z1 == 0 || z2 == 0 {
                    continue;
                }
                counts[usize::from(z1 < 0)][usize::from(z2 < 0)][wi] += 1;
            }
            let mut table = [[[0.0f64; 2]; 2]; 2];
            for w in 0..2 {
                if class_totals[w] == 0 {
                    return Err(Error::InsufficientData(format!(
                        "no sequences with label class {} on task {task}",
                        if w == 0 { "+1" } else { "-1" }
                    )));
                }
                for z1 in 0..2 {
                    for z2 in 0..2 {
                        table[z1][z2][w] = counts[z1][z2][w] as f64 / class_totals[w] as f64;
                    }
                }
            }
            edges.push(EdgeParams { j, k, task, table });
        }
    }
    Ok(LabelModelParams {
        cells,
        edges,
        diagnostics: Diagnostics {
            method: "latent_oracle".into(),
            n: Some(n as u64),
            b_min: 0.0,
            pinv_norm_max: 0.0,
            warnings: Vec::new(),
        },
    })
}

/// Analytic population statistics under a generator: expectations are exact
/// sums over label configurations, so fitting against this oracle isolates
/// identification error from sampling error.
pub struct PopulationOracle<'a> {
    spec: &'a GeneratorSpec,
}

impl<'a> PopulationOracle<'a> {
    pub fn new(spec: &'a GeneratorSpec) -> Self {
        Self { spec }
    }
}

impl ProductOracle for PopulationOracle<'_> {
    fn products(&self, requests: &[ProductRequest]) -> Result<Vec<ProductStats>> {
        let model = self.spec.model();
        let layout = model.layout();
        let truth = self.spec.truth();
        requests
            .iter()
            .map(|req| {
                let terms: Vec<(usize, usize, usize)> = req
                    .terms
                    .iter()
                    .map(|&(j, slot)| (j, slot, model.sources()[j].coverage[slot]))
                    .collect();
                let mut used = vec![false; terms.len()];
                let mut joints: Vec<(usize, usize, usize)> = Vec::new();
                for x in 0..terms.len() {
                    if used[x] {
                        continue;
                    }
                    for y in (x + 1)..terms.len() {
                        if used[y] || terms[x].2 != terms[y].2 {
                            continue;
                        }
                        let (lo, hi) = if terms[x].0 < terms[y].0 {
                            (terms[x].0, terms[y].0)
                        } else {
                            (terms[y].0, terms[x].0)
                        };
                        if truth.phi.contains_key(&(lo, hi, terms[x].2)) {
                            joints.push((lo, hi, terms[x].2));
                            used[x] = true;
                            used[y] = true;
                            break;
                        }
                    }
                }
                let singles: Vec<(usize, usize, usize)> = terms
                    .iter()
                    .zip(&used)
                    .filter(|(_, &u)| !u)
                    .map(|(&t, _)| t)
                    .collect();
                let mut expectation = crate::kahan::KahanSum::default();
                for config in 0..layout.n_configs() as u32 {
                    let p = model.prior().prob(config);
                    if p == 0.0 {
                        continue;
                    }
                    let mut factor = p;
                    for &(j, k, task) in &joints {
                        let w = layout.derived_label(task, config);
                        let wi = usize::from(w < 0);
                        let phi = &truth.phi[&(j, k, task)];
                        factor *= phi[0][0][wi] - phi[0][1][wi] - phi[1][0][wi] + phi[1][1][wi];
                    }
                    for &(j, slot, task) in &singles {
                        let w = layout.derived_label(task, config);
                        let wi = usize::from(w < 0);
                        let mu = &truth.mu[j][slot];
                        factor *= mu[0][wi] - mu[1][wi];
                    }
                    expectation.add(factor);
                }
                Ok(ProductStats {
                    value: expectation.value(),
                    support: 1,
                })
            })
            .collect()
    }

    fn abstain_rate(&self, source: usize, slot: usize) -> Result<f64> {
        Ok(self.spec.truth().abstain[source][slot])
    }

    fn n(&self) -> Option<usize> {
        None
    }
}

/// Symmetric accuracy table.
pub fn sym_table(acc: f64) -> [[f64; 2]; 2] {
    [[acc, 1.0 - acc], [1.0 - acc, acc]]
}

/// A correlated joint table whose marginals equal the two accuracy tables
/// exactly: mass `d` moves onto the agreement diagonal per label class,
/// where `d` is the given fraction of the largest shift that keeps every
/// entry non-negative.
pub fn correlated_table(
    mu_j: &[[f64; 2]; 2],
    mu_k: &[[f64; 2]; 2],
    boost: f64,
) -> [[[f64; 2]; 2]; 2] {
    let mut phi = [[[0.0f64; 2]; 2]; 2];
    for w in 0..2 {
        let a = mu_j[0][w];
        let b = mu_k[0][w];
        let headroom = (a * (1.0 - b)).min((1.0 - a) * b);
        let d = boost * headroom;
        phi[0][0][w] = a * b + d;
        phi[0][1][w] = a * (1.0 - b) - d;
        phi[1][0][w] = (1.0 - a) * b - d;
        phi[1][1][w] = (1.0 - a) * (1.0 - b) + d;
    }
    phi
}

/// First-order Markov chain over element labels: `start` is the probability
/// the first element is positive, `stay` the probability each later element
/// keeps its predecessor's sign.
pub fn markov_prior(t: usize, start: f64, stay: f64) -> Result<Prior> {
    let n = 1usize << t;
    let mut table = vec![0.0f64; n];
    for (config, slot) in table.iter_mut().enumerate() {
        let sign = |e: usize| -> bool { config >> e & 1 == 0 };
        let mut p = if sign(0) { start } else { 1.0 - start };
        for e in 1..t {
            p *= if sign(e) == sign(e - 1) { stay } else { 1.0 - stay };
        }
        *slot = p;
    }
    Ok(Prior::from_table(table, false)?.0)
}

/// The worked multi-resolution scenario: four elements under three windows
/// and one sequence-level task, ten sources in three tie groups, one
/// duplicated frame source pair and one correlated sequence pair, and a
/// nearly coherent two-point prior.
pub fn scene_fixture() -> Result<GeneratorSpec> {
    let layout = TaskLayout::new(
        4,
        AggregationRule::AnyPositive,
        &[(2, vec![0, 1]), (2, vec![1, 2]), (2, vec![2, 3]), (3, vec![0, 1, 2, 3])],
    )?;
    let coverages: Vec<(usize, Vec<usize>, &str)> = vec![
        (1, vec![0], "frame"),
        (1, vec![0], "frame"),
        (1, vec![1], "frame"),
        (1, vec![2], "frame"),
        (1, vec![3], "frame"),
        (2, vec![4], "window"),
        (2, vec![5], "window"),
        (2, vec![6], "window"),
        (3, vec![7], "scene"),
        (3, vec![7], "scene"),
    ];
    let sources: Vec<SourceSpec> = coverages
        .into_iter()
        .enumerate()
        .map(|(id, (res, cov, group))| SourceSpec::new(id, res, cov, group, &layout))
        .collect::<Result<_>>()?;
    let mut table = vec![0.0f64; 16];
    table[0] = 0.35;
    table[15] = 0.65;
    let prior = Prior::from_table(table, true)?.0;
    let model = LabelModel::new(layout, sources, &[(0, 1), (8, 9)], prior)?;

    let accs = [0.78, 0.78, 0.78, 0.78, 0.78, 0.83, 0.83, 0.83, 0.88, 0.88];
    let gammas = [0.10, 0.10, 0.10, 0.10, 0.10, 0.05, 0.05, 0.05, 0.0, 0.0];
    let mu: Vec<Vec<[[f64; 2]; 2]>> = accs.iter().map(|&a| vec![sym_table(a)]).collect();
    let abstain: Vec<Vec<f64>> = gammas.iter().map(|&g| vec![g]).collect();
    let mut phi = BTreeMap::new();
    phi.insert((0, 1, 0), correlated_table(&sym_table(0.78), &sym_table(0.78), 0.6));
    phi.insert((8, 9, 7), correlated_table(&sym_table(0.88), &sym_table(0.88), 0.4));
    GeneratorSpec::new(model, TruthTables { mu, abstain, phi })
}

/// A randomly drawn model inside the class where agreement-based recovery is
/// exact: banks of at least three mutually independent symmetric sources per
/// estimated task, an optional sequence-level bank, an optional correlated
/// pair inside a four-source bank, arbitrary abstention rates, and a dense
/// random prior.
pub fn random_exact_model(seed: u64) -> Result<GeneratorSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(2..=5usize);
    let with_scene = rng.gen_bool(0.5);
    let with_edge = rng.gen_bool(0.5);
    let bank = if with_edge { 4 } else { 3 + usize::from(rng.gen_bool(0.5)) };

    let coarse: Vec<(usize, Vec<usize>)> = if with_scene {
        vec![(2, (0..t).collect())]
    } else {
        Vec::new()
    };
    let layout = TaskLayout::new(t, AggregationRule::AnyPositive, &coarse)?;
    let scene_task = with_scene.then_some(t);

    let mut sources = Vec::new();
    for j in 0..bank {
        sources.push(SourceSpec::new(
            j,
            1,
            (0..t).collect(),
            format!("s{j}"),
            &layout,
        )?);
    }
    if let Some(task) = scene_task {
        for q in 0..3 {
            let j = bank + q;
            sources.push(SourceSpec::new(j, 2, vec![task], format!("s{j}"), &layout)?);
        }
    }

    let n_configs = 1usize << t;
    let mut table: Vec<f64> = (0..n_configs).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = table.iter().sum();
    for p in &mut table {
        *p /= total;
    }
    let prior = Prior::from_table(table, false)?.0;

    let edges: Vec<(usize, usize)> = if with_edge { vec![(0, 1)] } else { Vec::new() };
    let model = LabelModel::new(layout, sources, &edges, prior)?;

    let mut mu = Vec::new();
    let mut abstain = Vec::new();
    for source in model.sources() {
        let mut per_slot = Vec::new();
        let mut per_gamma = Vec::new();
        for _ in 0..source.arity() {
            per_slot.push(sym_table(rng.gen_range(0.62..0.92)));
            per_gamma.push(rng.gen_range(0.0..0.3));
        }
        mu.push(per_slot);
        abstain.push(per_gamma);
    }
    let mut phi = BTreeMap::new();
    if with_edge {
        for task in 0..t {
            let boost = rng.gen_range(0.2..0.7);
            phi.insert(
                (0, 1, task),
                correlated_table(&mu[0][task], &mu[1][task], boost),
            );
        }
    }
    GeneratorSpec::new(model, TruthTables { mu, abstain, phi })
}

/// Twelve sources in three tie groups, one per element position, every
/// element watched by all three groups, under a first-order Markov prior.
pub fn scaling_fixture() -> Result<GeneratorSpec> {
    let t = 4usize;
    let layout = TaskLayout::new(t, AggregationRule::AnyPositive, &[])?;
    let accs = [0.75, 0.80, 0.85];
    let mut sources = Vec::new();
    for g in 0..3 {
        for p in 0..t {
            sources.push(SourceSpec::new(
                g * t + p,
                1,
                vec![p],
                format!("g{g}"),
                &layout,
            )?);
        }
    }
    let prior = markov_prior(t, 0.6, 0.7)?;
    let model = LabelModel::new(layout, sources, &[], prior)?;
    let mu: Vec<Vec<[[f64; 2]; 2]>> = (0..3)
        .flat_map(|g| std::iter::repeat_n(vec![sym_table(accs[g])], t))
        .collect();
    let abstain = vec![vec![0.0]; 3 * t];
    GeneratorSpec::new(
        model,
        TruthTables {
            mu,
            abstain,
            phi: BTreeMap::new(),
        },
    )
}

/// Four sources over four elements where two sources are near duplicates:
/// modeling their joint behavior is the difference between counting one
/// opinion twice and once.
pub fn benefit_fixture() -> Result<GeneratorSpec> {
    let t = 4usize;
    let layout = TaskLayout::new(t, AggregationRule::AnyPositive, &[])?;
    let sources = vec![
        SourceSpec::new(0, 1, (0..t).collect(), "a1", &layout)?,
        SourceSpec::new(1, 1, (0..t).collect(), "a2", &layout)?,
        SourceSpec::new(2, 1, (0..t).collect(), "c", &layout)?,
        SourceSpec::new(3, 1, (0..t).collect(), "d", &layout)?,
    ];
    let prior = markov_prior(t, 0.45, 0.7)?;
    let model = LabelModel::new(layout, sources, &[(0, 1)], prior)?;
    let accs = [0.80, 0.80, 0.70, 0.65];
    let mu: Vec<Vec<[[f64; 2]; 2]>> = accs
        .iter()
        .map(|&a| vec![sym_table(a); t])
        .collect();
    let abstain = vec![vec![0.0; t]; 4];
    let mut phi = BTreeMap::new();
    for task in 0..t {
        phi.insert(
            (0, 1, task),
            correlated_table(&sym_table(0.80), &sym_table(0.80), 0.9),
        );
    }
    GeneratorSpec::new(model, TruthTables { mu, abstain, phi })
}

/// Euclidean distance between two parameter sets' stacked accuracy tables.
pub fn parameter_distance(a: &LabelModelParams, b: &LabelModelParams) -> f64 {
    let va = a.stacked_mu();
    let vb = b.stacked_mu();
    assert_eq!(va.len(), vb.len(), "parameter vectors must align");
    va.iter()
        .zip(&vb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One measurement of estimation error at a sample size.
#[derive(Debug, Clone)]
pub struct ScalingPoint {
    pub n: usize,
    pub seed: u64,
    pub tying: bool,
    pub error: f64,
}

/// Fits tied and untied variants across a sample-size grid and seeds,
/// recording parameter recovery error against the generator's truth.
pub fn scaling_experiment(
    spec: &GeneratorSpec,
    n_grid: &[usize],
    seeds: &[u64],
) -> Result<Vec<ScalingPoint>> {
    let truth = spec.true_params();
    let mut rows = Vec::with_capacity(n_grid.len() * seeds.len() * 2);
    for &n in n_grid {
        for &seed in seeds {
            let (votes, _) = generate(spec, n, seed)?;
            let oracle = VotesOracle::new(&votes);
            for tying in [true, false] {
                let error = match crate::estimator::fit_closed_form(
                    spec.model(),
                    &oracle,
                    &FitOptions { tying },
                ) {
                    Ok(params) => parameter_distance(&params, &truth),
                    Err(e) => {
                        log::warn!("fit failed at n = {n}, seed = {seed}, tying = {tying}: {e}");
                        f64::NAN
                    }
                };
                rows.push(ScalingPoint { n, seed, tying, error });
            }
        }
    }
    Ok(rows)
}

/// Writes scaling measurements as `n,seed,tying,error`.
pub fn write_scaling_csv<W: io::Write>(rows: &[ScalingPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "seed", "tying", "error"])
        .map_err(|e| Error::Parse(format!("could not write scaling rows: {e}")))?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.seed.to_string(),
            r.tying.to_string(),
            format!("{:.16e}", r.error),
        ])
        .map_err(|e| Error::Parse(format!("could not write scaling rows: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `ln(mean error)` against `ln(n)`.
pub fn log_log_slope(rows: &[ScalingPoint], tying: bool) -> f64 {
    let mut by_n: BTreeMap<usize, (f64, u32)> = BTreeMap::new();
    for r in rows
        .iter()
        .filter(|r| r.tying == tying && r.error.is_finite())
    {
        let e = by_n.entry(r.n).or_insert((0.0, 0));
        e.0 += r.error;
        e.1 += 1;
    }
    let points: Vec<(f64, f64)> = by_n
        .into_iter()
        .map(|(n, (sum, count))| ((n as f64).ln(), (sum / count as f64).ln()))
        .collect();
    let m = points.len() as f64;
    let mean_x: f64 = points.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y: f64 = points.iter().map(|p| p.1).sum::<f64>() / m;
    let cov: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let var: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    cov / var
}

/// One end-task measurement comparing labeling strategies on a seed.
#[derive(Debug, Clone)]
pub struct BenefitRow {
    pub seed: u64,
    pub method: String,
    pub f1: f64,
}

/// Compares posterior labels with modeled correlations, posterior labels
/// that ignore them, and majority vote, all against the latent labels.
pub fn sequential_benefit_experiment(
    spec: &GeneratorSpec,
    n: usize,
    seeds: &[u64],
) -> Result<Vec<BenefitRow>> {
    let model = spec.model();
    let independent = spec.independent_model()?;
    let layout = model.layout();
    let t = layout.t();
    let mut rows = Vec::with_capacity(seeds.len() * 3);
    for &seed in seeds {
        let (votes, latent) = generate(spec, n, seed)?;
        let oracle = VotesOracle::new(&votes);
        let modeled =
            crate::estimator::fit_closed_form(model, &oracle, &FitOptions::default())?;
        let ignored =
            crate::estimator::fit_closed_form(&independent, &oracle, &FitOptions::default())?;

        let mut gold = Vec::with_capacity(n * t);
        for &config in &latent {
            for e in 0..t {
                gold.push(if config >> e & 1 == 0 { 1i8 } else { -1 });
            }
        }

        let engine_mod = InferenceEngine::new(model, &modeled)?;
        let engine_ind = InferenceEngine::new(&independent, &ignored)?;
        let mut pred_mod = Vec::with_capacity(n * t);
        let mut pred_ind = Vec::with_capacity(n * t);
        for seq in 0..n {
            let (post_m, _) = engine_mod.posterior(&votes, seq);
            let (post_i, _) = engine_ind.posterior(&votes, seq);
            for e in 0..t {
                pred_mod.push(if post_m.task_marginal(layout, e) > 0.5 { 1i8 } else { -1 });
                pred_ind.push(if post_i.task_marginal(layout, e) > 0.5 { 1i8 } else { -1 });
            }
        }
        let mv = majority_vote(&votes, model, 1)?;
        let pred_mv: Vec<i8> = mv.into_iter().flatten().collect();

        rows.push(BenefitRow {
            seed,
            method: "modeled".into(),
            f1: f1_score(&pred_mod, &gold),
        });
        rows.push(BenefitRow {
            seed,
            method: "independent".into(),
            f1: f1_score(&pred_ind, &gold),
        });
        rows.push(BenefitRow {
            seed,
            method: "majority".into(),
            f1: f1_score(&pred_mv, &gold),
        });
    }
    Ok(rows)
}

/// Writes strategy comparison rows as `seed,method,f1`.
pub fn write_benefit_csv<W: io::Write>(rows: &[BenefitRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["seed", "method", "f1"])
        .map_err(|e| Error::Parse(format!("could not write comparison rows: {e}")))?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.method.clone(),
            format!("{:.16e}", r.f1),
        ])
        .map_err(|e| Error::Parse(format!("could not write comparison rows: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
