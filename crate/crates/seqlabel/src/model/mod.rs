//! Domain types: task layout, sources, dependency graph, prior, votes, and
//! the bundled [`LabelModel`] with its JSON configuration format.

pub mod graph;
pub mod layout;
pub mod prior;
pub mod source;
pub mod validate;
pub mod votes;

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
pub use graph::{find_independent_partners, merge_graphs, DependencyGraph, Partner};
pub use layout::{AggregationRule, TaskLayout, MAX_ELEMENTS};
pub use prior::Prior;
pub use source::SourceSpec;
pub use validate::{validate_model, Finding, ValidationReport};
pub use votes::VoteTensor;

/// One tied parameter slot: every (source, task) pair that shares this cell
/// is estimated by a single accuracy table. Cells are ordered by
/// (group name, offset) so downstream parameter files are byte-stable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TieCell {
    pub group: String,
    pub offset: usize,
    /// (source index, task index) pairs pooled into this cell, ordered by
    /// source index.
    pub members: Vec<(usize, usize)>,
}

/// A complete problem description: what the tasks are, who votes on them,
/// which voters are correlated, and the prior over label configurations.
#[derive(Debug, Clone)]
pub struct LabelModel {
    layout: TaskLayout,
    sources: Vec<SourceSpec>,
    graph: DependencyGraph,
    prior: Prior,
    cells: Vec<TieCell>,
    cell_index: Vec<Vec<usize>>,
}

impl LabelModel {
    pub fn new(
        layout: TaskLayout,
        sources: Vec<SourceSpec>,
        edges: &[(usize, usize)],
        prior: Prior,
    ) -> Result<LabelModel> {
        if prior.t() != layout.t() {
            return Err(Error::Validate(format!(
                "prior covers {} elements but the layout has {}",
                prior.t(),
                layout.t()
            )));
        }
        let graph = merge_graphs(&layout, &sources, edges)?;
        let (cells, cell_index) = build_cells(&sources);
        Ok(LabelModel {
            layout,
            sources,
            graph,
            prior,
            cells,
            cell_index,
        })
    }

    pub fn layout(&self) -> &TaskLayout {
        &self.layout
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn graph(&self) -> &DependencyGraph {
        &self.graph
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: Prior) {
        self.prior = prior;
    }

    /// Tied parameter cells in canonical order.
    pub fn cells(&self) -> &[TieCell] {
        &self.cells
    }

    /// The cell holding the table for a source's coverage slot.
    pub fn cell_of(&self, source: usize, slot: usize) -> usize {
        self.cell_index[source][slot]
    }

    /// Tasks covered by both endpoints of a pair, ascending.
    pub fn shared_tasks(&self, j: usize, k: usize) -> Vec<usize> {
        let mut shared: Vec<usize> = self.sources[j]
            .coverage
            .iter()
            .copied()
            .filter(|t| self.sources[k].coverage.contains(t))
            .collect();
        shared.sort_unstable();
        shared
    }

    /// Correlation edges with their shared tasks, in edge order.
    pub fn edges_with_tasks(&self) -> Vec<((usize, usize), Vec<usize>)> {
        self.graph
            .source_edges()
            .iter()
            .map(|&(j, k)| ((j, k), self.shared_tasks(j, k)))
            .collect()
    }

    pub fn load(path: &Path) -> Result<(LabelModel, Vec<Warning>)> {
        let text = std::fs::read_to_string(path)?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        LabelModel::from_config(config, path.parent())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = self.to_config();
        let mut text = serde_json::to_string_pretty(&config)
            .map_err(|e| Error::Parse(format!("serialize model: {e}")))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Builds from the JSON configuration. Indices in configuration files
    /// are 1-based; element tasks 1..T are implicit and may be omitted.
    pub fn from_config(
        config: ModelConfig,
        base_dir: Option<&Path>,
    ) -> Result<(LabelModel, Vec<Warning>)> {
        let t = config.layout.t;
        let mut coarse: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut next_id = t + 1;
        for entry in &config.layout.tasks {
            if entry.id <= t {
                if entry.resolution != 1 {
                    return Err(Error::Validate(format!(
                        "task {}: ids 1..{t} are element tasks and must sit at resolution 1",
                        entry.id
                    )));
                }
                if !(entry.children.is_empty() || entry.children == vec![entry.id]) {
                    return Err(Error::Validate(format!(
                        "task {}: element tasks have no children",
                        entry.id
                    )));
                }
                continue;
            }
            if entry.id != next_id {
                return Err(Error::Validate(format!(
                    "task {}: coarse task ids must be consecutive from {} in declaration order",
                    entry.id,
                    t + 1
                )));
            }
            next_id += 1;
            let children: Vec<usize> = entry
                .children
                .iter()
                .map(|&c| {
                    if c == 0 || c > t {
                        Err(Error::Validate(format!(
                            "task {}: child {c} is not an element task (1..{t})",
                            entry.id
                        )))
                    } else {
                        Ok(c - 1)
                    }
                })
                .collect::<Result<_>>()?;
            coarse.push((entry.resolution, children));
        }
        let layout = TaskLayout::new(t, config.layout.aggregation_rule, &coarse)?;

        let mut sources = Vec::with_capacity(config.sources.len());
        for (pos, entry) in config.sources.iter().enumerate() {
            if entry.id != pos + 1 {
                return Err(Error::Validate(format!(
                    "source {}: ids must be consecutive from 1 in declaration order",
                    entry.id
                )));
            }
            let coverage: Vec<usize> = entry
                .coverage
                .iter()
                .map(|&c| {
                    if c == 0 || c > layout.n_tasks() {
                        Err(Error::Validate(format!(
                            "source {}: coverage task {c} out of range",
                            entry.id
                        )))
                    } else {
                        Ok(c - 1)
                    }
                })
                .collect::<Result<_>>()?;
            let tie_group = match &entry.tie_group {
                Some(name) => {
                    if name.starts_with('_') {
                        return Err(Error::Validate(format!(
                            "source {}: tie group '{name}' uses the reserved '_' prefix",
                            entry.id
                        )));
                    }
                    name.clone()
                }
                None => format!("_singleton_{}", entry.id),
            };
            sources.push(SourceSpec::new(
                pos,
                entry.resolution,
                coverage,
                tie_group,
                &layout,
            )?);
        }

        let edges: Vec<(usize, usize)> = config
            .edges
            .iter()
            .map(|&[a, b]| {
                if a == 0 || b == 0 {
                    Err(Error::Validate(
                        "correlation edges are 1-based source id pairs".into(),
                    ))
                } else {
                    Ok((a - 1, b - 1))
                }
            })
            .collect::<Result<_>>()?;

        let (prior, warnings) = match &config.prior {
            PriorConfig::Uniform => (Prior::uniform(t), Vec::new()),
            PriorConfig::User { table, smooth } => Prior::from_table(table.clone(), *smooth)?,
            PriorConfig::Empirical { dev_path, smooth } => {
                let path = match base_dir {
                    Some(dir) => dir.join(dev_path),
                    None => dev_path.into(),
                };
                let file = std::fs::File::open(&path)?;
                let configs = read_dev_configs(file, t)?;
                Prior::empirical(t, &configs, *smooth)?
            }
        };

        let model = LabelModel::new(layout, sources, &edges, prior)?;
        Ok((model, warnings))
    }

    pub fn to_config(&self) -> ModelConfig {
        let t = self.layout.t();
        let tasks = (t..self.layout.n_tasks())
            .map(|i| {
                let task = self.layout.task(i);
                TaskEntry {
                    id: i + 1,
                    resolution: task.resolution,
                    children: (task.lo..=task.hi).map(|c| c + 1).collect(),
                }
            })
            .collect();
        let sources = self
            .sources
            .iter()
            .map(|s| SourceEntry {
                id: s.id + 1,
                resolution: s.resolution,
                coverage: s.coverage.iter().map(|&c| c + 1).collect(),
                tie_group: if s.tie_group.starts_with('_') {
                    None
                } else {
                    Some(s.tie_group.clone())
                },
            })
            .collect();
        let edges = self
            .graph
            .source_edges()
            .iter()
            .map(|&(a, b)| [a + 1, b + 1])
            .collect();
        ModelConfig {
            layout: LayoutConfig {
                t,
                aggregation_rule: self.layout.rule(),
                tasks,
            },
            sources,
            edges,
            prior: PriorConfig::User {
                table: self.prior.table().to_vec(),
                smooth: true,
            },
        }
    }
}

fn build_cells(sources: &[SourceSpec]) -> (Vec<TieCell>, Vec<Vec<usize>>) {
    let mut groups: BTreeMap<(String, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for s in sources {
        for (slot, &task) in s.coverage.iter().enumerate() {
            groups
                .entry((s.tie_group.clone(), slot))
                .or_default()
                .push((s.id, task));
        }
    }
    let cells: Vec<TieCell> = groups
        .into_iter()
        .map(|((group, offset), members)| TieCell {
            group,
            offset,
            members,
        })
        .collect();
    let mut cell_index: Vec<Vec<usize>> = sources.iter().map(|s| vec![0; s.arity()]).collect();
    for (id, cell) in cells.iter().enumerate() {
        for &(source, _) in &cell.members {
            cell_index[source][cell.offset] = id;
        }
    }
    (cells, cell_index)
}

/// Reads a labeled dev file — CSV `seq_id,task_index,label`, labels ±1 on
/// element tasks — into one configuration index per sequence.
pub fn read_dev_configs<R: io::Read>(reader: R, t: usize) -> Result<Vec<u32>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut per_seq: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
    for record in csv.deserialize() {
        let (seq_id, task_index, label): (u64, usize, i8) =
            record.map_err(|e| Error::Parse(format!("dev labels: {e}")))?;
        if task_index == 0 || task_index > t {
            return Err(Error::Validate(format!(
                "dev labels: task {task_index} is not an element task (1..{t})"
            )));
        }
        if !matches!(label, -1 | 1) {
            return Err(Error::Validate(format!(
                "dev labels: label {label} must be -1 or +1"
            )));
        }
        let entry = per_seq.entry(seq_id).or_insert((0, 0));
        let bit = 1u32 << (task_index - 1);
        if entry.1 & bit != 0 {
            return Err(Error::Validate(format!(
                "dev labels: sequence {seq_id} labels element {task_index} twice"
            )));
        }
        entry.1 |= bit;
        if label == -1 {
            entry.0 |= bit;
        }
    }
    if per_seq.is_empty() {
        return Err(Error::InsufficientData("dev label file is empty".into()));
    }
    let full: u32 = if t == 32 { u32::MAX } else { (1u32 << t) - 1 };
    per_seq
        .into_iter()
        .map(|(seq_id, (config, mask))| {
            if mask != full {
                Err(Error::InsufficientData(format!(
                    "dev labels: sequence {seq_id} is missing element labels"
                )))
            } else {
                Ok(config)
            }
        })
        .collect()
}

/// On-disk model description. All indices are 1-based in files and element
/// tasks may be omitted from `layout.tasks`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layout: LayoutConfig,
    pub sources: Vec<SourceEntry>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    pub prior: PriorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutConfig {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(default)]
    pub aggregation_rule: AggregationRule,
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: usize,
    pub resolution: usize,
    #[serde(default)]
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: usize,
    pub resolution: usize,
    pub coverage: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_group: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    Uniform,
    User {
        table: Vec<f64>,
        #[serde(default = "default_smooth")]
        smooth: bool,
    },
    Empirical {
        dev_path: String,
        #[serde(default = "default_smooth")]
        smooth: bool,
    },
}

fn default_smooth() -> bool {
    true
}
