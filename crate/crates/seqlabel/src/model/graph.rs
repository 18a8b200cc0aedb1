use crate::error::{Error, Result};
use crate::model::layout::TaskLayout;
use crate::model::source::SourceSpec;

/// The combined dependency structure over sources and task labels: declared
/// source–source correlation edges, the task hierarchy edges implied by the
/// layout, and the λ–y coverage edges. Absence of a source edge means the
/// two sources are conditionally independent given all other variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    m: usize,
    source_edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    lambda_y: Vec<(usize, usize)>,
    task_edges: Vec<(usize, usize)>,
}

/// Builds the merged graph from the task side (layout hierarchy) and the
/// source side (declared correlation edges), attaching every source to the
/// tasks it covers.
pub fn merge_graphs(
    layout: &TaskLayout,
    sources: &[SourceSpec],
    source_edges: &[(usize, usize)],
) -> Result<DependencyGraph> {
    let m = sources.len();
    let mut edges = Vec::with_capacity(source_edges.len());
    for &(a, b) in source_edges {
        if a >= m || b >= m {
            let bad = if a >= m { a } else { b };
            return Err(Error::Validate(format!(
                "correlation edge ({a}, {b}) references source {bad}, but only {m} sources are declared"
            )));
        }
        if a == b {
            return Err(Error::Validate(format!(
                "correlation edge ({a}, {b}) is a self-loop"
            )));
        }
        edges.push((a.min(b), a.max(b)));
    }
    edges.sort_unstable();
    if edges.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validate("duplicate correlation edge".into()));
    }
    let mut adjacency = vec![Vec::new(); m];
    for &(a, b) in &edges {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut lambda_y = Vec::new();
    for s in sources {
        for &task in &s.coverage {
            lambda_y.push((s.id, task));
        }
    }
    let mut task_edges = Vec::new();
    for idx in 0..layout.n_tasks() {
        let task = layout.task(idx);
        if task.resolution > 1 {
            for child in task.lo..=task.hi {
                task_edges.push((idx, child));
            }
        }
    }
    Ok(DependencyGraph {
        m,
        source_edges: edges,
        adjacency,
        lambda_y,
        task_edges,
    })
}

impl DependencyGraph {
    pub fn n_sources(&self) -> usize {
        self.m
    }

    pub fn source_edges(&self) -> &[(usize, usize)] {
        &self.source_edges
    }

    pub fn lambda_y_edges(&self) -> &[(usize, usize)] {
        &self.lambda_y
    }

    pub fn task_edges(&self) -> &[(usize, usize)] {
        &self.task_edges
    }

    /// Sources sharing a correlation edge with `j`.
    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.adjacency[j]
    }

    pub fn are_correlated(&self, j: usize, k: usize) -> bool {
        self.adjacency[j].contains(&k)
    }

    /// Whether declared edges form a matching (no source in two edges) —
    /// the structure the pairwise correlation tables require.
    pub fn is_matching(&self) -> bool {
        self.adjacency.iter().all(|n| n.len() <= 1)
    }
}

/// A partner usable in an agreement triplet: source `k` voting on task
/// `task` (the singleton voting set U_k).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partner {
    pub source: usize,
    pub task: usize,
}

/// Finds every source that can serve as an independent partner when
/// estimating the agreement of `members` (one source, or a correlated pair
/// treated as one composite voter) with the true label of `v_task`.
///
/// A candidate must be disjoint from and share no correlation edge with
/// `members`, must cover a task whose element support overlaps `v_task`'s
/// (its voting task is the smallest-support, then lowest-index, such task),
/// and the returned set is itself pairwise uncorrelated, kept greedily in
/// index order. Voting sets are singletons, so every agreement measure pairs
/// an odd vote count with one true label — the even-parity requirement
/// products need in order to be observable.
pub fn find_independent_partners(
    layout: &TaskLayout,
    sources: &[SourceSpec],
    graph: &DependencyGraph,
    members: &[usize],
    v_task: usize,
) -> Result<Vec<Partner>> {
    let mut kept: Vec<Partner> = Vec::new();
    for (k, source) in sources.iter().enumerate() {
        if members.contains(&k) {
            continue;
        }
        if members.iter().any(|&j| graph.are_correlated(j, k)) {
            continue;
        }
        let mut best: Option<(u32, usize)> = None;
        for &task in &source.coverage {
            if !layout.overlaps(task, v_task) {
                continue;
            }
            let size = layout.support(task).count_ones();
            let key = (size, task);
            if best.is_none() || key < best.unwrap() {
                best = Some(key);
            }
        }
        let Some((_, task)) = best else { continue };
        if kept.iter().any(|p| graph.are_correlated(p.source, k)) {
            continue;
        }
        kept.push(Partner { source: k, task });
    }
    if kept.len() < 2 {
        return Err(Error::AssumptionViolation(format!(
            "sources {members:?} on task {v_task}: found {} independent partner(s), but \
             recovering an accuracy from agreements needs at least two other independent \
             sources correlated with the same true label",
            kept.len()
        )));
    }
    Ok(kept)
}
