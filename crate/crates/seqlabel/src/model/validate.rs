use serde::Serialize;

use crate::error::Warning;
use crate::model::graph::find_independent_partners;
use crate::model::prior::PRIOR_SUM_TOL;
use crate::model::LabelModel;

/// One violated structural assumption, carrying the assumption's name so
/// failures can be grouped by what they break rather than where they arose.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub assumption: &'static str,
    pub detail: String,
}

/// The outcome of structural validation. Fitting refuses to run unless
/// `ok` — every finding would otherwise surface later as a cryptic numeric
/// failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<Finding>,
    pub warnings: Vec<Warning>,
}

/// Checks every assumption the estimators rely on: a normalized and strictly
/// positive prior, consistent tie groups, correlation edges forming a
/// matching with actual shared tasks, and at least two independent partners
/// available for every accuracy the triplet method must recover.
pub fn validate_model(model: &LabelModel) -> ValidationReport {
    let mut findings = Vec::new();
    let layout = model.layout();
    let prior = model.prior();
    let sources = model.sources();
    let graph = model.graph();

    let total: f64 = prior.table().iter().copied().collect::<crate::kahan::KahanSum>().value();
    if (total - 1.0).abs() > PRIOR_SUM_TOL {
        findings.push(Finding {
            assumption: "prior normalization",
            detail: format!("prior table sums to {total:.17}"),
        });
    }
    if prior.p_min() <= 0.0 {
        findings.push(Finding {
            assumption: "positive prior mass",
            detail: "prior has a zero entry (p_min = 0); enable smoothing or adjust the table"
                .into(),
        });
    }

    let mut groups: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (j, s) in sources.iter().enumerate() {
        groups.entry(s.tie_group.as_str()).or_default().push(j);
    }
    for (name, members) in &groups {
        let first = &sources[members[0]];
        for &j in &members[1..] {
            let s = &sources[j];
            if s.resolution != first.resolution || s.arity() != first.arity() {
                findings.push(Finding {
                    assumption: "tie-group consistency",
                    detail: format!(
                        "tie group '{name}': source {} (resolution {}, arity {}) does not match \
                         source {} (resolution {}, arity {})",
                        j + 1,
                        s.resolution,
                        s.arity(),
                        members[0] + 1,
                        first.resolution,
                        first.arity()
                    ),
                });
            }
        }
    }

    if !graph.is_matching() {
        let busy: Vec<usize> = (0..sources.len())
            .filter(|&j| graph.neighbors(j).len() > 1)
            .map(|j| j + 1)
            .collect();
        findings.push(Finding {
            assumption: "correlation edges form a matching",
            detail: format!(
                "sources {busy:?} appear in more than one correlation edge; correlations are \
                 modeled pairwise — merge such sources upstream"
            ),
        });
    }

    for &(j, k) in graph.source_edges() {
        if model.shared_tasks(j, k).is_empty() {
            findings.push(Finding {
                assumption: "correlated pair shares a task",
                detail: format!(
                    "correlation edge ({}, {}) has no common covered task, so its joint table \
                     is undefined",
                    j + 1,
                    k + 1
                ),
            });
        }
    }

    for (j, s) in sources.iter().enumerate() {
        for &task in &s.coverage {
            if let Err(e) = find_independent_partners(layout, sources, graph, &[j], task) {
                findings.push(Finding {
                    assumption: "triplet availability",
                    detail: format!("source {} on task {}: {e}", j + 1, task + 1),
                });
            }
        }
    }
    for &(j, k) in graph.source_edges() {
        for task in model.shared_tasks(j, k) {
            if let Err(e) = find_independent_partners(layout, sources, graph, &[j, k], task) {
                findings.push(Finding {
                    assumption: "triplet availability",
                    detail: format!(
                        "correlated pair ({}, {}) on task {}: {e}",
                        j + 1,
                        k + 1,
                        task + 1
                    ),
                });
            }
        }
    }

    ValidationReport {
        ok: findings.is_empty(),
        findings,
        warnings: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layout::{AggregationRule, TaskLayout};
    use crate::model::prior::Prior;
    use crate::model::source::SourceSpec;

    fn well_formed() -> LabelModel {
        let layout = TaskLayout::new(
            2,
            AggregationRule::AnyPositive,
            &[(2, vec![0, 1])],
        )
        .unwrap();
        let sources = vec![
            SourceSpec::new(0, 1, vec![0, 1], "f", &layout).unwrap(),
            SourceSpec::new(1, 1, vec![0, 1], "f", &layout).unwrap(),
            SourceSpec::new(2, 1, vec![0, 1], "g", &layout).unwrap(),
            SourceSpec::new(3, 2, vec![2], "s", &layout).unwrap(),
        ];
        let prior = Prior::uniform(2);
        LabelModel::new(layout, sources, &[], prior).unwrap()
    }

    #[test]
    fn well_formed_model_passes() {
        let report = validate_model(&well_formed());
        assert!(report.ok, "unexpected findings: {:?}", report.findings);
    }

    #[test]
    fn zero_prior_entry_is_flagged() {
        let mut model = well_formed();
        let (prior, _) = Prior::from_table(vec![0.5, 0.5, 0.0, 0.0], false).unwrap();
        model.set_prior(prior);
        let report = validate_model(&model);
        assert!(!report.ok);
        assert!(report
            .findings
            .iter()
            .any(|f| f.assumption == "positive prior mass"));
    }

    #[test]
    fn inconsistent_tie_group_is_flagged() {
        let layout = TaskLayout::elements_only(2).unwrap();
        let sources = vec![
            SourceSpec::new(0, 1, vec![0], "f", &layout).unwrap(),
            SourceSpec::new(1, 1, vec![0, 1], "f", &layout).unwrap(),
            SourceSpec::new(2, 1, vec![0], "g", &layout).unwrap(),
            SourceSpec::new(3, 1, vec![0], "h", &layout).unwrap(),
        ];
        let model = LabelModel::new(layout, sources, &[], Prior::uniform(2)).unwrap();
        let report = validate_model(&model);
        assert!(report
            .findings
            .iter()
            .any(|f| f.assumption == "tie-group consistency"));
    }

    #[test]
    fn missing_triplet_is_flagged() {
        let layout = TaskLayout::elements_only(1).unwrap();
        let sources = vec![
            SourceSpec::new(0, 1, vec![0], "a", &layout).unwrap(),
            SourceSpec::new(1, 1, vec![0], "b", &layout).unwrap(),
        ];
        let model = LabelModel::new(layout, sources, &[], Prior::uniform(1)).unwrap();
        let report = validate_model(&model);
        assert!(report
            .findings
            .iter()
            .any(|f| f.assumption == "triplet availability"));
    }

    #[test]
    fn non_matching_edges_are_flagged() {
        let layout = TaskLayout::elements_only(1).unwrap();
        let mk = |j: usize, g: &str| SourceSpec::new(j, 1, vec![0], g, &layout).unwrap();
        let sources = vec![mk(0, "a"), mk(1, "b"), mk(2, "c"), mk(3, "d"), mk(4, "e")];
        let model =
            LabelModel::new(layout, sources, &[(0, 1), (1, 2)], Prior::uniform(1)).unwrap();
        let report = validate_model(&model);
        assert!(report
            .findings
            .iter()
            .any(|f| f.assumption == "correlation edges form a matching"));
    }
}
