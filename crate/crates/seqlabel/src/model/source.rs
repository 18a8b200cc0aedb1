use crate::error::{Error, Result};
use crate::model::layout::TaskLayout;

/// One weak supervision source: votes in {−1, 0, +1} on a fixed coverage set
/// of tasks, all at a single resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSpec {
    /// 0-based source index.
    pub id: usize,
    /// 1-based resolution level of every covered task.
    pub resolution: usize,
    /// Covered task indices (0-based), in vote-slot order.
    pub coverage: Vec<usize>,
    /// Sources sharing a tie group share one accuracy table per coverage
    /// slot. Singleton groups mean no tying.
    pub tie_group: String,
}

impl SourceSpec {
    pub fn new(
        id: usize,
        resolution: usize,
        coverage: Vec<usize>,
        tie_group: impl Into<String>,
        layout: &TaskLayout,
    ) -> Result<SourceSpec> {
        if coverage.is_empty() {
            return Err(Error::Validate(format!(
                "source {id}: coverage set is empty"
            )));
        }
        for &task in &coverage {
            if task >= layout.n_tasks() {
                return Err(Error::Validate(format!(
                    "source {id}: coverage task {task} out of range ({} tasks)",
                    layout.n_tasks()
                )));
            }
            if layout.task(task).resolution != resolution {
                return Err(Error::Validate(format!(
                    "source {id}: task {task} sits at resolution {}, source declares {}",
                    layout.task(task).resolution,
                    resolution
                )));
            }
        }
        let mut sorted = coverage.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != coverage.len() {
            return Err(Error::Validate(format!(
                "source {id}: coverage lists a task twice"
            )));
        }
        Ok(SourceSpec {
            id,
            resolution,
            coverage,
            tie_group: tie_group.into(),
        })
    }

    /// Coverage-set size `s_j`.
    pub fn arity(&self) -> usize {
        self.coverage.len()
    }

    /// The slot of a task within this source's coverage, if covered.
    pub fn slot_of(&self, task: usize) -> Option<usize> {
        self.coverage.iter().position(|&t| t == task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layout::AggregationRule;

    fn layout() -> TaskLayout {
        TaskLayout::new(3, AggregationRule::AnyPositive, &[(2, vec![0, 1, 2])]).unwrap()
    }

    #[test]
    fn accepts_single_resolution_coverage() {
        let s = SourceSpec::new(0, 1, vec![0, 2], "g", &layout()).unwrap();
        assert_eq!(s.arity(), 2);
        assert_eq!(s.slot_of(2), Some(1));
        assert_eq!(s.slot_of(1), None);
    }

    #[test]
    fn rejects_mixed_resolutions() {
        let err = SourceSpec::new(0, 1, vec![0, 3], "g", &layout());
        assert!(matches!(err, Err(Error::Validate(_))));
    }

    #[test]
    fn rejects_empty_and_duplicate_coverage() {
        assert!(SourceSpec::new(0, 1, vec![], "g", &layout()).is_err());
        assert!(SourceSpec::new(0, 1, vec![1, 1], "g", &layout()).is_err());
    }

    #[test]
    fn rejects_out_of_range_task() {
        assert!(SourceSpec::new(0, 1, vec![9], "g", &layout()).is_err());
    }
}
