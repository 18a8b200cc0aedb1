use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on sequence length: posteriors and priors enumerate all `2^T`
/// element-label configurations.
pub const MAX_ELEMENTS: usize = 20;

/// How a coarse task's label is determined by its element children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Coarse label is +1 iff at least one child element is +1.
    #[default]
    AnyPositive,
    /// Coarse label is +1 iff every child element is +1.
    AllPositive,
}

/// One task: a unit a source can vote on. Element tasks sit at resolution 1;
/// coarser tasks aggregate a contiguous run of elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    /// 1-based resolution level; 1 = element.
    pub resolution: usize,
    /// Bitmask over element indices this task covers (bit `i` = element `i`).
    pub support: u32,
    /// Contiguous child range `lo..=hi` in element indices.
    pub lo: usize,
    pub hi: usize,
}

/// The task structure of one sequence type: `t` element tasks plus any
/// coarser tasks, each a deterministic aggregation of contiguous elements.
///
/// Element-label configurations are encoded as bitmask indices `0..2^t`:
/// element `i` is `+1` iff bit `i` is clear, so index 0 is the all-positive
/// configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskLayout {
    t: usize,
    rule: AggregationRule,
    tasks: Vec<Task>,
    by_resolution: Vec<Vec<usize>>,
}

impl TaskLayout {
    /// Builds a layout from per-task `(resolution, child_elements)` entries.
    /// The first `t` entries must be the element tasks in order; coarse
    /// entries give their contiguous element children (0-based).
    pub fn new(
        t: usize,
        rule: AggregationRule,
        coarse: &[(usize, Vec<usize>)],
    ) -> Result<TaskLayout> {
        if t == 0 {
            return Err(Error::Validate("sequence length T must be positive".into()));
        }
        if t > MAX_ELEMENTS {
            return Err(Error::SizeExceeded(format!(
                "sequence length {t} exceeds the enumeration cap of {MAX_ELEMENTS} elements"
            )));
        }
        let mut tasks = Vec::with_capacity(t + coarse.len());
        for i in 0..t {
            tasks.push(Task {
                resolution: 1,
                support: 1 << i,
                lo: i,
                hi: i,
            });
        }
        for (idx, (resolution, children)) in coarse.iter().enumerate() {
            let task_no = t + idx;
            if *resolution < 2 {
                return Err(Error::Validate(format!(
                    "task {task_no}: coarse tasks must sit at resolution 2 or higher"
                )));
            }
            if children.is_empty() {
                return Err(Error::Validate(format!(
                    "task {task_no}: coarse task has no children"
                )));
            }
            let lo = *children.iter().min().unwrap();
            let hi = *children.iter().max().unwrap();
            if hi >= t {
                return Err(Error::Validate(format!(
                    "task {task_no}: child element {hi} out of range (T = {t})"
                )));
            }
            let contiguous = children.len() == hi - lo + 1 && {
                let mut sorted = children.clone();
                sorted.sort_unstable();
                sorted.dedup();
                sorted.len() == children.len()
            };
            if !contiguous {
                return Err(Error::Validate(format!(
                    "task {task_no}: children {children:?} are not a contiguous element range"
                )));
            }
            let mut support = 0u32;
            for &c in children {
                support |= 1 << c;
            }
            tasks.push(Task {
                resolution: *resolution,
                support,
                lo,
                hi,
            });
        }
        let max_res = tasks.iter().map(|task| task.resolution).max().unwrap();
        let mut by_resolution = vec![Vec::new(); max_res];
        for (i, task) in tasks.iter().enumerate() {
            by_resolution[task.resolution - 1].push(i);
        }
        for (level, members) in by_resolution.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Validate(format!(
                    "resolution {} declared by no task; levels must be dense",
                    level + 1
                )));
            }
        }
        Ok(TaskLayout {
            t,
            rule,
            tasks,
            by_resolution,
        })
    }

    /// Element-only layout: `t` tasks, no coarse aggregations.
    pub fn elements_only(t: usize) -> Result<TaskLayout> {
        TaskLayout::new(t, AggregationRule::default(), &[])
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn rule(&self) -> AggregationRule {
        self.rule
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_configs(&self) -> usize {
        1 << self.t
    }

    pub fn task(&self, index: usize) -> &Task {
        &self.tasks[index]
    }

    pub fn n_resolutions(&self) -> usize {
        self.by_resolution.len()
    }

    /// Task indices at a 1-based resolution level; empty when no such level
    /// exists.
    pub fn tasks_at(&self, resolution: usize) -> &[usize] {
        self.by_resolution
            .get(resolution.wrapping_sub(1))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// The label a configuration assigns to a task: for element tasks the
    /// element's own sign, for coarse tasks the aggregation of its children.
    #[inline]
    pub fn derived_label(&self, task: usize, config: u32) -> i8 {
        let support = self.tasks[task].support;
        let negatives = config & support;
        let positive = match self.rule {
            AggregationRule::AnyPositive => negatives != support,
            AggregationRule::AllPositive => negatives == 0,
        };
        if positive {
            1
        } else {
            -1
        }
    }

    /// Bitmask of element indices under a task.
    #[inline]
    pub fn support(&self, task: usize) -> u32 {
        self.tasks[task].support
    }

    /// Whether two tasks cover at least one common element.
    #[inline]
    pub fn overlaps(&self, a: usize, b: usize) -> bool {
        self.tasks[a].support & self.tasks[b].support != 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn windows_layout() -> TaskLayout {
        TaskLayout::new(
            4,
            AggregationRule::AnyPositive,
            &[
                (2, vec![0, 1]),
                (2, vec![1, 2]),
                (2, vec![2, 3]),
                (3, vec![0, 1, 2, 3]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn element_labels_follow_bit_convention() {
        let layout = TaskLayout::elements_only(3).unwrap();
        assert_eq!(layout.derived_label(0, 0b000), 1);
        assert_eq!(layout.derived_label(0, 0b001), -1);
        assert_eq!(layout.derived_label(2, 0b011), 1);
        assert_eq!(layout.derived_label(2, 0b100), -1);
    }

    #[test]
    fn any_positive_aggregates_windows() {
        let layout = windows_layout();
        // window over elements {0,1} is task 4
        assert_eq!(layout.derived_label(4, 0b0000), 1);
        assert_eq!(layout.derived_label(4, 0b0001), 1); // element 1 still +1
        assert_eq!(layout.derived_label(4, 0b0011), -1); // both children -1
        // whole sequence is task 7
        assert_eq!(layout.derived_label(7, 0b1111), -1);
        assert_eq!(layout.derived_label(7, 0b0111), 1);
    }

    #[test]
    fn all_positive_flips_the_quantifier() {
        let layout = TaskLayout::new(2, AggregationRule::AllPositive, &[(2, vec![0, 1])]).unwrap();
        assert_eq!(layout.derived_label(2, 0b00), 1);
        assert_eq!(layout.derived_label(2, 0b01), -1);
        assert_eq!(layout.derived_label(2, 0b10), -1);
    }

    #[test]
    fn resolution_partition_is_dense_and_complete() {
        let layout = windows_layout();
        assert_eq!(layout.n_resolutions(), 3);
        assert_eq!(layout.tasks_at(1), &[0, 1, 2, 3]);
        assert_eq!(layout.tasks_at(2), &[4, 5, 6]);
        assert_eq!(layout.tasks_at(3), &[7]);
        let total: usize = (1..=3).map(|r| layout.tasks_at(r).len()).sum();
        assert_eq!(total, layout.n_tasks());
    }

    #[test]
    fn rejects_gapped_children() {
        let err = TaskLayout::new(4, AggregationRule::AnyPositive, &[(2, vec![0, 2])]);
        assert!(matches!(err, Err(Error::Validate(_))));
    }

    #[test]
    fn rejects_empty_resolution_level() {
        let err = TaskLayout::new(2, AggregationRule::AnyPositive, &[(3, vec![0, 1])]);
        assert!(matches!(err, Err(Error::Validate(_))));
    }

    #[test]
    fn rejects_oversized_sequences() {
        assert!(matches!(
            TaskLayout::elements_only(MAX_ELEMENTS + 1),
            Err(Error::SizeExceeded(_))
        ));
        assert!(TaskLayout::elements_only(MAX_ELEMENTS).is_ok());
    }

    #[test]
    fn overlap_uses_supports() {
        let layout = windows_layout();
        assert!(layout.overlaps(4, 0));
        assert!(layout.overlaps(4, 5)); // windows {0,1} and {1,2} share element 1
        assert!(!layout.overlaps(4, 3));
        assert!(layout.overlaps(7, 2));
    }
}
