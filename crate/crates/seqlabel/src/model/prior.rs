use crate::error::{Error, Result, Warning};
use crate::kahan::KahanSum;
use crate::model::layout::TaskLayout;

/// Zero prior entries are raised to this before renormalization when
/// smoothing is on; the Bayes step divides by prior-derived marginals, so
/// hard zeros are unusable.
pub const EPS_PRIOR: f64 = 1e-6;

/// Tolerance on Σ table − 1 for user-supplied tables.
pub const PRIOR_SUM_TOL: f64 = 1e-12;

/// Distribution over the `2^T` element-label configurations of a sequence.
/// Configuration indices follow [`TaskLayout`]'s convention: element `i` is
/// +1 iff bit `i` is clear. Coarse-task probabilities are always derived by
/// aggregation, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    t: usize,
    table: Vec<f64>,
    p_min: f64,
}

impl Prior {
    pub fn uniform(t: usize) -> Prior {
        let n = 1usize << t;
        Prior {
            t,
            table: vec![1.0 / n as f64; n],
            p_min: 1.0 / n as f64,
        }
    }

    /// Builds from an explicit table of `2^T` entries. With `smooth` on,
    /// zero entries are raised to [`EPS_PRIOR`] and the table renormalized,
    /// reported as a warning; with it off, zeros are kept (validation will
    /// flag them and fitting will refuse).
    pub fn from_table(table: Vec<f64>, smooth: bool) -> Result<(Prior, Vec<Warning>)> {
        let n = table.len();
        if n == 0 || n & (n - 1) != 0 {
            return Err(Error::Validate(format!(
                "prior table length {n} is not a power of two"
            )));
        }
        let t = n.trailing_zeros() as usize;
        if t > super::layout::MAX_ELEMENTS {
            return Err(Error::SizeExceeded(format!(
                "prior table implies T = {t}, beyond the enumeration cap"
            )));
        }
        if let Some(bad) = table.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Validate(format!(
                "prior entries must be finite and nonnegative, found {bad}"
            )));
        }
        let total: KahanSum = table.iter().copied().collect();
        let total = total.value();
        if (total - 1.0).abs() > PRIOR_SUM_TOL {
            return Err(Error::Validate(format!(
                "prior table sums to {total:.17}, not 1"
            )));
        }
        let mut warnings = Vec::new();
        let mut table = table;
        let zeros = table.iter().filter(|p| **p == 0.0).count();
        if zeros > 0 && smooth {
            for p in table.iter_mut() {
                if *p == 0.0 {
                    *p = EPS_PRIOR;
                }
            }
            let s: KahanSum = table.iter().copied().collect();
            let s = s.value();
            for p in table.iter_mut() {
                *p /= s;
            }
            warnings.push(Warning::Clamped {
                context: format!("prior: {zeros} zero entries raised to {EPS_PRIOR}"),
                value: 0.0,
                excess: EPS_PRIOR,
            });
        }
        let p_min = table.iter().copied().fold(f64::INFINITY, f64::min);
        Ok((Prior { t, table, p_min }, warnings))
    }

    /// Empirical prior from observed element-label configurations (a labeled
    /// dev set), smoothed so unseen configurations keep positive mass.
    pub fn empirical(t: usize, configs: &[u32], smooth: bool) -> Result<(Prior, Vec<Warning>)> {
        if configs.is_empty() {
            return Err(Error::InsufficientData(
                "empirical prior needs at least one labeled sequence".into(),
            ));
        }
        let n = 1usize << t;
        let mut counts = vec![0u64; n];
        for &c in configs {
            if c as usize >= n {
                return Err(Error::Validate(format!(
                    "labeled configuration {c:#b} out of range for T = {t}"
                )));
            }
            counts[c as usize] += 1;
        }
        let total = configs.len() as f64;
        let table: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
        Prior::from_table(table, smooth)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    #[inline]
    pub fn prob(&self, config: u32) -> f64 {
        self.table[config as usize]
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    /// P(task label = +1) derived by enumeration.
    pub fn task_marginal(&self, layout: &TaskLayout, task: usize) -> f64 {
        let mut acc = KahanSum::new();
        for (config, &p) in self.table.iter().enumerate() {
            if layout.derived_label(task, config as u32) == 1 {
                acc.add(p);
            }
        }
        acc.value()
    }

    /// E[∏ labels of the listed tasks] under the prior.
    pub fn product_expectation(&self, layout: &TaskLayout, tasks: &[usize]) -> f64 {
        let mut acc = KahanSum::new();
        for (config, &p) in self.table.iter().enumerate() {
            let mut sign = 1i8;
            for &task in tasks {
                sign *= layout.derived_label(task, config as u32);
            }
            acc.add(p * sign as f64);
        }
        acc.value()
    }

    /// Joint label table of two tasks, indexed `[w_u][w_v]` with 0 = +1 and
    /// 1 = −1.
    pub fn pair_table(&self, layout: &TaskLayout, u: usize, v: usize) -> [[f64; 2]; 2] {
        let mut acc = [[KahanSum::new(); 2]; 2];
        for (config, &p) in self.table.iter().enumerate() {
            let wu = if layout.derived_label(u, config as u32) == 1 {
                0
            } else {
                1
            };
            let wv = if layout.derived_label(v, config as u32) == 1 {
                0
            } else {
                1
            };
            acc[wu][wv].add(p);
        }
        [
            [acc[0][0].value(), acc[0][1].value()],
            [acc[1][0].value(), acc[1][1].value()],
        ]
    }
}
