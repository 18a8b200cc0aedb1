/// Compensated (Kahan–Babuška) summation for float accumulations whose
/// term count is large enough for naive summation to lose digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_digits_naive_summation_drops() {
        let mut kahan = KahanSum::new();
        let mut naive = 0.0f64;
        kahan.add(1.0);
        naive += 1.0;
        for _ in 0..10_000_000 {
            kahan.add(1e-16);
            naive += 1e-16;
        }
        let exact = 1.0 + 1e-16 * 1e7;
        assert!((kahan.value() - exact).abs() < 1e-15);
        assert!((naive - exact).abs() > 1e-10);
    }

    #[test]
    fn collects_from_iterator() {
        let s: KahanSum = (0..100).map(|i| i as f64).collect();
        assert_eq!(s.value(), 4950.0);
    }
}
