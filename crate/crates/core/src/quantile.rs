//! Quantile regression losses and order-statistic utilities.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// Huber loss; `kappa = 0` is taken as the absolute-value limit.
#[inline]
pub fn huber(u: f64, kappa: f64) -> f64 {
    let a = u.abs();
    if kappa <= 0.0 {
        a
    } else if a <= kappa {
        0.5 * u * u
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// d/du of [`huber`]. At `u = 0` with `kappa = 0` the subgradient 0 is used.
#[inline]
pub fn huber_grad(u: f64, kappa: f64) -> f64 {
    if kappa <= 0.0 {
        sign(u)
    } else if u.abs() <= kappa {
        u
    } else {
        kappa * sign(u)
    }
}

#[inline]
fn sign(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn asymmetry(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Huberized quantile loss `|tau - 1(u < 0)| * huber(u, kappa)`.
#[inline]
pub fn quantile_loss(u: f64, tau: f64, kappa: f64) -> f64 {
    asymmetry(u, tau) * huber(u, kappa)
}

/// d/du of [`quantile_loss`].
#[inline]
pub fn quantile_loss_grad(u: f64, tau: f64, kappa: f64) -> f64 {
    asymmetry(u, tau) * huber_grad(u, kappa)
}

/// 1-based index `ceil(n * tau)` of the order statistic used as the sample
/// `tau`-quantile, clamped to `[1, n]`. Products within 1e-12 of an integer
/// snap to it so that `tau = k / n` selects exactly `k`.
pub fn order_index(n: usize, tau: f64) -> usize {
    let x = n as f64 * tau;
    let k = (x - 1e-12).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Quantile levels in the open interval `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileLevels {
    taus: Vec<f64>,
}

impl QuantileLevels {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(&bad) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Domain {
                what: "tau",
                value: bad,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(Self { taus })
    }

    /// `n` i.i.d. draws from `U(0, 1)`.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let taus = (0..n)
            .map(|_| loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u;
                }
            })
            .collect();
        Self { taus }
    }

    /// Midpoints `(i + 0.5) / n`.
    pub fn midpoints(n: usize) -> Self {
        Self {
            taus: (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
}

/// Multiset of scalar return atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    atoms: Vec<f64>,
    sorted: bool,
}

impl ParticleSet {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Empty);
        }
        let sorted = atoms.windows(2).all(|w| w[0] <= w[1]);
        Ok(Self { atoms, sorted })
    }

    /// Sorts (stably) on construction.
    pub fn new_sorted(mut atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Empty);
        }
        atoms.sort_by(f64::total_cmp);
        Ok(Self {
            atoms,
            sorted: true,
        })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn into_atoms(self) -> Vec<f64> {
        self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    pub fn sorted(&self) -> ParticleSet {
        if self.sorted {
            return self.clone();
        }
        let mut atoms = self.atoms.clone();
        atoms.sort_by(f64::total_cmp);
        ParticleSet {
            atoms,
            sorted: true,
        }
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().sum::<f64>() / self.atoms.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParticleSet {
        let atoms: Vec<f64> = self.atoms.iter().map(|&z| f(z)).collect();
        let sorted = atoms.windows(2).all(|w| w[0] <= w[1]);
        ParticleSet { atoms, sorted }
    }

    /// The `ceil(n * tau)`-th order statistic.
    pub fn sample_quantile(&self, tau: f64) -> Result<f64> {
        check_tau(tau)?;
        let k = order_index(self.len(), tau);
        if self.sorted {
            return Ok(self.atoms[k - 1]);
        }
        let mut scratch = self.atoms.clone();
        let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, f64::total_cmp);
        Ok(*kth)
    }

    /// Sample quantiles for several levels with a single sort.
    pub fn sample_quantiles(&self, taus: &[f64]) -> Result<Vec<f64>> {
        let sorted = self.sorted();
        taus.iter().map(|&tau| sorted.sample_quantile(tau)).collect()
    }

    /// `sum_i rho_tau(y_i - theta)` with the unsmoothed (kappa = 0) loss.
    pub fn empirical_risk(&self, theta: f64, tau: f64) -> f64 {
        self.atoms
            .iter()
            .map(|&y| quantile_loss(y - theta, tau, 0.0))
            .sum()
    }

    /// Sorted copy without the `drop_count` largest atoms.
    pub fn droptop(&self, drop_count: usize) -> Result<ParticleSet> {
        if drop_count >= self.len() {
            return Err(Error::Config(format!(
                "cannot drop {drop_count} of {} atoms",
                self.len()
            )));
        }
        let mut sorted = self.sorted();
        sorted.atoms.truncate(self.len() - drop_count);
        Ok(sorted)
    }

    /// Piecewise-linear empirical inverse CDF through `((i + 0.5) / n, x_(i))`,
    /// flat outside the first and last knot.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        debug_assert!(self.sorted);
        let n = self.atoms.len();
        let pos = u * n as f64 - 0.5;
        if pos <= 0.0 {
            return self.atoms[0];
        }
        if pos >= (n - 1) as f64 {
            return self.atoms[n - 1];
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        self.atoms[i] + frac * (self.atoms[i + 1] - self.atoms[i])
    }

    /// Resample the inverse CDF onto `n` midpoint levels.
    pub fn resample(&self, n: usize) -> ParticleSet {
        let sorted = self.sorted();
        let atoms = (0..n)
            .map(|j| sorted.inverse_cdf((j as f64 + 0.5) / n as f64))
            .collect();
        ParticleSet {
            atoms,
            sorted: true,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for z in &self.atoms {
            writeln!(out, "{z}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut atoms = Vec::new();
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let z: f64 = line
                .parse()
                .map_err(|_| Error::Config(format!("not a number: `{line}`")))?;
            atoms.push(z);
        }
        Self::new(atoms)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "tau",
            value: tau,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

/// 1-Wasserstein distance via the quantile coupling.
///
/// Equal sizes match order statistics directly; otherwise the smaller set's
/// inverse CDF is interpolated onto the larger size first.
pub fn wasserstein1(a: &ParticleSet, b: &ParticleSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty);
    }
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let big = big.sorted();
    let small = if small.len() == big.len() {
        small.sorted()
    } else {
        small.resample(big.len())
    };
    let total: f64 = big
        .atoms
        .iter()
        .zip(&small.atoms)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(total / big.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(v: &[f64]) -> ParticleSet {
        ParticleSet::new(v.to_vec()).unwrap()
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-3.0, 0.0), 3.0);
        assert_eq!(huber_grad(-3.0, 0.0), -1.0);
        assert_eq!(huber_grad(0.5, 1.0), 0.5);
        assert_eq!(huber_grad(-2.0, 1.0), -1.0);
    }

    #[test]
    fn quantile_loss_examples() {
        assert_abs_diff_eq!(quantile_loss(1.0, 0.3, 0.0), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(quantile_loss(-1.0, 0.3, 0.0), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(quantile_loss(0.5, 0.9, 1.0), 0.1125, epsilon = 1e-15);
        // kappa = 0 is the pinball loss u (tau - 1(u < 0)).
        for u in [-2.5, -0.1, 0.0, 0.4, 3.0] {
            let ind = if u < 0.0 { 1.0 } else { 0.0 };
            assert_eq!(quantile_loss(u, 0.3, 0.0), u * (0.3 - ind));
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let h = 1e-6;
        for &kappa in &[0.0, 0.5, 1.0] {
            for &tau in &[0.1, 0.5, 0.85] {
                for &u in &[-2.0, -0.3, 0.2, 0.7, 1.9] {
                    let fd = (quantile_loss(u + h, tau, kappa) - quantile_loss(u - h, tau, kappa))
                        / (2.0 * h);
                    assert_abs_diff_eq!(quantile_loss_grad(u, tau, kappa), fd, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn order_index_snaps_exact_products() {
        assert_eq!(order_index(4, 0.5), 2);
        assert_eq!(order_index(10, 0.3), 3);
        assert_eq!(order_index(10, 0.7), 7);
        assert_eq!(order_index(3, 1e-9), 1);
        assert_eq!(order_index(3, 0.999_999), 3);
        assert_eq!(order_index(100, 0.29), 29);
    }

    #[test]
    fn sample_quantile_examples() {
        assert_eq!(set(&[1.0, 2.0, 3.0, 4.0]).sample_quantile(0.5).unwrap(), 2.0);
        assert_eq!(set(&[4.0, 1.0, 3.0, 2.0]).sample_quantile(0.5).unwrap(), 2.0);
        for tau in [0.01, 0.5, 0.99] {
            assert_eq!(set(&[5.0]).sample_quantile(tau).unwrap(), 5.0);
        }
        assert!(set(&[1.0]).sample_quantile(0.0).is_err());
        assert!(set(&[1.0]).sample_quantile(1.0).is_err());
        assert!(matches!(ParticleSet::new(vec![]), Err(Error::Empty)));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let q = set(&draws).sample_quantile(0.25).unwrap();
        assert!((q - 0.25).abs() < 0.02, "q = {q}");
    }

    #[test]
    fn empirical_risk_examples() {
        assert_abs_diff_eq!(set(&[1.0, 2.0, 3.0]).empirical_risk(2.0, 0.5), 1.0);
        assert_eq!(set(&[0.0]).empirical_risk(0.0, 0.3), 0.0);

        let y = set(&[1.0, 2.0, 3.0, 4.0]);
        let q = y.sample_quantile(0.5).unwrap();
        let best = y.empirical_risk(q, 0.5);
        for i in 0..10_000 {
            let theta = 0.0 + 5.0 * i as f64 / 9_999.0;
            assert!(best <= y.empirical_risk(theta, 0.5) + 1e-12);
        }
    }

    #[test]
    fn droptop_examples() {
        let y = set(&[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(y.droptop(1).unwrap().atoms(), &[1.0, 2.0, 3.0]);
        assert_eq!(y.droptop(0).unwrap().atoms(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(y.droptop(4).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = set(&(0..128).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let kept = big.droptop(12).unwrap();
        assert_eq!(kept.len(), 116);
        assert!(kept.mean() <= big.mean());
    }

    #[test]
    fn wasserstein_examples() {
        let a = set(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        assert_eq!(wasserstein1(&set(&[0.0, 0.0]), &set(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(wasserstein1(&set(&[0.0, 1.0]), &set(&[0.0, 3.0])).unwrap(), 1.0);
        // A single atom against a spread set: |c - x| averaged.
        let d = wasserstein1(&set(&[0.0]), &set(&[-1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let y = set(&[1.5, -2.25, 1e-7, 12345.678]);
        let mut buf = Vec::new();
        y.write_csv(&mut buf).unwrap();
        let back = ParticleSet::read_csv(&buf[..]).unwrap();
        assert_eq!(back, y);
        assert!(ParticleSet::read_csv(&b"1.0\nfoo\n"[..]).is_err());
    }

    #[test]
    fn levels_validation() {
        assert!(QuantileLevels::new(vec![0.2, 0.5]).is_ok());
        assert!(QuantileLevels::new(vec![0.0]).is_err());
        assert!(QuantileLevels::new(vec![1.0]).is_err());
        assert!(QuantileLevels::new(vec![]).is_err());
        let m = QuantileLevels::midpoints(4);
        assert_eq!(m.as_slice(), &[0.125, 0.375, 0.625, 0.875]);
    }

    fn particles() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..64)
    }

    proptest! {
        #[test]
        fn sample_quantile_is_monotone(y in particles(), a in 0.001f64..0.999, b in 0.001f64..0.999) {
            let y = ParticleSet::new(y).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(y.sample_quantile(lo).unwrap() <= y.sample_quantile(hi).unwrap());
        }

        #[test]
        fn sample_quantile_satisfies_subgradient_condition(y in particles(), tau in 0.001f64..0.999) {
            let y = ParticleSet::new(y).unwrap();
            let q = y.sample_quantile(tau).unwrap();
            let n = y.len() as f64;
            let below = y.atoms().iter().filter(|&&v| v < q).count() as f64;
            let at_or_below = y.atoms().iter().filter(|&&v| v <= q).count() as f64;
            prop_assert!(below <= n * tau + 1e-9);
            prop_assert!(n * tau <= at_or_below + 1e-9);
        }

        #[test]
        fn wasserstein_is_symmetric_metric(a in particles(), b in particles()) {
            let a = ParticleSet::new(a).unwrap();
            let b = ParticleSet::new(b).unwrap();
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert_eq!(wasserstein1(&a, &a.sorted()).unwrap(), 0.0);
        }

        #[test]
        fn droptop_never_raises_the_mean(y in particles(), frac in 0.0f64..1.0) {
            let y = ParticleSet::new(y).unwrap();
            let d = ((y.len() - 1) as f64 * frac) as usize;
            let kept = y.droptop(d).unwrap();
            prop_assert_eq!(kept.len(), y.len() - d);
            prop_assert!(kept.mean() <= y.mean() + 1e-12);
        }
    }
}
