//! One-dimensional Gaussian kernel density estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bandwidth used when the data give none (a single sample or zero spread).
pub const BANDWIDTH_FLOOR: f64 = 1e-3;

/// Kernel terms further than this many bandwidths beyond the nearest sample
/// are below `e^{-72}` of the leading term and are dropped.
const WINDOW: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// `0.9 · min(σ, IQR/1.34) · n^{-1/5}`.
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Table {
    lo: f64,
    step: f64,
    log_pdf: Vec<f64>,
}

/// Log-linear continuation of the density beyond a pair of sample quantiles.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Tails {
    left_x: f64,
    left_log: f64,
    left_slope: f64,
    right_x: f64,
    right_log: f64,
    right_slope: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdeDensity {
    /// Sorted support.
    samples: Vec<f64>,
    bandwidth: f64,
    /// `ln(n h √(2π))`.
    log_norm: f64,
    table: Option<Table>,
    tails: Option<Tails>,
}

pub fn kde_fit(samples: &[f64], rule: BandwidthRule) -> Result<KdeDensity> {
    if samples.is_empty() {
        return Err(Error::Input("KDE needs at least one sample".into()));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::Input(format!("KDE sample {x} is not finite")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let bandwidth = match rule {
        BandwidthRule::Fixed(h) if h > 0.0 && h.is_finite() => h,
        BandwidthRule::Fixed(h) => {
            return Err(Error::Input(format!("KDE bandwidth must be positive, got {h}")));
        }
        BandwidthRule::Silverman => {
            let h = silverman(&sorted);
            if h > 0.0 && h.is_finite() {
                h
            } else {
                log::warn!("KDE sample spread is zero; using bandwidth floor {BANDWIDTH_FLOOR}");
                BANDWIDTH_FLOOR
            }
        }
    };
    let n = sorted.len() as f64;
    Ok(KdeDensity {
        samples: sorted,
        bandwidth,
        log_norm: (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt()).ln(),
        table: None,
        tails: None,
    })
}

fn silverman(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    if sorted.len() < 2 {
        return 0.0;
    }
    let mean = sorted.iter().sum::<f64>() / n;
    let std = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    0.9 * spread * n.powf(-0.2)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl KdeDensity {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Support with a margin of `WINDOW` bandwidths on each side.
    pub fn support(&self) -> (f64, f64) {
        let m = WINDOW * self.bandwidth;
        (self.samples[0] - m, self.samples[self.samples.len() - 1] + m)
    }

    /// Direct log-density from the kernel sum, accurate far into the tails.
    pub fn log_pdf_exact(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let s = &self.samples;
        let idx = s.partition_point(|&v| v < x);
        let nearest = match (idx.checked_sub(1), s.get(idx)) {
            (Some(i), Some(&r)) => (x - s[i]).min(r - x),
            (Some(i), None) => x - s[i],
            (None, Some(&r)) => r - x,
            (None, None) => unreachable!("KDE support is nonempty"),
        };
        let radius = nearest + WINDOW * h;
        let start = s.partition_point(|&v| v < x - radius);
        let end = s.partition_point(|&v| v <= x + radius);
        let z0 = nearest / h;
        let lead = -0.5 * z0 * z0;
        let sum: f64 = s[start..end]
            .iter()
            .map(|&v| {
                let z = (x - v) / h;
                (-0.5 * z * z - lead).exp()
            })
            .sum();
        lead + sum.ln() - self.log_norm
    }

    /// Tabulates the log-density on `points` equally spaced nodes spanning
    /// [`Self::support`]; later lookups inside the span interpolate linearly.
    pub fn tabulated(mut self, points: usize) -> Self {
        let points = points.max(2);
        let (lo, hi) = self.support();
        let step = (hi - lo) / (points - 1) as f64;
        let log_pdf = (0..points)
            .into_par_iter()
            .map(|i| self.log_pdf_exact(lo + i as f64 * step))
            .collect();
        self.table = Some(Table { lo, step, log_pdf });
        self
    }

    pub fn is_tabulated(&self) -> bool {
        self.table.is_some()
    }

    /// Replaces the density below the `outer` quantile and above the
    /// `1 − outer` quantile with exponential tails whose log-slope is taken
    /// between the `outer` and `inner` quantiles on each side.
    ///
    /// Past the last sample a Gaussian-kernel mixture decays like a single
    /// narrow kernel, far faster than a Gamma-like tail; likelihood ratios
    /// built on it then blow up for observations in the tails.
    pub fn with_exponential_tails(mut self, outer: f64, inner: f64) -> Result<Self> {
        if !(0.0 < outer && outer < inner && inner < 0.5) {
            return Err(Error::Input(format!(
                "tail quantiles need 0 < outer < inner < 0.5, got {outer} and {inner}"
            )));
        }
        let s = &self.samples;
        let (lo, lo_in) = (quantile(s, outer), quantile(s, inner));
        let (hi, hi_in) = (quantile(s, 1.0 - outer), quantile(s, 1.0 - inner));
        let (l_lo, l_lo_in) = (self.log_pdf(lo), self.log_pdf(lo_in));
        let (l_hi, l_hi_in) = (self.log_pdf(hi), self.log_pdf(hi_in));
        let left_slope = (l_lo_in - l_lo) / (lo_in - lo);
        let right_slope = (l_hi - l_hi_in) / (hi - hi_in);
        if !(left_slope > 0.0 && right_slope < 0.0) {
            return Err(Error::Numerical(format!(
                "KDE tails do not decay (log-slopes {left_slope} and {right_slope})"
            )));
        }
        self.tails = Some(Tails {
            left_x: lo,
            left_log: l_lo,
            left_slope,
            right_x: hi,
            right_log: l_hi,
            right_slope,
        });
        Ok(self)
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if let Some(t) = &self.tails {
            if x < t.left_x {
                return t.left_log + t.left_slope * (x - t.left_x);
            }
            if x > t.right_x {
                return t.right_log + t.right_slope * (x - t.right_x);
            }
        }
        if let Some(t) = &self.table {
            let pos = (x - t.lo) / t.step;
            if pos >= 0.0 && pos < (t.log_pdf.len() - 1) as f64 {
                let i = pos as usize;
                let frac = pos - i as f64;
                return t.log_pdf[i] + frac * (t.log_pdf[i + 1] - t.log_pdf[i]);
            }
        }
        self.log_pdf_exact(x)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }
}

pub fn kde_eval(k: &KdeDensity, x: f64) -> f64 {
    k.pdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::normal_pdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Brute-force mixture density.
    fn direct(samples: &[f64], h: f64, x: f64) -> f64 {
        samples.iter().map(|&s| normal_pdf(x, s, h)).sum::<f64>() / samples.len() as f64
    }

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn single_sample_is_one_bump() {
        let k = kde_fit(&[2.0], BandwidthRule::Silverman).unwrap();
        assert_eq!(k.bandwidth(), BANDWIDTH_FLOOR);
        for x in [1.999, 2.0, 2.0005, 2.003] {
            let expected = normal_pdf(x, 2.0, BANDWIDTH_FLOOR);
            assert!((k.pdf(x) / expected - 1.0).abs() < 1e-12);
        }
        let flat = kde_fit(&[1.0; 5], BandwidthRule::Silverman).unwrap();
        assert_eq!(flat.bandwidth(), BANDWIDTH_FLOOR);
    }

    #[test]
    fn silverman_bandwidth_value() {
        let xs = normals(1000, 1);
        let k = kde_fit(&xs, BandwidthRule::Silverman).unwrap();
        let mut s = xs.clone();
        s.sort_by(f64::total_cmp);
        let mean = s.iter().sum::<f64>() / 1000.0;
        let std = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
        let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
        let expected = 0.9 * std.min(iqr / 1.34) * 1000f64.powf(-0.2);
        assert!((k.bandwidth() - expected).abs() < 1e-15);
        assert!(matches!(kde_fit(&xs, BandwidthRule::Fixed(0.0)), Err(Error::Input(_))));
        assert!(kde_fit(&[], BandwidthRule::Silverman).is_err());
    }

    #[test]
    fn exact_and_tabulated_match_direct_sum() {
        let xs: Vec<f64> = normals(500, 2).iter().map(|x| x * x).collect();
        let k = kde_fit(&xs, BandwidthRule::Silverman).unwrap();
        let h = k.bandwidth();
        let t = k.clone().tabulated(8192);
        let (lo, hi) = k.support();
        for i in 0..=400 {
            let x = lo - 1.0 + (hi - lo + 2.0) * i as f64 / 400.0;
            let d = direct(&xs, h, x);
            if d > 1e-250 {
                assert!((k.pdf(x) / d - 1.0).abs() < 1e-10, "exact at {x}");
            }
            if d > 1e-12 {
                assert!((t.pdf(x) / d - 1.0).abs() < 1e-3, "table at {x}");
            }
        }
        // Far tail stays finite in log space where the direct sum underflows.
        let far = k.log_pdf(hi + 1e3);
        assert!(far.is_finite() && far < -1e4);
    }

    #[test]
    fn exponential_tails_continue_the_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Laplace samples: exactly exponential tails with log-slope ±1.
        let xs: Vec<f64> = (0..50_000)
            .map(|_| {
                let u: f64 = rng.random::<f64>() - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let plain = kde_fit(&xs, BandwidthRule::Silverman).unwrap().tabulated(4096);
        let tailed = plain.clone().with_exponential_tails(0.001, 0.01).unwrap();
        let t = tailed.tails.unwrap();
        assert!((t.right_slope + 1.0).abs() < 0.2, "{}", t.right_slope);
        assert!((t.left_slope - 1.0).abs() < 0.2, "{}", t.left_slope);
        // Unchanged in the bulk, continuous at the joins.
        assert_eq!(plain.log_pdf(0.3), tailed.log_pdf(0.3));
        assert!((tailed.log_pdf(t.right_x + 1e-9) - tailed.log_pdf(t.right_x - 1e-9)).abs() < 1e-6);
        // Far out the tail follows the exponential, not the last kernel.
        let far = 40.0;
        let slack = 0.2 * (far - t.right_x) + 1.0;
        assert!((tailed.log_pdf(far) - (-far - 2f64.ln())).abs() < slack);
        assert!(plain.log_pdf(far) < -1e3);
        assert!(plain.clone().with_exponential_tails(0.2, 0.1).is_err());
    }

    #[test]
    fn mass_is_one() {
        let xs = normals(2000, 3);
        let k = kde_fit(&xs, BandwidthRule::Silverman).unwrap().tabulated(4096);
        let h = k.bandwidth();
        let lo = k.samples()[0] - 10.0 * h;
        let hi = k.samples()[k.samples().len() - 1] + 10.0 * h;
        let n = 200_000;
        let step = (hi - lo) / n as f64;
        let mass: f64 = (0..n).map(|i| k.pdf(lo + (i as f64 + 0.5) * step)).sum::<f64>() * step;
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn recovers_standard_normal() {
        let xs = normals(50_000, 4);
        let k = kde_fit(&xs, BandwidthRule::Silverman).unwrap().tabulated(4096);
        let worst = (0..=600)
            .map(|i| {
                let x = -3.0 + i as f64 * 0.01;
                (k.pdf(x) - normal_pdf(x, 0.0, 1.0)).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 0.02, "max pdf error {worst}");
    }
}
