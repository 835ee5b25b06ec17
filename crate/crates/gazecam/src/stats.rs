//! Statistical tooling: weight-distribution diagnostics, the analytic
//! probability that a class activation map survives its ReLU (with a Monte
//! Carlo cross-check), and the McNemar paired comparison of two classifiers.
//!
//! The zero-map analysis works under the assumption that dense weights are
//! i.i.d. normal with mean mu and standard deviation sigma. At pixel (i, j)
//! of the modified map, X_ij = sum_k w_k A^k_ij is normal with mean
//! mu1 = mu * sum_k A^k_ij and variance sigma1^2 = sigma^2 * sum_k (A^k_ij)^2,
//! so Pr(X_ij > 0) = Phi(mu1 / sigma1). The classical map replaces each w_k
//! by its global average over n^2 weights, shrinking the variance by n^2:
//! Pr(Y_ij > 0) = Phi(n * mu1 / sigma1). For negative mu this makes the
//! classical map strictly more likely to die at every pixel.

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF, Normal};

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Survival function of a chi-square distribution with one degree of
/// freedom.
pub fn chi_square_1df_sf(stat: f64) -> f64 {
    erfc((stat / 2.0).sqrt())
}

/// Complementary error function, accurate to about 1e-15 relative error
/// (rational Chebyshev approximation in three ranges, after Cody).
pub fn erfc(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.16112374387056560e0,
        1.13864154151050156e2,
        3.77485237685302021e2,
        3.20937758913846947e3,
        1.85777706184603153e-1,
    ];
    const B: [f64; 4] = [
        2.36012909523441209e1,
        2.44024637934444173e2,
        1.28261652607737228e3,
        2.84423683343917062e3,
    ];
    const C: [f64; 9] = [
        5.64188496988670089e-1,
        8.88314979438837594e0,
        6.61191906371416295e1,
        2.98635138197400131e2,
        8.81952221241769090e2,
        1.71204761263407058e3,
        2.05107837782607147e3,
        1.23033935479799725e3,
        2.15311535474403846e-8,
    ];
    const D: [f64; 8] = [
        1.57449261107098347e1,
        1.17693950891312499e2,
        5.37181101862009858e2,
        1.62138957456669019e3,
        3.29079923573345963e3,
        4.36261909014324716e3,
        3.43936767414372164e3,
        1.23033935480374942e3,
    ];
    const P: [f64; 6] = [
        3.05326634961232344e-1,
        3.60344899949804439e-1,
        1.25781726111229246e-1,
        1.60837851487422766e-2,
        6.58749161529837803e-4,
        1.63153871373020978e-2,
    ];
    const Q: [f64; 5] = [
        2.56852019228982242e0,
        1.87295284992346047e0,
        5.27905102951428412e-1,
        6.05183413124413191e-2,
        2.33520497626869185e-3,
    ];
    const INV_SQRT_PI: f64 = 5.6418958354775628695e-1;

    let y = x.abs();
    if y <= 0.46875 {
        let ysq = if y > 1.11e-16 { y * y } else { 0.0 };
        let mut xnum = A[4] * ysq;
        let mut xden = ysq;
        for i in 0..3 {
            xnum = (xnum + A[i]) * ysq;
            xden = (xden + B[i]) * ysq;
        }
        let erf = x * (xnum + A[3]) / (xden + B[3]);
        return 1.0 - erf;
    }
    let result = if y <= 4.0 {
        let mut xnum = C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + C[i]) * y;
            xden = (xden + D[i]) * y;
        }
        let r = (xnum + C[7]) / (xden + D[7]);
        // split exp(-y^2) so the large-magnitude part uses an exactly
        // representable argument
        let ysq = (y * 16.0).trunc() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else if y < 26.543 {
        let ysq = 1.0 / (y * y);
        let mut xnum = P[5] * ysq;
        let mut xden = ysq;
        for i in 0..4 {
            xnum = (xnum + P[i]) * ysq;
            xden = (xden + Q[i]) * ysq;
        }
        let mut r = ysq * (xnum + P[4]) / (xden + Q[4]);
        r = (INV_SQRT_PI - r) / y;
        let ysq = (y * 16.0).trunc() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

// ── weight distribution ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Histogram {
    /// Bin edges, ascending; one more edge than counts.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct WeightStats {
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Kolmogorov-Smirnov distance against the normal fitted to the sample.
    pub ks_distance: f64,
    /// Critical distance at the 5% level for parameters estimated from the
    /// sample (0.886 / sqrt(n), the large-sample rule for that case).
    pub ks_critical: f64,
    /// ks_distance <= ks_critical; a coarse "looks normal" verdict.
    pub normal_plausible: bool,
    /// All values equal; higher moments and the KS verdict are meaningless.
    pub degenerate: bool,
    pub histogram: Histogram,
}

/// Moments, a Freedman-Diaconis histogram, and a normality diagnostic for a
/// weight sample. Needs at least 30 values for the diagnostic to mean
/// anything.
pub fn weight_stats(weights: &[f64]) -> Result<WeightStats> {
    let n = weights.len();
    if n < 30 {
        return Err(Error::Argument(format!(
            "need at least 30 weights for distribution diagnostics, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = weights.iter().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &w in weights {
        let d = w - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let variance = m2 / (nf - 1.0);
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let degenerate = m2 == 0.0;
    let (skewness, excess_kurtosis) = if degenerate {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    };

    let histogram = build_histogram(weights, mean, m2.sqrt());

    let ks_critical = 0.886 / nf.sqrt();
    let ks_distance = if degenerate {
        1.0
    } else {
        let mut sorted = weights.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sd = variance.sqrt();
        let mut d = 0.0f64;
        for (i, &x) in sorted.iter().enumerate() {
            let f = normal_cdf((x - mean) / sd);
            let lo = i as f64 / nf;
            let hi = (i + 1) as f64 / nf;
            d = d.max((f - lo).abs()).max((hi - f).abs());
        }
        d
    };
    Ok(WeightStats {
        count: n,
        mean,
        variance,
        skewness,
        excess_kurtosis,
        ks_distance,
        ks_critical,
        normal_plausible: !degenerate && ks_distance <= ks_critical,
        degenerate,
        histogram,
    })
}

/// Freedman-Diaconis binning with a Scott fallback when the IQR collapses;
/// degenerate samples get a single bin.
fn build_histogram(weights: &[f64], _mean: f64, sd_biased: f64) -> Histogram {
    let n = weights.len();
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (min, max) = (sorted[0], sorted[n - 1]);
    if min == max {
        return Histogram {
            edges: vec![min, max],
            counts: vec![n as u64],
        };
    }
    let quantile = |q: f64| -> f64 {
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let cube_root_n = (n as f64).powf(1.0 / 3.0);
    let width = if iqr > 0.0 {
        2.0 * iqr / cube_root_n
    } else {
        3.49 * sd_biased / cube_root_n
    };
    let bins = (((max - min) / width).ceil() as usize).clamp(1, 512);
    let mut edges = Vec::with_capacity(bins + 1);
    for i in 0..=bins {
        edges.push(min + (max - min) * i as f64 / bins as f64);
    }
    let mut counts = vec![0u64; bins];
    for &w in weights {
        let mut idx = ((w - min) / (max - min) * bins as f64) as usize;
        if idx >= bins {
            idx = bins - 1;
        }
        counts[idx] += 1;
    }
    Histogram { edges, counts }
}

// ── zero-map probabilities ───────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ZeroMapAnalysis {
    /// Map side n.
    pub side: usize,
    /// Per-pixel mean mu1 = mu * sum_k A^k, shape [n, n].
    pub mu1: Tensor,
    /// Per-pixel variance sigma1^2 = sigma^2 * sum_k (A^k)^2, shape [n, n].
    pub sigma1_sq: Tensor,
    /// Analytic Pr(pixel of the modified map > 0), shape [n, n].
    pub p_modified: Tensor,
    /// Analytic Pr(pixel of the classical map > 0), shape [n, n].
    pub p_classical: Tensor,
    /// Pixels where sigma1 = 0 (no activation mass); probabilities are set
    /// to 0.5 there by convention and excluded from comparisons.
    pub degenerate: Vec<bool>,
}

/// Analytic per-pixel survival probabilities for both map variants under
/// i.i.d. N(mu, sigma^2) dense weights.
pub fn zero_map_probs(activations: &Tensor, mu: f64, sigma: f64) -> Result<ZeroMapAnalysis> {
    if sigma <= 0.0 {
        return Err(Error::Argument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if activations.ndim() != 3 {
        return Err(Error::Dimension(format!(
            "expected an activation stack [maps, n, n], got {:?}",
            activations.shape()
        )));
    }
    let (k, h, w) = (
        activations.shape()[0],
        activations.shape()[1],
        activations.shape()[2],
    );
    if h != w {
        return Err(Error::Dimension(format!(
            "zero-map analysis expects square maps, got {h}x{w}"
        )));
    }
    let n = h;
    let plane = n * n;
    let mut mu1 = vec![0.0; plane];
    let mut s1sq = vec![0.0; plane];
    for map in 0..k {
        let src = &activations.data()[map * plane..(map + 1) * plane];
        for ((m, s), &a) in mu1.iter_mut().zip(s1sq.iter_mut()).zip(src) {
            *m += a;
            *s += a * a;
        }
    }
    for m in mu1.iter_mut() {
        *m *= mu;
    }
    for s in s1sq.iter_mut() {
        *s *= sigma * sigma;
    }
    let mut p_mod = vec![0.0; plane];
    let mut p_cls = vec![0.0; plane];
    let mut degenerate = vec![false; plane];
    for i in 0..plane {
        if s1sq[i] == 0.0 {
            degenerate[i] = true;
            p_mod[i] = 0.5;
            p_cls[i] = 0.5;
        } else {
            let s1 = s1sq[i].sqrt();
            p_mod[i] = normal_cdf(mu1[i] / s1);
            p_cls[i] = normal_cdf(n as f64 * mu1[i] / s1);
        }
    }
    Ok(ZeroMapAnalysis {
        side: n,
        mu1: Tensor::new(vec![n, n], mu1)?,
        sigma1_sq: Tensor::new(vec![n, n], s1sq)?,
        p_modified: Tensor::new(vec![n, n], p_mod)?,
        p_classical: Tensor::new(vec![n, n], p_cls)?,
        degenerate,
    })
}

#[derive(Debug, Clone)]
pub struct ZeroMapMonteCarlo {
    pub trials: usize,
    /// Empirical per-pixel positive fractions, shape [n, n].
    pub pos_frac_modified: Tensor,
    pub pos_frac_classical: Tensor,
    /// Binomial standard errors of those fractions, shape [n, n].
    pub se_modified: Tensor,
    pub se_classical: Tensor,
    /// Fraction of trials in which the entire map was zero after ReLU.
    pub zero_map_frac_modified: f64,
    pub zero_map_frac_classical: f64,
}

/// Samples dense-weight stacks i.i.d. N(mu, sigma^2), builds both map
/// variants per trial, and reports empirical positive fractions. Trial
/// seeds derive deterministically from `seed`, so results are reproducible.
pub fn zero_map_monte_carlo(
    activations: &Tensor,
    mu: f64,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<ZeroMapMonteCarlo> {
    if trials < 1000 {
        return Err(Error::Argument(format!(
            "need at least 1000 trials for stable fractions, got {trials}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Argument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if activations.ndim() != 3 || activations.shape()[1] != activations.shape()[2] {
        return Err(Error::Dimension(format!(
            "expected a square activation stack [maps, n, n], got {:?}",
            activations.shape()
        )));
    }
    let (k, n) = (activations.shape()[0], activations.shape()[1]);
    let plane = n * n;
    let normal = Normal::new(mu, sigma)
        .map_err(|e| Error::Argument(format!("bad weight distribution: {e}")))?;
    let mut pos_mod = vec![0u64; plane];
    let mut pos_cls = vec![0u64; plane];
    let mut zero_mod = 0u64;
    let mut zero_cls = 0u64;
    let mut weights = vec![0.0; k * plane];
    let mut x = vec![0.0; plane];
    let mut y = vec![0.0; plane];
    let a = activations.data();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[trial as u64]));
        for wv in weights.iter_mut() {
            *wv = normal.sample(&mut rng);
        }
        x.iter_mut().for_each(|v| *v = 0.0);
        y.iter_mut().for_each(|v| *v = 0.0);
        for map in 0..k {
            let wk = &weights[map * plane..(map + 1) * plane];
            let ak = &a[map * plane..(map + 1) * plane];
            let alpha = wk.iter().sum::<f64>() / plane as f64;
            for ((xv, yv), (&wv, &av)) in x
                .iter_mut()
                .zip(y.iter_mut())
                .zip(wk.iter().zip(ak))
            {
                *xv += wv * av;
                *yv += alpha * av;
            }
        }
        let mut any_mod = false;
        let mut any_cls = false;
        for i in 0..plane {
            if x[i] > 0.0 {
                pos_mod[i] += 1;
                any_mod = true;
            }
            if y[i] > 0.0 {
                pos_cls[i] += 1;
                any_cls = true;
            }
        }
        if !any_mod {
            zero_mod += 1;
        }
        if !any_cls {
            zero_cls += 1;
        }
    }
    let t = trials as f64;
    let frac = |c: &[u64]| -> Vec<f64> { c.iter().map(|&v| v as f64 / t).collect() };
    let se = |f: &[f64]| -> Vec<f64> { f.iter().map(|&p| (p * (1.0 - p) / t).sqrt()).collect() };
    let fm = frac(&pos_mod);
    let fc = frac(&pos_cls);
    let sem = se(&fm);
    let sec = se(&fc);
    Ok(ZeroMapMonteCarlo {
        trials,
        pos_frac_modified: Tensor::new(vec![n, n], fm)?,
        pos_frac_classical: Tensor::new(vec![n, n], fc)?,
        se_modified: Tensor::new(vec![n, n], sem)?,
        se_classical: Tensor::new(vec![n, n], sec)?,
        zero_map_frac_modified: zero_mod as f64 / t,
        zero_map_frac_classical: zero_cls as f64 / t,
    })
}

// ── McNemar ──────────────────────────────────────────────────────────

/// Paired-correctness contingency table of two classifiers over the same
/// samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContingencyTable {
    /// Both correct.
    pub a: u64,
    /// Only the first classifier correct.
    pub b: u64,
    /// Only the second classifier correct.
    pub c: u64,
    /// Both wrong.
    pub d: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Builds the table from true labels and two prediction vectors.
    pub fn from_paired(truth: &[usize], first: &[usize], second: &[usize]) -> Result<Self> {
        if truth.len() != first.len() || truth.len() != second.len() {
            return Err(Error::Dimension(format!(
                "prediction vectors must align: {} labels, {} and {} predictions",
                truth.len(),
                first.len(),
                second.len()
            )));
        }
        let mut t = ContingencyTable::default();
        for ((&y, &p1), &p2) in truth.iter().zip(first).zip(second) {
            match (p1 == y, p2 == y) {
                (true, true) => t.a += 1,
                (true, false) => t.b += 1,
                (false, true) => t.c += 1,
                (false, false) => t.d += 1,
            }
        }
        Ok(t)
    }

    pub fn merge(&mut self, other: &ContingencyTable) {
        self.a += other.a;
        self.b += other.b;
        self.c += other.c;
        self.d += other.d;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McNemarMethod {
    /// Two-sided exact binomial on the discordant pairs (used when b+c < 25).
    ExactBinomial,
    /// Chi-square with continuity correction, 1 df.
    ChiSquare,
    /// No discordant pairs at all; p = 1 by convention.
    Degenerate,
}

#[derive(Debug, Clone, Copy)]
pub struct McNemarResult {
    /// Chi-square statistic; None for the exact and degenerate branches.
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub method: McNemarMethod,
}

/// Two-sided McNemar test on the discordant cells.
pub fn mcnemar(table: &ContingencyTable) -> McNemarResult {
    let (b, c) = (table.b, table.c);
    let discordant = b + c;
    if discordant == 0 {
        return McNemarResult {
            statistic: None,
            p_value: 1.0,
            method: McNemarMethod::Degenerate,
        };
    }
    if discordant < 25 {
        let binom = Binomial::new(0.5, discordant).expect("0.5 is a valid probability");
        let p = (2.0 * binom.cdf(b.min(c))).min(1.0);
        McNemarResult {
            statistic: None,
            p_value: p,
            method: McNemarMethod::ExactBinomial,
        }
    } else {
        let diff = (b.abs_diff(c) as f64 - 1.0).max(0.0);
        let stat = diff.powi(2) / discordant as f64;
        McNemarResult {
            statistic: Some(stat),
            p_value: chi_square_1df_sf(stat),
            method: McNemarMethod::ChiSquare,
        }
    }
}
