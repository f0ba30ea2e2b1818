//! Small statistics helpers for experiments and tests: rank correlation with
//! a normal-approximation p-value, and the standard normal tail.

/// Standard normal CDF via the Abramowitz–Stegun 7.1.26 erf approximation
/// (absolute error < 1.5e-7, plenty for significance thresholds here).
pub fn normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = sign * (1.0 - poly * (-x * x).exp());
    0.5 * (1.0 + erf)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Average rank for ties (1-based ranks).
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct RankCorrelation {
    pub rho: f64,
    /// One-sided p-value for the observed sign, from the large-sample normal
    /// approximation `z = rho * sqrt(n - 1)`. NaN when rho is undefined
    /// (a constant input).
    pub p_one_sided: f64,
    pub n: usize,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> RankCorrelation {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 3 {
        return RankCorrelation { rho: f64::NAN, p_one_sided: f64::NAN, n };
    }
    let rho = pearson(&ranks(x), &ranks(y));
    let p = if rho.is_nan() {
        f64::NAN
    } else {
        let z = rho * ((n - 1) as f64).sqrt();
        if rho < 0.0 {
            normal_cdf(z)
        } else {
            1.0 - normal_cdf(z)
        }
    };
    RankCorrelation { rho, p_one_sided: p, n }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}
