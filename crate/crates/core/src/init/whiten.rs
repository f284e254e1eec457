use crate::error::{Error, Result};

/// Background statistics for whitening filter initializations.
#[derive(Clone, Debug, PartialEq)]
pub struct WhitenStats {
    pub mean: Vec<f64>,
    /// Row-major `C x C` sample covariance (without the ridge).
    pub covariance: Vec<f64>,
    /// Added to the covariance diagonal before solving.
    pub ridge: f64,
}

impl WhitenStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Lower Cholesky factor of `covariance + ridge * I`.
    pub fn cholesky(&self) -> Result<Vec<f64>> {
        let c = self.dim();
        let mut l = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..=i {
                let mut sum = self.covariance[i * c + j];
                if i == j {
                    sum += self.ridge;
                }
                for p in 0..j {
                    sum -= l[i * c + p] * l[j * c + p];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: sum });
                    }
                    l[i * c + i] = sum.sqrt();
                } else {
                    l[i * c + j] = sum / l[j * c + j];
                }
            }
        }
        Ok(l)
    }
}

/// Pooled mean and covariance of candidate features; the ridge is
/// `ridge_coeff * trace(cov) / C`.
pub fn fit_whitening(features: &[&[f64]], ridge_coeff: f64) -> Result<WhitenStats> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "whitening needs at least 2 candidates, got {}",
            features.len()
        )));
    }
    if ridge_coeff < 0.0 {
        return Err(Error::InvalidArgument("ridge coefficient must be non-negative".into()));
    }
    let c = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; c];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; c * c];
    for f in features {
        for i in 0..c {
            let di = f[i] - mean[i];
            for j in 0..=i {
                cov[i * c + j] += di * (f[j] - mean[j]);
            }
        }
    }
    // population (1/n) estimate, mirrored into the upper triangle
    for i in 0..c {
        for j in 0..=i {
            let v = cov[i * c + j] / n;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    Ok(WhitenStats {
        mean,
        covariance: cov,
        ridge: ridge_coeff * trace / c as f64,
    })
}

/// `w = (cov + ridge I)^-1 (center - mean)`, scaled to unit norm. A zero
/// `w` stays zero.
pub fn whiten_normalize(center: &[f64], stats: &WhitenStats) -> Result<Vec<f64>> {
    let c = stats.dim();
    if center.len() != c {
        return Err(Error::shape("whiten_normalize", format!("center has {} dims, stats {c}", center.len())));
    }
    let l = stats.cholesky()?;
    // forward then back substitution
    let mut y = vec![0.0; c];
    for i in 0..c {
        let mut s = center[i] - stats.mean[i];
        for p in 0..i {
            s -= l[i * c + p] * y[p];
        }
        y[i] = s / l[i * c + i];
    }
    let mut w = vec![0.0; c];
    for i in (0..c).rev() {
        let mut s = y[i];
        for p in i + 1..c {
            s -= l[p * c + i] * w[p];
        }
        w[i] = s / l[i * c + i];
    }
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        w.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(w)
}
