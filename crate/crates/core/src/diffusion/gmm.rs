use crate::error::{Error, Result};

/// Isotropic Gaussian mixture `sum_k w_k N(mu_k, sigma0^2 I)` used as an
/// exact denoiser: the noised marginal is again a mixture, so its score and
/// the implied noise prediction are available in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    variance: f64,
    weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>, variance: f64, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::DimMismatch("mixture means must share a positive length".into()));
        }
        if weights.len() != means.len() {
            return Err(Error::DimMismatch(format!("{} weights for {} components", weights.len(), means.len())));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture weights must be positive and sum to 1".into()));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Config(format!("mixture variance {variance} must be positive")));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(Self { means, variance, weights })
    }

    /// Equal-weight mixture with one component per data point.
    pub fn from_samples(samples: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        let k = samples.len();
        if k == 0 {
            return Err(Error::EmptyDataset);
        }
        Self::new(samples, variance, vec![1.0 / k as f64; k])
    }

    pub fn latent_dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Component responsibilities of the `alpha_bar`-noised mixture at `x`.
    pub fn responsibilities(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let scale = alpha_bar.sqrt();
        let var = alpha_bar * self.variance + 1.0 - alpha_bar;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - scale * b).powi(2)).sum();
                w.ln() - 0.5 * d2 / var
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// `eps_hat = -sqrt(1 - ab) * grad log p_t(x)`.
    pub fn eps(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let scale = alpha_bar.sqrt();
        let var = alpha_bar * self.variance + 1.0 - alpha_bar;
        let coef = (1.0 - alpha_bar).sqrt() / var;
        let resp = self.responsibilities(x, alpha_bar);
        let mut out = vec![0.0; x.len()];
        for (m, r) in self.means.iter().zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(m) {
                *o += r * (xi - scale * mi);
            }
        }
        out.iter_mut().for_each(|o| *o *= coef);
        out
    }

    /// Index of the component mean nearest to `x`.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.means.iter().enumerate() {
            let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        best.0
    }
}
