//! Fully connected noise predictor with a sinusoidal timestep embedding,
//! trained by minibatch gradient descent with hand-derived backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, standard_normal};

use super::{DenoiserBackend, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Silu => x / (1.0 + (-x).exp()),
            Self::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Self::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256], time_embed_dim: 32, activation: Activation::Silu }
    }
}

impl NetConfig {
    fn validate(&self) -> Result<()> {
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// `[sin(t w_i), cos(t w_i)]` with `w_i = 10000^(-i / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Affine layer `y = x W + b`, `W` stored `inputs x outputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsNet {
    config: NetConfig,
    latent_dim: usize,
    layers: Vec<Dense>,
}

impl EpsNet {
    fn layer_shapes(latent_dim: usize, config: &NetConfig) -> Vec<(usize, usize)> {
        let mut widths = vec![latent_dim + config.time_embed_dim];
        widths.extend(&config.hidden);
        widths.push(latent_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn new(latent_dim: usize, config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        let mut rng = seeded(seed);
        let layers = Self::layer_shapes(latent_dim, &config)
            .into_iter()
            .map(|(i, o)| {
                let std = 1.0 / (i as f64).sqrt();
                let w = standard_normal(&mut rng, i * o).into_iter().map(|v| v * std).collect();
                Dense { weight: Array2::from_shape_vec((i, o), w).expect("shape"), bias: Array1::zeros(o) }
            })
            .collect();
        Ok(Self { config, latent_dim, layers })
    }

    pub fn zeros(latent_dim: usize, config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = Self::layer_shapes(latent_dim, &config)
            .into_iter()
            .map(|(i, o)| Dense { weight: Array2::zeros((i, o)), bias: Array1::zeros(o) })
            .collect();
        Ok(Self { config, latent_dim, layers })
    }

    pub fn from_layers(latent_dim: usize, config: NetConfig, layers: Vec<Dense>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::layer_shapes(latent_dim, &config);
        if shapes.len() != layers.len()
            || shapes.iter().zip(&layers).any(|(&(i, o), l)| l.weight.dim() != (i, o) || l.bias.len() != o)
        {
            return Err(Error::DimMismatch("layer shapes do not match the network config".into()));
        }
        let finite = layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Config("network weights must be finite".into()));
        }
        Ok(Self { config, latent_dim, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    fn input_row(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.latent_dim + self.config.time_embed_dim);
        row.extend_from_slice(x);
        row.extend(time_embedding(t, self.config.time_embed_dim));
        row
    }

    /// Returns pre-activations of every layer; the last entry is the output.
    fn forward(&self, input: Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let act = self.config.activation;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = input;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weight) + &layer.bias;
            inputs.push(current);
            current = if k + 1 < self.layers.len() { z.mapv(|v| act.apply(v)) } else { z.clone() };
            pre.push(z);
        }
        (inputs, pre)
    }

    pub fn predict(&self, x: &[f64], t: usize) -> Vec<f64> {
        let row = self.input_row(x, t);
        let input = Array2::from_shape_vec((1, row.len()), row).expect("shape");
        let (_, mut pre) = self.forward(input);
        pre.pop().expect("at least one layer").into_raw_vec_and_offset().0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Noise draws per dataset item in each epoch.
    pub draws_per_item: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 1e-3, batch_size: 16, optimizer: Optimizer::Adam, draws_per_item: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    /// `epoch,mean_loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{e},{l}\n"));
        }
        s
    }
}

struct Moments {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    step: i32,
}

impl Moments {
    fn new(net: &EpsNet) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.dim()), Array1::zeros(l.bias.len())))
                .collect::<Vec<_>>()
        };
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

fn apply_update(net: &mut EpsNet, grads: &[(Array2<f64>, Array1<f64>)], cfg: &TrainConfig, moments: &mut Moments) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (layer, (gw, gb)) in net.layers.iter_mut().zip(grads) {
                layer.weight.scaled_add(-cfg.lr, gw);
                layer.bias.scaled_add(-cfg.lr, gb);
            }
        }
        Optimizer::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            moments.step += 1;
            let c1 = 1.0 - B1.powi(moments.step);
            let c2 = 1.0 - B2.powi(moments.step);
            for (k, (gw, gb)) in grads.iter().enumerate() {
                let (mw, mb) = &mut moments.m[k];
                let (vw, vb) = &mut moments.v[k];
                let layer = &mut net.layers[k];
                ndarray::Zip::from(&mut layer.weight).and(mw).and(vw).and(gw).for_each(|p, m, v, &g| {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                });
                ndarray::Zip::from(&mut layer.bias).and(mb).and(vb).and(gb).for_each(|p, m, v, &g| {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                });
            }
        }
    }
}

/// Mean squared noise-prediction error of one minibatch and its gradients.
fn batch_gradients(net: &EpsNet, input: Array2<f64>, target: &Array2<f64>) -> (f64, Vec<(Array2<f64>, Array1<f64>)>) {
    let act = net.config.activation;
    let (inputs, pre) = net.forward(input);
    let output = pre.last().expect("output layer");
    let diff = output - target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;

    let mut grads = Vec::with_capacity(net.layers.len());
    let mut d_pre = diff * (2.0 / n);
    for k in (0..net.layers.len()).rev() {
        let gw = inputs[k].t().dot(&d_pre);
        let gb = d_pre.sum_axis(Axis(0));
        if k > 0 {
            let mut d_in = d_pre.dot(&net.layers[k].weight.t());
            ndarray::Zip::from(&mut d_in).and(&pre[k - 1]).for_each(|d, &z| *d *= act.derivative(z));
            d_pre = d_in;
        }
        grads.push((gw, gb));
    }
    grads.reverse();
    (loss, grads)
}

/// Trains a noise predictor on `dataset` with uniformly drawn timesteps.
///
/// Deterministic given `seed`: initialisation, shuffling, timesteps and noise
/// all come from derived streams.
pub fn train_denoiser(
    dataset: &[Vec<f64>],
    net_config: &NetConfig,
    schedule: &NoiseSchedule,
    train: &TrainConfig,
    seed: u64,
) -> Result<(DenoiserBackend, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = dataset[0].len();
    if dim == 0 || dataset.iter().any(|d| d.len() != dim) {
        return Err(Error::DimMismatch("training latents must share a positive length".into()));
    }
    if train.batch_size == 0 || train.draws_per_item == 0 {
        return Err(Error::Config("batch_size and draws_per_item must be positive".into()));
    }
    let mut net = EpsNet::new(dim, net_config.clone(), derive_seed(seed, 0x1417, 0))?;
    let mut moments = Moments::new(&net);
    let mut report = TrainReport::default();
    let in_dim = dim + net_config.time_embed_dim;
    let timesteps = schedule.timesteps();

    let mut order: Vec<usize> = (0..dataset.len() * train.draws_per_item).map(|i| i % dataset.len()).collect();
    for epoch in 0..train.epochs {
        let mut rng = seeded(derive_seed(seed, 0x5eed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let b = chunk.len();
            let mut input = Array2::zeros((b, in_dim));
            let mut target = Array2::zeros((b, dim));
            for (row, &idx) in chunk.iter().enumerate() {
                let t = rng.random_range(0..timesteps);
                let eps = standard_normal(&mut rng, dim);
                let ab = schedule.alpha_bar[t];
                let (s, q) = (ab.sqrt(), (1.0 - ab).sqrt());
                for j in 0..dim {
                    input[[row, j]] = s * dataset[idx][j] + q * eps[j];
                    target[[row, j]] = eps[j];
                }
                for (j, e) in time_embedding(t, net_config.time_embed_dim).into_iter().enumerate() {
                    input[[row, dim + j]] = e;
                }
            }
            let (loss, grads) = batch_gradients(&net, input, &target);
            total += loss * b as f64;
            apply_update(&mut net, &grads, train, &mut moments);
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        report.epoch_losses.push(mean);
    }
    Ok((DenoiserBackend::TrainedNet(net), report))
}
