//! Neural layers on top of the autodiff graph, plus the AdamW optimizer with
//! linear-warmup cosine decay.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::ops::Conv3dSpec;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Named parameter collection used for checkpointing, freezing, and counting.
pub struct ParamRegistry<T: Real = f32> {
    pub entries: Vec<(String, Var<T>)>,
}

impl<T: Real> Default for ParamRegistry<T> {
    fn default() -> Self {
        ParamRegistry { entries: Vec::new() }
    }
}

impl<T: Real> ParamRegistry<T> {
    pub fn add(&mut self, name: impl Into<String>, var: &Var<T>) {
        self.entries.push((name.into(), var.clone()));
    }

    pub fn vars(&self) -> Vec<Var<T>> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.numel()).sum()
    }
}

fn uniform_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let k = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -k, k, rng)
}

/// Fully connected layer; weight stored (in x out) so forward is a plain matmul.
pub struct Linear<T: Real = f32> {
    pub weight: Var<T>,
    pub bias: Var<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Var::param(uniform_init(&[in_dim, out_dim], in_dim, rng)),
            bias: Var::param(uniform_init(&[out_dim], in_dim, rng)),
        }
    }

    /// All-zero weights and bias; used for output projections that must be
    /// exact identities at initialization.
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Var::param(Tensor::zeros(&[in_dim, out_dim])),
            bias: Var::param(Tensor::zeros(&[out_dim])),
        }
    }

    /// (B x in) -> (B x out).
    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.matmul(&self.weight).add_row_bias(&self.bias)
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        reg.add(format!("{prefix}.weight"), &self.weight);
        reg.add(format!("{prefix}.bias"), &self.bias);
    }
}

/// Square projection without bias, as used by attention Q/K/V/O matrices.
pub struct Projection<T: Real = f32> {
    pub weight: Var<T>,
}

impl<T: Real> Projection<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Projection { weight: Var::param(uniform_init(&[in_dim, out_dim], in_dim, rng)) }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Projection { weight: Var::param(Tensor::zeros(&[in_dim, out_dim])) }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.matmul(&self.weight)
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        reg.add(format!("{prefix}.weight"), &self.weight);
    }
}

pub struct Conv2dLayer<T: Real = f32> {
    pub weight: Var<T>,
    pub bias: Var<T>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl<T: Real> Conv2dLayer<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2dLayer {
            weight: Var::param(uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, rng)),
            bias: Var::param(uniform_init(&[out_ch], fan_in, rng)),
            stride,
            pad,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv2dLayer {
            weight: Var::param(Tensor::zeros(&[out_ch, in_ch, kernel, kernel])),
            bias: Var::param(Tensor::zeros(&[out_ch])),
            stride: (1, 1),
            pad: (kernel / 2, kernel / 2),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad)
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        reg.add(format!("{prefix}.weight"), &self.weight);
        reg.add(format!("{prefix}.bias"), &self.bias);
    }
}

pub struct Conv3dLayer<T: Real = f32> {
    pub weight: Var<T>,
    pub bias: Var<T>,
    pub spec: Conv3dSpec,
}

impl<T: Real> Conv3dLayer<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize, usize),
        spec: Conv3dSpec,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1 * kernel.2;
        Conv3dLayer {
            weight: Var::param(uniform_init(
                &[out_ch, in_ch, kernel.0, kernel.1, kernel.2],
                fan_in,
                rng,
            )),
            bias: Var::param(uniform_init(&[out_ch], fan_in, rng)),
            spec,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.conv3d(&self.weight, &self.bias, self.spec)
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        reg.add(format!("{prefix}.weight"), &self.weight);
        reg.add(format!("{prefix}.bias"), &self.bias);
    }
}

/// Group normalization over (B, C, spatial...) with affine scale/shift.
pub struct GroupNorm<T: Real = f32> {
    pub groups: usize,
    pub gamma: Var<T>,
    pub beta: Var<T>,
    pub eps: f64,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(channels % groups == 0, "groups must divide channels");
        GroupNorm {
            groups,
            gamma: Var::param(Tensor::full(&[channels], T::one())),
            beta: Var::param(Tensor::zeros(&[channels])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let shape = x.shape();
        assert!(shape.len() >= 2);
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let g = self.groups;
        let rows = x.reshape(&[b * g, (c / g) * spatial]);
        let mean = rows.mean_rows();
        let centered = rows.sub_col(&mean);
        let var = centered.mul(&centered).mean_rows();
        let inv_std = var.add_scalar(T::from_f64(self.eps)).rsqrt();
        let normed = centered.mul_col(&inv_std);
        let bcs = normed.reshape(&[b, c, spatial]);
        bcs.mul_channel(&self.gamma).add_channel(&self.beta).reshape(&shape)
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        reg.add(format!("{prefix}.gamma"), &self.gamma);
        reg.add(format!("{prefix}.beta"), &self.beta);
    }
}

/// Token embedding table.
pub struct Embedding<T: Real = f32> {
    pub table: Var<T>,
}

impl<T: Real> Embedding<T> {
    pub fn new(vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        Embedding { table: Var::param(Tensor::randn(&[vocab, dim], rng).scale(T::from_f64(0.02))) }
    }

    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Embedding { table: Var::param(Tensor::zeros(&[vocab, dim])) }
    }

    pub fn forward(&self, ids: &[usize]) -> Var<T> {
        Var::embedding(&self.table, ids)
    }

    pub fn register(&self, prefix: &str, reg: &mut ParamRegistry<T>) {
        reg.add(format!("{prefix}.table"), &self.table);
    }
}

/// Optimizer configuration. The paper-pinned pieces are lr, warmup, and the
/// cosine schedule; betas/eps/weight decay are standard defaults recorded in
/// the run configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub total_steps: usize,
}

impl AdamWConfig {
    pub fn new(lr: f64, warmup: usize, total_steps: usize) -> Self {
        AdamWConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup, total_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < self.warmup {
            return Err(Error::config(format!(
                "total_steps {} < warmup {}",
                self.total_steps, self.warmup
            )));
        }
        Ok(())
    }
}

/// Effective learning rate at 1-based `step_index`: linear ramp 0 -> lr over
/// `warmup` steps, then cosine decay to 0 at `total_steps`.
pub fn cosine_warmup_lr(config: &AdamWConfig, step_index: usize) -> f64 {
    assert!(step_index >= 1, "step_index is 1-based");
    if config.warmup > 0 && step_index <= config.warmup {
        return config.lr * step_index as f64 / config.warmup as f64;
    }
    if step_index >= config.total_steps {
        return 0.0;
    }
    let span = (config.total_steps - config.warmup) as f64;
    let progress = (step_index - config.warmup) as f64 / span;
    config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay over a fixed list of parameters.
pub struct AdamW<T: Real = f32> {
    pub config: AdamWConfig,
    params: Vec<Var<T>>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: Vec<Var<T>>, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let m = params.iter().map(|p| Tensor::zeros(&p.shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(&p.shape())).collect();
        Ok(AdamW { config, params, m, v })
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Apply one update at 1-based `step_index`. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, step_index: usize) {
        let lr = T::from_f64(cosine_warmup_lr(&self.config, step_index));
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.eps);
        let wd = T::from_f64(self.config.weight_decay);
        let bc1 = T::from_f64(1.0 - self.config.beta1.powi(step_index as i32));
        let bc2 = T::from_f64(1.0 - self.config.beta2.powi(step_index as i32));
        for (i, p) in self.params.iter().enumerate() {
            let grad = match p.grad() {
                Some(g) => g,
                None => Tensor::zeros(&p.shape()),
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_value(|value| {
                let pd = value.data_mut();
                let md = m.data_mut();
                let vd = v.data_mut();
                let gd = grad.data();
                for j in 0..pd.len() {
                    md[j] = b1 * md[j] + (T::one() - b1) * gd[j];
                    vd[j] = b2 * vd[j] + (T::one() - b2) * gd[j] * gd[j];
                    let m_hat = md[j] / bc1;
                    let v_hat = vd[j] / bc2;
                    pd[j] = pd[j] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[j]);
                }
            });
        }
    }
}

/// Sinusoidal position/timestep features of even dimension `dim`.
pub fn sinusoidal_embedding<T: Real>(positions: &[f64], dim: usize) -> Tensor<T> {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = Tensor::zeros(&[positions.len(), dim]);
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * (10_000f64).ln() / (half as f64 - 1.0).max(1.0)).exp();
            out.data_mut()[i * dim + j] = T::from_f64((p * freq).sin());
            out.data_mut()[i * dim + half + j] = T::from_f64((p * freq).cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::RngState;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = AdamWConfig::new(1e-4, 500, 2000);
        assert!((cosine_warmup_lr(&cfg, 500) - 1e-4).abs() < 1e-18);
        assert_eq!(cosine_warmup_lr(&cfg, 2000), 0.0);
        assert!((cosine_warmup_lr(&cfg, 250) - 0.5e-4).abs() < 1e-18);
        // Midpoint of the cosine segment is lr/2.
        assert!((cosine_warmup_lr(&cfg, 1250) - 0.5e-4).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_fixed_point() {
        let p = Var::param(Tensor::new(&[3], vec![1.0f32, -2.0, 0.5]).unwrap());
        let mut cfg = AdamWConfig::new(1e-3, 0, 10);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(vec![p.clone()], cfg).unwrap();
        let before = p.value();
        opt.step(1);
        opt.step(2);
        assert_eq!(p.value(), before);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let p = Var::param(Tensor::new(&[1], vec![1.0f32]).unwrap());
        let mut cfg = AdamWConfig::new(1e-2, 0, 100);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(vec![p.clone()], cfg).unwrap();
        for step in 1..=20 {
            opt.zero_grad();
            let loss = p.mul(&p).sum_all();
            loss.backward();
            opt.step(step);
        }
        assert!(p.value().item().abs() < 1.0);
    }

    #[test]
    fn adamw_rejects_bad_config() {
        let cfg = AdamWConfig::new(1e-4, 100, 50);
        assert!(AdamW::<f32>::new(vec![], cfg).is_err());
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = RngState::new(21, 1).rng();
        let gn = GroupNorm::<f64>::new(2, 4);
        let x = Tensor::<f64>::randn(&[2, 4, 6], &mut rng);
        let coef = Var::constant(Tensor::<f64>::randn(&[2, 4, 6], &mut rng));
        let rel = grad_check(|v| gn.forward(v).mul(&coef).sum_all(), &x, 1e-4).unwrap();
        assert!(rel < 1e-3, "input rel {rel}");

        let xv = Var::constant(x.clone());
        let gamma0 = gn.gamma.value();
        let rel = grad_check(
            |g| {
                let gn2 = GroupNorm {
                    groups: 2,
                    gamma: g.clone(),
                    beta: Var::constant(Tensor::zeros(&[4])),
                    eps: 1e-5,
                };
                gn2.forward(&xv).mul(&coef).sum_all()
            },
            &gamma0,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6, "gamma rel {rel}");
    }

    #[test]
    fn group_norm_normalizes() {
        let mut rng = RngState::new(22, 1).rng();
        let gn = GroupNorm::<f32>::new(1, 4);
        let x = Var::constant(Tensor::<f32>::randn(&[1, 4, 8], &mut rng).map(|v| 3.0 * v + 2.0));
        let y = gn.forward(&x).value();
        let mean = y.mean();
        let var: f32 = y.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>()
            / y.numel() as f32;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-2);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = RngState::new(23, 1).rng();
        let lin = Linear::<f64>::new(4, 3, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 4], &mut rng);
        let coef = Var::constant(Tensor::<f64>::randn(&[2, 3], &mut rng));
        let rel = grad_check(|v| lin.forward(v).mul(&coef).sum_all(), &x, 1e-4).unwrap();
        assert!(rel < 1e-6);
    }

    #[test]
    fn embedding_gradients() {
        let mut rng = RngState::new(24, 1).rng();
        let table = Tensor::<f64>::randn(&[5, 3], &mut rng);
        let coef = Var::constant(Tensor::<f64>::randn(&[4, 3], &mut rng));
        let rel = grad_check(
            |t| Var::embedding(t, &[0, 2, 2, 4]).mul(&coef).sum_all(),
            &table,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6);
    }

    #[test]
    fn sinusoidal_shape_and_range() {
        let emb = sinusoidal_embedding::<f32>(&[0.0, 1.0, 500.0], 8);
        assert_eq!(emb.shape(), &[3, 8]);
        assert!(emb.data().iter().all(|v| v.abs() <= 1.0));
        // t=0: sin parts 0, cos parts 1.
        for j in 0..4 {
            assert_eq!(emb.data()[j], 0.0);
            assert_eq!(emb.data()[4 + j], 1.0);
        }
    }
}
