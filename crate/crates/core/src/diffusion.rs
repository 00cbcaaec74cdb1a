//! Conditional denoising diffusion on low-dimensional data.
//!
//! Forward process `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`; an MLP `ε_θ(x_t, c, t)`
//! trained with the noise-prediction objective and condition dropout;
//! classifier-free guidance; the Tweedie estimate of `x_0`; and the DDIM
//! reverse step with stochasticity `η`.
//!
//! Time steps are 1-indexed (`1..=T`) and `ᾱ_0 = 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::numcore::{
    indexed_seed, sub_seed, Activation, Adam, DenseMatrix, ForwardPass, Mlp, MlpDocument, MlpGrads,
    NoiseSource, Optimizer, Rng,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Per-step `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π_{s≤t} α_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β` from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("at least one step is required".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::linear(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// `T`
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParam(format!(
                "time step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`
pub fn q_sample(
    x0: &DenseMatrix,
    t: usize,
    eps: &DenseMatrix,
    schedule: &NoiseSchedule,
) -> Result<DenseMatrix> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    DenseMatrix::lincomb(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps)
}

/// Tweedie estimate `x_{0|t} = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(
    x_t: &DenseMatrix,
    t: usize,
    eps_hat: &DenseMatrix,
    schedule: &NoiseSchedule,
) -> Result<DenseMatrix> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    DenseMatrix::lincomb(inv, x_t, -(1.0 - ab).sqrt() * inv, eps_hat)
}

/// `σ_t = η √((1−ᾱ_{t−1})/(1−ᾱ_t)) √(1 − ᾱ_t/ᾱ_{t−1})`
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, eta: f64) -> f64 {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// One DDIM reverse step:
/// `x_{t−1} = √ᾱ_{t−1} x_{0|t} + √(1−ᾱ_{t−1}−σ_t²) (x_t − √ᾱ_t x_{0|t})/√(1−ᾱ_t) + σ_t ε`.
///
/// Noise is drawn only when `σ_t > 0`, one normal per entry in row-major order.
pub fn ddim_step<N: NoiseSource + ?Sized>(
    x_t: &DenseMatrix,
    x0: &DenseMatrix,
    t: usize,
    eta: f64,
    noise: &mut N,
    schedule: &NoiseSchedule,
) -> Result<DenseMatrix> {
    schedule.check(t)?;
    if x_t.shape() != x0.shape() {
        return Err(Error::Shape(format!(
            "x_t {:?} vs x0 {:?}",
            x_t.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let sigma = ddim_sigma(schedule, t, eta);
    let mut dir_var = 1.0 - ab_prev - sigma * sigma;
    if dir_var < 0.0 {
        if dir_var < -1e-12 {
            return Err(Error::Schedule(format!(
                "sigma_t^2 = {} exceeds 1 - alpha_bar_(t-1) = {} at t = {t}",
                sigma * sigma,
                1.0 - ab_prev
            )));
        }
        dir_var = 0.0;
    }
    let c_x0 = ab_prev.sqrt();
    let c_dir = dir_var.sqrt() / (1.0 - ab).sqrt();
    let sqrt_ab = ab.sqrt();
    let cols = x_t.cols();
    let mut out = DenseMatrix::zeros(x_t.rows(), cols);
    for r in 0..x_t.rows() {
        let (xt, x0r) = (x_t.row(r), x0.row(r));
        let o = out.row_mut(r);
        for c in 0..cols {
            o[c] = c_x0 * x0r[c] + c_dir * (xt[c] - sqrt_ab * x0r[c]);
        }
        if sigma > 0.0 {
            for v in o.iter_mut() {
                *v += sigma * noise.normal_for(r);
            }
        }
    }
    Ok(out)
}

/// Conditioning label: a class id or the null token `∅`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Class(usize),
    Null,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Class(c) => write!(f, "class{c}"),
            Condition::Null => f.write_str("null"),
        }
    }
}

/// Sinusoidal embedding of an integer time step: `[sin(t·ω_i)…, cos(t·ω_i)…]`
/// with `ω_i = 10000^{−i/(d/2)}`.
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

/// Architecture of the noise predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub num_classes: usize,
    pub data_dim: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            num_classes: 8,
            data_dim: 2,
            time_embed_dim: 16,
            class_embed_dim: 8,
            hidden: vec![128, 128],
        }
    }
}

/// `ε_θ(x_t, c, t)`: a tanh MLP over `[x_t, time embedding, class embedding]`.
/// The class table has `C + 1` rows; the last one is the null token.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    net: Mlp,
    class_embed: DenseMatrix,
    num_classes: usize,
    time_embed_dim: usize,
}

/// Gradients of the denoiser parameters.
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub net: MlpGrads,
    pub class_embed: DenseMatrix,
}

impl Denoiser {
    pub fn init(arch: &DenoiserArch, rng: &mut Rng) -> Result<Self> {
        if arch.num_classes == 0 || arch.data_dim == 0 || arch.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidParam(format!(
                "bad denoiser architecture {arch:?}"
            )));
        }
        let mut dims = vec![arch.data_dim + arch.time_embed_dim + arch.class_embed_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.data_dim);
        let net = Mlp::init(&dims, Activation::Tanh, rng)?;
        let class_embed =
            DenseMatrix::from_fn(arch.num_classes + 1, arch.class_embed_dim, |_, _| {
                rng.normal()
            });
        Ok(Self {
            net,
            class_embed,
            num_classes: arch.num_classes,
            time_embed_dim: arch.time_embed_dim,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn class_embeddings(&self) -> &DenseMatrix {
        &self.class_embed
    }

    fn class_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Class(c) if c < self.num_classes => Ok(c),
            Condition::Class(c) => Err(Error::InvalidParam(format!(
                "class {c} outside 0..{}",
                self.num_classes
            ))),
            Condition::Null => Ok(self.num_classes),
        }
    }

    fn build_input(
        &self,
        x_t: &DenseMatrix,
        ts: &[usize],
        conds: &[Condition],
    ) -> Result<DenseMatrix> {
        let d = self.data_dim();
        if x_t.cols() != d || ts.len() != x_t.rows() || conds.len() != x_t.rows() {
            return Err(Error::Shape(format!(
                "denoiser input {:?} with {} time steps and {} conditions",
                x_t.shape(),
                ts.len(),
                conds.len()
            )));
        }
        let width = self.net.input_dim();
        let mut data = Vec::with_capacity(x_t.rows() * width);
        let mut cached: Option<(usize, Vec<f64>)> = None;
        for (r, (&t, &cond)) in ts.iter().zip(conds).enumerate() {
            data.extend_from_slice(x_t.row(r));
            match &cached {
                Some((ct, emb)) if *ct == t => data.extend_from_slice(emb),
                _ => {
                    let emb = time_embedding(t, self.time_embed_dim);
                    data.extend_from_slice(&emb);
                    cached = Some((t, emb));
                }
            }
            data.extend_from_slice(self.class_embed.row(self.class_row(cond)?));
        }
        DenseMatrix::new(x_t.rows(), width, data)
    }

    /// Forward pass with per-row time steps and conditions.
    pub fn forward(
        &self,
        x_t: &DenseMatrix,
        ts: &[usize],
        conds: &[Condition],
    ) -> Result<ForwardPass> {
        self.net.forward(&self.build_input(x_t, ts, conds)?)
    }

    /// `ε_θ(x_t, c, t)` for a whole batch sharing `t` and `c`.
    pub fn predict(&self, x_t: &DenseMatrix, t: usize, cond: Condition) -> Result<DenseMatrix> {
        let n = x_t.rows();
        Ok(self
            .forward(x_t, &vec![t; n], &vec![cond; n])?
            .into_output())
    }

    /// Vector–Jacobian product restricted to the `x_t` columns.
    pub fn input_grad_x(&self, pass: &ForwardPass, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self
            .net
            .input_grad(pass, upstream)?
            .columns(0, self.data_dim()))
    }

    /// Mean squared error between predicted and true noise (averaged over
    /// batch and data dimensions) and its parameter gradients.
    pub fn loss_and_grad(
        &self,
        x_t: &DenseMatrix,
        ts: &[usize],
        conds: &[Condition],
        eps: &DenseMatrix,
    ) -> Result<(f64, DenoiserGrads)> {
        let pass = self.forward(x_t, ts, conds)?;
        let pred = pass.output();
        if pred.shape() != eps.shape() {
            return Err(Error::Shape("noise target shape".into()));
        }
        let count = eps.as_slice().len() as f64;
        let mut loss = 0.0;
        let up: Vec<f64> = pred
            .as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(p, e)| {
                let diff = p - e;
                loss += diff * diff;
                2.0 * diff / count
            })
            .collect();
        let up = DenseMatrix::new(pred.rows(), pred.cols(), up)?;
        let (net_grads, dx) = self.net.backward(&pass, &up)?;
        let mut class_embed = DenseMatrix::zeros(self.class_embed.rows(), self.class_embed.cols());
        let offset = self.data_dim() + self.time_embed_dim;
        for (r, &cond) in conds.iter().enumerate() {
            let row = self.class_row(cond)?;
            let src = &dx.row(r)[offset..];
            for (g, s) in class_embed.row_mut(row).iter_mut().zip(src) {
                *g += s;
            }
        }
        Ok((
            loss / count,
            DenoiserGrads {
                net: net_grads,
                class_embed,
            },
        ))
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.net.params_mut();
        p.push(self.class_embed.as_mut_slice());
        p
    }

    /// Runs the network for `ε̂` with classifier-free guidance and keeps the
    /// caches needed to differentiate through it.
    pub fn cfg_forward(
        &self,
        x_t: &DenseMatrix,
        t: usize,
        cond: Condition,
        beta: f64,
    ) -> Result<CfgPass> {
        let n = x_t.rows();
        let ts = vec![t; n];
        let cond_pass = self.forward(x_t, &ts, &vec![cond; n])?;
        if cond == Condition::Null || beta == 0.0 {
            let eps = cond_pass.output().clone();
            return Ok(CfgPass {
                cond: cond_pass,
                null: None,
                beta,
                eps,
            });
        }
        let null_pass = self.forward(x_t, &ts, &vec![Condition::Null; n])?;
        let eps = DenseMatrix::lincomb(1.0 + beta, cond_pass.output(), -beta, null_pass.output())?;
        Ok(CfgPass {
            cond: cond_pass,
            null: Some(null_pass),
            beta,
            eps,
        })
    }

    pub fn to_document(&self, schedule: &ScheduleParams) -> DenoiserDocument {
        DenoiserDocument {
            model: self.net.to_document(),
            num_classes: self.num_classes,
            time_embed_dim: self.time_embed_dim,
            class_embed_dim: self.class_embed.cols(),
            class_embeddings: self.class_embed.as_slice().to_vec(),
            schedule: *schedule,
        }
    }

    pub fn from_document(doc: DenoiserDocument) -> Result<(Self, ScheduleParams)> {
        let net = Mlp::from_document(doc.model)?;
        let class_embed = DenseMatrix::new(
            doc.num_classes + 1,
            doc.class_embed_dim,
            doc.class_embeddings,
        )?;
        if net.input_dim() != net.output_dim() + doc.time_embed_dim + doc.class_embed_dim {
            return Err(Error::Shape(
                "denoiser input width does not match embeddings".into(),
            ));
        }
        Ok((
            Self {
                net,
                class_embed,
                num_classes: doc.num_classes,
                time_embed_dim: doc.time_embed_dim,
            },
            doc.schedule,
        ))
    }
}

/// On-disk denoiser: the MLP in the common model format plus the embedding
/// table and the schedule it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserDocument {
    pub model: MlpDocument,
    pub num_classes: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    /// Row-major `(num_classes + 1) × class_embed_dim`; last row is `∅`.
    pub class_embeddings: Vec<f64>,
    pub schedule: ScheduleParams,
}

/// Cached forward passes behind one classifier-free-guided prediction.
#[derive(Debug, Clone)]
pub struct CfgPass {
    cond: ForwardPass,
    null: Option<ForwardPass>,
    beta: f64,
    eps: DenseMatrix,
}

impl CfgPass {
    pub fn epsilon(&self) -> &DenseMatrix {
        &self.eps
    }

    pub fn into_epsilon(self) -> DenseMatrix {
        self.eps
    }

    /// `∂/∂x_t Σ upstream ⊙ ε̂`
    pub fn vjp_x(&self, den: &Denoiser, upstream: &DenseMatrix) -> Result<DenseMatrix> {
        match &self.null {
            None => den.input_grad_x(&self.cond, upstream),
            Some(null) => {
                let gc = den.input_grad_x(&self.cond, upstream)?;
                let gn = den.input_grad_x(null, upstream)?;
                DenseMatrix::lincomb(1.0 + self.beta, &gc, -self.beta, &gn)
            }
        }
    }
}

/// `ε̂ = (1 + β) ε_θ(x_t, c, t) − β ε_θ(x_t, ∅, t)`
pub fn cfg_epsilon(
    den: &Denoiser,
    x_t: &DenseMatrix,
    cond: Condition,
    t: usize,
    beta: f64,
) -> Result<DenseMatrix> {
    Ok(den.cfg_forward(x_t, t, cond, beta)?.into_epsilon())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub arch: DenoiserArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            arch: DenoiserArch::default(),
            epochs: 300,
            batch_size: 128,
            lr: 1e-3,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

/// Trains `ε_θ` with Adam on the noise-prediction objective. Each sample gets
/// a uniform time step, fresh noise, and its label replaced by `∅` with
/// probability `cond_dropout`. Returns the model and the mean loss per epoch.
pub fn train_denoiser(
    data: &LabeledDataset,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<(Denoiser, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Empty("denoiser training data"));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::InvalidParam(
            "batch size must be > 0 and dropout in [0, 1]".into(),
        ));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= cfg.arch.num_classes) {
        return Err(Error::InvalidParam(format!(
            "label {bad} outside 0..{}",
            cfg.arch.num_classes
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut den = Denoiser::init(&cfg.arch, &mut Rng::new(sub_seed(cfg.seed, "init")))?;
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let d = data.points.cols();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x0 = data.points.select_rows(chunk);
            let n = chunk.len();
            let ts: Vec<usize> = (0..n).map(|_| 1 + rng.index(schedule.steps())).collect();
            let eps = DenseMatrix::from_fn(n, d, |_, _| rng.normal());
            let conds: Vec<Condition> = chunk
                .iter()
                .map(|&i| {
                    if rng.uniform() < cfg.cond_dropout {
                        Condition::Null
                    } else {
                        Condition::Class(data.labels[i])
                    }
                })
                .collect();
            let x_t = noise_rows(&x0, &ts, &eps, schedule);
            let (loss, grads) = den.loss_and_grad(&x_t, &ts, &conds, &eps)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("denoiser loss {loss}")));
            }
            let mut g = grads.net.as_slices();
            g.push(grads.class_embed.as_slice());
            opt.step(&mut den.params_mut(), &g)?;
            total += loss;
            batches += 1;
        }
        log.push(total / batches as f64);
    }
    Ok((den, log))
}

/// `q_sample` with a separate time step per row.
fn noise_rows(x0: &DenseMatrix, ts: &[usize], eps: &DenseMatrix, s: &NoiseSchedule) -> DenseMatrix {
    DenseMatrix::from_fn(x0.rows(), x0.cols(), |r, c| {
        let ab = s.alpha_bar(ts[r]);
        ab.sqrt() * x0.get(r, c) + (1.0 - ab).sqrt() * eps.get(r, c)
    })
}

/// Mean noise-prediction error over `draws` random `(t, ε)` pairs per point.
pub fn denoiser_mse(
    den: &Denoiser,
    data: &LabeledDataset,
    schedule: &NoiseSchedule,
    draws: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..draws {
        let n = data.len();
        let ts: Vec<usize> = (0..n).map(|_| 1 + rng.index(schedule.steps())).collect();
        let eps = DenseMatrix::from_fn(n, data.points.cols(), |_, _| rng.normal());
        let conds: Vec<Condition> = data.labels.iter().map(|&l| Condition::Class(l)).collect();
        let x_t = noise_rows(&data.points, &ts, &eps, schedule);
        let pred = den.forward(&x_t, &ts, &conds)?.into_output();
        total += pred
            .as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>()
            / eps.as_slice().len() as f64;
    }
    Ok(total / draws as f64)
}

/// State visible to a guidance hook at one reverse step.
pub struct ReverseStep<'a> {
    pub t: usize,
    pub x_t: &'a DenseMatrix,
    pub x0: &'a DenseMatrix,
    pub cfg: &'a CfgPass,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
}

/// Additive corrections to one reverse step: `x_{t−1} += Δ_t/√α_t + √ᾱ_{t−1} Δ_0`.
#[derive(Debug, Clone, Default)]
pub struct GuidanceTerms {
    pub delta_t: Option<DenseMatrix>,
    pub delta_0: Option<DenseMatrix>,
}

/// A guidance hook for the reverse process.
///
/// Errors that carry a sample index (see [`Error::sample_index`]) abort only
/// the chain in that batch row; any other error aborts the whole run.
pub trait Guide: Sync {
    /// Whether step `t` receives any guidance. Inactive steps run exactly the
    /// unguided update.
    fn is_active(&self, t: usize) -> bool;

    /// Number of times each step is applied (re-noising in between).
    fn recurrence(&self) -> usize {
        1
    }

    fn terms(&self, step: &ReverseStep<'_>, rngs: &mut [Rng]) -> Result<GuidanceTerms>;
}

/// Settings shared by all chains of one reverse-process run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseSpec {
    pub cond: Condition,
    pub cfg_beta: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortedChain {
    pub chain: usize,
    pub t: usize,
    pub reason: String,
}

/// Outcome of a batch of reverse chains.
#[derive(Debug, Clone)]
pub struct ChainOutcome {
    /// Final samples of the chains that completed, in chain order.
    pub samples: DenseMatrix,
    /// Chain index of every row of `samples`.
    pub completed: Vec<usize>,
    pub aborted: Vec<AbortedChain>,
}

/// Number of chains advanced together in one batch.
const CHUNK: usize = 32;

/// Seeds of chain `index`: the sampling stream and the guidance stream.
pub fn chain_seeds(seed: u64, index: usize) -> (u64, u64) {
    let chain = indexed_seed(seed, index as u64);
    (chain, sub_seed(chain, "guidance"))
}

/// Runs `n` independent reverse chains from `x_T ~ N(0, I)` down to `x_0`.
///
/// Chain `i` draws from its own streams (see [`chain_seeds`]), so results do
/// not depend on batching or thread scheduling. Chains whose state becomes
/// non-finite are dropped and reported in [`ChainOutcome::aborted`].
pub fn reverse_process(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    spec: &ReverseSpec,
    n: usize,
    seed: u64,
    guide: Option<&dyn Guide>,
) -> Result<ChainOutcome> {
    den.class_row(spec.cond)?;
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| run_chunk(den, schedule, spec, s..(s + CHUNK).min(n), seed, guide))
        .collect::<Result<Vec<_>>>()?;
    let d = den.data_dim();
    let mut data = Vec::with_capacity(n * d);
    let mut completed = Vec::with_capacity(n);
    let mut aborted = Vec::new();
    for (rows, ids, ab) in parts {
        data.extend_from_slice(rows.as_slice());
        completed.extend(ids);
        aborted.extend(ab);
    }
    Ok(ChainOutcome {
        samples: DenseMatrix::new(completed.len(), d, data)?,
        completed,
        aborted,
    })
}

struct ChunkState {
    x: DenseMatrix,
    ids: Vec<usize>,
    rngs: Vec<Rng>,
    guide_rngs: Vec<Rng>,
}

impl ChunkState {
    fn drop_rows(&mut self, dead: &[usize]) {
        let keep: Vec<usize> = (0..self.ids.len()).filter(|i| !dead.contains(i)).collect();
        self.x = self.x.select_rows(&keep);
        self.ids = keep.iter().map(|&i| self.ids[i]).collect();
        self.rngs = keep.iter().map(|&i| self.rngs[i].clone()).collect();
        self.guide_rngs = keep.iter().map(|&i| self.guide_rngs[i].clone()).collect();
    }
}

type ChunkResult = (DenseMatrix, Vec<usize>, Vec<AbortedChain>);

fn run_chunk(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    spec: &ReverseSpec,
    chains: std::ops::Range<usize>,
    seed: u64,
    guide: Option<&dyn Guide>,
) -> Result<ChunkResult> {
    let d = den.data_dim();
    let ids: Vec<usize> = chains.collect();
    let mut rngs = Vec::with_capacity(ids.len());
    let mut guide_rngs = Vec::with_capacity(ids.len());
    for &i in &ids {
        let (s, g) = chain_seeds(seed, i);
        rngs.push(Rng::new(s));
        guide_rngs.push(Rng::new(g));
    }
    let mut x = DenseMatrix::zeros(ids.len(), d);
    for (r, rng) in rngs.iter_mut().enumerate() {
        for v in x.row_mut(r) {
            *v = rng.normal();
        }
    }
    let mut st = ChunkState {
        x,
        ids,
        rngs,
        guide_rngs,
    };
    let mut aborted = Vec::new();
    let recur = guide.map_or(1, |g| g.recurrence().max(1));

    for t in (1..=schedule.steps()).rev() {
        if st.ids.is_empty() {
            break;
        }
        loop {
            let snapshot = (st.rngs.clone(), st.guide_rngs.clone());
            match advance(den, schedule, spec, t, recur, guide, &mut st) {
                Ok(next) => {
                    st.x = next;
                    break;
                }
                Err(e) => match e.sample_index() {
                    Some(row) if row < st.ids.len() => {
                        aborted.push(AbortedChain {
                            chain: st.ids[row],
                            t,
                            reason: e.to_string(),
                        });
                        st.rngs = snapshot.0;
                        st.guide_rngs = snapshot.1;
                        st.drop_rows(&[row]);
                        if st.ids.is_empty() {
                            break;
                        }
                    }
                    _ => return Err(e),
                },
            }
        }
        let dead: Vec<usize> = (0..st.ids.len())
            .filter(|&r| !st.x.row_is_finite(r))
            .collect();
        for &r in &dead {
            log::warn!(
                "chain {} produced a non-finite state at t = {t}; dropping it",
                st.ids[r]
            );
            aborted.push(AbortedChain {
                chain: st.ids[r],
                t,
                reason: "non-finite state".into(),
            });
        }
        if !dead.is_empty() {
            st.drop_rows(&dead);
        }
    }
    Ok((st.x, st.ids, aborted))
}

fn advance(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    spec: &ReverseSpec,
    t: usize,
    recur: usize,
    guide: Option<&dyn Guide>,
    st: &mut ChunkState,
) -> Result<DenseMatrix> {
    let active = guide.filter(|g| g.is_active(t));
    let mut x_t = st.x.clone();
    for r in 0..recur {
        let cfg = den.cfg_forward(&x_t, t, spec.cond, spec.cfg_beta)?;
        let x0 = predict_x0(&x_t, t, cfg.epsilon(), schedule)?;
        let mut next = ddim_step(&x_t, &x0, t, spec.eta, &mut st.rngs[..], schedule)?;
        if let Some(g) = active {
            let step = ReverseStep {
                t,
                x_t: &x_t,
                x0: &x0,
                cfg: &cfg,
                denoiser: den,
                schedule,
            };
            let terms = g.terms(&step, &mut st.guide_rngs)?;
            if let Some(dt) = &terms.delta_t {
                next.add_scaled(1.0 / schedule.alpha(t).sqrt(), dt)?;
            }
            if let Some(d0) = &terms.delta_0 {
                next.add_scaled(schedule.alpha_bar(t - 1).sqrt(), d0)?;
            }
        }
        if r + 1 < recur {
            // x_t ~ N(√α_t x_{t−1}, (1 − α_t) I)
            let (a, s) = (schedule.alpha(t).sqrt(), (1.0 - schedule.alpha(t)).sqrt());
            for row in 0..next.rows() {
                for v in next.row_mut(row) {
                    *v = a * *v + s * st.rngs[row].normal();
                }
            }
            x_t = next;
        } else {
            return Ok(next);
        }
    }
    unreachable!("recurrence count is at least one")
}

/// Unguided conditional sampling with classifier-free guidance strength
/// `cfg_beta` and DDIM stochasticity `eta`.
pub fn sample(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    cond: Condition,
    cfg_beta: f64,
    eta: f64,
    n: usize,
    seed: u64,
) -> Result<DenseMatrix> {
    let spec = ReverseSpec {
        cond,
        cfg_beta,
        eta,
    };
    let out = reverse_process(den, schedule, &spec, n, seed, None)?;
    if let Some(a) = out.aborted.first() {
        return Err(Error::NonFinite(format!(
            "chain {} at t = {}: {} (seed {seed})",
            a.chain, a.t, a.reason
        )));
    }
    Ok(out.samples)
}
