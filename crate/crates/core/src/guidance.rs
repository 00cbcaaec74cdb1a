//! Training-free guidance of the reverse diffusion toward OOD regions.
//!
//! At every step the clean estimate `x_{0|t}` is scored by a smoothed OOD
//! score `G` (classifier energy, or scaled k-NN distance of the embedding).
//! Mean guidance moves `x_{0|t}` along `∇G`; variance guidance moves `x_t`
//! along the gradient of `G(x_{0|t}(x_t))`, which passes through the
//! denoiser. Both step sizes follow `base · α_t / Σ_s α_s`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    reverse_process, AbortedChain, Condition, Denoiser, GuidanceTerms, Guide, NoiseSchedule,
    ReverseSpec, ReverseStep,
};
use crate::numcore::{DenseMatrix, NoiseSource, Rng};
use crate::scores::{
    energies, energy_and_grad, knn_and_grad, knn_distance, Classifier, EmbeddingBank,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceTarget {
    ImageEnergy,
    FeatureKnn,
}

impl GuidanceTarget {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceTarget::ImageEnergy => "image_energy",
            GuidanceTarget::FeatureKnn => "feature_knn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub target: GuidanceTarget,
    pub rho_bar: f64,
    pub mu_bar: f64,
    pub gamma_bar: f64,
    pub n_smooth: usize,
    pub n_recur: usize,
    pub n_iter: usize,
    pub feat_scale: f64,
    pub cfg_beta: f64,
    pub eta: f64,
    pub condition: Condition,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            target: GuidanceTarget::ImageEnergy,
            rho_bar: 1.0,
            mu_bar: 1.0,
            gamma_bar: 0.1,
            n_smooth: 4,
            n_recur: 1,
            n_iter: 1,
            feat_scale: 5.0,
            cfg_beta: 0.0,
            eta: 1.0,
            condition: Condition::Class(0),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.rho_bar) || !nonneg(self.mu_bar) || !nonneg(self.gamma_bar) {
            return Err(Error::InvalidParam(format!(
                "guidance strengths must be finite and >= 0 (rho {}, mu {}, gamma {})",
                self.rho_bar, self.mu_bar, self.gamma_bar
            )));
        }
        if self.n_smooth == 0 || self.n_recur == 0 || self.n_iter == 0 {
            return Err(Error::InvalidParam(
                "n_smooth, n_recur and n_iter must be at least 1".into(),
            ));
        }
        if !self.feat_scale.is_finite() || !self.cfg_beta.is_finite() {
            return Err(Error::InvalidParam(
                "feat_scale and cfg_beta must be finite".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidParam(format!(
                "eta = {} outside [0, 1]",
                self.eta
            )));
        }
        Ok(())
    }
}

/// `base · α_t / Σ_{s=1}^T α_s`
pub fn time_coeff(t: usize, schedule: &NoiseSchedule, base: f64) -> f64 {
    let total: f64 = schedule.alphas().iter().sum();
    base * schedule.alpha(t) / total
}

/// The OOD score `G` being ascended: the energy, or `feat_scale · D_k`.
#[derive(Debug, Clone, Copy)]
pub struct OodScore<'a> {
    pub target: GuidanceTarget,
    pub classifier: &'a Classifier,
    pub bank: Option<&'a EmbeddingBank>,
    pub feat_scale: f64,
}

impl<'a> OodScore<'a> {
    pub fn new(
        target: GuidanceTarget,
        classifier: &'a Classifier,
        bank: Option<&'a EmbeddingBank>,
        feat_scale: f64,
    ) -> Result<Self> {
        if target == GuidanceTarget::FeatureKnn && bank.is_none() {
            return Err(Error::MissingBank);
        }
        Ok(Self {
            target,
            classifier,
            bank,
            feat_scale,
        })
    }

    /// Per-sample values and input gradients.
    pub fn value_and_grad(&self, x: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
        match self.target {
            GuidanceTarget::ImageEnergy => energy_and_grad(self.classifier, x),
            GuidanceTarget::FeatureKnn => {
                let bank = self.bank.ok_or(Error::MissingBank)?;
                let (d, g) = knn_and_grad(self.classifier, bank, x)?;
                let s = self.feat_scale;
                Ok((d.into_iter().map(|v| s * v).collect(), g.scale(s)))
            }
        }
    }
}

/// Monte-Carlo estimate of the score and its gradient under Gaussian
/// smoothing with standard deviation `γ̄ √(1−ᾱ_t)`.
///
/// Row `r` draws `n_smooth × d` normals from `noise.normal_for(r)`. With
/// `γ̄ = 0` the plain score is returned and nothing is drawn.
pub fn smoothed_score_grad<N: NoiseSource + ?Sized>(
    score: &OodScore<'_>,
    x: &DenseMatrix,
    t: usize,
    schedule: &NoiseSchedule,
    gamma_bar: f64,
    n_smooth: usize,
    noise: &mut N,
) -> Result<(Vec<f64>, DenseMatrix)> {
    if n_smooth == 0 {
        return Err(Error::InvalidParam("n_smooth must be at least 1".into()));
    }
    if gamma_bar == 0.0 {
        return score.value_and_grad(x);
    }
    let sd = gamma_bar * (1.0 - schedule.alpha_bar(t)).sqrt();
    let (n, d) = x.shape();
    let mut expanded = DenseMatrix::zeros(n * n_smooth, d);
    for r in 0..n {
        for j in 0..n_smooth {
            let row = expanded.row_mut(r * n_smooth + j);
            for (v, &base) in row.iter_mut().zip(x.row(r)) {
                *v = base + sd * noise.normal_for(r);
            }
        }
    }
    let (values, grads) = score.value_and_grad(&expanded).map_err(|e| match e {
        Error::DegenerateEmbedding { index, norm } => Error::DegenerateEmbedding {
            index: index / n_smooth,
            norm,
        },
        Error::ZeroDistance { index } => Error::ZeroDistance {
            index: index / n_smooth,
        },
        other => other,
    })?;
    let inv = 1.0 / n_smooth as f64;
    let mut mean_v = vec![0.0; n];
    let mut mean_g = DenseMatrix::zeros(n, d);
    for (r, v) in mean_v.iter_mut().enumerate() {
        for j in 0..n_smooth {
            let src = r * n_smooth + j;
            *v += values[src] * inv;
            for (m, g) in mean_g.row_mut(r).iter_mut().zip(grads.row(src)) {
                *m += g * inv;
            }
        }
    }
    Ok((mean_v, mean_g))
}

struct OodGuide<'a> {
    score: OodScore<'a>,
    gamma_bar: f64,
    n_smooth: usize,
    n_iter: usize,
    n_recur: usize,
    rho: Vec<f64>,
    mu: Vec<f64>,
}

impl Guide for OodGuide<'_> {
    fn is_active(&self, t: usize) -> bool {
        self.rho[t - 1] != 0.0 || self.mu[t - 1] != 0.0
    }

    fn recurrence(&self) -> usize {
        self.n_recur
    }

    fn terms(&self, step: &ReverseStep<'_>, rngs: &mut [Rng]) -> Result<GuidanceTerms> {
        let (t, s) = (step.t, step.schedule);
        let (rho, mu) = (self.rho[t - 1], self.mu[t - 1]);
        let grad = |x: &DenseMatrix, rngs: &mut [Rng]| {
            smoothed_score_grad(&self.score, x, t, s, self.gamma_bar, self.n_smooth, rngs)
                .map(|(_, g)| g)
        };
        let g = grad(step.x0, rngs)?;
        let mut terms = GuidanceTerms::default();
        if rho != 0.0 {
            // ∇_{x_t} G(x_{0|t}) = (g − √(1−ᾱ_t) J_ε̂ᵀ g) / √ᾱ_t
            let ab = s.alpha_bar(t);
            let jtg = step.cfg.vjp_x(step.denoiser, &g)?;
            let k = 1.0 / ab.sqrt();
            terms.delta_t = Some(DenseMatrix::lincomb(
                rho * k,
                &g,
                -rho * (1.0 - ab).sqrt() * k,
                &jtg,
            )?);
        }
        if mu != 0.0 {
            let mut d0 = g.scale(mu);
            for _ in 1..self.n_iter {
                let mut shifted = step.x0.clone();
                shifted.add_scaled(1.0, &d0)?;
                d0.add_scaled(mu, &grad(&shifted, rngs)?)?;
            }
            terms.delta_0 = Some(d0);
        }
        Ok(terms)
    }
}

/// Guided samples of one configuration, with their final scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidedBatchResult {
    pub samples: DenseMatrix,
    /// Chain index of every sample row.
    pub chains: Vec<usize>,
    pub energy: Vec<f64>,
    /// Present when a bank was supplied.
    pub knn: Option<Vec<f64>>,
    pub aborted: Vec<AbortedChain>,
    pub requested: usize,
    pub config: GuidanceConfig,
    pub seed: u64,
}

/// Runs `n` guided reverse chains. A bank is required for the feature
/// target; when supplied it is also used to report final k-NN distances.
pub fn guided_sample(
    den: &Denoiser,
    schedule: &NoiseSchedule,
    classifier: &Classifier,
    bank: Option<&EmbeddingBank>,
    config: &GuidanceConfig,
    n: usize,
    seed: u64,
) -> Result<GuidedBatchResult> {
    config.validate()?;
    let score = OodScore::new(config.target, classifier, bank, config.feat_scale)?;
    let steps = schedule.steps();
    let guide = OodGuide {
        score,
        gamma_bar: config.gamma_bar,
        n_smooth: config.n_smooth,
        n_iter: config.n_iter,
        n_recur: config.n_recur,
        rho: (1..=steps)
            .map(|t| time_coeff(t, schedule, config.rho_bar))
            .collect(),
        mu: (1..=steps)
            .map(|t| time_coeff(t, schedule, config.mu_bar))
            .collect(),
    };
    let spec = ReverseSpec {
        cond: config.condition,
        cfg_beta: config.cfg_beta,
        eta: config.eta,
    };
    let out = reverse_process(den, schedule, &spec, n, seed, Some(&guide))?;
    for a in &out.aborted {
        log::warn!(
            "guided chain {} aborted at t = {} ({}); config {:?}, seed {seed}",
            a.chain,
            a.t,
            a.reason,
            config
        );
    }
    let mut samples = out.samples;
    let mut chains = out.completed;
    let mut aborted = out.aborted;
    let knn = match bank {
        None => None,
        Some(b) => Some(loop {
            match knn_distance(b, classifier, &samples) {
                Ok(d) => break d,
                Err(Error::DegenerateEmbedding { index, .. }) => {
                    aborted.push(AbortedChain {
                        chain: chains[index],
                        t: 0,
                        reason: "degenerate embedding of final sample".into(),
                    });
                    let keep: Vec<usize> = (0..chains.len()).filter(|&i| i != index).collect();
                    samples = samples.select_rows(&keep);
                    chains.remove(index);
                }
                Err(e) => return Err(e),
            }
        }),
    };
    let energy = energies(classifier, &samples)?;
    Ok(GuidedBatchResult {
        samples,
        chains,
        energy,
        knn,
        aborted,
        requested: n,
        config: config.clone(),
        seed,
    })
}

/// One cell of a balanced sampling plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: GuidanceConfig,
    pub class: usize,
    pub count: usize,
}

/// Strength pairs of a balanced plan: the full `ρ̄ × μ̄` grid for the image
/// target, the diagonal `ρ̄ = μ̄` for the feature target.
pub fn grid_pairs(target: GuidanceTarget, values: &[f64]) -> Vec<(f64, f64)> {
    match target {
        GuidanceTarget::ImageEnergy => values
            .iter()
            .flat_map(|&r| values.iter().map(move |&m| (r, m)))
            .collect(),
        GuidanceTarget::FeatureKnn => values.iter().map(|&v| (v, v)).collect(),
    }
}

/// Expands `base` into one cell per (strength pair, class), each asking for
/// `per_config_n` samples.
pub fn balanced_grid(
    base: &GuidanceConfig,
    target: GuidanceTarget,
    values: &[f64],
    per_config_n: usize,
    classes: &[usize],
) -> Result<Vec<GridCell>> {
    if values.is_empty() {
        return Err(Error::Empty("guidance grid values"));
    }
    let mut cells = Vec::new();
    for (rho_bar, mu_bar) in grid_pairs(target, values) {
        for &class in classes {
            cells.push(GridCell {
                config: GuidanceConfig {
                    target,
                    rho_bar,
                    mu_bar,
                    condition: Condition::Class(class),
                    ..base.clone()
                },
                class,
                count: per_config_n,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample, DenoiserArch};
    use crate::scores::ClassifierArch;

    fn fixtures() -> (Denoiser, NoiseSchedule, Classifier) {
        let den = Denoiser::init(
            &DenoiserArch {
                num_classes: 3,
                data_dim: 2,
                time_embed_dim: 4,
                class_embed_dim: 3,
                hidden: vec![16],
            },
            &mut Rng::new(1),
        )
        .unwrap();
        let mut clf = Classifier::init(
            &ClassifierArch {
                input_dim: 2,
                hidden: 8,
                embed_dim: 4,
                num_classes: 3,
            },
            &mut Rng::new(2),
        )
        .unwrap();
        // keep every embedding away from the origin
        let e = clf.embed_layer();
        clf.net_mut().layers_mut()[e].bias = vec![0.5; 4];
        (den, NoiseSchedule::linear(30, 1e-3, 0.05).unwrap(), clf)
    }

    #[test]
    fn time_coeff_examples() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((time_coeff(1, &s, 1.0) - 0.9 / 1.7).abs() < 1e-15);
        assert!((time_coeff(2, &s, 1.0) - 0.8 / 1.7).abs() < 1e-15);
        assert_eq!(time_coeff(1, &s, 0.0), 0.0);
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let total: f64 = (1..=200).map(|t| time_coeff(t, &s, 3.5)).sum();
        assert!((total - 3.5).abs() < 1e-12);
    }

    #[test]
    fn zero_guidance_matches_unguided_bits() {
        let (den, s, clf) = fixtures();
        let cfg = GuidanceConfig {
            rho_bar: 0.0,
            mu_bar: 0.0,
            gamma_bar: 0.0,
            condition: Condition::Class(2),
            cfg_beta: 1.0,
            ..GuidanceConfig::default()
        };
        let g = guided_sample(&den, &s, &clf, None, &cfg, 37, 5).unwrap();
        let u = sample(&den, &s, Condition::Class(2), 1.0, 1.0, 37, 5).unwrap();
        assert_eq!(g.samples, u);
    }

    #[test]
    fn smoothing_leaves_no_trace_when_guidance_is_off() {
        let (den, s, clf) = fixtures();
        let cfg = GuidanceConfig {
            rho_bar: 0.0,
            mu_bar: 0.0,
            condition: Condition::Class(0),
            ..GuidanceConfig::default()
        };
        let g = guided_sample(&den, &s, &clf, None, &cfg, 10, 6).unwrap();
        let u = sample(&den, &s, Condition::Class(0), 0.0, 1.0, 10, 6).unwrap();
        assert_eq!(g.samples, u);
    }

    #[test]
    fn feature_target_requires_bank() {
        let (den, s, clf) = fixtures();
        let cfg = GuidanceConfig {
            target: GuidanceTarget::FeatureKnn,
            ..GuidanceConfig::default()
        };
        assert!(matches!(
            guided_sample(&den, &s, &clf, None, &cfg, 4, 0),
            Err(Error::MissingBank)
        ));
    }

    #[test]
    fn zero_gamma_smoothing_is_plain_gradient() {
        let (_, s, clf) = fixtures();
        let score = OodScore::new(GuidanceTarget::ImageEnergy, &clf, None, 1.0).unwrap();
        let x = DenseMatrix::from_rows(&[[0.3, -0.2], [1.5, 2.0]]);
        let plain = score.value_and_grad(&x).unwrap();
        let mut rng = Rng::new(3);
        let before = rng.clone().next_u64();
        let sm = smoothed_score_grad(&score, &x, 10, &s, 0.0, 8, &mut rng).unwrap();
        assert_eq!(sm, plain);
        assert_eq!(rng.next_u64(), before);
    }

    #[test]
    fn balanced_grid_sizes() {
        let base = GuidanceConfig::default();
        let classes: Vec<usize> = (0..8).collect();
        let img = balanced_grid(
            &base,
            GuidanceTarget::ImageEnergy,
            &[0.1, 0.5, 1.0, 2.0, 5.0],
            5,
            &classes,
        )
        .unwrap();
        assert_eq!(img.len(), 25 * 8);
        assert_eq!(img.iter().map(|c| c.count).sum::<usize>(), 1000);
        let feat = balanced_grid(
            &base,
            GuidanceTarget::FeatureKnn,
            &[0.2, 0.4, 1.0, 1.5, 2.0, 3.0, 4.0],
            15,
            &classes,
        )
        .unwrap();
        assert_eq!(feat.len(), 7 * 8);
        assert_eq!(feat.iter().map(|c| c.count).sum::<usize>(), 840);
        assert!(feat.iter().all(|c| c.config.rho_bar == c.config.mu_bar));
        assert!(balanced_grid(&base, GuidanceTarget::ImageEnergy, &[], 5, &classes).is_err());
    }

    #[test]
    fn guided_run_reports_scores() {
        let (den, s, clf) = fixtures();
        let mut rng = Rng::new(4);
        let pts = DenseMatrix::from_fn(30, 2, |_, _| rng.normal());
        let bank = crate::scores::build_bank(&clf, &pts, 3).unwrap();
        let cfg = GuidanceConfig {
            target: GuidanceTarget::FeatureKnn,
            n_iter: 2,
            n_recur: 2,
            ..GuidanceConfig::default()
        };
        let r = guided_sample(&den, &s, &clf, Some(&bank), &cfg, 12, 9).unwrap();
        assert_eq!(r.samples.rows() + r.aborted.len(), 12);
        assert_eq!(r.energy.len(), r.samples.rows());
        assert_eq!(r.knn.as_ref().unwrap().len(), r.samples.rows());
        let again = guided_sample(&den, &s, &clf, Some(&bank), &cfg, 12, 9).unwrap();
        assert_eq!(again.samples, r.samples);
    }
}
