//! Outlier-exposure fine-tuning.
//!
//! A small head `ψ` maps a sample's energy to a logit of being OOD. The
//! logistic loss `mean_ood softplus(ψ(E)) + mean_id softplus(−ψ(E))` is added
//! to the ID cross-entropy with weight `λ`, and classifier and head are
//! trained jointly with SGD-momentum under a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::evaldetect::id_accuracy;
use crate::numcore::{
    cosine_lr, Activation, DenseMatrix, ForwardPass, Mlp, MlpGrads, Optimizer, Rng, SgdMomentum,
};
use crate::scores::{cross_entropy, energy, energy_upstream, Classifier};
use crate::{Error, Result};

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ψ: ℝ → ℝ`, a relu MLP over the raw energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mlp", into = "Mlp")]
pub struct PsiHead {
    net: Mlp,
}

impl TryFrom<Mlp> for PsiHead {
    type Error = Error;

    fn try_from(net: Mlp) -> Result<Self> {
        Self::from_mlp(net)
    }
}

impl From<PsiHead> for Mlp {
    fn from(p: PsiHead) -> Mlp {
        p.net
    }
}

impl PsiHead {
    /// `1 → hidden → hidden → 1`
    pub fn init(hidden: usize, rng: &mut Rng) -> Result<Self> {
        Self::from_mlp(Mlp::init(&[1, hidden, hidden, 1], Activation::Relu, rng)?)
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.input_dim() != 1 || net.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "psi head must map 1 -> 1, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self { net })
    }

    /// The same architecture with every weight and bias set to zero.
    pub fn zeroed(&self) -> Self {
        let mut net = self.net.clone();
        for p in net.params_mut() {
            p.fill(0.0);
        }
        Self { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn forward(&self, energies: &[f64]) -> Result<ForwardPass> {
        self.net
            .forward(&DenseMatrix::new(energies.len(), 1, energies.to_vec())?)
    }

    pub fn apply(&self, energies: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(energies)?.into_output().into_vec())
    }
}

/// Value of the logistic OE loss.
pub fn oe_loss(e_id: &[f64], e_ood: &[f64], psi: &PsiHead) -> Result<f64> {
    Ok(oe_loss_grad(e_id, e_ood, psi)?.loss)
}

/// OE loss with its gradients with respect to every input energy and to `ψ`.
#[derive(Debug, Clone)]
pub struct OeLossGrad {
    pub loss: f64,
    pub d_id: Vec<f64>,
    pub d_ood: Vec<f64>,
    pub psi: MlpGrads,
}

pub fn oe_loss_grad(e_id: &[f64], e_ood: &[f64], psi: &PsiHead) -> Result<OeLossGrad> {
    if e_id.is_empty() {
        return Err(Error::Empty("ID energies"));
    }
    if e_ood.is_empty() {
        return Err(Error::Empty("OOD energies"));
    }
    let (n_id, n_ood) = (e_id.len() as f64, e_ood.len() as f64);
    let pass_id = psi.forward(e_id)?;
    let pass_ood = psi.forward(e_ood)?;
    let (s_id, s_ood) = (pass_id.output().as_slice(), pass_ood.output().as_slice());
    let loss = s_ood.iter().map(|&s| softplus(s)).sum::<f64>() / n_ood
        + s_id.iter().map(|&s| softplus(-s)).sum::<f64>() / n_id;
    let up_ood: Vec<f64> = s_ood.iter().map(|&s| sigmoid(s) / n_ood).collect();
    let up_id: Vec<f64> = s_id.iter().map(|&s| -sigmoid(-s) / n_id).collect();
    let up_ood = DenseMatrix::new(up_ood.len(), 1, up_ood)?;
    let up_id = DenseMatrix::new(up_id.len(), 1, up_id)?;
    let (mut grads, d_ood) = psi.net.backward(&pass_ood, &up_ood)?;
    let (g_id, d_id) = psi.net.backward(&pass_id, &up_id)?;
    grads.add_assign(&g_id);
    Ok(OeLossGrad {
        loss,
        d_id: d_id.into_vec(),
        d_ood: d_ood.into_vec(),
        psi: grads,
    })
}

/// `L_CE + λ · L_OOD`
pub fn total_loss(ce: f64, ood: f64, lambda: f64) -> f64 {
    ce + lambda * ood
}

/// Loss terms of one fine-tuning batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OeBatchLoss {
    pub ce: f64,
    pub ood: f64,
    pub total: f64,
}

/// Joint objective on one batch and its gradients for the classifier and `ψ`.
pub fn oe_objective(
    clf: &Classifier,
    psi: &PsiHead,
    x_id: &DenseMatrix,
    y_id: &[usize],
    x_ood: &DenseMatrix,
    lambda: f64,
) -> Result<(OeBatchLoss, MlpGrads, MlpGrads)> {
    let pass_id = clf.forward(x_id)?;
    let pass_ood = clf.forward(x_ood)?;
    let (ce, mut up_id) = cross_entropy(pass_id.output(), y_id)?;
    let e_id: Vec<f64> = pass_id.output().iter_rows().map(energy).collect();
    let e_ood: Vec<f64> = pass_ood.output().iter_rows().map(energy).collect();
    let oe = oe_loss_grad(&e_id, &e_ood, psi)?;

    // ∂E/∂logits = −softmax, scaled by λ ∂L_OOD/∂E per sample
    let chain = |logits: &DenseMatrix, d_e: &[f64], acc: &mut DenseMatrix| {
        let de = energy_upstream(logits);
        for (r, &d) in d_e.iter().enumerate() {
            for (a, v) in acc.row_mut(r).iter_mut().zip(de.row(r)) {
                *a += lambda * d * v;
            }
        }
    };
    chain(pass_id.output(), &oe.d_id, &mut up_id);
    let mut up_ood = DenseMatrix::zeros(pass_ood.output().rows(), pass_ood.output().cols());
    chain(pass_ood.output(), &oe.d_ood, &mut up_ood);

    let mut clf_grads = clf.net().param_grad(&pass_id, &up_id)?;
    clf_grads.add_assign(&clf.net().param_grad(&pass_ood, &up_ood)?);
    let mut psi_grads = oe.psi;
    for w in psi_grads.weights.iter_mut() {
        *w = w.scale(lambda);
    }
    for b in psi_grads.biases.iter_mut() {
        b.iter_mut().for_each(|v| *v *= lambda);
    }
    Ok((
        OeBatchLoss {
            ce,
            ood: oe.loss,
            total: total_loss(ce, oe.loss, lambda),
        },
        clf_grads,
        psi_grads,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OeTrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_id: usize,
    pub batch_ood: usize,
    pub psi_hidden: usize,
    pub seed: u64,
}

impl Default for OeTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2.5,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 50,
            batch_id: 128,
            batch_ood: 128,
            psi_hidden: 16,
            seed: 0,
        }
    }
}

/// One row of the fine-tuning log (means over the epoch's batches).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OeEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub ood_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Fine-tunes `clf` and `psi` jointly on shuffled ID batches paired with OOD
/// batches drawn uniformly with replacement from `ood`.
pub fn finetune(
    clf: &Classifier,
    psi: &PsiHead,
    id_train: &LabeledDataset,
    id_val: &LabeledDataset,
    ood: &DenseMatrix,
    cfg: &OeTrainConfig,
) -> Result<(Classifier, PsiHead, Vec<OeEpoch>)> {
    if id_train.is_empty() {
        return Err(Error::Empty("ID training data"));
    }
    if ood.rows() == 0 {
        return Err(Error::Empty("OOD samples"));
    }
    if cfg.batch_id == 0 || cfg.batch_ood == 0 || !cfg.lambda.is_finite() || cfg.lambda < 0.0 {
        return Err(Error::InvalidParam(
            "batch sizes must be positive and lambda finite and >= 0".into(),
        ));
    }
    let mut clf = clf.clone();
    let mut psi = psi.clone();
    let mut rng = Rng::new(cfg.seed);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..id_train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        opt.set_learning_rate(lr);
        rng.shuffle(&mut order);
        let (mut ce, mut ood_loss, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_id) {
            let x_id = id_train.points.select_rows(chunk);
            let y_id: Vec<usize> = chunk.iter().map(|&i| id_train.labels[i]).collect();
            let picks: Vec<usize> = (0..cfg.batch_ood).map(|_| rng.index(ood.rows())).collect();
            let x_ood = ood.select_rows(&picks);
            let (loss, g_clf, g_psi) = oe_objective(&clf, &psi, &x_id, &y_id, &x_ood, cfg.lambda)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "fine-tuning loss at epoch {epoch}"
                )));
            }
            let mut params = clf.net_mut().params_mut();
            params.extend(psi.net_mut().params_mut());
            let mut grads = g_clf.as_slices();
            grads.extend(g_psi.as_slices());
            opt.step(&mut params, &grads)?;
            ce += loss.ce;
            ood_loss += loss.ood;
            batches += 1;
        }
        log.push(OeEpoch {
            epoch,
            ce: ce / batches as f64,
            ood_loss: ood_loss / batches as f64,
            val_acc: id_accuracy(&clf, id_val)?,
            lr,
        });
    }
    Ok((clf, psi, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::ClassifierArch;

    fn psi(seed: u64) -> PsiHead {
        let mut p = PsiHead::init(16, &mut Rng::new(seed)).unwrap();
        for layer in p.net_mut().layers_mut() {
            layer.bias.iter_mut().for_each(|b| *b = 0.1);
        }
        p
    }

    /// `ψ(e) = slope · e + offset` as a degenerate relu net.
    fn affine_psi(slope: f64, offset: f64) -> PsiHead {
        let mut p = psi(0).zeroed();
        let layers = p.net_mut().layers_mut();
        layers[0].weight.set(0, 0, 1.0);
        layers[0].weight.set(0, 1, -1.0);
        layers[1].weight.set(0, 0, 1.0);
        layers[1].weight.set(1, 1, 1.0);
        layers[2].weight.set(0, 0, slope);
        layers[2].weight.set(1, 0, -slope);
        layers[2].bias[0] = offset;
        p
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_head_gives_two_ln_two() {
        let z = psi(1).zeroed();
        let l = oe_loss(&[-3.0, 1.0], &[5.0], &z).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn affine_head_closed_form() {
        // ψ(E_id) = 1 and ψ(E_ood) = −1 with ψ(e) = e
        let p = affine_psi(1.0, 0.0);
        let l = oe_loss(&[1.0], &[-1.0], &p).unwrap();
        let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((expect - 0.626_523).abs() < 1e-6);
    }

    #[test]
    fn separated_head_drives_loss_to_zero() {
        let p = affine_psi(1.0, 0.0);
        let l = oe_loss(&[800.0], &[-800.0], &p).unwrap();
        assert!(l < 1e-300);
    }

    #[test]
    fn empty_batches_are_errors() {
        let p = psi(2);
        assert!(oe_loss(&[], &[1.0], &p).is_err());
        assert!(oe_loss(&[1.0], &[], &p).is_err());
    }

    #[test]
    fn mean_is_invariant_to_duplication_and_order() {
        let p = psi(3);
        let (id, ood) = (vec![-2.0, 0.5, 1.5], vec![3.0, -0.7]);
        let base = oe_loss(&id, &ood, &p).unwrap();
        let id2: Vec<f64> = id.iter().chain(&id).copied().collect();
        let ood2: Vec<f64> = ood.iter().rev().chain(&ood).copied().collect();
        assert!((oe_loss(&id2, &ood2, &p).unwrap() - base).abs() < 1e-14);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 2.0, 2.5), 6.0);
        assert_eq!(total_loss(0.7, 9.0, 0.0), 0.7);
    }

    #[test]
    fn energy_gradients_match_finite_differences() {
        let p = psi(4);
        let (id, ood) = (vec![-2.0, 0.5, 1.5], vec![3.0, -0.7]);
        let g = oe_loss_grad(&id, &ood, &p).unwrap();
        let h = 1e-6;
        for i in 0..id.len() {
            let (mut a, mut b) = (id.clone(), id.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (oe_loss(&a, &ood, &p).unwrap() - oe_loss(&b, &ood, &p).unwrap()) / (2.0 * h);
            assert!((fd - g.d_id[i]).abs() < 1e-7);
        }
        for i in 0..ood.len() {
            let (mut a, mut b) = (ood.clone(), ood.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (oe_loss(&id, &a, &p).unwrap() - oe_loss(&id, &b, &p).unwrap()) / (2.0 * h);
            assert!((fd - g.d_ood[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let clf = Classifier::init(&ClassifierArch::default(), &mut Rng::new(5)).unwrap();
        let p = psi(6);
        let data = LabeledDataset {
            points: DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
            labels: vec![0, 1],
            split: crate::datagen::Split::Train,
        };
        let ood = DenseMatrix::from_rows(&[[5.0, 5.0]]);
        let cfg = OeTrainConfig {
            lambda: 0.0,
            epochs: 0,
            ..OeTrainConfig::default()
        };
        let (c2, p2, log) = finetune(&clf, &p, &data, &data, &ood, &cfg).unwrap();
        assert_eq!(c2, clf);
        assert_eq!(p2, p);
        assert!(log.is_empty());
        assert!(finetune(&clf, &p, &data, &data, &DenseMatrix::zeros(0, 2), &cfg).is_err());
    }
}
