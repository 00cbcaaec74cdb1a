//! Differentiable OOD scores: free energy over classifier logits and the
//! k-th nearest-neighbor distance between unit-normalized embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::numcore::{
    dot, norm, Activation, Adam, DenseMatrix, ForwardPass, Mlp, Optimizer, Rng, SgdMomentum,
};
use crate::{Error, Result};

/// Embeddings with a smaller norm cannot be normalized.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;
/// The k-NN gradient is undefined below this distance.
pub const MIN_KNN_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: 64,
            embed_dim: 16,
            num_classes: 8,
        }
    }
}

/// An MLP classifier whose penultimate layer output is the feature embedding
/// and whose final affine layer produces the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mlp", into = "Mlp")]
pub struct Classifier {
    net: Mlp,
}

impl TryFrom<Mlp> for Classifier {
    type Error = Error;

    fn try_from(net: Mlp) -> Result<Self> {
        Self::from_mlp(net)
    }
}

impl From<Classifier> for Mlp {
    fn from(c: Classifier) -> Mlp {
        c.net
    }
}

impl Classifier {
    /// `input → hidden → hidden → embed → classes`, relu on all but the last.
    pub fn init(arch: &ClassifierArch, rng: &mut Rng) -> Result<Self> {
        let dims = [
            arch.input_dim,
            arch.hidden,
            arch.hidden,
            arch.embed_dim,
            arch.num_classes,
        ];
        Self::from_mlp(Mlp::init(&dims, Activation::Relu, rng)?)
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.layers().len() < 2 {
            return Err(Error::InvalidParam(
                "a classifier needs an embedding layer before the logits".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.net.layers()[self.embed_layer()].out_dim()
    }

    /// Index of the layer whose output is the embedding.
    pub fn embed_layer(&self) -> usize {
        self.net.layers().len() - 2
    }

    /// One pass that yields both the embedding and the logits.
    pub fn forward(&self, x: &DenseMatrix) -> Result<ForwardPass> {
        self.net.forward(x)
    }

    pub fn embedding<'p>(&self, pass: &'p ForwardPass) -> &'p DenseMatrix {
        pass.activation(self.embed_layer())
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.net.predict(x)
    }

    /// Argmax of the logits, ties going to the lowest class index.
    pub fn predict_labels(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.iter_rows().map(argmax).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `E = −log Σ_k exp(f_k)`, via the max-shifted log-sum-exp.
pub fn energy(logits: &[f64]) -> f64 {
    -log_sum_exp(logits)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Energy of every row of `x`.
pub fn energies(clf: &Classifier, x: &DenseMatrix) -> Result<Vec<f64>> {
    Ok(clf.logits(x)?.iter_rows().map(energy).collect())
}

/// `∂E/∂logits = −softmax(logits)`, one row per sample.
pub fn energy_upstream(logits: &DenseMatrix) -> DenseMatrix {
    let mut up = DenseMatrix::zeros(logits.rows(), logits.cols());
    for (r, row) in logits.iter_rows().enumerate() {
        for (u, p) in up.row_mut(r).iter_mut().zip(softmax(row)) {
            *u = -p;
        }
    }
    up
}

/// Energies and their input gradients.
pub fn energy_and_grad(clf: &Classifier, x: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let pass = clf.forward(x)?;
    let logits = pass.output();
    let values = logits.iter_rows().map(energy).collect();
    let grad = clf.net.input_grad(&pass, &energy_upstream(logits))?;
    Ok((values, grad))
}

/// `∇_x E(x)` per sample.
pub fn grad_energy_wrt_input(clf: &Classifier, x: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(energy_and_grad(clf, x)?.1)
}

/// Normalizes each row; fails on rows whose norm is too small to divide by.
pub fn normalize_rows(f: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    let mut z = f.clone();
    let mut norms = Vec::with_capacity(f.rows());
    for r in 0..f.rows() {
        let n = norm(f.row(r));
        // written negated so that NaN norms are rejected too
        if !(n >= MIN_EMBEDDING_NORM) {
            return Err(Error::DegenerateEmbedding { index: r, norm: n });
        }
        for v in z.row_mut(r) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((z, norms))
}

/// Unit-normalized ID embeddings and the neighbor rank `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BankDocument", into = "BankDocument")]
pub struct EmbeddingBank {
    vectors: DenseMatrix,
    k: usize,
}

/// `{"k": 10, "vectors": [[...], ...]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankDocument {
    k: usize,
    vectors: Vec<Vec<f64>>,
}

impl TryFrom<BankDocument> for EmbeddingBank {
    type Error = Error;

    fn try_from(doc: BankDocument) -> Result<Self> {
        if doc.vectors.iter().any(|v| v.len() != doc.vectors[0].len()) {
            return Err(Error::Shape("bank rows differ in length".into()));
        }
        if doc.vectors.is_empty() {
            return Err(Error::Empty("embedding bank"));
        }
        EmbeddingBank::new(DenseMatrix::from_rows(&doc.vectors), doc.k)
    }
}

impl From<EmbeddingBank> for BankDocument {
    fn from(b: EmbeddingBank) -> Self {
        BankDocument {
            k: b.k,
            vectors: b.vectors.iter_rows().map(<[f64]>::to_vec).collect(),
        }
    }
}

impl EmbeddingBank {
    /// Checks `1 ≤ k ≤ n` and that every row is a unit vector.
    pub fn new(vectors: DenseMatrix, k: usize) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(Error::Empty("embedding bank"));
        }
        if k == 0 || k > vectors.rows() {
            return Err(Error::InvalidParam(format!(
                "k = {k} outside 1..={}",
                vectors.rows()
            )));
        }
        for (i, row) in vectors.iter_rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParam(format!("bank row {i} has norm {n}")));
            }
        }
        Ok(Self { vectors, k })
    }

    pub fn vectors(&self) -> &DenseMatrix {
        &self.vectors
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::new(self.vectors.clone(), k)
    }

    /// Distance from `z` to its `k`-th nearest bank row, and that row's index.
    pub fn kth_neighbor(&self, z: &[f64]) -> (f64, usize) {
        let mut d: Vec<(f64, usize)> = self
            .vectors
            .iter_rows()
            .enumerate()
            .map(|(i, b)| {
                let s: f64 = b.iter().zip(z).map(|(p, q)| (p - q) * (p - q)).sum();
                (s, i)
            })
            .collect();
        let (_, &mut (sq, idx), _) =
            d.select_nth_unstable_by(self.k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        (sq.sqrt(), idx)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Bank of normalized embeddings of `points` under `clf`.
pub fn build_bank(clf: &Classifier, points: &DenseMatrix, k: usize) -> Result<EmbeddingBank> {
    if k == 0 || k > points.rows() {
        return Err(Error::InvalidParam(format!(
            "k = {k} outside 1..={}",
            points.rows()
        )));
    }
    let pass = clf.forward(points)?;
    let (z, _) = normalize_rows(clf.embedding(&pass))?;
    EmbeddingBank::new(z, k)
}

/// `D_k(x) = ‖z − z_(k)‖` per sample.
pub fn knn_distance(bank: &EmbeddingBank, clf: &Classifier, x: &DenseMatrix) -> Result<Vec<f64>> {
    let pass = clf.forward(x)?;
    let (z, _) = normalize_rows(clf.embedding(&pass))?;
    Ok(z.iter_rows().map(|row| bank.kth_neighbor(row).0).collect())
}

/// k-NN distances and their input gradients, with the selected neighbor
/// held fixed.
pub fn knn_and_grad(
    clf: &Classifier,
    bank: &EmbeddingBank,
    x: &DenseMatrix,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let pass = clf.forward(x)?;
    let f = clf.embedding(&pass);
    if f.cols() != bank.vectors.cols() {
        return Err(Error::Shape(format!(
            "embedding width {} vs bank width {}",
            f.cols(),
            bank.vectors.cols()
        )));
    }
    let (z, norms) = normalize_rows(f)?;
    let mut values = Vec::with_capacity(x.rows());
    let mut up = DenseMatrix::zeros(f.rows(), f.cols());
    for (r, &norm) in norms.iter().enumerate() {
        let zr = z.row(r);
        let (d, idx) = bank.kth_neighbor(zr);
        if !(d > MIN_KNN_DISTANCE) {
            return Err(Error::ZeroDistance { index: r });
        }
        // ∂D/∂f = (I − z zᵀ)(z − z_k) / (‖f‖ D)
        let resid: Vec<f64> = zr
            .iter()
            .zip(bank.vectors.row(idx))
            .map(|(a, b)| a - b)
            .collect();
        let proj = dot(zr, &resid);
        let scale = 1.0 / (norm * d);
        for ((u, &res), &zc) in up.row_mut(r).iter_mut().zip(&resid).zip(zr) {
            *u = (res - zc * proj) * scale;
        }
        values.push(d);
    }
    let grad = clf.net.input_grad_from(&pass, clf.embed_layer(), &up)?;
    Ok((values, grad))
}

/// `∇_x D_k(x)` per sample.
pub fn grad_knn_wrt_input(
    clf: &Classifier,
    bank: &EmbeddingBank,
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    Ok(knn_and_grad(clf, bank, x)?.1)
}

/// Mean cross-entropy of `logits` against `labels`, and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    if logits.rows() != labels.len() || logits.rows() == 0 {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut up = DenseMatrix::zeros(logits.rows(), logits.cols());
    for (r, (row, &y)) in logits.iter_rows().zip(labels).enumerate() {
        if y >= row.len() {
            return Err(Error::InvalidParam(format!(
                "label {y} outside 0..{}",
                row.len()
            )));
        }
        loss += log_sum_exp(row) - row[y];
        for (c, (u, p)) in up.row_mut(r).iter_mut().zip(softmax(row)).enumerate() {
            *u = (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, up))
}

/// Optimizer used for supervised pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerChoice {
    Adam,
    Sgd { momentum: f64, weight_decay: f64 },
}

impl OptimizerChoice {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerChoice::Adam => Box::new(Adam::new(lr)),
            OptimizerChoice::Sgd {
                momentum,
                weight_decay,
            } => Box::new(SgdMomentum::new(lr, momentum, weight_decay)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            optimizer: OptimizerChoice::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Cross-entropy training with Adam over shuffled mini-batches.
pub fn train_classifier(
    data: &LabeledDataset,
    cfg: &ClassifierTrainConfig,
) -> Result<(Classifier, Vec<ClassifierEpoch>)> {
    if data.is_empty() {
        return Err(Error::Empty("classifier training data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParam("batch size must be positive".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut clf = Classifier::init(&cfg.arch, &mut rng)?;
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut total, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.points.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let pass = clf.forward(&x)?;
            let (loss, up) = cross_entropy(pass.output(), &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classifier loss at epoch {epoch}"
                )));
            }
            correct += pass
                .output()
                .iter_rows()
                .zip(&y)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            total += loss * chunk.len() as f64;
            let grads = clf.net.param_grad(&pass, &up)?;
            opt.step(&mut clf.net.params_mut(), &grads.as_slices())?;
        }
        log.push(ClassifierEpoch {
            epoch,
            loss: total / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
        });
    }
    Ok((clf, log))
}
