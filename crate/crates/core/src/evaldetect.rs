//! Detection metrics and the KL-weighted unified score.
//!
//! Orientation throughout: higher score means more OOD. ID samples are the
//! negatives and OOD samples the positives.

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::scores::Classifier;
use crate::{Error, Result};

/// Min-max normalized scores clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Set when `hi <= lo`; every value is then 0.5.
    pub degenerate: bool,
}

/// `(s − lo) / (hi − lo)`, clipped to `[0, 1]`.
pub fn minmax_normalize(scores: &[f64], lo: f64, hi: f64) -> Normalized {
    if !(hi > lo) {
        log::warn!("degenerate normalization range [{lo}, {hi}]; using 0.5");
        return Normalized {
            values: vec![0.5; scores.len()],
            degenerate: true,
        };
    }
    let span = hi - lo;
    Normalized {
        values: scores
            .iter()
            .map(|&s| ((s - lo) / span).clamp(0.0, 1.0))
            .collect(),
        degenerate: false,
    }
}

/// Smallest and largest value over both slices.
pub fn union_bounds(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Masses of a `bins`-bin histogram over `[lo, hi]`, with `eps` added to
/// every count before renormalizing.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize, eps: f64) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let span = hi - lo;
    for &v in values {
        let b = if span > 0.0 {
            (((v - lo) / span) * bins as f64)
                .floor()
                .clamp(0.0, (bins - 1) as f64) as usize
        } else {
            0
        };
        counts[b] += 1.0;
    }
    let total = values.len() as f64 + eps * bins as f64;
    counts.into_iter().map(|c| (c + eps) / total).collect()
}

/// `KL(q_test ‖ q_id)` between smoothed histograms on the shared range of
/// both samples.
pub fn kl_hist(test: &[f64], id: &[f64], bins: usize, eps: f64) -> Result<f64> {
    if test.is_empty() || id.is_empty() {
        return Err(Error::Empty("KL score sample"));
    }
    if bins == 0 || !(eps > 0.0) {
        return Err(Error::InvalidParam("need bins >= 1 and eps > 0".into()));
    }
    let (lo, hi) = union_bounds(test, id);
    let p = histogram(test, lo, hi, bins, eps);
    let q = histogram(id, lo, hi, bins, eps);
    let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
    Ok(kl.max(0.0))
}

/// `w = 1 − exp(−a · KL)`
pub fn unified_weight(kl: f64, a: f64) -> f64 {
    1.0 - (-a * kl).exp()
}

/// `w · D + (1 − w) · Ê` per sample.
pub fn unified_score(knn_norm: &[f64], energy_norm: &[f64], w: f64) -> Vec<f64> {
    knn_norm
        .iter()
        .zip(energy_norm)
        .map(|(d, e)| w * d + (1.0 - w) * e)
        .collect()
}

/// Nearest-rank 95th percentile of `sorted` (ascending, nonempty).
fn nearest_rank_95(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    // ceil(0.95 n) in integers
    let rank = (95 * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Fraction of OOD scores at or below the threshold that keeps 95% of ID
/// scores.
pub fn fpr_at_95_tpr(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Empty("FPR95 scores"));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tau = nearest_rank_95(&sorted);
    Ok(ood.iter().filter(|&&s| s <= tau).count() as f64 / ood.len() as f64)
}

/// Area under the ROC curve with OOD as the positive class, from the rank
/// statistic with ties counted as one half.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Empty("AUROC scores"));
    }
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, false))
        .chain(ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Count (ood, id) pairs with ood > id, plus half the ties, in one sweep
    // over groups of equal scores.
    let (mut wins, mut id_below) = (0.0, 0usize);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut n_id, mut n_ood) = (0usize, 0usize);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                n_ood += 1;
            } else {
                n_id += 1;
            }
            j += 1;
        }
        wins += n_ood as f64 * (id_below as f64 + 0.5 * n_id as f64);
        id_below += n_id;
        i = j;
    }
    Ok(wins / (id.len() as f64 * ood.len() as f64))
}

/// Share of argmax predictions equal to the labels.
pub fn id_accuracy(clf: &Classifier, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("accuracy data"));
    }
    let pred = clf.predict_labels(&data.points)?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnifiedParams {
    pub bins: usize,
    pub eps: f64,
    pub a: f64,
}

impl Default for UnifiedParams {
    fn default() -> Self {
        Self {
            bins: 50,
            eps: 1e-6,
            a: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Energy,
    Knn,
    Unified,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Energy, ScoreKind::Knn, ScoreKind::Unified];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Energy => "energy",
            ScoreKind::Knn => "knn",
            ScoreKind::Unified => "unified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    IdVal,
    OodTest,
}

/// Raw scores of one sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScores {
    pub energy: Vec<f64>,
    pub knn: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: usize,
    pub source: Source,
    pub energy: f64,
    pub knn: f64,
    pub energy_norm: f64,
    pub knn_norm: f64,
    pub unified: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub energy: Metrics,
    pub knn: Metrics,
    pub unified: Metrics,
    pub id_acc: f64,
    pub kl: f64,
    pub w: f64,
    pub params: UnifiedParams,
    pub degenerate_range: bool,
}

impl ReportSummary {
    pub fn metrics(&self, kind: ScoreKind) -> Metrics {
        match kind {
            ScoreKind::Energy => self.energy,
            ScoreKind::Knn => self.knn,
            ScoreKind::Unified => self.unified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub records: Vec<ScoreRecord>,
    pub summary: ReportSummary,
}

fn metrics(id: &[f64], ood: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        fpr95: fpr_at_95_tpr(id, ood)?,
        auroc: auroc(id, ood)?,
    })
}

/// Normalizes both scores over the union of ID-validation and test values,
/// weights them by the KL shift of the k-NN distribution, and summarizes.
pub fn score_report(
    id_val: &RawScores,
    test: &RawScores,
    id_acc: f64,
    params: &UnifiedParams,
) -> Result<ScoreReport> {
    let (n_id, n_test) = (id_val.energy.len(), test.energy.len());
    if id_val.knn.len() != n_id || test.knn.len() != n_test {
        return Err(Error::Shape("energy and k-NN score counts differ".into()));
    }
    let norm_pair = |a: &[f64], b: &[f64]| {
        let (lo, hi) = union_bounds(a, b);
        let joined: Vec<f64> = a.iter().chain(b).copied().collect();
        minmax_normalize(&joined, lo, hi)
    };
    let e = norm_pair(&id_val.energy, &test.energy);
    let d = norm_pair(&id_val.knn, &test.knn);
    let kl = kl_hist(&test.knn, &id_val.knn, params.bins, params.eps)?;
    let w = unified_weight(kl, params.a);
    let u = unified_score(&d.values, &e.values, w);

    let records = (0..n_id + n_test)
        .map(|i| {
            let (source, id, raw_e, raw_d) = if i < n_id {
                (Source::IdVal, i, id_val.energy[i], id_val.knn[i])
            } else {
                let j = i - n_id;
                (Source::OodTest, j, test.energy[j], test.knn[j])
            };
            ScoreRecord {
                id,
                source,
                energy: raw_e,
                knn: raw_d,
                energy_norm: e.values[i],
                knn_norm: d.values[i],
                unified: u[i],
            }
        })
        .collect();
    let summary = ReportSummary {
        energy: metrics(&e.values[..n_id], &e.values[n_id..])?,
        knn: metrics(&d.values[..n_id], &d.values[n_id..])?,
        unified: metrics(&u[..n_id], &u[n_id..])?,
        id_acc,
        kl,
        w,
        params: *params,
        degenerate_range: e.degenerate || d.degenerate,
    };
    Ok(ScoreReport { records, summary })
}

/// Bin edges and masses of ID-validation and test histograms of one score,
/// for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramDump {
    pub score: ScoreKind,
    pub edges: Vec<f64>,
    pub id_val: Vec<f64>,
    pub ood_test: Vec<f64>,
}

pub fn histogram_dump(report: &ScoreReport, kind: ScoreKind, bins: usize) -> HistogramDump {
    let pick = |r: &ScoreRecord| match kind {
        ScoreKind::Energy => r.energy_norm,
        ScoreKind::Knn => r.knn_norm,
        ScoreKind::Unified => r.unified,
    };
    let split = |src: Source| -> Vec<f64> {
        report
            .records
            .iter()
            .filter(|r| r.source == src)
            .map(pick)
            .collect()
    };
    HistogramDump {
        score: kind,
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        id_val: histogram(&split(Source::IdVal), 0.0, 1.0, bins, 0.0),
        ood_test: histogram(&split(Source::OodTest), 0.0, 1.0, bins, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Activation, DenseMatrix, Layer, Mlp};

    #[test]
    fn normalize_examples() {
        assert_eq!(
            minmax_normalize(&[0.0, 5.0, 10.0], 0.0, 10.0).values,
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            minmax_normalize(&[-3.0, 12.0], 0.0, 10.0).values,
            vec![0.0, 1.0]
        );
        let d = minmax_normalize(&[1.0, 2.0], 4.0, 4.0);
        assert!(d.degenerate && d.values == vec![0.5, 0.5]);
    }

    #[test]
    fn kl_examples() {
        let a: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
        assert!(kl_hist(&a, &a, 50, 1e-6).unwrap() <= 1e-9);
        let lo = vec![0.0; 1000];
        let hi = vec![1.0; 1000];
        assert!(kl_hist(&lo, &hi, 2, 1e-6).unwrap() > 5.0);
        assert!(kl_hist(&[], &hi, 2, 1e-6).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(unified_weight(0.0, 1.0), 0.0);
        assert!((unified_weight(std::f64::consts::LN_2, 1.0) - 0.5).abs() < 1e-15);
        assert!(unified_weight(0.5, 2.0) > unified_weight(0.5, 1.0));
        assert!(unified_weight(0.6, 1.0) > unified_weight(0.5, 1.0));
    }

    #[test]
    fn unified_examples() {
        assert_eq!(unified_score(&[0.2], &[0.8], 0.5), vec![0.5]);
        assert_eq!(unified_score(&[0.2, 0.9], &[0.8, 0.1], 0.0), vec![0.8, 0.1]);
        assert_eq!(unified_score(&[0.2, 0.9], &[0.8, 0.1], 1.0), vec![0.2, 0.9]);
    }

    #[test]
    fn fpr95_example() {
        let id: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((fpr_at_95_tpr(&id, &[50.0, 96.0, 200.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(fpr_at_95_tpr(&id, &[101.0, 500.0]).unwrap(), 0.0);
        let same = fpr_at_95_tpr(&id, &id).unwrap();
        assert!((same - 0.95).abs() <= 0.01);
        assert!(fpr_at_95_tpr(&[], &[1.0]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.5);
        assert!(auroc(&[1.0], &[]).is_err());
    }

    fn fixed_logits(rows: &[[f64; 3]]) -> (Classifier, DenseMatrix) {
        // input is a one-hot row index; the last layer looks up its logits
        let n = rows.len();
        let w = DenseMatrix::from_fn(n, 3, |r, c| rows[r][c]);
        let embed = Layer {
            weight: DenseMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 }),
            bias: vec![0.0; n],
            activation: Activation::Relu,
        };
        let head = Layer {
            weight: w,
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        };
        let clf = Classifier::from_mlp(Mlp::new(vec![embed, head]).unwrap()).unwrap();
        let x = DenseMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 });
        (clf, x)
    }

    #[test]
    fn accuracy_ties_and_perfect() {
        let (clf, x) = fixed_logits(&[[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]]);
        let data = LabeledDataset {
            points: x.clone(),
            labels: vec![0, 1, 2],
            split: crate::datagen::Split::Val,
        };
        assert_eq!(id_accuracy(&clf, &data).unwrap(), 1.0);
        let (flat, _) = fixed_logits(&[[1.0; 3], [1.0; 3], [1.0; 3]]);
        assert!((id_accuracy(&flat, &data).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_with_zero_a_matches_energy() {
        let id = RawScores {
            energy: vec![-5.0, -4.0, -4.5, -3.0],
            knn: vec![0.1, 0.2, 0.15, 0.3],
        };
        let test = RawScores {
            energy: vec![-2.0, -4.2, 0.0],
            knn: vec![0.9, 0.1, 0.5],
        };
        let p = UnifiedParams {
            a: 0.0,
            ..UnifiedParams::default()
        };
        let r = score_report(&id, &test, 0.9, &p).unwrap();
        assert_eq!(r.summary.w, 0.0);
        assert_eq!(r.summary.unified, r.summary.energy);
        assert_eq!(r.records.len(), 7);
        for rec in &r.records {
            assert!(rec.unified >= rec.energy_norm.min(rec.knn_norm) - 1e-15);
            assert!(rec.unified <= rec.energy_norm.max(rec.knn_norm) + 1e-15);
        }
        let h = histogram_dump(&r, ScoreKind::Energy, 10);
        assert_eq!(h.edges.len(), 11);
        assert!((h.id_val.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
