//! Synthetic 2-D in-distribution data and OOD test sets.
//!
//! In-distribution classes are isotropic Gaussians placed evenly on a ring.
//! OOD test sets come in three flavours: Gaussians at the angular midpoints
//! between ID classes, a thin uniform ring at twice the ID radius, and
//! ring-Gaussian classes that are withheld from classifier training.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numcore::{sub_seed, DenseMatrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: DenseMatrix,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Keeps only the samples whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> LabeledDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        LabeledDataset {
            points: self.points.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingParams {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl RingParams {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParam(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Center of position `index` on a ring of `count` evenly spaced positions.
pub fn ring_center(index: f64, count: usize, radius: f64) -> [f64; 2] {
    let theta = TAU * index / count as f64;
    [radius * theta.cos(), radius * theta.sin()]
}

/// `n_per_class` samples from each of `num_classes` ring Gaussians, ordered
/// by class.
pub fn gen_gaussian_ring(seed: u64, params: &RingParams, split: Split) -> Result<LabeledDataset> {
    params.validate()?;
    let mut rng = Rng::new(seed);
    let n = params.num_classes * params.n_per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..params.num_classes {
        let [cx, cy] = ring_center(c as f64, params.num_classes, params.radius);
        for _ in 0..params.n_per_class {
            data.push(cx + params.sigma * rng.normal());
            data.push(cy + params.sigma * rng.normal());
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        points: DenseMatrix::new(n, 2, data)?,
        labels,
        split,
    })
}

/// Train and validation splits drawn from independent sub-streams.
pub fn gen_id_splits(
    seed: u64,
    params: &RingParams,
    n_val_per_class: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = gen_gaussian_ring(sub_seed(seed, "id/train"), params, Split::Train)?;
    let val_params = RingParams {
        n_per_class: n_val_per_class,
        ..*params
    };
    let val = gen_gaussian_ring(sub_seed(seed, "id/val"), &val_params, Split::Val)?;
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    BetweenModes,
    FarRing,
    HeldOutClasses,
}

impl OodKind {
    pub const ALL: [OodKind; 3] = [
        OodKind::BetweenModes,
        OodKind::FarRing,
        OodKind::HeldOutClasses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::BetweenModes => "between_modes",
            OodKind::FarRing => "far_ring",
            OodKind::HeldOutClasses => "held_out_classes",
        }
    }
}

impl std::str::FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown OOD kind {s:?}")))
    }
}

/// Geometry of the OOD test sets relative to the ID ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodParams {
    /// Number of ID classes on the ring.
    pub num_classes: usize,
    /// ID ring radius `R`.
    pub radius: f64,
    /// Std of the between-modes Gaussians.
    pub between_sigma: f64,
    /// Far ring points have radius `2R ± far_ring_halfwidth`.
    pub far_ring_halfwidth: f64,
    pub held_out: HeldOutLayout,
}

/// A ring of `total_classes` Gaussian classes of which `seen` are used for
/// training and the remainder form the OOD test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutLayout {
    pub total_classes: usize,
    pub seen: Vec<usize>,
    pub radius: f64,
    pub sigma: f64,
}

impl HeldOutLayout {
    pub fn unseen(&self) -> Vec<usize> {
        (0..self.total_classes)
            .filter(|c| !self.seen.contains(c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodTestSet {
    pub points: DenseMatrix,
    pub kind: OodKind,
}

/// Draws `m` points from the held-out classes. Returns the points and the
/// original class ids they were drawn from.
pub fn gen_held_out_classes(
    seed: u64,
    m: usize,
    layout: &HeldOutLayout,
) -> Result<(DenseMatrix, Vec<usize>)> {
    let unseen = layout.unseen();
    if unseen.is_empty() {
        return Err(Error::InvalidParam("every class is marked seen".into()));
    }
    if !(layout.sigma > 0.0) || !(layout.radius > 0.0) {
        return Err(Error::InvalidParam(
            "held-out radius and sigma must be positive".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(2 * m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let c = unseen[rng.index(unseen.len())];
        let [cx, cy] = ring_center(c as f64, layout.total_classes, layout.radius);
        data.push(cx + layout.sigma * rng.normal());
        data.push(cy + layout.sigma * rng.normal());
        labels.push(c);
    }
    Ok((DenseMatrix::new(m, 2, data)?, labels))
}

pub fn gen_ood_test(kind: OodKind, seed: u64, m: usize, params: &OodParams) -> Result<OodTestSet> {
    if m == 0 {
        return Err(Error::Empty("OOD test set size"));
    }
    if params.num_classes < 2 || !(params.radius > 0.0) {
        return Err(Error::InvalidParam(
            "OOD geometry needs C >= 2 and R > 0".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let points = match kind {
        OodKind::BetweenModes => {
            if !(params.between_sigma > 0.0) {
                return Err(Error::InvalidParam("between_sigma must be positive".into()));
            }
            let mut data = Vec::with_capacity(2 * m);
            for _ in 0..m {
                let c = rng.index(params.num_classes);
                let [cx, cy] = ring_center(c as f64 + 0.5, params.num_classes, params.radius);
                data.push(cx + params.between_sigma * rng.normal());
                data.push(cy + params.between_sigma * rng.normal());
            }
            DenseMatrix::new(m, 2, data)?
        }
        OodKind::FarRing => {
            let w = params.far_ring_halfwidth;
            if !(w >= 0.0) {
                return Err(Error::InvalidParam(
                    "far_ring_halfwidth must be >= 0".into(),
                ));
            }
            let mut data = Vec::with_capacity(2 * m);
            for _ in 0..m {
                let theta = TAU * rng.uniform();
                let r = 2.0 * params.radius + rng.uniform_range(-w, w);
                data.push(r * theta.cos());
                data.push(r * theta.sin());
            }
            DenseMatrix::new(m, 2, data)?
        }
        OodKind::HeldOutClasses => gen_held_out_classes(seed, m, &params.held_out)?.0,
    };
    Ok(OodTestSet { points, kind })
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `x1,x2,label` rows with 17 significant digits.
pub fn save_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x1,x2,label")?;
    for (p, l) in dataset.points.iter_rows().zip(&dataset.labels) {
        writeln!(w, "{},{},{}", fmt17(p[0]), fmt17(p[1]), l)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes unlabeled `x1,x2` rows.
pub fn save_points_csv(points: &DenseMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x1,x2")?;
    for p in points.iter_rows() {
        writeln!(w, "{},{}", fmt17(p[0]), fmt17(p[1]))?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, fields: usize) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != fields {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("expected {fields} fields, found {}", record.len()),
            });
        }
        out.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn parse_coord(path: &Path, line: u64, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            reason: format!("{s:?} is not a finite number"),
        }),
    }
}

pub fn load_csv(path: &Path, split: Split) -> Result<LabeledDataset> {
    let rows = read_rows(path, 3)?;
    let mut data = Vec::with_capacity(2 * rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (line, r) in &rows {
        data.push(parse_coord(path, *line, &r[0])?);
        data.push(parse_coord(path, *line, &r[1])?);
        labels.push(r[2].parse::<usize>().map_err(|_| Error::MalformedRow {
            path: path.to_path_buf(),
            line: *line,
            reason: format!("{:?} is not a class label", r[2]),
        })?);
    }
    Ok(LabeledDataset {
        points: DenseMatrix::new(labels.len(), 2, data)?,
        labels,
        split,
    })
}

pub fn load_points_csv(path: &Path) -> Result<DenseMatrix> {
    let rows = read_rows(path, 2)?;
    let mut data = Vec::with_capacity(2 * rows.len());
    for (line, r) in &rows {
        data.push(parse_coord(path, *line, &r[0])?);
        data.push(parse_coord(path, *line, &r[1])?);
    }
    DenseMatrix::new(rows.len(), 2, data)
}
