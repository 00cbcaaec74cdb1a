//! The pipeline stages. Each reads its inputs from the run directory and
//! writes its outputs atomically; every random draw derives from the master
//! seed through a stage label.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use oodsynth_core::datagen::{self, gen_id_splits, gen_ood_test, LabeledDataset, OodKind, Split};
use oodsynth_core::diffusion::{
    train_denoiser, Condition, Denoiser, DenoiserDocument, DenoiserTrainConfig, NoiseSchedule,
};
use oodsynth_core::evaldetect::{
    histogram_dump, id_accuracy, score_report, HistogramDump, Metrics, RawScores, ReportSummary,
    ScoreKind, ScoreRecord, Source,
};
use oodsynth_core::guidance::{
    balanced_grid, guided_sample, GridCell, GuidanceConfig, GuidanceTarget,
};
use oodsynth_core::numcore::{sub_seed, DenseMatrix, Rng};
use oodsynth_core::oe::{finetune, OeTrainConfig, PsiHead};
use oodsynth_core::scores::{
    build_bank, energies, knn_distance, train_classifier, Classifier, ClassifierTrainConfig,
    EmbeddingBank,
};

use crate::artifacts::{
    guard, read_json, require, write_bytes, write_csv, write_json, write_with, Layout, ModelKind,
};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Bins of the histogram dumps written next to each evaluation.
pub const HISTOGRAM_BINS: usize = 20;

/// Stage labels mixed into the master seed.
pub mod labels {
    pub const GEN_DATA: &str = "gen-data";
    pub const TRAIN_DIFFUSION: &str = "train-diffusion";
    pub const TRAIN_CLASSIFIER: &str = "train-classifier";
    pub const SAMPLE_OOD: &str = "sample-ood";
    pub const FINETUNE: &str = "finetune";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub ood_tests: BTreeMap<String, usize>,
}

/// One balanced-grid cell as recorded in the sample manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub target: GuidanceTarget,
    pub rho_bar: f64,
    pub mu_bar: f64,
    pub class: usize,
    pub seed: u64,
    pub requested: usize,
    pub accepted: usize,
    pub aborted: usize,
    pub abort_reasons: Vec<String>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub base: GuidanceConfig,
    pub image_configs: usize,
    pub feature_configs: usize,
    pub planned: usize,
    pub accepted: usize,
    pub aborted: usize,
    pub cells: Vec<CellRecord>,
}

/// One row of the cross-model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub test_set: String,
    pub score: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub id_acc: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub samples_planned: usize,
    pub samples_accepted: usize,
    pub samples_aborted: usize,
    pub finetune_final_val_acc: Option<f64>,
    pub rows: Vec<ComparisonRow>,
}

/// A configured run rooted at `cfg.out_dir`.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub force: bool,
}

fn seed_for(master: u64, stage: &str) -> u64 {
    sub_seed(master, stage)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

impl Pipeline {
    pub fn new(cfg: RunConfig, force: bool) -> CliResult<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg.out_dir.clone());
        Ok(Self { cfg, layout, force })
    }

    /// Records the effective config next to the artifacts it produced.
    fn record_config(&self) -> CliResult<()> {
        let path = self.layout.config();
        let text = self.cfg.to_json();
        if path.exists() && std::fs::read_to_string(&path)? == text {
            return Ok(());
        }
        write_bytes(&path, text.as_bytes())
    }

    fn load_train(&self) -> CliResult<LabeledDataset> {
        let path = self.layout.train();
        require(&path, labels::GEN_DATA)?;
        Ok(datagen::load_csv(&path, Split::Train)?)
    }

    fn load_val(&self) -> CliResult<LabeledDataset> {
        let path = self.layout.val();
        require(&path, labels::GEN_DATA)?;
        Ok(datagen::load_csv(&path, Split::Val)?)
    }

    fn load_denoiser(&self) -> CliResult<(Denoiser, NoiseSchedule)> {
        let doc: DenoiserDocument = read_json(&self.layout.denoiser(), labels::TRAIN_DIFFUSION)?;
        let (den, params) = Denoiser::from_document(doc)?;
        Ok((den, NoiseSchedule::from_params(&params)?))
    }

    fn load_classifier(&self, model: ModelKind) -> CliResult<Classifier> {
        let stage = match model {
            ModelKind::Pretrained => labels::TRAIN_CLASSIFIER,
            ModelKind::Finetuned => labels::FINETUNE,
        };
        read_json(&self.layout.model_classifier(model), stage)
    }

    fn load_bank(&self) -> CliResult<EmbeddingBank> {
        let path = self.layout.bank();
        require(&path, labels::TRAIN_CLASSIFIER)?;
        Ok(EmbeddingBank::load_json(&path)?)
    }

    pub fn gen_data(&self) -> CliResult<DataMeta> {
        let l = &self.layout;
        let mut outputs = vec![l.train(), l.val(), l.data_meta()];
        outputs.extend(OodKind::ALL.iter().map(|&k| l.ood_test(k)));
        guard(&outputs, self.force)?;
        self.record_config()?;

        let d = &self.cfg.data;
        let seed = seed_for(self.cfg.seed, labels::GEN_DATA);
        let (train, val) = gen_id_splits(seed, &d.id, d.n_val_per_class)?;
        write_with(&l.train(), |p| Ok(datagen::save_csv(&train, p)?))?;
        write_with(&l.val(), |p| Ok(datagen::save_csv(&val, p)?))?;
        let mut ood_tests = BTreeMap::new();
        for kind in OodKind::ALL {
            let set = gen_ood_test(kind, sub_seed(seed, kind.name()), d.ood_test_size, &d.ood)?;
            write_with(&l.ood_test(kind), |p| {
                Ok(datagen::save_points_csv(&set.points, p)?)
            })?;
            ood_tests.insert(kind.name().to_string(), set.points.rows());
        }
        let meta = DataMeta {
            seed,
            train: train.len(),
            val: val.len(),
            ood_tests,
        };
        write_json(&l.data_meta(), &meta)?;
        info!("gen-data: {} train, {} val points", meta.train, meta.val);
        Ok(meta)
    }

    pub fn train_diffusion(&self) -> CliResult<Vec<f64>> {
        let l = &self.layout;
        guard(&[l.denoiser(), l.denoiser_log()], self.force)?;
        let train = self.load_train()?;
        self.record_config()?;
        let d = &self.cfg.diffusion;
        let schedule = NoiseSchedule::from_params(&d.schedule)?;
        let tc = DenoiserTrainConfig {
            arch: d.arch.clone(),
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            cond_dropout: d.cond_dropout,
            seed: seed_for(self.cfg.seed, labels::TRAIN_DIFFUSION),
        };
        let (den, losses) = train_denoiser(&train, &schedule, &tc)?;
        if let Some(bad) = losses.iter().position(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!(
                "denoiser loss at epoch {bad} is not finite"
            )));
        }
        write_json(&l.denoiser(), &den.to_document(&d.schedule))?;
        write_csv(
            &l.denoiser_log(),
            &["epoch", "loss"],
            losses
                .iter()
                .enumerate()
                .map(|(e, v)| [e.to_string(), fmt(*v)]),
        )?;
        info!(
            "train-diffusion: final loss {:.5}",
            losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok(losses)
    }

    /// Trains the classifier and builds its embedding bank; returns the ID
    /// validation accuracy.
    pub fn train_classifier(&self) -> CliResult<f64> {
        let l = &self.layout;
        guard(&[l.classifier(), l.classifier_log(), l.bank()], self.force)?;
        let train = self.load_train()?;
        let val = self.load_val()?;
        self.record_config()?;
        let c = &self.cfg.classifier;
        let tc = ClassifierTrainConfig {
            arch: c.arch.clone(),
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            optimizer: c.optimizer,
            seed: seed_for(self.cfg.seed, labels::TRAIN_CLASSIFIER),
        };
        let (clf, log) = train_classifier(&train, &tc)?;
        let bank = build_bank(&clf, &train.points, c.k)?;
        let acc = id_accuracy(&clf, &val)?;
        write_json(&l.classifier(), &clf)?;
        write_csv(
            &l.classifier_log(),
            &["epoch", "loss", "train_acc"],
            log.iter()
                .map(|e| [e.epoch.to_string(), fmt(e.loss), fmt(e.train_acc)]),
        )?;
        write_with(&l.bank(), |p| Ok(bank.save_json(p)?))?;
        info!("train-classifier: ID val accuracy {acc:.4}");
        Ok(acc)
    }

    /// The base guidance config shared by every grid cell.
    pub fn guidance_base(&self) -> GuidanceConfig {
        let g = &self.cfg.guidance;
        GuidanceConfig {
            target: GuidanceTarget::ImageEnergy,
            rho_bar: 0.0,
            mu_bar: 0.0,
            gamma_bar: g.gamma_bar,
            n_smooth: g.n_smooth,
            n_recur: g.n_recur,
            n_iter: g.n_iter,
            feat_scale: g.feat_scale,
            cfg_beta: g.cfg_beta,
            eta: g.eta,
            condition: Condition::Class(0),
        }
    }

    /// Image-target cells followed by feature-target cells.
    pub fn grid_cells(&self) -> CliResult<(Vec<GridCell>, Vec<GridCell>)> {
        let g = &self.cfg.guidance;
        let base = self.guidance_base();
        let classes: Vec<usize> = (0..self.cfg.data.id.num_classes).collect();
        let image = balanced_grid(
            &base,
            GuidanceTarget::ImageEnergy,
            &g.image_values,
            g.image_per_class,
            &classes,
        )?;
        let feature = balanced_grid(
            &base,
            GuidanceTarget::FeatureKnn,
            &g.feature_values,
            g.feature_per_class,
            &classes,
        )?;
        Ok((image, feature))
    }

    pub fn sample_ood(&self) -> CliResult<SampleManifest> {
        let l = &self.layout;
        guard(&[l.sample_manifest(), l.sample_pool()], self.force)?;
        let (den, schedule) = self.load_denoiser()?;
        let clf = self.load_classifier(ModelKind::Pretrained)?;
        let bank = self.load_bank()?;
        self.record_config()?;
        let (image, feature) = self.grid_cells()?;
        let per_class = self.cfg.data.id.num_classes;
        let stage_seed = seed_for(self.cfg.seed, labels::SAMPLE_OOD);

        let mut records = Vec::new();
        let mut files: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        let mut pool = Vec::new();
        for cell in image.iter().chain(&feature) {
            let c = &cell.config;
            let label = format!(
                "{}/{:?}/{:?}/class{}",
                c.target.name(),
                c.rho_bar,
                c.mu_bar,
                cell.class
            );
            let seed = sub_seed(stage_seed, &label);
            let r = guided_sample(&den, &schedule, &clf, Some(&bank), c, cell.count, seed)?;
            for a in &r.aborted {
                warn!(
                    "sample-ood: {label} seed {seed}: chain {} aborted at t={}: {}",
                    a.chain, a.t, a.reason
                );
            }
            let path = l.sample_cell(c.target, c.rho_bar, c.mu_bar);
            let file = path
                .strip_prefix(l.root())
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            let rows: Vec<Vec<f64>> = r.samples.iter_rows().map(<[f64]>::to_vec).collect();
            pool.extend(rows.iter().cloned());
            files.entry(file.clone()).or_default().extend(rows);
            records.push(CellRecord {
                target: c.target,
                rho_bar: c.rho_bar,
                mu_bar: c.mu_bar,
                class: cell.class,
                seed,
                requested: r.requested,
                accepted: r.samples.rows(),
                aborted: r.aborted.len(),
                abort_reasons: r
                    .aborted
                    .iter()
                    .map(|a| format!("chain {} t={}: {}", a.chain, a.t, a.reason))
                    .collect(),
                file,
            });
        }
        for (file, rows) in &files {
            let m = DenseMatrix::from_rows(rows);
            write_with(&l.root().join(file), |p| {
                Ok(datagen::save_points_csv(&m, p)?)
            })?;
        }
        if pool.is_empty() {
            return Err(CliError::Numerical("every guided chain was aborted".into()));
        }
        let pool = DenseMatrix::from_rows(&pool);
        write_with(&l.sample_pool(), |p| {
            Ok(datagen::save_points_csv(&pool, p)?)
        })?;
        let manifest = SampleManifest {
            seed: stage_seed,
            base: self.guidance_base(),
            image_configs: image.len() / per_class,
            feature_configs: feature.len() / per_class,
            planned: records.iter().map(|r| r.requested).sum(),
            accepted: records.iter().map(|r| r.accepted).sum(),
            aborted: records.iter().map(|r| r.aborted).sum(),
            cells: records,
        };
        write_json(&l.sample_manifest(), &manifest)?;
        info!(
            "sample-ood: {} of {} planned samples accepted, {} aborted",
            manifest.accepted, manifest.planned, manifest.aborted
        );
        Ok(manifest)
    }

    pub fn oe_config(&self) -> OeTrainConfig {
        let o = &self.cfg.oe;
        OeTrainConfig {
            lambda: o.lambda,
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            epochs: o.epochs,
            batch_id: o.batch_id,
            batch_ood: o.batch_ood,
            psi_hidden: o.psi_hidden,
            seed: sub_seed(seed_for(self.cfg.seed, labels::FINETUNE), "oe"),
        }
    }

    pub fn finetune(&self) -> CliResult<Vec<oodsynth_core::oe::OeEpoch>> {
        let l = &self.layout;
        guard(
            &[l.finetuned_classifier(), l.psi(), l.finetune_log()],
            self.force,
        )?;
        let train = self.load_train()?;
        let val = self.load_val()?;
        let clf = self.load_classifier(ModelKind::Pretrained)?;
        require(&l.sample_pool(), labels::SAMPLE_OOD)?;
        let pool = datagen::load_points_csv(&l.sample_pool())?;
        self.record_config()?;
        let cfg = self.oe_config();
        let mut rng = Rng::new(sub_seed(seed_for(self.cfg.seed, labels::FINETUNE), "psi"));
        let psi = PsiHead::init(cfg.psi_hidden, &mut rng)?;
        let (clf2, psi2, log) = finetune(&clf, &psi, &train, &val, &pool, &cfg)?;
        write_json(&l.finetuned_classifier(), &clf2)?;
        write_json(&l.psi(), &psi2)?;
        write_csv(
            &l.finetune_log(),
            &["epoch", "ce", "ood_loss", "val_acc", "lr"],
            log.iter().map(|e| {
                [
                    e.epoch.to_string(),
                    fmt(e.ce),
                    fmt(e.ood_loss),
                    fmt(e.val_acc),
                    fmt(e.lr),
                ]
            }),
        )?;
        if let Some(last) = log.last() {
            info!(
                "finetune: final CE {:.5}, val acc {:.4}",
                last.ce, last.val_acc
            );
        }
        Ok(log)
    }

    /// Scores ID validation and every OOD test set with `model`, writing one
    /// record CSV, summary JSON and histogram dump per test set.
    pub fn eval_model(&self, model: ModelKind) -> CliResult<BTreeMap<OodKind, ReportSummary>> {
        let l = &self.layout;
        let mut outputs = Vec::new();
        for kind in OodKind::ALL {
            outputs.push(l.eval_records(model, kind));
            outputs.push(l.eval_summary(model, kind));
            outputs.push(l.eval_histograms(model, kind));
        }
        guard(&outputs, self.force)?;
        let clf = self.load_classifier(model)?;
        let train = self.load_train()?;
        let val = self.load_val()?;
        self.record_config()?;
        let bank = build_bank(&clf, &train.points, self.cfg.classifier.k)?;
        let id_acc = id_accuracy(&clf, &val)?;
        let id_scores = RawScores {
            energy: energies(&clf, &val.points)?,
            knn: knn_distance(&bank, &clf, &val.points)?,
        };
        let mut out = BTreeMap::new();
        for kind in OodKind::ALL {
            let path = l.ood_test(kind);
            require(&path, labels::GEN_DATA)?;
            let points = datagen::load_points_csv(&path)?;
            let test = RawScores {
                energy: energies(&clf, &points)?,
                knn: knn_distance(&bank, &clf, &points)?,
            };
            let report = score_report(&id_scores, &test, id_acc, &self.cfg.eval)?;
            if report.summary.degenerate_range {
                warn!(
                    "eval: {} on {}: degenerate score range",
                    model.name(),
                    kind.name()
                );
            }
            write_records(&l.eval_records(model, kind), &report.records)?;
            write_json(&l.eval_summary(model, kind), &report.summary)?;
            let hists: Vec<HistogramDump> = ScoreKind::ALL
                .iter()
                .map(|&s| histogram_dump(&report, s, HISTOGRAM_BINS))
                .collect();
            write_json(&l.eval_histograms(model, kind), &hists)?;
            out.insert(kind, report.summary);
        }
        Ok(out)
    }

    /// Evaluates `models` and writes the comparison table restricted to
    /// `scores`.
    pub fn eval(
        &self,
        models: &[ModelKind],
        scores: &[ScoreKind],
    ) -> CliResult<Vec<ComparisonRow>> {
        guard(&[self.layout.comparison()], self.force)?;
        let mut rows = Vec::new();
        for &model in models {
            let summaries = self.eval_model(model)?;
            rows.extend(comparison_rows(model, &summaries, scores));
        }
        write_comparison(&self.layout.comparison(), &rows)?;
        Ok(rows)
    }

    /// Collects the evaluation summaries into `report.json` and `report.md`.
    pub fn report(&self) -> CliResult<RunReport> {
        let l = &self.layout;
        guard(&[l.report_json(), l.report_md()], self.force)?;
        let manifest: SampleManifest = read_json(&l.sample_manifest(), labels::SAMPLE_OOD)?;
        let mut rows = Vec::new();
        for model in ModelKind::ALL {
            let mut summaries = BTreeMap::new();
            for kind in OodKind::ALL {
                let s: ReportSummary = read_json(&l.eval_summary(model, kind), "eval")?;
                summaries.insert(kind, s);
            }
            rows.extend(comparison_rows(model, &summaries, &ScoreKind::ALL));
        }
        let finetune_final_val_acc = if l.finetune_log().exists() {
            last_column(&l.finetune_log(), "val_acc")?
        } else {
            None
        };
        let report = RunReport {
            seed: self.cfg.seed,
            samples_planned: manifest.planned,
            samples_accepted: manifest.accepted,
            samples_aborted: manifest.aborted,
            finetune_final_val_acc,
            rows,
        };
        write_json(&l.report_json(), &report)?;
        write_bytes(&l.report_md(), render_markdown(&report).as_bytes())?;
        Ok(report)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> CliResult<RunReport> {
        self.gen_data()?;
        self.train_diffusion()?;
        self.train_classifier()?;
        self.sample_ood()?;
        self.finetune()?;
        self.eval(&ModelKind::ALL, &ScoreKind::ALL)?;
        self.report()
    }
}

fn comparison_rows(
    model: ModelKind,
    summaries: &BTreeMap<OodKind, ReportSummary>,
    scores: &[ScoreKind],
) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for (kind, s) in summaries {
        for &score in scores {
            let Metrics { fpr95, auroc } = s.metrics(score);
            rows.push(ComparisonRow {
                model: model.name().into(),
                test_set: kind.name().into(),
                score: score.name().into(),
                fpr95,
                auroc,
                id_acc: s.id_acc,
                w: s.w,
            });
        }
    }
    rows
}

fn write_records(path: &Path, records: &[ScoreRecord]) -> CliResult<()> {
    write_csv(
        path,
        &[
            "id",
            "source",
            "energy",
            "knn",
            "energy_norm",
            "knn_norm",
            "unified",
        ],
        records.iter().map(|r| {
            let source = match r.source {
                Source::IdVal => "id_val",
                Source::OodTest => "ood_test",
            };
            [
                r.id.to_string(),
                source.to_string(),
                fmt(r.energy),
                fmt(r.knn),
                fmt(r.energy_norm),
                fmt(r.knn_norm),
                fmt(r.unified),
            ]
        }),
    )
}

fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> CliResult<()> {
    write_csv(
        path,
        &[
            "model", "test_set", "score", "fpr95", "auroc", "id_acc", "w",
        ],
        rows.iter().map(|r| {
            [
                r.model.clone(),
                r.test_set.clone(),
                r.score.clone(),
                fmt(r.fpr95),
                fmt(r.auroc),
                fmt(r.id_acc),
                fmt(r.w),
            ]
        }),
    )
}

/// Reads the comparison table written by `eval`.
pub fn read_comparison(path: &Path) -> CliResult<Vec<ComparisonRow>> {
    require(path, "eval")?;
    let mut reader = csv::Reader::from_path(path).map_err(anyhow::Error::from)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(anyhow::Error::from)?);
    }
    Ok(rows)
}

fn last_column(path: &Path, column: &str) -> CliResult<Option<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(anyhow::Error::from)?;
    let idx = reader
        .headers()
        .map_err(anyhow::Error::from)?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| anyhow::anyhow!("{} has no {column} column", path.display()))?;
    let mut last = None;
    for rec in reader.records() {
        let rec = rec.map_err(anyhow::Error::from)?;
        last = rec.get(idx).and_then(|v| v.parse().ok());
    }
    Ok(last)
}

fn render_markdown(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# OOD detection report\n");
    let _ = writeln!(s, "Master seed: {}\n", r.seed);
    let _ = writeln!(
        s,
        "Synthesized samples: {} accepted of {} planned ({} aborted)\n",
        r.samples_accepted, r.samples_planned, r.samples_aborted
    );
    if let Some(acc) = r.finetune_final_val_acc {
        let _ = writeln!(s, "Final fine-tuning ID validation accuracy: {acc:.4}\n");
    }
    let _ = writeln!(
        s,
        "| model | test set | score | FPR95 | AUROC | ID acc | w |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            row.model, row.test_set, row.score, row.fpr95, row.auroc, row.id_acc, row.w
        );
    }
    s
}
