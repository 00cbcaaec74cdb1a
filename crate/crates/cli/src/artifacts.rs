//! On-disk layout of a run and atomic, overwrite-guarded writers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use oodsynth_core::datagen::OodKind;
use oodsynth_core::guidance::GuidanceTarget;

use crate::error::{CliError, CliResult};

/// Which classifier an evaluation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum ModelKind {
    Pretrained,
    Finetuned,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Pretrained, ModelKind::Finetuned];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pretrained => "pretrained",
            ModelKind::Finetuned => "finetuned",
        }
    }
}

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train(&self) -> PathBuf {
        self.data_dir().join("train.csv")
    }

    pub fn val(&self) -> PathBuf {
        self.data_dir().join("val.csv")
    }

    pub fn ood_test(&self, kind: OodKind) -> PathBuf {
        self.data_dir().join(format!("ood_{}.csv", kind.name()))
    }

    pub fn data_meta(&self) -> PathBuf {
        self.data_dir().join("meta.json")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.models_dir().join("denoiser.json")
    }

    pub fn denoiser_log(&self) -> PathBuf {
        self.models_dir().join("denoiser_log.csv")
    }

    pub fn classifier(&self) -> PathBuf {
        self.models_dir().join("classifier.json")
    }

    pub fn classifier_log(&self) -> PathBuf {
        self.models_dir().join("classifier_log.csv")
    }

    pub fn bank(&self) -> PathBuf {
        self.models_dir().join("bank.json")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn sample_cell(&self, target: GuidanceTarget, rho: f64, mu: f64) -> PathBuf {
        self.samples_dir()
            .join(target.name())
            .join(format!("rho_{rho}_mu_{mu}.csv"))
    }

    pub fn sample_pool(&self) -> PathBuf {
        self.samples_dir().join("all.csv")
    }

    pub fn sample_manifest(&self) -> PathBuf {
        self.samples_dir().join("manifest.json")
    }

    pub fn finetune_dir(&self) -> PathBuf {
        self.root.join("finetune")
    }

    pub fn finetuned_classifier(&self) -> PathBuf {
        self.finetune_dir().join("classifier.json")
    }

    pub fn psi(&self) -> PathBuf {
        self.finetune_dir().join("psi.json")
    }

    pub fn finetune_log(&self) -> PathBuf {
        self.finetune_dir().join("log.csv")
    }

    pub fn model_classifier(&self, model: ModelKind) -> PathBuf {
        match model {
            ModelKind::Pretrained => self.classifier(),
            ModelKind::Finetuned => self.finetuned_classifier(),
        }
    }

    pub fn eval_dir(&self, model: ModelKind) -> PathBuf {
        self.root.join("eval").join(model.name())
    }

    pub fn eval_records(&self, model: ModelKind, kind: OodKind) -> PathBuf {
        self.eval_dir(model).join(format!("{}.csv", kind.name()))
    }

    pub fn eval_summary(&self, model: ModelKind, kind: OodKind) -> PathBuf {
        self.eval_dir(model).join(format!("{}.json", kind.name()))
    }

    pub fn eval_histograms(&self, model: ModelKind, kind: OodKind) -> PathBuf {
        self.eval_dir(model)
            .join(format!("{}_hist.json", kind.name()))
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join("eval").join("comparison.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

/// Fails with `MissingArtifact` unless `path` exists.
pub fn require(path: &Path, stage: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

/// Fails with `WouldOverwrite` on the first existing path unless `force`.
pub fn guard(paths: &[PathBuf], force: bool) -> CliResult<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::WouldOverwrite(p.clone())),
        None => Ok(()),
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Lets `fill` write a sibling temp file, then renames it over `path`.
pub fn write_with<F>(path: &Path, fill: F) -> CliResult<()>
where
    F: FnOnce(&Path) -> CliResult<()>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_with(path, |tmp| {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str) -> CliResult<T> {
    require(path, stage)?;
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Serializes `rows` under `header` as CSV.
pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
    I: IntoIterator<Item = R>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(anyhow::Error::from)?;
    for row in rows {
        w.write_record(row).map_err(anyhow::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    write_bytes(path, &bytes)
}
