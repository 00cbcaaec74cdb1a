//! The run configuration: every parameter of every stage in one JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use oodsynth_core::datagen::{HeldOutLayout, OodParams, RingParams};
use oodsynth_core::diffusion::{DenoiserArch, ScheduleParams};
use oodsynth_core::evaldetect::UnifiedParams;
use oodsynth_core::scores::{ClassifierArch, OptimizerChoice};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub classifier: ClassifierConfig,
    pub guidance: GuidanceSection,
    pub oe: OeSection,
    pub eval: UnifiedParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub id: RingParams,
    pub n_val_per_class: usize,
    pub ood: OodParams,
    pub ood_test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleParams,
    pub arch: DenoiserArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerChoice,
    /// Neighbor rank of the k-NN score.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub gamma_bar: f64,
    pub n_smooth: usize,
    pub n_recur: usize,
    pub n_iter: usize,
    pub feat_scale: f64,
    pub cfg_beta: f64,
    pub eta: f64,
    /// Values of the full `ρ̄ × μ̄` grid for energy guidance.
    pub image_values: Vec<f64>,
    pub image_per_class: usize,
    /// Values of the `ρ̄ = μ̄` diagonal for k-NN guidance.
    pub feature_values: Vec<f64>,
    pub feature_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OeSection {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_id: usize,
    pub batch_ood: usize,
    pub psi_hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let classes = 8;
        let radius = 4.0;
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataConfig {
                id: RingParams {
                    num_classes: classes,
                    n_per_class: 500,
                    radius,
                    sigma: 0.35,
                },
                n_val_per_class: 100,
                ood: OodParams {
                    num_classes: classes,
                    radius,
                    between_sigma: 0.35,
                    far_ring_halfwidth: 0.25,
                    held_out: HeldOutLayout {
                        total_classes: classes,
                        seen: Vec::new(),
                        radius: 3.0,
                        sigma: 0.35,
                    },
                },
                ood_test_size: 800,
            },
            diffusion: DiffusionConfig {
                schedule: ScheduleParams::default(),
                arch: DenoiserArch {
                    num_classes: classes,
                    ..DenoiserArch::default()
                },
                epochs: 100,
                batch_size: 128,
                lr: 1e-3,
                cond_dropout: 0.1,
            },
            classifier: ClassifierConfig {
                arch: ClassifierArch {
                    num_classes: classes,
                    ..ClassifierArch::default()
                },
                epochs: 100,
                batch_size: 128,
                lr: 1e-3,
                optimizer: OptimizerChoice::Adam,
                k: 50,
            },
            guidance: GuidanceSection {
                gamma_bar: 0.1,
                n_smooth: 4,
                n_recur: 1,
                n_iter: 1,
                feat_scale: 5.0,
                cfg_beta: 0.0,
                eta: 1.0,
                image_values: vec![0.1, 0.5, 1.0, 2.0, 5.0],
                image_per_class: 5,
                feature_values: vec![0.2, 0.4, 1.0, 1.5, 2.0, 3.0, 4.0],
                feature_per_class: 15,
            },
            oe: OeSection {
                lambda: 2.5,
                lr: 1e-3,
                momentum: 0.9,
                weight_decay: 5e-4,
                epochs: 50,
                batch_id: 128,
                batch_ood: 128,
                psi_hidden: 16,
            },
            eval: UnifiedParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Cross-section consistency checks; per-module checks run in the stages.
    pub fn validate(&self) -> CliResult<()> {
        let c = self.data.id.num_classes;
        if self.diffusion.arch.num_classes != c || self.classifier.arch.num_classes != c {
            return Err(CliError::Usage(format!(
                "class counts differ: data {c}, diffusion {}, classifier {}",
                self.diffusion.arch.num_classes, self.classifier.arch.num_classes
            )));
        }
        if self.data.id.n_per_class * c < self.classifier.k || self.classifier.k == 0 {
            return Err(CliError::Usage(format!(
                "k = {} must be between 1 and the training set size",
                self.classifier.k
            )));
        }
        if self.guidance.image_values.is_empty() || self.guidance.feature_values.is_empty() {
            return Err(CliError::Usage("guidance grids must be nonempty".into()));
        }
        if self.data.ood_test_size == 0 || self.data.n_val_per_class == 0 {
            return Err(CliError::Usage(
                "test and validation sets must be nonempty".into(),
            ));
        }
        Ok(())
    }
}
