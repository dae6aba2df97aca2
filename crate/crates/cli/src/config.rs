use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mcforge_core::augment::{BoundaryChoice, CollageConfig};
use mcforge_core::catalog::DEFAULT_PATCH_SIZE;
use mcforge_core::edlclassify::{TrainConfig, DEFAULT_K_PRIME, DEFAULT_TAU_U};
use mcforge_core::scorefield::{default_kernel_sigma, PredictorSpec};
use mcforge_core::segnet::{SegNetConfig, SegTrainConfig};
use mcforge_core::vbgmm::BgmSettings;

/// Everything a run depends on. A copy is written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seeds the predictor fit, collage generation and class expansion.
    pub seed: u64,
    pub step1: Step1Config,
    pub classify: ClassifyConfig,
    pub segment: SegmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            step1: Step1Config::default(),
            classify: ClassifyConfig::default(),
            segment: SegmentConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Step1Config {
    /// Neighborhood half-width.
    pub l_s: usize,
    /// Smoothing half-width.
    pub l_w: usize,
    /// Defaults to `l_w / 2`.
    pub kernel_sigma: Option<f64>,
    pub predictor: PredictorSpec,
    /// PCA dimension of the smoothed scores; `None` clusters raw scores.
    pub reduce: Option<usize>,
    /// Information criteria are computed for K = 1..=k_max.
    pub k_max: usize,
    /// Fit this K instead of the suggested one.
    pub k: Option<usize>,
    pub weight_threshold: f64,
    /// Grid spacing of the vectors the mixture is fitted on; defaults to `l_w`.
    pub fit_stride: Option<usize>,
    pub mixture: BgmSettings,
    pub patch_size: usize,
    pub patch_stride: usize,
    /// Smallest region kept, in pixels; defaults to one patch.
    pub min_region: Option<usize>,
}

impl Default for Step1Config {
    fn default() -> Self {
        Step1Config {
            l_s: 5,
            l_w: 20,
            kernel_sigma: None,
            predictor: PredictorSpec::Linear,
            reduce: Some(4),
            k_max: 10,
            k: None,
            weight_threshold: 0.02,
            fit_stride: None,
            mixture: BgmSettings::default(),
            patch_size: DEFAULT_PATCH_SIZE,
            patch_stride: DEFAULT_PATCH_SIZE / 2,
            min_region: None,
        }
    }
}

impl Step1Config {
    pub fn sigma(&self) -> f64 {
        self.kernel_sigma.unwrap_or_else(|| default_kernel_sigma(self.l_w))
    }

    pub fn stride(&self) -> usize {
        self.fit_stride.unwrap_or(self.l_w).max(1)
    }

    pub fn min_region_pixels(&self) -> usize {
        self.min_region.unwrap_or(self.patch_size * self.patch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub k_prime: usize,
    pub tau_u: f64,
    pub train: TrainConfig,
    /// Every n-th exemplar of a class is held out for validation (0 = none).
    pub val_every: usize,
    /// Exemplars added per HR when an iteration grows the catalog.
    pub max_exemplars_per_hr: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            k_prime: DEFAULT_K_PRIME,
            tau_u: DEFAULT_TAU_U,
            train: TrainConfig::default(),
            val_every: 5,
            max_exemplars_per_hr: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    /// `classes` is overridden by the catalog's class count.
    pub net: SegNetConfig,
    pub train: SegTrainConfig,
    pub collage: CollageConfig,
    pub count: usize,
    pub ratios: [f64; 3],
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            net: SegNetConfig {
                base_channels: 8,
                ..Default::default()
            },
            train: SegTrainConfig::default(),
            // Quarter turns would swap oriented textures such as horizontal
            // and vertical streaks, which the catalog may keep apart.
            collage: CollageConfig {
                size: 64,
                min_regions: 2,
                max_regions: 3,
                boundary: BoundaryChoice::Mixed,
                scale_range: (1.0, 1.1),
                scale_prob: 0.5,
                rotate: false,
                flip: true,
            },
            count: 200,
            ratios: [0.8, 0.2, 0.0],
        }
    }
}
