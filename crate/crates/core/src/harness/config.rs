//! Flat experiment configuration and its digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::metrics::{EvalOptions, SuccessDenominator};
use crate::net::{NetworkConfig, UpsampleMode};
use crate::phantom::{PhantomSpec, SpacingRange};
use crate::ssl::{OptimConfig, PostprocConfig, RetrainInit, SslConfig, TrainingMode};

/// Environment variable that overrides the configured worker count.
pub const WORKERS_ENV: &str = "ANATOMICAL_AUG_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // phantom
    pub volume_nx: usize,
    pub volume_ny: usize,
    pub volume_nz: usize,
    pub spacing_min_mm: f64,
    pub spacing_max_mm: f64,
    pub thickness_min_mm: f64,
    pub thickness_max_mm: f64,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub mix_metastasis: f64,
    pub mix_hemangioma: f64,
    pub mix_cyst: f64,
    pub healthy_fraction: f64,
    pub noise_sigma: f64,
    pub boundary_width: usize,
    pub centers_per_volume: usize,
    pub neighbors_per_side: usize,
    pub train_volumes: usize,
    pub test_volumes: usize,
    pub data_seed: u64,

    // network
    pub width_factor: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub upsample: UpsampleMode,

    // optimizer
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,

    // augmentation
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_min_px: f64,
    pub translation_max_px: f64,
    pub augmentations: usize,
    pub extended_augmentations: usize,

    // semi-supervision and evaluation
    pub gamma: f64,
    pub retrain: RetrainInit,
    pub area_filter_pseudo: bool,
    pub area_filter_test: bool,
    pub liver_refine_test: bool,
    pub success_denominator: SuccessDenominator,
    pub acc_includes_healthy: bool,

    // experiment
    pub modes: Vec<TrainingMode>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let phantom = PhantomSpec::default();
        let net = NetworkConfig::default();
        let optim = OptimConfig::default();
        let policy = AugmentPolicy::default();
        let ssl = SslConfig::default();
        let [m, h, c] = phantom.lesion_type_mix;
        Self {
            volume_nx: phantom.volume_dims.0,
            volume_ny: phantom.volume_dims.1,
            volume_nz: phantom.volume_dims.2,
            spacing_min_mm: phantom.spacing.in_plane_mm.0,
            spacing_max_mm: phantom.spacing.in_plane_mm.1,
            thickness_min_mm: phantom.spacing.thickness_mm.0,
            thickness_max_mm: phantom.spacing.thickness_mm.1,
            lesions_min: phantom.lesions_per_volume.0,
            lesions_max: phantom.lesions_per_volume.1,
            mix_metastasis: m,
            mix_hemangioma: h,
            mix_cyst: c,
            healthy_fraction: phantom.healthy_fraction,
            noise_sigma: phantom.noise_sigma,
            boundary_width: phantom.boundary_width,
            centers_per_volume: phantom.centers_per_volume,
            neighbors_per_side: phantom.neighbors_per_side,
            train_volumes: 30,
            test_volumes: 15,
            data_seed: 0,
            width_factor: net.width_factor,
            dropout_rate: net.dropout_rate,
            bn_momentum: net.bn_momentum,
            bn_eps: net.bn_eps,
            upsample: net.upsample,
            learning_rate: optim.learning_rate,
            momentum: optim.momentum,
            batch_size: optim.batch_size,
            epochs: optim.epochs,
            scale_min: policy.scale_range.0,
            scale_max: policy.scale_range.1,
            translation_min_px: policy.translation_range_px.0,
            translation_max_px: policy.translation_range_px.1,
            augmentations: policy.augmentations_per_item,
            extended_augmentations: ssl.extended_augmentations,
            gamma: ssl.gamma,
            retrain: ssl.retrain,
            area_filter_pseudo: ssl.postproc.area_filter_pseudo,
            area_filter_test: ssl.postproc.area_filter_test,
            liver_refine_test: ssl.postproc.liver_refine_test,
            success_denominator: ssl.eval.denominator,
            acc_includes_healthy: ssl.eval.acc_includes_healthy,
            modes: vec![TrainingMode::Baseline, TrainingMode::Extended, TrainingMode::Anatomical],
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs/experiment"),
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" at byte {}", s.start)).unwrap_or_default();
            Error::Config(format!("{}{at}", e.message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_spec().validate()?;
        self.ssl_config(0).validate()?;
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("modes and seeds must be non-empty".into()));
        }
        if self.train_volumes == 0 || self.test_volumes == 0 {
            return Err(Error::Config("train_volumes and test_volumes must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of every key that can influence results. Output location
    /// and worker count are excluded.
    pub fn digest(&self) -> String {
        let canonical = RunConfig {
            output_dir: PathBuf::new(),
            workers: 0,
            ..self.clone()
        };
        let text = toml::to_string(&canonical).expect("config serializes");
        hex_string(&Sha256::digest(text.as_bytes()))
    }

    /// Worker count after the environment override; at least 1.
    pub fn effective_workers(&self) -> usize {
        std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(self.workers)
            .max(1)
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            volume_dims: (self.volume_nx, self.volume_ny, self.volume_nz),
            spacing: SpacingRange {
                in_plane_mm: (self.spacing_min_mm, self.spacing_max_mm),
                thickness_mm: (self.thickness_min_mm, self.thickness_max_mm),
            },
            lesions_per_volume: (self.lesions_min, self.lesions_max),
            lesion_type_mix: [self.mix_metastasis, self.mix_hemangioma, self.mix_cyst],
            healthy_fraction: self.healthy_fraction,
            noise_sigma: self.noise_sigma,
            boundary_width: self.boundary_width,
            centers_per_volume: self.centers_per_volume,
            neighbors_per_side: self.neighbors_per_side,
            seed: self.data_seed,
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            width_factor: self.width_factor,
            dropout_rate: self.dropout_rate,
            input_dims: (self.volume_ny, self.volume_nx),
            upsample: self.upsample,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            ..NetworkConfig::default()
        }
    }

    pub fn ssl_config(&self, seed: u64) -> SslConfig {
        SslConfig {
            network: self.network(),
            optim: OptimConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                batch_size: self.batch_size,
                epochs: self.epochs,
            },
            policy: AugmentPolicy {
                scale_range: (self.scale_min, self.scale_max),
                translation_range_px: (self.translation_min_px, self.translation_max_px),
                augmentations_per_item: self.augmentations,
                seed: 0,
            },
            extended_augmentations: self.extended_augmentations,
            gamma: self.gamma,
            retrain: self.retrain,
            postproc: PostprocConfig {
                area_filter_pseudo: self.area_filter_pseudo,
                area_filter_test: self.area_filter_test,
                liver_refine_test: self.liver_refine_test,
            },
            eval: EvalOptions {
                denominator: self.success_denominator,
                acc_includes_healthy: self.acc_includes_healthy,
            },
            seed,
        }
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
