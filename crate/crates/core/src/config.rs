//! Declarative experiment configuration (TOML) shared by every CLI stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruct::ReconMode;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub n_timeframes: usize,
    pub tr_ms: f64,
    pub te_ms: f64,
    pub ti_ms: f64,
    /// Optional CSV schedule; the built-in sinusoidal-lobe train otherwise.
    pub schedule_path: Option<PathBuf>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            n_timeframes: 200,
            tr_ms: crate::epg::DEFAULT_TR_MS,
            te_ms: crate::epg::DEFAULT_TE_MS,
            ti_ms: crate::epg::DEFAULT_TI_MS,
            schedule_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub t1_start_ms: f64,
    pub t1_stop_ms: f64,
    pub t1_step_ms: f64,
    pub t2_start_ms: f64,
    pub t2_stop_ms: f64,
    pub t2_step_ms: f64,
    pub svd_channels: usize,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            t1_start_ms: 100.0,
            t1_stop_ms: 3000.0,
            t1_step_ms: 100.0,
            t2_start_ms: 10.0,
            t2_stop_ms: 300.0,
            t2_step_ms: 10.0,
            svd_channels: 5,
        }
    }
}

impl DictionaryConfig {
    pub fn t1_grid(&self) -> Vec<f64> {
        grid(self.t1_start_ms, self.t1_stop_ms, self.t1_step_ms)
    }

    pub fn t2_grid(&self) -> Vec<f64> {
        grid(self.t2_start_ms, self.t2_stop_ms, self.t2_step_ms)
    }
}

fn grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let v = start + step * i as f64;
        if v > stop + 1e-9 {
            break;
        }
        out.push(v);
        i += 1;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub samples_per_frame: usize,
    pub density_exponent: f64,
    pub rotations: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { samples_per_frame: 600, density_exponent: 1.5, rotations: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub height: usize,
    pub width: usize,
    pub n_coils: usize,
    /// One k-space file is simulated per entry; use `inf` for noiseless.
    pub snr_db: Vec<f64>,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, n_coils: 1, snr_db: vec![40.0], seed: 1234 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BdaeConfig {
    pub epochs: usize,
    pub noise_sigma: f64,
    pub lambda_e: f64,
    pub t2_weight: f64,
    pub lr: f64,
}

impl Default for BdaeConfig {
    fn default() -> Self {
        Self { epochs: 1000, noise_sigma: 0.01, lambda_e: 0.1, t2_weight: 10.0, lr: 1e-2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub mode: String,
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub log_every: usize,
    pub unet_levels: usize,
    pub unet_base_channels: usize,
    pub encoder_batch: usize,
}

impl Default for ReconSection {
    fn default() -> Self {
        Self {
            mode: "bardip".into(),
            lambda: 1e-5,
            lr: 1e-4,
            iterations: 30_000,
            log_every: 50,
            unet_levels: 4,
            unet_base_channels: 32,
            encoder_batch: 1024,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub sequence: SequenceConfig,
    pub dictionary: DictionaryConfig,
    pub trajectory: TrajectoryConfig,
    pub acquisition: AcquisitionConfig,
    pub bdae: BdaeConfig,
    pub recon: ReconSection,
}

/// Reconstruction paths selectable from the CLI; `match` is the exhaustive
/// dictionary-matching baseline on the back-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    Bardip,
    DipMrf,
    Match,
}

impl PipelineMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bardip" => Ok(Self::Bardip),
            "dipmrf" => Ok(Self::DipMrf),
            "match" => Ok(Self::Match),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected bardip, dipmrf or match"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Bardip => "bardip",
            Self::DipMrf => "dipmrf",
            Self::Match => "match",
        }
    }

    pub fn recon_mode(&self) -> Option<ReconMode> {
        match self {
            Self::Bardip => Some(ReconMode::Bardip),
            Self::DipMrf => Some(ReconMode::DipMrf),
            Self::Match => None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must be set".into()));
        }
        let s = &self.sequence;
        if s.n_timeframes == 0 || !(s.tr_ms > s.te_ms && s.te_ms > 0.0) {
            return Err(Error::Config("sequence timing invalid".into()));
        }
        if let Some(p) = &s.schedule_path {
            if !p.exists() {
                return Err(Error::Config(format!("schedule_path {} not found", p.display())));
            }
        }
        if self.dictionary.t1_grid().is_empty() || self.dictionary.t2_grid().is_empty() {
            return Err(Error::Config("dictionary grids are empty".into()));
        }
        if self.dictionary.svd_channels == 0 {
            return Err(Error::Config("svd_channels must be >= 1".into()));
        }
        let a = &self.acquisition;
        if a.height < 32 || a.width < 32 {
            return Err(Error::Config("acquisition matrix must be at least 32x32".into()));
        }
        if a.n_coils == 0 || a.snr_db.is_empty() {
            return Err(Error::Config("need at least one coil and one SNR entry".into()));
        }
        if a.snr_db.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("snr_db entries must be positive (inf = noiseless)".into()));
        }
        if self.trajectory.samples_per_frame == 0 || self.trajectory.density_exponent < 1.0 {
            return Err(Error::Config("trajectory parameters invalid".into()));
        }
        if self.recon.iterations == 0 || self.recon.log_every == 0 {
            return Err(Error::Config("recon iterations and log_every must be >= 1".into()));
        }
        PipelineMode::parse(&self.recon.mode)?;
        if self.recon.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }

    /// Tag for per-SNR artifact names: 40 -> "40", 37.5 -> "37.5", inf -> "inf".
    pub fn snr_tag(snr: f64) -> String {
        if snr.is_infinite() {
            "inf".to_string()
        } else if snr.fract() == 0.0 {
            format!("{}", snr as i64)
        } else {
            format!("{snr}")
        }
    }
}
