//! Experiment stages behind the CLI subcommands. Every stage reads and
//! writes artifacts under the configured output directory and records seeds
//! and content hashes in `manifest.json`, so stale inputs are caught before a
//! dependent stage runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bdae::{pretrain_bdae, AugmentationConfig, DecoderNet, EncoderNet, PretrainConfig};
use crate::config::{ExperimentConfig, PipelineMode};
use crate::container;
use crate::dictionary::{build_dictionary, compress, compute_svd_basis, dict_match};
use crate::epg::{
    default_fisp_schedule, read_schedule_csv, write_schedule_csv, SequenceParams, TissueParams,
};
use crate::error::{Error, Result};
use crate::metrics::{mape, psnr, MetricsReport};
use crate::operator::{make_coil_maps, simulate_kspace, ForwardModel};
use crate::phantom::{make_brain_phantom, write_pgm, Phantom};
use crate::reconstruct::{
    reconstruct_bardip, reconstruct_dipmrf, ReconConfig, ReconMode, ReconOutput,
};
use crate::rng::stage_seed;
use crate::unet::UnetConfig;

/// Artifact paths under one experiment directory.
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn schedule_csv(&self) -> PathBuf {
        self.root.join("schedule.csv")
    }
    pub fn grid_csv(&self) -> PathBuf {
        self.root.join("grid.csv")
    }
    pub fn dictionary(&self) -> PathBuf {
        self.root.join("dictionary.mrfd")
    }
    pub fn trajectory(&self) -> PathBuf {
        self.root.join("trajectory.mrft")
    }
    pub fn phantom(&self) -> PathBuf {
        self.root.join("phantom.mrfq")
    }
    pub fn kspace(&self, snr: f64) -> PathBuf {
        self.root.join(format!("kspace_snr{}.mrfk", ExperimentConfig::snr_tag(snr)))
    }
    pub fn bdae_checkpoint(&self) -> PathBuf {
        self.root.join("bdae.mrfm")
    }
    pub fn bdae_eval_csv(&self) -> PathBuf {
        self.root.join("bdae_eval.csv")
    }
    pub fn recon_dir(&self, mode: &str, snr: f64) -> PathBuf {
        self.root.join(format!("recon_{mode}_snr{}", ExperimentConfig::snr_tag(snr)))
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn convergence_csv(&self) -> PathBuf {
        self.root.join("convergence.csv")
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    #[serde(default)]
    pub stage_seeds: BTreeMap<String, u64>,
    /// Hex sha256 per artifact file, keyed by path relative to the out dir.
    #[serde(default)]
    pub hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub summaries: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_string(&h.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let mut s = String::with_capacity(2 * bytes.len());
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn rel_key(art: &Artifacts, path: &Path) -> String {
    path.strip_prefix(&art.root).unwrap_or(path).to_string_lossy().into_owned()
}

fn record_hash(manifest: &mut Manifest, art: &Artifacts, path: &Path) -> Result<()> {
    let hash = file_sha256(path)?;
    manifest.hashes.insert(rel_key(art, path), hash);
    Ok(())
}

/// A dependent stage refuses to run on artifacts whose bytes no longer match
/// the manifest.
fn verify_hash(manifest: &Manifest, art: &Artifacts, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let key = rel_key(art, path);
    match manifest.hashes.get(&key) {
        None => Err(Error::Config(format!("artifact {key} is not recorded in the manifest"))),
        Some(want) => {
            let got = file_sha256(path)?;
            if &got == want {
                Ok(())
            } else {
                Err(Error::Config(format!("artifact {key} is stale: hash mismatch")))
            }
        }
    }
}

fn load_sequence(cfg: &ExperimentConfig) -> Result<SequenceParams> {
    match &cfg.sequence.schedule_path {
        Some(path) => read_schedule_csv(path),
        None => {
            let mut seq = default_fisp_schedule(cfg.sequence.n_timeframes)?;
            seq.tr_ms = cfg.sequence.tr_ms;
            seq.te_ms = cfg.sequence.te_ms;
            seq.ti_ms = cfg.sequence.ti_ms;
            seq.validate()?;
            Ok(seq)
        }
    }
}

fn build_model(cfg: &ExperimentConfig, art: &Artifacts) -> Result<ForwardModel> {
    let (_, basis) = container::load_dictionary(&art.dictionary())?;
    let traj = container::load_trajectory(&art.trajectory())?;
    let coils = make_coil_maps(cfg.acquisition.height, cfg.acquisition.width, cfg.acquisition.n_coils)?;
    ForwardModel::new(cfg.acquisition.height, cfg.acquisition.width, traj, coils, basis)
}

/// Simulate every acquisition artifact: schedule, phantom, dictionary with
/// basis, trajectory, and one k-space file per SNR entry.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.out_dir);
    std::fs::create_dir_all(&art.root).map_err(|e| Error::io(&art.root, e))?;
    let mut manifest = Manifest::load(&art.manifest())?;
    let root_seed = cfg.acquisition.seed;
    manifest.root_seed = root_seed;

    let seq = load_sequence(cfg)?;
    write_schedule_csv(&seq, &art.schedule_csv())?;

    let phantom_seed = stage_seed(root_seed, "phantom");
    manifest.stage_seeds.insert("phantom".into(), phantom_seed);
    let phantom = make_brain_phantom(cfg.acquisition.height, cfg.acquisition.width, phantom_seed)?;
    container::save_qmaps(
        &art.phantom(),
        &phantom.qmaps,
        &phantom.mask,
        phantom.height,
        phantom.width,
    )?;

    let dict = build_dictionary(&cfg.dictionary.t1_grid(), &cfg.dictionary.t2_grid(), &seq)?;
    let basis = compute_svd_basis(&dict, cfg.dictionary.svd_channels)?;
    container::save_dictionary(&art.dictionary(), &dict, &basis)?;
    write_grid_csv(&art.grid_csv(), &dict.grid)?;

    let traj = crate::trajectory::make_spiral_trajectory(
        cfg.acquisition.height,
        cfg.acquisition.width,
        seq.n_timeframes(),
        cfg.trajectory.samples_per_frame,
        cfg.trajectory.density_exponent,
        cfg.trajectory.rotations,
    )?;
    container::save_trajectory(&art.trajectory(), &traj)?;

    let coils = make_coil_maps(cfg.acquisition.height, cfg.acquisition.width, cfg.acquisition.n_coils)?;
    let model = ForwardModel::new(
        cfg.acquisition.height,
        cfg.acquisition.width,
        traj,
        coils,
        basis,
    )?;
    for &snr in &cfg.acquisition.snr_db {
        let label = format!("noise-snr{}", ExperimentConfig::snr_tag(snr));
        let seed = stage_seed(root_seed, &label);
        manifest.stage_seeds.insert(label, seed);
        let y = simulate_kspace(&phantom.qmaps, &seq, &model, snr, seed)?;
        container::save_kspace(&art.kspace(snr), &y)?;
    }

    for path in [art.schedule_csv(), art.phantom(), art.dictionary(), art.trajectory(), art.grid_csv()]
    {
        record_hash(&mut manifest, &art, &path)?;
    }
    for &snr in &cfg.acquisition.snr_db {
        record_hash(&mut manifest, &art, &art.kspace(snr))?;
    }
    manifest.save(&art.manifest())
}

fn write_grid_csv(path: &Path, grid: &[TissueParams]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("t1_ms,t2_ms\n");
    for t in grid {
        let _ = writeln!(out, "{},{}", t.t1_ms, t.t2_ms);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pretrain the autoencoder on the simulated dictionary; writes the model
/// checkpoint and the per-atom evaluation CSV.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.out_dir);
    let mut manifest = Manifest::load(&art.manifest())?;
    verify_hash(&manifest, &art, &art.dictionary())?;

    let (dict, basis) = container::load_dictionary(&art.dictionary())?;
    let cdict = compress(&dict, &basis)?;
    let seed = stage_seed(manifest.root_seed, "pretrain");
    manifest.stage_seeds.insert("pretrain".into(), seed);

    let pcfg = PretrainConfig {
        epochs: cfg.bdae.epochs,
        lr: cfg.bdae.lr,
        lambda_e: cfg.bdae.lambda_e,
        t2_weight: cfg.bdae.t2_weight,
        aug: AugmentationConfig { noise_sigma: cfg.bdae.noise_sigma },
        seed,
    };
    let (enc, dec, report) = pretrain_bdae(&cdict, &pcfg)?;
    container::save_param_groups(&art.bdae_checkpoint(), &[&enc.set, &dec.set])?;

    let mut csv = String::from("t1_ms,t2_ms,t1_est_ms,t2_est_ms\n");
    for (t1, t2, e1, e2) in &report.rows {
        use std::fmt::Write as _;
        let _ = writeln!(csv, "{t1},{t2},{e1:.6},{e2:.6}");
    }
    std::fs::write(art.bdae_eval_csv(), csv).map_err(|e| Error::io(art.bdae_eval_csv(), e))?;

    manifest.summaries.insert(
        "pretrain".into(),
        serde_json::json!({
            "t1_mape_percent": report.t1_mape_percent,
            "t2_mape_percent": report.t2_mape_percent,
            "final_loss": report.final_loss,
            "epochs": cfg.bdae.epochs,
        }),
    );
    record_hash(&mut manifest, &art, &art.bdae_checkpoint())?;
    record_hash(&mut manifest, &art, &art.bdae_eval_csv())?;
    manifest.save(&art.manifest())
}

fn load_bdae(art: &Artifacts, k: usize) -> Result<(EncoderNet, DecoderNet)> {
    let mut enc = EncoderNet::new(k, 0);
    let mut dec = DecoderNet::new(k, 0);
    container::load_param_groups(&art.bdae_checkpoint(), &mut [&mut enc.set, &mut dec.set])?;
    Ok((enc, dec))
}

/// Options resolved from CLI flags on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct ReconOverrides {
    pub mode: Option<PipelineMode>,
    pub iterations: Option<usize>,
    pub snr: Option<f64>,
    pub jobs: Option<usize>,
}

/// Run the selected reconstruction for every requested SNR; writes the
/// iteration log, a rolling checkpoint, and the final maps per run.
pub fn cmd_reconstruct(cfg: &ExperimentConfig, overrides: &ReconOverrides) -> Result<()> {
    let art = Artifacts::new(&cfg.out_dir);
    let mut manifest = Manifest::load(&art.manifest())?;
    let mode = match overrides.mode {
        Some(m) => m,
        None => PipelineMode::parse(&cfg.recon.mode)?,
    };
    verify_hash(&manifest, &art, &art.dictionary())?;
    verify_hash(&manifest, &art, &art.trajectory())?;
    if mode != PipelineMode::Match {
        verify_hash(&manifest, &art, &art.bdae_checkpoint())?;
    }

    let snr_list: Vec<f64> = match overrides.snr {
        Some(s) => vec![s],
        None => cfg.acquisition.snr_db.clone(),
    };
    for &snr in &snr_list {
        verify_hash(&manifest, &art, &art.kspace(snr))?;
    }

    let truth = container::load_qmaps(&art.phantom()).ok().map(|(q, _, _, _)| q);

    // Each SNR writes to its own directory; run them as independent workers.
    let results: Vec<Result<(f64, String, Option<String>, MetricsReport)>> =
        if overrides.jobs.unwrap_or(1) > 1 && snr_list.len() > 1 {
            use rayon::prelude::*;
            snr_list
                .par_iter()
                .map(|&snr| run_one_recon(cfg, &art, mode, snr, overrides, truth.as_deref()))
                .collect()
        } else {
            snr_list
                .iter()
                .map(|&snr| run_one_recon(cfg, &art, mode, snr, overrides, truth.as_deref()))
                .collect()
        };

    let mut diverged_any = None;
    for res in results {
        let (snr, dir, diverged, metrics) = res?;
        manifest.summaries.insert(
            format!("recon_{}_snr{}", mode.as_str(), ExperimentConfig::snr_tag(snr)),
            serde_json::json!({
                "dir": dir,
                "diverged": diverged,
                "mape_t1_percent": metrics.mape_t1_percent,
                "mape_t2_percent": metrics.mape_t2_percent,
                "psnr_pd_db": metrics.psnr_pd_db,
            }),
        );
        if let Some(msg) = diverged {
            diverged_any = Some(msg);
        }
        let dir_path = art.recon_dir(mode.as_str(), snr);
        for name in ["log.csv", "maps.mrfq"] {
            let p = dir_path.join(name);
            if p.exists() {
                record_hash(&mut manifest, &art, &p)?;
            }
        }
    }
    manifest.save(&art.manifest())?;
    if let Some(msg) = diverged_any {
        return Err(Error::TrainingDiverged(msg));
    }
    Ok(())
}

fn run_one_recon(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    mode: PipelineMode,
    snr: f64,
    overrides: &ReconOverrides,
    truth: Option<&[TissueParams]>,
) -> Result<(f64, String, Option<String>, MetricsReport)> {
    let dir = art.recon_dir(mode.as_str(), snr);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let model = build_model(cfg, art)?;
    let y = container::load_kspace(&art.kspace(snr))?;
    let manifest = Manifest::load(&art.manifest())?;
    let seed = stage_seed(
        manifest.root_seed,
        &format!("recon-{}-snr{}", mode.as_str(), ExperimentConfig::snr_tag(snr)),
    );

    let (qmaps, log_csv, diverged) = match mode {
        PipelineMode::Match => {
            let x0 = model.scaled_back_projection(&y)?;
            let (dict, basis) = container::load_dictionary(&art.dictionary())?;
            let cdict = compress(&dict, &basis)?;
            let qmaps = dict_match(&x0, &cdict)?;
            let mut log = crate::reconstruct::IterationLog::default();
            let (m1, m2, pp) = match truth {
                Some(t) => truth_metrics(&qmaps, t),
                None => (None, None, None),
            };
            log.records.push(crate::reconstruct::IterationRecord {
                iteration: 0,
                loss_kspace: 0.0,
                loss_tsmi: 0.0,
                mape_t1: m1,
                mape_t2: m2,
                psnr_pd: pp,
            });
            (qmaps, log.to_csv(), None)
        }
        PipelineMode::Bardip | PipelineMode::DipMrf => {
            let rcfg = ReconConfig {
                mode: mode.recon_mode().unwrap(),
                lambda: cfg.recon.lambda,
                lr: cfg.recon.lr,
                iterations: overrides.iterations.unwrap_or(cfg.recon.iterations),
                log_every: cfg.recon.log_every,
                seed,
                unet: UnetConfig {
                    levels: cfg.recon.unet_levels,
                    base_channels: cfg.recon.unet_base_channels,
                },
                encoder_batch: cfg.recon.encoder_batch,
                train_encoder: true,
                backprop_through_bdae: false,
                checkpoint_path: Some(dir.join("checkpoint.mrfm")),
            };
            let out: ReconOutput = match mode {
                PipelineMode::Bardip => {
                    let (enc, dec) = load_bdae(art, model.basis.k)?;
                    reconstruct_bardip(&y, &model, &enc, &dec, &rcfg, truth)?
                }
                _ => {
                    let (_, dec) = load_bdae(art, model.basis.k)?;
                    reconstruct_dipmrf(&y, &model, &dec, &rcfg, truth)?
                }
            };
            (out.qmaps, out.log.to_csv(), out.diverged)
        }
    };

    let log_path = dir.join("log.csv");
    std::fs::write(&log_path, &log_csv).map_err(|e| Error::io(&log_path, e))?;
    let mask: Vec<bool> = match truth {
        Some(t) => t.iter().map(|q| q.pd.norm() > 0.0).collect(),
        None => vec![true; qmaps.len()],
    };
    container::save_qmaps(
        &dir.join("maps.mrfq"),
        &qmaps,
        &mask,
        cfg.acquisition.height,
        cfg.acquisition.width,
    )?;

    let metrics = match truth {
        Some(t) => compute_metrics(&qmaps, t)?,
        None => MetricsReport {
            mape_t1_percent: f64::NAN,
            mape_t2_percent: f64::NAN,
            psnr_pd_db: f64::NAN,
            n_pixels: 0,
        },
    };
    Ok((snr, dir.to_string_lossy().into_owned(), diverged, metrics))
}

fn truth_metrics(
    qmaps: &[TissueParams],
    truth: &[TissueParams],
) -> (Option<f64>, Option<f64>, Option<f64>) {
    match compute_metrics(qmaps, truth) {
        Ok(m) => (Some(m.mape_t1_percent), Some(m.mape_t2_percent), Some(m.psnr_pd_db)),
        Err(_) => (None, None, None),
    }
}

/// Metrics over the foreground of the truth maps.
pub fn compute_metrics(qmaps: &[TissueParams], truth: &[TissueParams]) -> Result<MetricsReport> {
    let mask: Vec<bool> =
        truth.iter().map(|t| t.t1_ms > 0.0 && t.t2_ms > 0.0 && t.pd.norm() > 0.0).collect();
    let t1_est: Vec<f64> = qmaps.iter().map(|q| q.t1_ms).collect();
    let t1_true: Vec<f64> = truth.iter().map(|t| t.t1_ms).collect();
    let t2_est: Vec<f64> = qmaps.iter().map(|q| q.t2_ms).collect();
    let t2_true: Vec<f64> = truth.iter().map(|t| t.t2_ms).collect();
    let pd_est: Vec<Complex64> = qmaps.iter().map(|q| q.pd).collect();
    let pd_true: Vec<Complex64> = truth.iter().map(|t| t.pd).collect();
    Ok(MetricsReport {
        mape_t1_percent: mape(&t1_est, &t1_true, &mask)?,
        mape_t2_percent: mape(&t2_est, &t2_true, &mask)?,
        psnr_pd_db: psnr(&pd_est, &pd_true, &mask)?,
        n_pixels: mask.iter().filter(|&&m| m).count(),
    })
}

/// Evaluate every reconstruction found under the output directory against
/// the phantom: per-run metrics plus an averaged row, convergence CSV, and
/// windowed map previews.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let art = Artifacts::new(&cfg.out_dir);
    let mut manifest = Manifest::load(&art.manifest())?;
    verify_hash(&manifest, &art, &art.phantom())?;
    let (truth, mask, h, w) = container::load_qmaps(&art.phantom())?;
    let phantom = Phantom { qmaps: truth.clone(), mask, height: h, width: w };
    write_previews(&art.root.join("preview_truth"), &phantom.qmaps, h, w)?;

    let mut rows: Vec<(String, String, MetricsReport)> = Vec::new();
    let mut convergence = String::from("run,iter,loss_k,loss_tsmi,mape_t1,mape_t2,psnr_pd\n");
    for mode in ["bardip", "dipmrf", "match"] {
        for &snr in &cfg.acquisition.snr_db {
            let dir = art.recon_dir(mode, snr);
            let maps_path = dir.join("maps.mrfq");
            if !maps_path.exists() {
                continue;
            }
            let (qmaps, _, _, _) = container::load_qmaps(&maps_path)?;
            let metrics = compute_metrics(&qmaps, &phantom.qmaps)?;
            rows.push((mode.to_string(), ExperimentConfig::snr_tag(snr), metrics));
            write_previews(&dir.join("preview"), &qmaps, h, w)?;

            let log_path = dir.join("log.csv");
            if log_path.exists() {
                let text =
                    std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
                let run = format!("{mode}_snr{}", ExperimentConfig::snr_tag(snr));
                for line in text.lines().skip(1) {
                    convergence.push_str(&run);
                    convergence.push(',');
                    convergence.push_str(line);
                    convergence.push('\n');
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::MissingArtifact(art.recon_dir("bardip", cfg.acquisition.snr_db[0])));
    }

    let mut csv = String::from("run,snr,mape_t1_percent,mape_t2_percent,psnr_pd_db,n_pixels\n");
    {
        use std::fmt::Write as _;
        for (mode, snr, m) in &rows {
            let _ = writeln!(
                csv,
                "{mode},{snr},{:.9},{:.9},{:.9},{}",
                m.mape_t1_percent, m.mape_t2_percent, m.psnr_pd_db, m.n_pixels
            );
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| {
            rows.iter().map(|(_, _, m)| f(m)).sum::<f64>() / n
        };
        let _ = writeln!(
            csv,
            "average,all,{:.9},{:.9},{:.9},{}",
            mean(&|m| m.mape_t1_percent),
            mean(&|m| m.mape_t2_percent),
            mean(&|m| m.psnr_pd_db),
            rows[0].2.n_pixels
        );
    }
    std::fs::write(art.metrics_csv(), csv).map_err(|e| Error::io(art.metrics_csv(), e))?;
    std::fs::write(art.convergence_csv(), convergence)
        .map_err(|e| Error::io(art.convergence_csv(), e))?;
    record_hash(&mut manifest, &art, &art.metrics_csv())?;
    record_hash(&mut manifest, &art, &art.convergence_csv())?;
    manifest.save(&art.manifest())
}

fn write_previews(prefix: &Path, qmaps: &[TissueParams], h: usize, w: usize) -> Result<()> {
    if let Some(parent) = prefix.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let t1: Vec<f64> = qmaps.iter().map(|q| q.t1_ms).collect();
    let t2: Vec<f64> = qmaps.iter().map(|q| q.t2_ms).collect();
    let pd: Vec<f64> = qmaps.iter().map(|q| q.pd.norm()).collect();
    let pd_max = pd.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let mut base = prefix.to_path_buf();
    base.set_extension("");
    let stem = base.to_string_lossy().into_owned();
    write_pgm(Path::new(&format!("{stem}_t1.pgm")), &t1, h, w, 3000.0)?;
    write_pgm(Path::new(&format!("{stem}_t2.pgm")), &t2, h, w, 300.0)?;
    write_pgm(Path::new(&format!("{stem}_pd.pgm")), &pd, h, w, pd_max)?;
    Ok(())
}

/// simulate → pretrain → reconstruct → evaluate.
pub fn cmd_all(cfg: &ExperimentConfig, overrides: &ReconOverrides) -> Result<()> {
    cmd_simulate(cfg)?;
    cmd_pretrain(cfg)?;
    cmd_reconstruct(cfg, overrides)?;
    cmd_evaluate(cfg)
}
