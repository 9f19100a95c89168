//! Outer reconstruction loops: BARDIP (deep-image-prior Unet regularized by
//! the frozen Bloch autoencoder through the coupled loss) and the DIP-MRF
//! baseline (k-space-only Unet with the encoder trained in-loop against the
//! frozen decoder).

use num_complex::Complex64;
use rand::Rng;

use crate::bdae::{
    bloch_assemble_tape, bloch_project, complex_to_pairs, normalize_rows, DecoderNet, EncoderNet,
};
use crate::epg::TissueParams;
use crate::error::{Error, Result};
use crate::metrics::{mape, psnr};
use crate::nn::Adam;
use crate::operator::{ForwardModel, KSpaceData, Tsmi};
use crate::rng::rng_from_seed;
use crate::tensor::{CustomOp, Tape};
use crate::unet::{Unet, UnetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMode {
    Bardip,
    DipMrf,
}

impl std::fmt::Display for ReconMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReconMode::Bardip => write!(f, "bardip"),
            ReconMode::DipMrf => write!(f, "dipmrf"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconConfig {
    pub mode: ReconMode,
    /// Weight of the Bloch-consistency term in the coupled loss.
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub log_every: usize,
    pub seed: u64,
    pub unet: UnetConfig,
    /// Pixels per encoder update in DIP-MRF.
    pub encoder_batch: usize,
    /// DIP-MRF: disable to keep the randomly initialized encoder untouched.
    pub train_encoder: bool,
    /// Ablation: differentiate the Bloch term through the frozen autoencoder
    /// instead of treating the projection as a constant target.
    pub backprop_through_bdae: bool,
    /// Rolling checkpoint written at every log iteration.
    pub checkpoint_path: Option<std::path::PathBuf>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            mode: ReconMode::Bardip,
            lambda: 1e-5,
            lr: 1e-4,
            iterations: 30_000,
            log_every: 50,
            seed: 0,
            unet: UnetConfig::default(),
            encoder_batch: 1024,
            train_encoder: true,
            backprop_through_bdae: false,
            checkpoint_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss_kspace: f64,
    pub loss_tsmi: f64,
    pub mape_t1: Option<f64>,
    pub mape_t2: Option<f64>,
    pub psnr_pd: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationLog {
    pub records: Vec<IterationRecord>,
    /// ||sqrt(DCF)·y||², the normalizer for cross-run loss comparison.
    pub y_dcf_norm_sq: f64,
}

impl IterationLog {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("iter,loss_k,loss_tsmi,mape_t1,mape_t2,psnr_pd\n");
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.12e},{:.12e},{},{},{}",
                r.iteration,
                r.loss_kspace,
                r.loss_tsmi,
                opt(r.mape_t1),
                opt(r.mape_t2),
                opt(r.psnr_pd)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug)]
pub struct ReconOutput {
    pub qmaps: Vec<TissueParams>,
    pub x_hat: Tsmi,
    pub log: IterationLog,
    /// Set when the optimization aborted on a non-finite loss; maps and log
    /// hold the last good state.
    pub diverged: Option<String>,
}

/// TSMI (pixel-major complex) to channel-major real planes [2K, h, w]:
/// channel 2k holds Re of channel k, channel 2k+1 the Im part.
pub fn tsmi_to_channels(x: &Tsmi) -> Vec<f64> {
    let n = x.n_pixels();
    let k = x.n_channels;
    let mut out = vec![0.0; 2 * k * n];
    for p in 0..n {
        for j in 0..k {
            let v = x.data[p * k + j];
            out[(2 * j) * n + p] = v.re;
            out[(2 * j + 1) * n + p] = v.im;
        }
    }
    out
}

pub fn channels_to_tsmi(channels: &[f64], height: usize, width: usize, k: usize) -> Tsmi {
    let n = height * width;
    debug_assert_eq!(channels.len(), 2 * k * n);
    let mut data = vec![Complex64::new(0.0, 0.0); n * k];
    for p in 0..n {
        for j in 0..k {
            data[p * k + j] =
                Complex64::new(channels[(2 * j) * n + p], channels[(2 * j + 1) * n + p]);
        }
    }
    Tsmi { data, height, width, n_channels: k }
}

/// Coupled loss of Eq-style form: ||sqrt(DCF)(y - Ax)||² + λ||x - x_B||².
/// Returns (k-space term, raw TSMI term, total).
pub fn coupled_loss(
    x: &Tsmi,
    x_b: &Tsmi,
    y: &KSpaceData,
    model: &ForwardModel,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    let ax = model.forward(x)?;
    let mut loss_k = 0.0;
    for coil in 0..y.n_coils {
        for l in 0..y.n_frames {
            let dcf = model.traj.frame_dcf(l);
            let a = ax.frame(coil, l);
            let b = y.frame(coil, l);
            for m in 0..y.samples_per_frame {
                loss_k += dcf[m] * (a[m] - b[m]).norm_sqr();
            }
        }
    }
    let loss_t: f64 = x.data.iter().zip(&x_b.data).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok((loss_k, loss_t, loss_k + lambda * loss_t))
}

/// ||sqrt(DCF)·y||² for normalized loss reporting.
fn dcf_weighted_norm_sq(y: &KSpaceData, model: &ForwardModel) -> f64 {
    let mut acc = 0.0;
    for coil in 0..y.n_coils {
        for l in 0..y.n_frames {
            let dcf = model.traj.frame_dcf(l);
            for (m, v) in y.frame(coil, l).iter().enumerate() {
                acc += dcf[m] * v.norm_sqr();
            }
        }
    }
    acc
}

struct PrecomputedGrad {
    grad: Vec<f64>,
}

impl CustomOp for PrecomputedGrad {
    fn backward(&self, out_grad: &[f64], input_grads: &mut [&mut [f64]]) {
        let g = out_grad[0];
        for (dst, &d) in input_grads[0].iter_mut().zip(&self.grad) {
            *dst += g * d;
        }
    }
}

/// Forward value and input gradient of the DCF-preconditioned k-space term
/// at the Unet output (channel-major layout).
fn kspace_term(
    u_channels: &[f64],
    model: &ForwardModel,
    y: &KSpaceData,
) -> Result<(f64, Vec<f64>)> {
    let k = model.basis.k;
    let x = channels_to_tsmi(u_channels, model.height, model.width, k);
    let ax = model.forward(&x)?;
    let mut loss = 0.0;
    let mut weighted = KSpaceData::zeros(y.n_coils, y.n_frames, y.samples_per_frame);
    for coil in 0..y.n_coils {
        for l in 0..y.n_frames {
            let dcf = model.traj.frame_dcf(l);
            let a = ax.frame(coil, l);
            let b = y.frame(coil, l);
            let w = weighted.frame_mut(coil, l);
            for m in 0..y.samples_per_frame {
                let r = a[m] - b[m];
                loss += dcf[m] * r.norm_sqr();
                w[m] = dcf[m] * r;
            }
        }
    }
    let back = model.adjoint(&weighted)?;
    let mut grad = tsmi_to_channels(&back);
    for g in grad.iter_mut() {
        *g *= 2.0;
    }
    Ok((loss, grad))
}

fn metrics_against_truth(
    qmaps: &[TissueParams],
    truth: &[TissueParams],
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let mask: Vec<bool> =
        truth.iter().map(|t| t.t1_ms > 0.0 && t.t2_ms > 0.0 && t.pd.norm() > 0.0).collect();
    let t1_est: Vec<f64> = qmaps.iter().map(|q| q.t1_ms).collect();
    let t1_true: Vec<f64> = truth.iter().map(|t| t.t1_ms).collect();
    let t2_est: Vec<f64> = qmaps.iter().map(|q| q.t2_ms).collect();
    let t2_true: Vec<f64> = truth.iter().map(|t| t.t2_ms).collect();
    let pd_est: Vec<Complex64> = qmaps.iter().map(|q| q.pd).collect();
    let pd_true: Vec<Complex64> = truth.iter().map(|t| t.pd).collect();
    (
        mape(&t1_est, &t1_true, &mask).ok(),
        mape(&t2_est, &t2_true, &mask).ok(),
        psnr(&pd_est, &pd_true, &mask).ok(),
    )
}

fn should_log(it: usize, every: usize) -> bool {
    it % every.max(1) == 0
}

/// BARDIP: optimize the Unet against the coupled loss with the pretrained
/// autoencoder frozen; maps always come from the Bloch projection.
pub fn reconstruct_bardip(
    y: &KSpaceData,
    model: &ForwardModel,
    enc: &EncoderNet,
    dec: &DecoderNet,
    cfg: &ReconConfig,
    truth: Option<&[TissueParams]>,
) -> Result<ReconOutput> {
    if cfg.mode != ReconMode::Bardip {
        return Err(Error::InvalidParameter("config mode must be bardip".into()));
    }
    if cfg.iterations < 1 {
        return Err(Error::InvalidParameter("iterations must be >= 1".into()));
    }
    let k = model.basis.k;
    let x0 = model.scaled_back_projection(y)?;
    let x0_channels = tsmi_to_channels(&x0);
    let shape = [2 * k, model.height, model.width];

    let mut unet = Unet::new(cfg.unet, 2 * k, cfg.seed);
    let mut adam = Adam::new(cfg.lr, &unet.set);
    let mut log =
        IterationLog { records: Vec::new(), y_dcf_norm_sq: dcf_weighted_norm_sq(y, model) };

    let mut last_good: Option<(Tsmi, Vec<TissueParams>)> = None;
    let mut diverged = None;

    for it in 0..cfg.iterations {
        let step = (|| -> Result<()> {
            let mut tape = Tape::new();
            let input = tape.leaf(&shape, x0_channels.clone(), false);
            let u = unet.forward(&mut tape, input);
            let x_hat = channels_to_tsmi(tape.values(u), model.height, model.width, k);
            let (x_b, qmaps) = bloch_project(enc, dec, &x_hat);

            let (loss_k, grad_k) = kspace_term(tape.values(u), model, y)?;
            let k_node =
                tape.custom(vec![u], &[1], vec![loss_k], Box::new(PrecomputedGrad { grad: grad_k }));

            let (t_node, loss_t_raw) = if cfg.backprop_through_bdae {
                // Gradient flows through the frozen networks and the PD
                // solve; the PD reference stays a constant per iteration.
                let t = tape.chw_to_nc(u);
                let tn = tape.row_normalize(t);
                let that = enc.forward_tape_frozen(&mut tape, tn);
                let d_hat = dec.forward_tape_frozen(&mut tape, that);
                let (xb_node, _) = bloch_assemble_tape(&mut tape, d_hat, &x_hat.data, k);
                let term = tape.sum_sq_diff(t, xb_node);
                let raw = tape.values(term)[0];
                (term, raw)
            } else {
                let xb_leaf = tape.leaf(&shape, tsmi_to_channels(&x_b), false);
                let term = tape.sum_sq_diff(u, xb_leaf);
                let raw = tape.values(term)[0];
                (term, raw)
            };
            let t_scaled = tape.scale(t_node, cfg.lambda);
            let total = tape.add(k_node, t_scaled);

            if should_log(it, cfg.log_every) {
                let (m1, m2, pp) = truth
                    .map(|t| metrics_against_truth(&qmaps, t))
                    .unwrap_or((None, None, None));
                log.records.push(IterationRecord {
                    iteration: it,
                    loss_kspace: loss_k,
                    loss_tsmi: loss_t_raw,
                    mape_t1: m1,
                    mape_t2: m2,
                    psnr_pd: pp,
                });
                if let Some(path) = &cfg.checkpoint_path {
                    crate::container::save_param_groups(path, &[&unet.set])?;
                }
            }
            last_good = Some((x_hat, qmaps));

            tape.backward(total)?;
            tape.write_param_grads(&mut unet.set);
            adam.step(&mut unet.set)?;
            unet.set.zero_grads();
            Ok(())
        })();
        if let Err(e) = step {
            match e {
                Error::TrainingDiverged(msg) => {
                    diverged = Some(format!("iteration {it}: {msg}"));
                    break;
                }
                other => return Err(other),
            }
        }
    }

    // Final forward with the trained parameters.
    let (x_hat, qmaps) = if diverged.is_none() {
        let mut tape = Tape::new();
        let input = tape.leaf(&shape, x0_channels.clone(), false);
        let u = unet.forward(&mut tape, input);
        let x_hat = channels_to_tsmi(tape.values(u), model.height, model.width, k);
        let (x_b, qmaps) = bloch_project(enc, dec, &x_hat);
        let (loss_k, loss_t, _) = coupled_loss(&x_hat, &x_b, y, model, cfg.lambda)?;
        let (m1, m2, pp) =
            truth.map(|t| metrics_against_truth(&qmaps, t)).unwrap_or((None, None, None));
        log.records.push(IterationRecord {
            iteration: cfg.iterations,
            loss_kspace: loss_k,
            loss_tsmi: loss_t,
            mape_t1: m1,
            mape_t2: m2,
            psnr_pd: pp,
        });
        (x_hat, qmaps)
    } else {
        last_good.take().ok_or_else(|| {
            Error::TrainingDiverged("diverged before any complete iteration".into())
        })?
    };

    Ok(ReconOutput { qmaps, x_hat, log, diverged })
}

/// DIP-MRF baseline: the Unet trains on the k-space term alone while a fresh
/// encoder learns, in parallel, to match the Unet output through the frozen
/// decoder and the analytic PD; maps come from the encoder path.
pub fn reconstruct_dipmrf(
    y: &KSpaceData,
    model: &ForwardModel,
    dec: &DecoderNet,
    cfg: &ReconConfig,
    truth: Option<&[TissueParams]>,
) -> Result<ReconOutput> {
    if cfg.mode != ReconMode::DipMrf {
        return Err(Error::InvalidParameter("config mode must be dipmrf".into()));
    }
    if cfg.iterations < 1 {
        return Err(Error::InvalidParameter("iterations must be >= 1".into()));
    }
    let k = model.basis.k;
    let x0 = model.scaled_back_projection(y)?;
    let x0_channels = tsmi_to_channels(&x0);
    let shape = [2 * k, model.height, model.width];
    let n = model.height * model.width;

    let mut unet = Unet::new(cfg.unet, 2 * k, cfg.seed);
    let mut adam_unet = Adam::new(cfg.lr, &unet.set);
    let mut enc = EncoderNet::new(k, cfg.seed.wrapping_add(101));
    let mut adam_enc = Adam::new(cfg.lr, &enc.set);
    let mut rng = rng_from_seed(cfg.seed.wrapping_add(202));

    let mut log =
        IterationLog { records: Vec::new(), y_dcf_norm_sq: dcf_weighted_norm_sq(y, model) };
    let mut last_good: Option<(Tsmi, Vec<TissueParams>)> = None;
    let mut diverged = None;

    for it in 0..cfg.iterations {
        let step = (|| -> Result<()> {
            // Unet step on the k-space consistency term only.
            let mut tape = Tape::new();
            let input = tape.leaf(&shape, x0_channels.clone(), false);
            let u = unet.forward(&mut tape, input);
            let x_hat = channels_to_tsmi(tape.values(u), model.height, model.width, k);
            let (loss_k, grad_k) = kspace_term(tape.values(u), model, y)?;
            let loss =
                tape.custom(vec![u], &[1], vec![loss_k], Box::new(PrecomputedGrad { grad: grad_k }));
            tape.backward(loss)?;
            tape.write_param_grads(&mut unet.set);
            adam_unet.step(&mut unet.set)?;
            unet.set.zero_grads();

            // Encoder step on a pixel minibatch of the detached Unet output.
            if cfg.train_encoder {
                let batch = cfg.encoder_batch.max(1).min(n);
                let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
                let mut rows = Vec::with_capacity(batch * k);
                for &p in &idx {
                    rows.extend_from_slice(x_hat.pixel(p));
                }
                let mut enc_in = complex_to_pairs(&rows);
                normalize_rows(&mut enc_in, 2 * k);

                let mut tape2 = Tape::new();
                let x_node = tape2.leaf(&[batch, 2 * k], enc_in, false);
                let t_hat = enc.forward_tape(&mut tape2, 0, x_node);
                let d_hat = dec.forward_tape_frozen(&mut tape2, t_hat);
                let (xb_node, _) = bloch_assemble_tape(&mut tape2, d_hat, &rows, k);
                let target = tape2.leaf(&[batch, 2 * k], complex_to_pairs(&rows), false);
                let enc_loss = tape2.sum_sq_diff(xb_node, target);
                tape2.backward(enc_loss)?;
                tape2.write_param_grads(&mut enc.set);
                adam_enc.step(&mut enc.set)?;
                enc.set.zero_grads();
            }

            if should_log(it, cfg.log_every) {
                let (x_b, qmaps) = bloch_project(&enc, dec, &x_hat);
                let loss_t: f64 =
                    x_hat.data.iter().zip(&x_b.data).map(|(a, b)| (a - b).norm_sqr()).sum();
                let (m1, m2, pp) = truth
                    .map(|t| metrics_against_truth(&qmaps, t))
                    .unwrap_or((None, None, None));
                log.records.push(IterationRecord {
                    iteration: it,
                    loss_kspace: loss_k,
                    loss_tsmi: loss_t,
                    mape_t1: m1,
                    mape_t2: m2,
                    psnr_pd: pp,
                });
                if let Some(path) = &cfg.checkpoint_path {
                    crate::container::save_param_groups(path, &[&unet.set, &enc.set])?;
                }
                last_good = Some((x_hat, qmaps));
            } else {
                last_good = Some((x_hat, Vec::new()));
            }
            Ok(())
        })();
        if let Err(e) = step {
            match e {
                Error::TrainingDiverged(msg) => {
                    diverged = Some(format!("iteration {it}: {msg}"));
                    break;
                }
                other => return Err(other),
            }
        }
    }

    let (x_hat, qmaps) = if diverged.is_none() {
        let mut tape = Tape::new();
        let input = tape.leaf(&shape, x0_channels.clone(), false);
        let u = unet.forward(&mut tape, input);
        let x_hat = channels_to_tsmi(tape.values(u), model.height, model.width, k);
        let (x_b, qmaps) = bloch_project(&enc, dec, &x_hat);
        let (loss_k, loss_t, _) = coupled_loss(&x_hat, &x_b, y, model, 0.0)?;
        let (m1, m2, pp) =
            truth.map(|t| metrics_against_truth(&qmaps, t)).unwrap_or((None, None, None));
        log.records.push(IterationRecord {
            iteration: cfg.iterations,
            loss_kspace: loss_k,
            loss_tsmi: loss_t,
            mape_t1: m1,
            mape_t2: m2,
            psnr_pd: pp,
        });
        (x_hat, qmaps)
    } else {
        let (x_hat, mut qmaps) = last_good.take().ok_or_else(|| {
            Error::TrainingDiverged("diverged before any complete iteration".into())
        })?;
        if qmaps.is_empty() {
            let (_, maps) = bloch_project(&enc, dec, &x_hat);
            qmaps = maps;
        }
        (x_hat, qmaps)
    };

    Ok(ReconOutput { qmaps, x_hat, log, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_dictionary, compress, compute_svd_basis, SvdBasis};
    use crate::epg::default_fisp_schedule;
    use crate::operator::{ground_truth_tsmi, make_coil_maps, simulate_kspace};
    use crate::trajectory::{make_spiral_trajectory, Trajectory};

    fn tiny_model(h: usize, w: usize, l: usize, m: usize, k: usize) -> ForwardModel {
        let seq = default_fisp_schedule(l).unwrap();
        let dict = build_dictionary(
            &[300.0, 700.0, 1100.0, 1600.0, 2200.0],
            &[30.0, 70.0, 120.0, 200.0],
            &seq,
        )
        .unwrap();
        let basis = compute_svd_basis(&dict, k).unwrap();
        let traj = make_spiral_trajectory(h, w, l, m, 1.5, 4).unwrap();
        let coils = make_coil_maps(h, w, 1).unwrap();
        ForwardModel::new(h, w, traj, coils, basis).unwrap()
    }

    #[test]
    fn channels_round_trip() {
        let mut rng = crate::rng::rng_from_seed(50);
        let mut x = Tsmi::zeros(3, 4, 2);
        for v in x.data.iter_mut() {
            *v = Complex64::new(
                rand::Rng::random::<f64>(&mut rng),
                rand::Rng::random::<f64>(&mut rng),
            );
        }
        let ch = tsmi_to_channels(&x);
        let back = channels_to_tsmi(&ch, 3, 4, 2);
        assert_eq!(x, back);
    }

    #[test]
    fn coupled_loss_hand_built_single_pixel() {
        // 1 pixel, 1 frame, 1 DC sample, K = 1, constant basis: A(x) is the
        // pixel value times conj(v); dcf = 1. Loss terms follow by hand.
        let traj = Trajectory {
            coords: vec![[0.0, 0.0]],
            dcf: vec![1.0],
            n_frames: 1,
            samples_per_frame: 1,
        };
        let basis = SvdBasis {
            v: vec![Complex64::new(1.0, 0.0)],
            k: 1,
            n_timeframes: 1,
            singular_values: vec![1.0],
        };
        let coils = make_coil_maps(1, 1, 1).unwrap();
        let model = ForwardModel::new(1, 1, traj, coils, basis).unwrap();

        let xval = Complex64::new(0.7, -0.4);
        let xbval = Complex64::new(0.5, 0.1);
        let yval = Complex64::new(0.2, 0.3);
        let x = Tsmi { data: vec![xval], height: 1, width: 1, n_channels: 1 };
        let xb = Tsmi { data: vec![xbval], height: 1, width: 1, n_channels: 1 };
        let mut y = KSpaceData::zeros(1, 1, 1);
        y.samples[0] = yval;

        let lambda = 0.25;
        let (lk, lt, total) = coupled_loss(&x, &xb, &y, &model, lambda).unwrap();
        let want_k = (xval - yval).norm_sqr();
        let want_t = (xval - xbval).norm_sqr();
        // Gridding accuracy bounds the k-term comparison on a 1x1 image.
        assert!((lk - want_k).abs() < 2e-3 * want_k, "{lk} vs {want_k}");
        assert!((lt - want_t).abs() < 1e-12);
        assert!((total - (lk + lambda * lt)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_reduces_to_data_consistency() {
        let model = tiny_model(8, 8, 4, 12, 2);
        let mut rng = crate::rng::rng_from_seed(51);
        let mut x = Tsmi::zeros(8, 8, 2);
        let mut xb = Tsmi::zeros(8, 8, 2);
        for v in x.data.iter_mut().chain(xb.data.iter_mut()) {
            *v = Complex64::new(
                rand::Rng::random::<f64>(&mut rng) - 0.5,
                rand::Rng::random::<f64>(&mut rng) - 0.5,
            );
        }
        let mut y = KSpaceData::zeros(1, 4, 12);
        for v in y.samples.iter_mut() {
            *v = Complex64::new(
                rand::Rng::random::<f64>(&mut rng) - 0.5,
                rand::Rng::random::<f64>(&mut rng) - 0.5,
            );
        }
        let (lk, _lt, total) = coupled_loss(&x, &xb, &y, &model, 0.0).unwrap();
        assert_eq!(lk, total);
    }

    #[test]
    fn kspace_loss_vanishes_at_ground_truth_with_noiseless_data() {
        let model = tiny_model(12, 12, 5, 20, 2);
        let seq = default_fisp_schedule(5).unwrap();
        let qmaps: Vec<TissueParams> = (0..144)
            .map(|p| {
                if p % 7 == 0 {
                    TissueParams::zero()
                } else {
                    TissueParams::new(
                        400.0 + 150.0 * (p % 3) as f64,
                        40.0 + 25.0 * (p % 4) as f64,
                        Complex64::new(0.9, 0.1),
                    )
                }
            })
            .collect();
        let y = simulate_kspace(&qmaps, &seq, &model, f64::INFINITY, 3).unwrap();
        let x = ground_truth_tsmi(&qmaps, &seq, &model).unwrap();
        let (lk, _, _) = coupled_loss(&x, &x, &y, &model, 1e-5).unwrap();
        let scale = dcf_weighted_norm_sq(&y, &model);
        assert!(lk / scale < 1e-8, "relative k-loss {}", lk / scale);
    }

    #[test]
    fn coupled_loss_gradient_wrt_unet_params_matches_fd() {
        // Tiny configuration: 8x8, K=2, 1 frame, 4 samples.
        let seq = default_fisp_schedule(1).unwrap();
        let dict = build_dictionary(&[400.0, 900.0, 1500.0], &[50.0, 120.0], &seq).unwrap();
        let basis = compute_svd_basis(&dict, 1).unwrap();
        // K=2 needs two basis columns; pad the single-frame basis by hand.
        let basis = SvdBasis {
            v: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)],
            k: 2,
            n_timeframes: 1,
            singular_values: vec![basis.singular_values[0], 0.5],
        };
        let traj = Trajectory {
            coords: vec![[0.1, -0.2], [0.3, 0.05], [-0.25, 0.4], [0.0, 0.0]],
            dcf: vec![0.7, 1.1, 1.3, 0.9],
            n_frames: 1,
            samples_per_frame: 4,
        };
        let coils = make_coil_maps(8, 8, 1).unwrap();
        let model = ForwardModel::new(8, 8, traj, coils, basis).unwrap();

        let mut rng = crate::rng::rng_from_seed(7);
        let mut y = KSpaceData::zeros(1, 1, 4);
        for v in y.samples.iter_mut() {
            *v = Complex64::new(
                rand::Rng::random::<f64>(&mut rng) - 0.5,
                rand::Rng::random::<f64>(&mut rng) - 0.5,
            );
        }
        let x0: Vec<f64> =
            (0..4 * 64).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
        let xb: Vec<f64> =
            (0..4 * 64).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
        let lambda = 0.01;

        let mut unet = Unet::new(UnetConfig { levels: 2, base_channels: 4 }, 4, 9);
        let shape = [4usize, 8, 8];

        // Analytic gradient via one tape pass.
        {
            let mut tape = Tape::new();
            let input = tape.leaf(&shape, x0.clone(), false);
            let u = unet.forward(&mut tape, input);
            let (lk, gk) = kspace_term(tape.values(u), &model, &y).unwrap();
            let k_node =
                tape.custom(vec![u], &[1], vec![lk], Box::new(PrecomputedGrad { grad: gk }));
            let xb_leaf = tape.leaf(&shape, xb.clone(), false);
            let t_node = tape.sum_sq_diff(u, xb_leaf);
            let t_scaled = tape.scale(t_node, lambda);
            let total = tape.add(k_node, t_scaled);
            tape.backward(total).unwrap();
            tape.write_param_grads(&mut unet.set);
        }

        // Loss as a plain function of parameters (x̂_B held fixed).
        let eval = |unet: &Unet| -> f64 {
            let mut tape = Tape::new();
            let input = tape.leaf(&shape, x0.clone(), false);
            let u = unet.forward(&mut tape, input);
            let (lk, _) = kspace_term(tape.values(u), &model, &y).unwrap();
            let lt: f64 = tape
                .values(u)
                .iter()
                .zip(&xb)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            lk + lambda * lt
        };

        let mut probe = crate::rng::rng_from_seed(99);
        let h = 1e-4;
        let n_params = unet.set.params.len();
        for _trial in 0..24 {
            let pid = rand::Rng::random_range(&mut probe, 0..n_params);
            let len = unet.set.params[pid].values.len();
            let ci = rand::Rng::random_range(&mut probe, 0..len);
            let analytic = unet.set.params[pid].grad[ci];

            let orig = unet.set.params[pid].values[ci];
            unet.set.params[pid].values[ci] = orig + h;
            let fp = eval(&unet);
            unet.set.params[pid].values[ci] = orig - h;
            let fm = eval(&unet);
            unet.set.params[pid].values[ci] = orig;

            let fd = (fp - fm) / (2.0 * h);
            // Normalization cancels some bias gradients exactly; treat
            // both-tiny values as agreeing zeros (fd carries roundoff).
            if analytic.abs() < 1e-7 && fd.abs() < 1e-7 {
                continue;
            }
            let denom = analytic.abs().max(fd.abs());
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "param {pid} coord {ci}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    fn tiny_recon_setup() -> (ForwardModel, KSpaceData, Vec<TissueParams>, EncoderNet, DecoderNet)
    {
        let model = tiny_model(16, 16, 6, 40, 2);
        let seq = default_fisp_schedule(6).unwrap();
        let qmaps: Vec<TissueParams> = (0..256)
            .map(|p| {
                let r = p / 16;
                let c = p % 16;
                let d2 = (r as f64 - 8.0).powi(2) + (c as f64 - 8.0).powi(2);
                if d2 < 49.0 {
                    TissueParams::new(
                        if d2 < 16.0 { 700.0 } else { 1100.0 },
                        if d2 < 16.0 { 70.0 } else { 120.0 },
                        Complex64::new(1.0, 0.0),
                    )
                } else {
                    TissueParams::zero()
                }
            })
            .collect();
        let y = simulate_kspace(&qmaps, &seq, &model, 40.0, 5).unwrap();
        let enc = EncoderNet::new(2, 11);
        let dec = DecoderNet::new(2, 12);
        (model, y, qmaps, enc, dec)
    }

    #[test]
    fn bardip_short_run_is_deterministic() {
        let (model, y, qmaps, enc, dec) = tiny_recon_setup();
        let cfg = ReconConfig {
            iterations: 4,
            log_every: 2,
            seed: 21,
            unet: UnetConfig { levels: 2, base_channels: 4 },
            ..Default::default()
        };
        let a = reconstruct_bardip(&y, &model, &enc, &dec, &cfg, Some(&qmaps)).unwrap();
        let b = reconstruct_bardip(&y, &model, &enc, &dec, &cfg, Some(&qmaps)).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.x_hat, b.x_hat);
        assert!(a.diverged.is_none());
        // Rows at 0, 2, plus the final row.
        let iters: Vec<usize> = a.log.records.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![0, 2, 4]);
        assert!(a.log.records[0].mape_t1.is_some());
    }

    #[test]
    fn bardip_ablation_backprop_runs() {
        let (model, y, _qmaps, enc, dec) = tiny_recon_setup();
        let cfg = ReconConfig {
            iterations: 2,
            log_every: 1,
            seed: 3,
            unet: UnetConfig { levels: 2, base_channels: 4 },
            backprop_through_bdae: true,
            ..Default::default()
        };
        let out = reconstruct_bardip(&y, &model, &enc, &dec, &cfg, None).unwrap();
        assert!(out.diverged.is_none());
        assert!(out.log.records.iter().all(|r| r.loss_kspace.is_finite()));
    }

    #[test]
    fn dipmrf_without_encoder_training_freezes_maps() {
        let (model, y, _qmaps, _enc, dec) = tiny_recon_setup();
        let cfg = ReconConfig {
            mode: ReconMode::DipMrf,
            iterations: 3,
            log_every: 1,
            seed: 31,
            unet: UnetConfig { levels: 2, base_channels: 4 },
            train_encoder: false,
            ..Default::default()
        };
        let out = reconstruct_dipmrf(&y, &model, &dec, &cfg, None).unwrap();
        // Maps must equal the fresh random encoder applied to the final x̂.
        let enc_ref = EncoderNet::new(2, cfg.seed.wrapping_add(101));
        let (_, want) = bloch_project(&enc_ref, &dec, &out.x_hat);
        assert_eq!(out.qmaps, want);
    }

    #[test]
    fn dipmrf_total_loss_is_kspace_only() {
        let (model, y, qmaps, _enc, dec) = tiny_recon_setup();
        let cfg = ReconConfig {
            mode: ReconMode::DipMrf,
            iterations: 3,
            log_every: 1,
            seed: 32,
            unet: UnetConfig { levels: 2, base_channels: 4 },
            ..Default::default()
        };
        let out = reconstruct_dipmrf(&y, &model, &dec, &cfg, Some(&qmaps)).unwrap();
        // λ = 0 by definition: the optimized objective equals loss_k, and the
        // logged TSMI column is diagnostic only.
        let (lk, _lt, total) =
            coupled_loss(&out.x_hat, &out.x_hat, &y, &model, 0.0).unwrap();
        assert_eq!(lk, total);
        assert!(out.log.records.iter().all(|r| r.loss_kspace.is_finite()));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let (model, y, _qmaps, enc, dec) = tiny_recon_setup();
        let cfg = ReconConfig { mode: ReconMode::DipMrf, ..Default::default() };
        assert!(reconstruct_bardip(&y, &model, &enc, &dec, &cfg, None).is_err());
        let cfg = ReconConfig { mode: ReconMode::Bardip, ..Default::default() };
        assert!(reconstruct_dipmrf(&y, &model, &dec, &cfg, None).is_err());
    }
}
