//! Bloch denoising autoencoder: a pixelwise encoder mapping normalized
//! compressed fingerprints to (T1, T2), a decoder mapping (T1, T2) back to a
//! unit-scale fingerprint, an analytic complex-PD solve, and their
//! composition into the Bloch-consistent TSMI.
//!
//! Both MLPs use two hidden layers of 300 units. T1/T2 cross the network
//! boundary divided by fixed scales (3000 ms, 300 ms) so every loss term is
//! O(1); the encoder head is a sigmoid scaled by 1.2, covering the grid with
//! headroom. Pretraining is supervised on the dictionary, full batch, with a
//! fresh random phasor and complex Gaussian noise per epoch.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dictionary::CompressedDictionary;
use crate::epg::TissueParams;
use crate::error::Result;
use crate::nn::{Adam, Linear, ParamSet};
use crate::operator::Tsmi;
use crate::rng::rng_from_seed;
use crate::tensor::{CustomOp, NodeId, Tape};

pub const T1_SCALE_MS: f64 = 3000.0;
pub const T2_SCALE_MS: f64 = 300.0;
/// Sigmoid head scale: outputs cover (0, 1.2) in scaled units.
pub const HEAD_SCALE: f64 = 1.2;
const HIDDEN: usize = 300;

#[derive(Debug, Clone, Copy)]
pub struct AugmentationConfig {
    /// Per-component sigma of the complex Gaussian noise added to
    /// unit-normalized fingerprints.
    pub noise_sigma: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { noise_sigma: 0.01 }
    }
}

/// Pixel fingerprint (2K reals, l2-normalized) → scaled (T1, T2).
pub struct EncoderNet {
    pub set: ParamSet,
    pub k: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

/// Scaled (T1, T2) → unit-scale compressed fingerprint (2K reals).
pub struct DecoderNet {
    pub set: ParamSet,
    pub k: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl EncoderNet {
    pub fn new(k: usize, seed: u64) -> Self {
        let mut set = ParamSet::new();
        let mut rng = rng_from_seed(seed);
        let l1 = Linear::new(&mut set, &mut rng, 2 * k, HIDDEN, "enc.l1");
        let l2 = Linear::new(&mut set, &mut rng, HIDDEN, HIDDEN, "enc.l2");
        let l3 = Linear::new(&mut set, &mut rng, HIDDEN, 2, "enc.l3");
        Self { set, k, l1, l2, l3 }
    }

    /// Tape forward on a [batch, 2K] node; output is scaled (T1, T2) in
    /// (0, HEAD_SCALE). `group` routes parameter gradients.
    pub fn forward_tape(&self, tape: &mut Tape, group: usize, x: NodeId) -> NodeId {
        let h = self.l1.forward_in(tape, group, &self.set, x);
        let h = tape.relu(h);
        let h = self.l2.forward_in(tape, group, &self.set, h);
        let h = tape.relu(h);
        let z = self.l3.forward_in(tape, group, &self.set, h);
        let s = tape.sigmoid(z);
        tape.scale(s, HEAD_SCALE)
    }

    /// Forward with frozen weights: gradient passes to the input only.
    pub fn forward_tape_frozen(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let h = self.l1.forward_frozen(tape, &self.set, x);
        let h = tape.relu(h);
        let h = self.l2.forward_frozen(tape, &self.set, h);
        let h = tape.relu(h);
        let z = self.l3.forward_frozen(tape, &self.set, h);
        let s = tape.sigmoid(z);
        tape.scale(s, HEAD_SCALE)
    }

    /// Plain forward over `batch` rows of 2K reals; returns scaled (T1, T2).
    pub fn forward_plain(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut h = self.l1.forward_plain(&self.set, x, batch);
        relu_inplace(&mut h);
        let mut h = self.l2.forward_plain(&self.set, &h, batch);
        relu_inplace(&mut h);
        let mut z = self.l3.forward_plain(&self.set, &h, batch);
        for v in z.iter_mut() {
            *v = HEAD_SCALE / (1.0 + (-*v).exp());
        }
        z
    }
}

impl DecoderNet {
    pub fn new(k: usize, seed: u64) -> Self {
        let mut set = ParamSet::new();
        let mut rng = rng_from_seed(seed);
        let l1 = Linear::new(&mut set, &mut rng, 2, HIDDEN, "dec.l1");
        let l2 = Linear::new(&mut set, &mut rng, HIDDEN, HIDDEN, "dec.l2");
        let l3 = Linear::new(&mut set, &mut rng, HIDDEN, 2 * k, "dec.l3");
        Self { set, k, l1, l2, l3 }
    }

    pub fn forward_tape(&self, tape: &mut Tape, group: usize, t: NodeId) -> NodeId {
        let h = self.l1.forward_in(tape, group, &self.set, t);
        let h = tape.relu(h);
        let h = self.l2.forward_in(tape, group, &self.set, h);
        let h = tape.relu(h);
        self.l3.forward_in(tape, group, &self.set, h)
    }

    /// Forward with frozen weights: gradients pass through to the input.
    pub fn forward_tape_frozen(&self, tape: &mut Tape, t: NodeId) -> NodeId {
        let h = self.l1.forward_frozen(tape, &self.set, t);
        let h = tape.relu(h);
        let h = self.l2.forward_frozen(tape, &self.set, h);
        let h = tape.relu(h);
        self.l3.forward_frozen(tape, &self.set, h)
    }

    /// Plain forward: `t` is [batch, 2] scaled (T1, T2).
    pub fn forward_plain(&self, t: &[f64], batch: usize) -> Vec<f64> {
        let mut h = self.l1.forward_plain(&self.set, t, batch);
        relu_inplace(&mut h);
        let mut h = self.l2.forward_plain(&self.set, &h, batch);
        relu_inplace(&mut h);
        self.l3.forward_plain(&self.set, &h, batch)
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Complex rows as interleaved re/im pairs.
pub fn complex_to_pairs(src: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * src.len());
    for v in src {
        out.push(v.re);
        out.push(v.im);
    }
    out
}

pub fn pairs_to_complex(src: &[f64]) -> Vec<Complex64> {
    src.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

/// l2-normalize each row of 2K reals in place; returns per-row norms.
pub fn normalize_rows(rows: &mut [f64], width: usize) -> Vec<f64> {
    let mut norms = Vec::with_capacity(rows.len() / width);
    for row in rows.chunks_exact_mut(width) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        norms.push(n);
    }
    norms
}

/// x̂_B assembly as a tape op: given decoder output D̂ (rows of 2K reals) and
/// a constant reference TSMI x, emits PD ⊙ D̂ with PD_p = <x_p, D̂_p>/||D̂_p||².
/// Gradients flow into D̂ through both factors.
struct BlochAssembleOp {
    x_rows: Vec<Complex64>,
    d_rows: Vec<Complex64>,
    pd: Vec<Complex64>,
    k: usize,
}

impl CustomOp for BlochAssembleOp {
    fn backward(&self, out_grad: &[f64], input_grads: &mut [&mut [f64]]) {
        let k = self.k;
        let gd = &mut input_grads[0];
        for (row, pd) in self.pd.iter().enumerate() {
            let d = &self.d_rows[row * k..(row + 1) * k];
            let x = &self.x_rows[row * k..(row + 1) * k];
            let n: f64 = d.iter().map(|v| v.norm_sqr()).sum();
            if n == 0.0 {
                continue;
            }
            let g: Vec<Complex64> = out_grad[row * 2 * k..(row + 1) * 2 * k]
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect();
            // s = <x, d>, h = sum conj(g_k) d_k.
            let s: Complex64 = x.iter().zip(d).map(|(xv, dv)| xv * dv.conj()).sum();
            let h: Complex64 = g.iter().zip(d).map(|(gv, dv)| gv.conj() * dv).sum();
            let coef = 2.0 * (h * s).re / (n * n);
            for j in 0..k {
                let grad = h * x[j] / n - coef * d[j] + g[j] * pd.conj();
                gd[row * 2 * k + 2 * j] += grad.re;
                gd[row * 2 * k + 2 * j + 1] += grad.im;
            }
        }
    }
}

/// Tape node for x̂_B given the decoder-output node and the constant
/// reference rows; also returns the per-row PD.
pub fn bloch_assemble_tape(
    tape: &mut Tape,
    d_node: NodeId,
    x_rows: &[Complex64],
    k: usize,
) -> (NodeId, Vec<Complex64>) {
    let d_rows = pairs_to_complex(tape.values(d_node));
    let n_rows = d_rows.len() / k;
    assert_eq!(x_rows.len(), d_rows.len());
    let mut pd = Vec::with_capacity(n_rows);
    let mut out = vec![0.0f64; n_rows * 2 * k];
    for row in 0..n_rows {
        let d = &d_rows[row * k..(row + 1) * k];
        let x = &x_rows[row * k..(row + 1) * k];
        let n: f64 = d.iter().map(|v| v.norm_sqr()).sum();
        let p = if n > 0.0 {
            x.iter().zip(d).map(|(xv, dv)| xv * dv.conj()).sum::<Complex64>() / n
        } else {
            Complex64::new(0.0, 0.0)
        };
        pd.push(p);
        for j in 0..k {
            let v = p * d[j];
            out[row * 2 * k + 2 * j] = v.re;
            out[row * 2 * k + 2 * j + 1] = v.im;
        }
    }
    let shape = [n_rows, 2 * k];
    let op = BlochAssembleOp { x_rows: x_rows.to_vec(), d_rows, pd: pd.clone(), k };
    let node = tape.custom(vec![d_node], &shape, out, Box::new(op));
    (node, pd)
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_e: f64,
    pub t2_weight: f64,
    pub aug: AugmentationConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1e-2,
            lambda_e: 0.1,
            t2_weight: 10.0,
            aug: AugmentationConfig::default(),
            seed: 0,
        }
    }
}

/// Per-atom evaluation of the trained encoder on noiseless atoms.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// (t1_true, t2_true, t1_est, t2_est) per atom, milliseconds.
    pub rows: Vec<(f64, f64, f64, f64)>,
    pub t1_mape_percent: f64,
    pub t2_mape_percent: f64,
    pub final_loss: f64,
}

/// Unit-normalized compressed atoms as complex rows.
fn normalized_atom_rows(cdict: &CompressedDictionary) -> Vec<Complex64> {
    let k = cdict.basis.k;
    let mut rows = cdict.atoms_k.clone();
    for row in rows.chunks_exact_mut(k) {
        let n = row.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
    rows
}

/// Joint supervised pretraining of encoder and decoder on the dictionary.
///
/// Each epoch multiplies every (normalized) atom by a fresh random unit
/// phasor, adds complex Gaussian noise, and minimizes
/// |T1 - T̂1|₁ + t2_weight·|T2 - T̂2|₁ + lambda_e·||x - x̂_B||₂²
/// with the losses summed over the dictionary in scaled units.
pub fn pretrain_bdae(
    cdict: &CompressedDictionary,
    cfg: &PretrainConfig,
) -> Result<(EncoderNet, DecoderNet, PretrainReport)> {
    let k = cdict.basis.k;
    let d = cdict.n_atoms();
    let enc = EncoderNet::new(k, cfg.seed.wrapping_add(1));
    let dec = DecoderNet::new(k, cfg.seed.wrapping_add(2));
    let mut enc = enc;
    let mut dec = dec;

    let clean = normalized_atom_rows(cdict);
    let labels_scaled: Vec<f64> = cdict
        .grid
        .iter()
        .flat_map(|t| [t.t1_ms / T1_SCALE_MS, t.t2_ms / T2_SCALE_MS])
        .collect();
    let mask_t1: Vec<f64> = (0..d).flat_map(|_| [1.0, 0.0]).collect();
    let mask_t2: Vec<f64> = (0..d).flat_map(|_| [0.0, 1.0]).collect();

    let mut adam_enc = Adam::new(cfg.lr, &enc.set);
    let mut adam_dec = Adam::new(cfg.lr, &dec.set);
    let mut rng = rng_from_seed(cfg.seed);
    let noise = Normal::new(0.0, cfg.aug.noise_sigma.max(0.0)).expect("finite sigma");

    let mut final_loss = 0.0;
    for _epoch in 0..cfg.epochs {
        // Fresh augmentation: random phasor plus complex Gaussian noise.
        let mut noisy = Vec::with_capacity(d * k);
        let mut target_phased = Vec::with_capacity(d * k);
        for row in 0..d {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let phasor = Complex64::from_polar(1.0, theta);
            for j in 0..k {
                let c = clean[row * k + j] * phasor;
                target_phased.push(c);
                noisy.push(c + Complex64::new(noise.sample(&mut rng), noise.sample(&mut rng)));
            }
        }
        let mut enc_in = complex_to_pairs(&noisy);
        normalize_rows(&mut enc_in, 2 * k);

        let mut tape = Tape::new();
        let x_node = tape.leaf(&[d, 2 * k], enc_in, false);
        let t_hat = enc.forward_tape(&mut tape, 0, x_node);

        let labels = tape.leaf(&[d, 2], labels_scaled.clone(), false);
        let m1 = tape.leaf(&[d, 2], mask_t1.clone(), false);
        let m2 = tape.leaf(&[d, 2], mask_t2.clone(), false);
        let h1 = tape.mul(t_hat, m1);
        let l1m = tape.mul(labels, m1);
        let t1_term = tape.sum_abs_diff(h1, l1m);
        let h2 = tape.mul(t_hat, m2);
        let l2m = tape.mul(labels, m2);
        let t2_term = tape.sum_abs_diff(h2, l2m);
        let t2_scaled = tape.scale(t2_term, cfg.t2_weight);
        let mae_part = tape.add(t1_term, t2_scaled);

        let d_hat = dec.forward_tape(&mut tape, 1, t_hat);
        let (xb, _pd) = bloch_assemble_tape(&mut tape, d_hat, &noisy, k);
        let target = tape.leaf(&[d, 2 * k], complex_to_pairs(&target_phased), false);
        let mse_part = tape.sum_sq_diff(xb, target);
        let mse_scaled = tape.scale(mse_part, cfg.lambda_e);

        let loss = tape.add(mae_part, mse_scaled);
        final_loss = tape.values(loss)[0];
        tape.backward(loss)?;
        tape.write_param_grads_in(0, &mut enc.set);
        tape.write_param_grads_in(1, &mut dec.set);
        adam_enc.step(&mut enc.set)?;
        adam_dec.step(&mut dec.set)?;
        enc.set.zero_grads();
        dec.set.zero_grads();
    }

    let report = evaluate_encoder(&enc, cdict, final_loss);
    Ok((enc, dec, report))
}

/// Encoder accuracy on the noiseless dictionary atoms.
pub fn evaluate_encoder(
    enc: &EncoderNet,
    cdict: &CompressedDictionary,
    final_loss: f64,
) -> PretrainReport {
    let k = cdict.basis.k;
    let d = cdict.n_atoms();
    let clean = normalized_atom_rows(cdict);
    let mut enc_in = complex_to_pairs(&clean);
    normalize_rows(&mut enc_in, 2 * k);
    let out = enc.forward_plain(&enc_in, d);

    let mut rows = Vec::with_capacity(d);
    let mut t1_err = 0.0;
    let mut t2_err = 0.0;
    for (i, t) in cdict.grid.iter().enumerate() {
        let t1_est = out[2 * i] * T1_SCALE_MS;
        let t2_est = out[2 * i + 1] * T2_SCALE_MS;
        rows.push((t.t1_ms, t.t2_ms, t1_est, t2_est));
        t1_err += ((t1_est - t.t1_ms) / t.t1_ms).abs();
        t2_err += ((t2_est - t.t2_ms) / t.t2_ms).abs();
    }
    PretrainReport {
        rows,
        t1_mape_percent: 100.0 * t1_err / d as f64,
        t2_mape_percent: 100.0 * t2_err / d as f64,
        final_loss,
    }
}

/// Per-pixel (T1, T2) estimation: l2-normalize, forward, unscale to ms.
/// Zero pixels map to (0, 0).
pub fn encode(enc: &EncoderNet, tsmi: &Tsmi) -> (Vec<f64>, Vec<f64>) {
    let k = tsmi.n_channels;
    assert_eq!(k, enc.k, "encoder channel count");
    let n = tsmi.n_pixels();
    let mut rows = complex_to_pairs(&tsmi.data);
    let norms = normalize_rows(&mut rows, 2 * k);
    let out = enc.forward_plain(&rows, n);
    let mut t1 = Vec::with_capacity(n);
    let mut t2 = Vec::with_capacity(n);
    for p in 0..n {
        if norms[p] == 0.0 {
            t1.push(0.0);
            t2.push(0.0);
        } else {
            t1.push(out[2 * p] * T1_SCALE_MS);
            t2.push(out[2 * p + 1] * T2_SCALE_MS);
        }
    }
    (t1, t2)
}

/// Per-pixel decoder forward: (T1, T2) in ms → unit-scale fingerprint.
pub fn decode(dec: &DecoderNet, t1_map: &[f64], t2_map: &[f64], height: usize, width: usize) -> Tsmi {
    let n = t1_map.len();
    assert_eq!(n, t2_map.len());
    assert_eq!(n, height * width);
    let mut input = Vec::with_capacity(2 * n);
    for p in 0..n {
        input.push(t1_map[p] / T1_SCALE_MS);
        input.push(t2_map[p] / T2_SCALE_MS);
    }
    let out = dec.forward_plain(&input, n);
    Tsmi { data: pairs_to_complex(&out), height, width, n_channels: dec.k }
}

/// Least-squares complex scale per pixel: PD_p = <x_p, D_p> / ||D_p||²,
/// zero where D_p vanishes.
pub fn analytic_pd(x: &Tsmi, d: &Tsmi) -> Vec<Complex64> {
    assert_eq!(x.data.len(), d.data.len(), "analytic_pd shapes");
    let k = x.n_channels;
    let _ = k;
    (0..x.n_pixels())
        .map(|p| {
            let xp = x.pixel(p);
            let dp = d.pixel(p);
            let n: f64 = dp.iter().map(|v| v.norm_sqr()).sum();
            if n == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                xp.iter().zip(dp).map(|(a, b)| a * b.conj()).sum::<Complex64>() / n
            }
        })
        .collect()
}

/// encode → decode → analytic PD: the Bloch-consistent TSMI and its maps.
pub fn bloch_project(
    enc: &EncoderNet,
    dec: &DecoderNet,
    x: &Tsmi,
) -> (Tsmi, Vec<TissueParams>) {
    let (t1, t2) = encode(enc, x);
    let dhat = decode(dec, &t1, &t2, x.height, x.width);
    let pd = analytic_pd(x, &dhat);
    let k = x.n_channels;
    let mut xb = Tsmi::zeros(x.height, x.width, k);
    let mut qmaps = Vec::with_capacity(x.n_pixels());
    for p in 0..x.n_pixels() {
        for j in 0..k {
            xb.data[p * k + j] = pd[p] * dhat.data[p * k + j];
        }
        let zero = pd[p].norm() == 0.0 && t1[p] == 0.0 && t2[p] == 0.0;
        qmaps.push(if zero {
            TissueParams::zero()
        } else {
            TissueParams::new(t1[p], t2[p], pd[p])
        });
    }
    (xb, qmaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_dictionary, compress, compute_svd_basis};
    use crate::epg::default_fisp_schedule;

    fn tiny_cdict() -> CompressedDictionary {
        // Short trains cannot resolve very long T1, so the smoke-test grid
        // stays within the range L=60 frames can encode.
        let seq = default_fisp_schedule(60).unwrap();
        let dict = build_dictionary(
            &[200.0, 350.0, 500.0, 700.0, 950.0, 1200.0],
            &[20.0, 45.0, 80.0, 120.0, 180.0],
            &seq,
        )
        .unwrap();
        let basis = compute_svd_basis(&dict, 4).unwrap();
        compress(&dict, &basis).unwrap()
    }

    #[test]
    fn analytic_pd_is_exact_on_collinear_pixels() {
        let k = 3;
        let c = Complex64::new(-1.7, 2.4);
        let dvals: Vec<Complex64> = (0..2 * k)
            .map(|i| Complex64::new(0.3 + i as f64 * 0.1, -0.2 * i as f64))
            .collect();
        let xvals: Vec<Complex64> = dvals.iter().map(|v| c * v).collect();
        let d = Tsmi { data: dvals, height: 2, width: 1, n_channels: k };
        let x = Tsmi { data: xvals, height: 2, width: 1, n_channels: k };
        let pd = analytic_pd(&x, &d);
        for p in pd {
            assert!((p - c).norm() < 1e-12);
        }
    }

    #[test]
    fn analytic_pd_zero_reference_gives_zero() {
        let k = 2;
        let d = Tsmi::zeros(1, 1, k);
        let x = Tsmi {
            data: vec![Complex64::new(1.0, 1.0); k],
            height: 1,
            width: 1,
            n_channels: k,
        };
        assert_eq!(analytic_pd(&x, &d)[0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn analytic_pd_matches_grid_search_oracle() {
        // Independent numerical minimizer of ||x - pd·d||² over Re/Im(pd):
        // coarse grid then two refinement rounds.
        let mut rng = crate::rng::rng_from_seed(31);
        for trial in 0..100 {
            let k = 4;
            let d: Vec<Complex64> = (0..k)
                .map(|_| {
                    Complex64::new(
                        rand::Rng::random::<f64>(&mut rng) - 0.5,
                        rand::Rng::random::<f64>(&mut rng) - 0.5,
                    )
                })
                .collect();
            let x: Vec<Complex64> = (0..k)
                .map(|_| {
                    Complex64::new(
                        2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0,
                        2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0,
                    )
                })
                .collect();
            let objective = |pd: Complex64| -> f64 {
                x.iter().zip(&d).map(|(xv, dv)| (xv - pd * dv).norm_sqr()).sum()
            };
            let mut best = Complex64::new(0.0, 0.0);
            let mut best_val = objective(best);
            let mut center = Complex64::new(0.0, 0.0);
            let mut span = 4.0;
            for _round in 0..12 {
                for i in -10..=10 {
                    for j in -10..=10 {
                        let cand = center
                            + Complex64::new(span * i as f64 / 10.0, span * j as f64 / 10.0);
                        let v = objective(cand);
                        if v < best_val {
                            best_val = v;
                            best = cand;
                        }
                    }
                }
                center = best;
                span *= 0.2;
            }
            let xm = Tsmi { data: x, height: 1, width: 1, n_channels: k };
            let dm = Tsmi { data: d, height: 1, width: 1, n_channels: k };
            let pd = analytic_pd(&xm, &dm)[0];
            assert!(
                (pd - best).norm() < 1e-6,
                "trial {trial}: analytic {pd} vs search {best}"
            );
        }
    }

    #[test]
    fn bloch_assemble_gradient_matches_finite_differences() {
        let mut rng = crate::rng::rng_from_seed(17);
        let k = 3;
        let rows = 2;
        let x_rows: Vec<Complex64> = (0..rows * k)
            .map(|_| {
                Complex64::new(
                    rand::Rng::random::<f64>(&mut rng) - 0.5,
                    rand::Rng::random::<f64>(&mut rng) - 0.5,
                )
            })
            .collect();
        let d0: Vec<f64> =
            (0..rows * 2 * k).map(|_| rand::Rng::random::<f64>(&mut rng) + 0.2).collect();
        let target: Vec<f64> =
            (0..rows * 2 * k).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();

        let build = |tape: &mut Tape, leaf: NodeId| -> NodeId {
            let (xb, _) = bloch_assemble_tape(tape, leaf, &x_rows, k);
            let t = tape.leaf(&[rows, 2 * k], target.clone(), false);
            tape.sum_sq_diff(xb, t)
        };

        let mut tape = Tape::new();
        let leaf = tape.leaf(&[rows, 2 * k], d0.clone(), true);
        let loss = build(&mut tape, leaf);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(leaf).to_vec();

        let h = 1e-5;
        for i in 0..d0.len() {
            let mut dp = d0.clone();
            dp[i] += h;
            let mut tp = Tape::new();
            let lp = tp.leaf(&[rows, 2 * k], dp.clone(), false);
            let op = build(&mut tp, lp);
            let fp = tp.values(op)[0];
            dp[i] = d0[i] - h;
            let mut tm = Tape::new();
            let lm = tm.leaf(&[rows, 2 * k], dp, false);
            let om = build(&mut tm, lm);
            let fm = tm.values(om)[0];
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-4,
                "coord {i}: {} vs {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn zero_epoch_pretraining_keeps_initialization() {
        let cdict = tiny_cdict();
        let cfg = PretrainConfig { epochs: 0, seed: 5, ..Default::default() };
        let (enc, dec, _) = pretrain_bdae(&cdict, &cfg).unwrap();
        let enc_ref = EncoderNet::new(cdict.basis.k, 5u64.wrapping_add(1));
        let dec_ref = DecoderNet::new(cdict.basis.k, 5u64.wrapping_add(2));
        for (a, b) in enc.set.params.iter().zip(&enc_ref.set.params) {
            assert_eq!(a.values, b.values);
        }
        for (a, b) in dec.set.params.iter().zip(&dec_ref.set.params) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn encode_is_scale_invariant_and_zero_maps_to_sentinel() {
        let cdict = tiny_cdict();
        let enc = EncoderNet::new(cdict.basis.k, 9);
        let k = cdict.basis.k;
        let atom = cdict.atom(3).to_vec();
        let scaled: Vec<Complex64> = atom.iter().map(|v| v * Complex64::new(2.5, 0.0)).collect();
        let tsmi = Tsmi {
            data: [atom, scaled, vec![Complex64::new(0.0, 0.0); k]].concat(),
            height: 3,
            width: 1,
            n_channels: k,
        };
        let (t1, t2) = encode(&enc, &tsmi);
        // Real positive scaling is removed exactly by the normalization.
        assert!((t1[0] - t1[1]).abs() < 1e-12);
        assert!((t2[0] - t2[1]).abs() < 1e-12);
        assert_eq!((t1[2], t2[2]), (0.0, 0.0));
    }

    #[test]
    fn decode_is_pure() {
        let dec = DecoderNet::new(4, 3);
        let a = decode(&dec, &[800.0, 1200.0], &[80.0, 150.0], 2, 1);
        let b = decode(&dec, &[800.0, 1200.0], &[80.0, 150.0], 2, 1);
        assert_eq!(a, b);
    }

    #[test]
    fn short_pretraining_learns_the_tiny_dictionary() {
        let cdict = tiny_cdict();
        let init_cfg = PretrainConfig { epochs: 0, seed: 11, ..Default::default() };
        let (enc0, _, _) = pretrain_bdae(&cdict, &init_cfg).unwrap();
        let before = evaluate_encoder(&enc0, &cdict, 0.0);

        let cfg = PretrainConfig { epochs: 600, seed: 11, ..Default::default() };
        let (enc, dec, report) = pretrain_bdae(&cdict, &cfg).unwrap();
        assert!(
            report.t1_mape_percent < before.t1_mape_percent / 3.0
                && report.t2_mape_percent < before.t2_mape_percent / 3.0,
            "pretraining did not learn: T1 {}% -> {}%, T2 {}% -> {}%",
            before.t1_mape_percent,
            report.t1_mape_percent,
            before.t2_mape_percent,
            report.t2_mape_percent
        );
        assert!(
            report.t1_mape_percent < 15.0 && report.t2_mape_percent < 25.0,
            "tiny pretrain underfit: T1 {}% T2 {}%",
            report.t1_mape_percent,
            report.t2_mape_percent
        );

        // Projection self-consistency on Bloch-consistent input.
        let k = cdict.basis.k;
        let tsmi = Tsmi {
            data: cdict.atoms_k.clone(),
            height: cdict.n_atoms(),
            width: 1,
            n_channels: k,
        };
        let (xb, qmaps) = bloch_project(&enc, &dec, &tsmi);
        assert_eq!(qmaps.len(), cdict.n_atoms());
        let num: f64 =
            xb.data.iter().zip(&tsmi.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = tsmi.data.iter().map(|b| b.norm_sqr()).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 0.35, "projection residual {rel}");
    }

    #[test]
    fn bloch_project_zero_tsmi_gives_zero_everything() {
        let enc = EncoderNet::new(3, 1);
        let dec = DecoderNet::new(3, 2);
        let x = Tsmi::zeros(2, 2, 3);
        let (xb, qmaps) = bloch_project(&enc, &dec, &x);
        assert!(xb.data.iter().all(|v| v.norm() == 0.0));
        assert!(qmaps.iter().all(|q| *q == TissueParams::zero()));
    }
}
