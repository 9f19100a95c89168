//! Extended-phase-graph (EPG) simulation of FISP-MRF fingerprints.
//!
//! The transient signal of an inversion-prepared, gradient-spoiled FISP
//! sequence is tracked in configuration states (F+, F-, Z per dephasing
//! order). One full dephasing cycle per TR is assumed (ideal spoiling), and
//! the state vector is truncated at order L, which is exact for an L-readout
//! train. A brute-force isochromat simulation of the same sequence serves as
//! an independent oracle.

use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Pulse-sequence description: per-timeframe flip angles plus fixed timing.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceParams {
    /// Flip angle train, degrees, one entry per timeframe.
    pub flip_angles_deg: Vec<f64>,
    pub tr_ms: f64,
    pub te_ms: f64,
    /// Inversion time between the 180° preparation pulse and the first readout.
    pub ti_ms: f64,
}

impl SequenceParams {
    pub fn n_timeframes(&self) -> usize {
        self.flip_angles_deg.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.flip_angles_deg.is_empty() {
            return Err(Error::InvalidParameter("flip angle train is empty".into()));
        }
        if !(self.te_ms > 0.0 && self.tr_ms > self.te_ms) {
            return Err(Error::InvalidParameter(format!(
                "need tr_ms > te_ms > 0, got tr={} te={}",
                self.tr_ms, self.te_ms
            )));
        }
        if self.ti_ms < 0.0 || !self.ti_ms.is_finite() {
            return Err(Error::InvalidParameter(format!("bad ti_ms {}", self.ti_ms)));
        }
        for (i, &a) in self.flip_angles_deg.iter().enumerate() {
            if !(0.0..=180.0).contains(&a) {
                return Err(Error::InvalidParameter(format!(
                    "flip angle {a} deg at frame {i} outside [0, 180]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel tissue parameters: relaxation times and complex proton density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueParams {
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub pd: Complex64,
}

impl TissueParams {
    pub fn new(t1_ms: f64, t2_ms: f64, pd: Complex64) -> Self {
        Self { t1_ms, t2_ms, pd }
    }

    pub fn zero() -> Self {
        Self { t1_ms: 0.0, t2_ms: 0.0, pd: Complex64::new(0.0, 0.0) }
    }
}

/// Complex transient signal over the timeframe train (unit equilibrium
/// magnetization, unit proton density).
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub signal: Vec<Complex64>,
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signal.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.signal.iter().map(|s| s.norm_sqr()).sum::<f64>().sqrt()
    }
}

fn check_tissue(t1_ms: f64, t2_ms: f64) -> Result<()> {
    if !(t1_ms > 0.0 && t1_ms.is_finite() && t2_ms > 0.0 && t2_ms.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "relaxation times must be positive and finite, got T1={t1_ms} T2={t2_ms}"
        )));
    }
    Ok(())
}

/// EPG state ensemble: fp[k] = F+(k), fm[k] = conj(F(-k)), z[k] = Z(k).
struct EpgState {
    fp: Vec<Complex64>,
    fm: Vec<Complex64>,
    z: Vec<Complex64>,
    /// Number of orders currently populated (grows by one per gradient shift).
    active: usize,
    max_orders: usize,
}

impl EpgState {
    fn new(max_orders: usize) -> Self {
        let mut z = vec![Complex64::new(0.0, 0.0); max_orders];
        z[0] = Complex64::new(1.0, 0.0);
        Self {
            fp: vec![Complex64::new(0.0, 0.0); max_orders],
            fm: vec![Complex64::new(0.0, 0.0); max_orders],
            z,
            active: 1,
            max_orders,
        }
    }

    /// RF rotation by `alpha_rad` about the x-axis (phase 0) applied to every
    /// populated order.
    fn rotate(&mut self, alpha_rad: f64) {
        let (sin_a, cos_a) = alpha_rad.sin_cos();
        let half = 0.5 * alpha_rad;
        let c2 = half.cos() * half.cos();
        let s2 = half.sin() * half.sin();
        let i_sin = Complex64::new(0.0, sin_a);
        for k in 0..self.active {
            let fp = self.fp[k];
            let fm = self.fm[k];
            let z = self.z[k];
            self.fp[k] = c2 * fp + s2 * fm - i_sin * z;
            self.fm[k] = s2 * fp + c2 * fm + i_sin * z;
            self.z[k] = -0.5 * i_sin * fp + 0.5 * i_sin * fm + cos_a * z;
        }
    }

    /// Relaxation over `t_ms`; longitudinal recovery feeds order 0 only.
    fn relax(&mut self, t_ms: f64, t1_ms: f64, t2_ms: f64) {
        let e1 = (-t_ms / t1_ms).exp();
        let e2 = (-t_ms / t2_ms).exp();
        for k in 0..self.active {
            self.fp[k] *= e2;
            self.fm[k] *= e2;
            self.z[k] *= e1;
        }
        self.z[0] += 1.0 - e1;
    }

    /// Ideal 180° inversion preparation: longitudinal states negate,
    /// transverse states are crushed.
    fn invert(&mut self) {
        for k in 0..self.active {
            self.fp[k] = Complex64::new(0.0, 0.0);
            self.fm[k] = Complex64::new(0.0, 0.0);
            self.z[k] = -self.z[k];
        }
    }

    /// Gradient dephasing by one full cycle: F states shift one order up.
    fn shift(&mut self) {
        let n = (self.active + 1).min(self.max_orders);
        for k in (1..n).rev() {
            self.fp[k] = self.fp[k - 1];
        }
        for k in 0..n - 1 {
            self.fm[k] = self.fm[k + 1];
        }
        self.fm[n - 1] = Complex64::new(0.0, 0.0);
        self.fp[0] = self.fm[0].conj();
        self.active = n;
    }

    fn f0(&self) -> Complex64 {
        self.fp[0]
    }

    fn is_finite(&self) -> bool {
        self.fp[..self.active].iter().all(|c| c.re.is_finite() && c.im.is_finite())
            && self.z[..self.active].iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Simulate the fingerprint of one (T1, T2) pair under `seq` via EPG.
///
/// The sequence starts with a 180° inversion pulse and a TI wait; each
/// timeframe then applies the RF pulse, reads F0 after TE of relaxation,
/// relaxes over the remaining TR-TE, and dephases by one gradient cycle.
pub fn epg_fisp(t1_ms: f64, t2_ms: f64, seq: &SequenceParams) -> Result<Fingerprint> {
    check_tissue(t1_ms, t2_ms)?;
    seq.validate()?;
    let l = seq.n_timeframes();

    // Orders above L cannot reach the F0 readout within L frames.
    let mut state = EpgState::new(l + 1);
    state.invert();
    state.relax(seq.ti_ms, t1_ms, t2_ms);

    let mut signal = Vec::with_capacity(l);
    for &flip_deg in &seq.flip_angles_deg {
        state.rotate(flip_deg.to_radians());
        state.relax(seq.te_ms, t1_ms, t2_ms);
        signal.push(state.f0());
        state.relax(seq.tr_ms - seq.te_ms, t1_ms, t2_ms);
        state.shift();
        if !state.is_finite() {
            return Err(Error::SimulationDiverged(format!(
                "non-finite EPG state for T1={t1_ms} T2={t2_ms}"
            )));
        }
    }
    Ok(Fingerprint { signal })
}

/// Brute-force Bloch oracle: `n_spins` isochromats whose per-TR dephasing
/// angles uniformly span 2π. Exact (up to rounding) whenever `n_spins`
/// exceeds the highest populated EPG order.
pub fn isochromat_fisp(
    t1_ms: f64,
    t2_ms: f64,
    seq: &SequenceParams,
    n_spins: usize,
) -> Result<Fingerprint> {
    check_tissue(t1_ms, t2_ms)?;
    seq.validate()?;
    if n_spins == 0 {
        return Err(Error::InvalidParameter("n_spins must be positive".into()));
    }

    // (mx, my, mz) per spin, starting at equilibrium.
    let mut m = vec![[0.0f64, 0.0, 1.0]; n_spins];
    let thetas: Vec<f64> = (0..n_spins)
        .map(|j| 2.0 * std::f64::consts::PI * j as f64 / n_spins as f64)
        .collect();

    // Same rotation convention as the EPG operator restricted to one spin.
    let rotate = |m: &mut [[f64; 3]], alpha_rad: f64| {
        let (s, c) = alpha_rad.sin_cos();
        for v in m.iter_mut() {
            let my = v[1];
            let mz = v[2];
            v[1] = c * my - s * mz;
            v[2] = s * my + c * mz;
        }
    };
    let relax = |m: &mut [[f64; 3]], t_ms: f64| {
        let e1 = (-t_ms / t1_ms).exp();
        let e2 = (-t_ms / t2_ms).exp();
        for v in m.iter_mut() {
            v[0] *= e2;
            v[1] *= e2;
            v[2] = 1.0 + (v[2] - 1.0) * e1;
        }
    };

    // Ideal inversion preparation, matching the EPG path.
    for v in m.iter_mut() {
        v[0] = 0.0;
        v[1] = 0.0;
        v[2] = -v[2];
    }
    relax(&mut m, seq.ti_ms);

    let mut signal = Vec::with_capacity(seq.n_timeframes());
    for &flip_deg in &seq.flip_angles_deg {
        rotate(&mut m, flip_deg.to_radians());
        relax(&mut m, seq.te_ms);
        let mut acc = Complex64::new(0.0, 0.0);
        for v in &m {
            acc += Complex64::new(v[0], v[1]);
        }
        signal.push(acc / n_spins as f64);
        relax(&mut m, seq.tr_ms - seq.te_ms);
        for (v, &th) in m.iter_mut().zip(&thetas) {
            let (s, c) = th.sin_cos();
            let mx = v[0];
            let my = v[1];
            v[0] = c * mx - s * my;
            v[1] = s * mx + c * my;
        }
    }
    Ok(Fingerprint { signal })
}

/// Default timing of the repo's FISP protocol, milliseconds.
pub const DEFAULT_TR_MS: f64 = 10.0;
pub const DEFAULT_TE_MS: f64 = 1.908;
pub const DEFAULT_TI_MS: f64 = 18.0;

/// Repo-default flip-angle train: sinusoidal lobes of varying amplitude
/// (peak 70°), TR/TE/TI = 10/1.908/18 ms. Deterministic in `l`.
pub fn default_fisp_schedule(l: usize) -> Result<SequenceParams> {
    if l == 0 {
        return Err(Error::InvalidParameter("schedule length must be >= 1".into()));
    }
    const LOBE_AMPS_DEG: [f64; 5] = [70.0, 45.0, 60.0, 35.0, 50.0];
    let n_lobes = (l as f64 / 200.0).round().max(1.0) as usize;
    let lobe_len = (l as f64 / n_lobes as f64).ceil() as usize;
    let flip_angles_deg = (0..l)
        .map(|i| {
            let lobe = i / lobe_len;
            let pos = (i % lobe_len) as f64 + 0.5;
            let amp = LOBE_AMPS_DEG[lobe % LOBE_AMPS_DEG.len()];
            amp * (std::f64::consts::PI * pos / lobe_len as f64).sin()
        })
        .collect();
    Ok(SequenceParams {
        flip_angles_deg,
        tr_ms: DEFAULT_TR_MS,
        te_ms: DEFAULT_TE_MS,
        ti_ms: DEFAULT_TI_MS,
    })
}

/// Write a schedule as CSV: a header line carrying the timing,
/// `# tr_ms,te_ms,ti_ms,<tr>,<te>,<ti>`, then one flip angle (degrees) per line.
pub fn write_schedule_csv(seq: &SequenceParams, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "# tr_ms,te_ms,ti_ms,{},{},{}", seq.tr_ms, seq.te_ms, seq.ti_ms);
    for a in &seq.flip_angles_deg {
        let _ = writeln!(out, "{a}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parse a schedule written by [`write_schedule_csv`].
pub fn read_schedule_csv(path: &Path) -> Result<SequenceParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty schedule file", path.display())))?;
    let header = header.trim_start_matches('#').trim();
    let nums: Vec<f64> = header
        .split(',')
        .filter_map(|tok| tok.trim().parse::<f64>().ok())
        .collect();
    if nums.len() != 3 {
        return Err(Error::Config(format!(
            "{}: schedule header must carry tr_ms,te_ms,ti_ms",
            path.display()
        )));
    }
    let mut flip_angles_deg = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let a: f64 = line
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad flip angle line {line:?}", path.display())))?;
        flip_angles_deg.push(a);
    }
    let seq = SequenceParams { flip_angles_deg, tr_ms: nums[0], te_ms: nums[1], ti_ms: nums[2] };
    seq.validate()?;
    Ok(seq)
}
