//! Synthetic brain-like quantitative phantoms: layered ellipses carrying
//! literature relaxation values, a smooth complex proton-density field, and
//! the foreground mask used by every metric.

use num_complex::Complex64;
use rand::Rng;

use crate::epg::TissueParams;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Tissue classes in simulation order: outer layers first so later ellipses
/// overwrite earlier ones.
pub const CSF_T1_MS: f64 = 4000.0;
pub const CSF_T2_MS: f64 = 2000.0;
pub const GM_T1_MS: f64 = 1300.0;
pub const GM_T2_MS: f64 = 110.0;
pub const WM_T1_MS: f64 = 800.0;
pub const WM_T2_MS: f64 = 70.0;

#[derive(Debug, Clone)]
pub struct Phantom {
    pub qmaps: Vec<TissueParams>,
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl Phantom {
    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn t1_map(&self) -> Vec<f64> {
        self.qmaps.iter().map(|q| q.t1_ms).collect()
    }

    pub fn t2_map(&self) -> Vec<f64> {
        self.qmaps.iter().map(|q| q.t2_ms).collect()
    }

    pub fn pd_map(&self) -> Vec<Complex64> {
        self.qmaps.iter().map(|q| q.pd).collect()
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Deterministic layered-ellipse phantom. The head ellipse defines the mask;
/// gray matter fills it, white matter sits inside, CSF ventricles inside
/// that. PD magnitude varies smoothly with a seeded low-order phase field.
pub fn make_brain_phantom(height: usize, width: usize, seed: u64) -> Result<Phantom> {
    if height < 32 || width < 32 {
        return Err(Error::InvalidParameter(format!(
            "phantom needs dims >= 32, got {height}x{width}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let h = height as f64;
    let w = width as f64;
    let mut jitter = move |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;

    let head = Ellipse {
        cy: h * (0.5 + jitter(0.02)),
        cx: w * (0.5 + jitter(0.02)),
        ry: h * (0.44 + jitter(0.02)),
        rx: w * (0.38 + jitter(0.02)),
        angle: jitter(0.15),
    };
    let white = Ellipse {
        cy: head.cy + h * jitter(0.02),
        cx: head.cx + w * jitter(0.02),
        ry: head.ry * 0.72,
        rx: head.rx * 0.70,
        angle: head.angle + jitter(0.1),
    };
    let vent_l = Ellipse {
        cy: head.cy - h * 0.05,
        cx: head.cx - w * (0.09 + jitter(0.01)),
        ry: h * 0.10,
        rx: w * 0.045,
        angle: 0.35 + jitter(0.1),
    };
    let vent_r = Ellipse {
        cy: head.cy - h * 0.05,
        cx: head.cx + w * (0.09 + jitter(0.01)),
        ry: h * 0.10,
        rx: w * 0.045,
        angle: -0.35 + jitter(0.1),
    };

    let (p1, p2, p3, p4) = (jitter(1.0), jitter(1.0), jitter(1.0), jitter(1.0));
    let mut qmaps = Vec::with_capacity(height * width);
    let mut mask = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let y = r as f64;
            let x = c as f64;
            if !head.contains(y, x) {
                qmaps.push(TissueParams::zero());
                mask.push(false);
                continue;
            }
            let (t1, t2) = if vent_l.contains(y, x) || vent_r.contains(y, x) {
                (CSF_T1_MS, CSF_T2_MS)
            } else if white.contains(y, x) {
                (WM_T1_MS, WM_T2_MS)
            } else {
                (GM_T1_MS, GM_T2_MS)
            };
            // Smooth PD magnitude and a low-order random phase field.
            let u = (x - head.cx) / w;
            let v = (y - head.cy) / h;
            let mag = 0.85 + 0.15 * (std::f64::consts::PI * (u + p1) * 1.3).sin()
                * (std::f64::consts::PI * (v + p2) * 1.1).cos();
            let phase = 0.6 * (2.0 * std::f64::consts::PI * (0.7 * u + p3)).sin()
                + 0.4 * (2.0 * std::f64::consts::PI * (0.9 * v + p4)).cos();
            qmaps.push(TissueParams::new(t1, t2, Complex64::from_polar(mag, phase)));
            mask.push(true);
        }
    }
    Ok(Phantom { qmaps, mask, height, width })
}

/// 8-bit PGM preview with fixed windowing (binary P5).
pub fn write_pgm(path: &std::path::Path, values: &[f64], height: usize, width: usize, window_max: f64) -> Result<()> {
    let mut out = Vec::with_capacity(20 + height * width);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    for v in values {
        let scaled = (v / window_max * 255.0).clamp(0.0, 255.0) as u8;
        out.push(scaled);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
