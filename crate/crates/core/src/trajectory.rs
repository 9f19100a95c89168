//! Variable-density spiral k-space trajectories with analytic density
//! compensation.
//!
//! One Archimedean arm with radius r(s) = 0.5·s^p is laid out per timeframe
//! and rotated by the golden angle between frames, which keeps the aliasing
//! incoherent across the train. Coordinates are in cycles/pixel, inside
//! [-0.5, 0.5) by construction.

use crate::error::{Error, Result};

/// Golden angle in radians (2π/φ², ≈137.51°).
pub const GOLDEN_ANGLE_RAD: f64 = 2.399963229728653;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// k-space coordinates, cycles/pixel; layout [frame][sample][(kx, ky)].
    pub coords: Vec<[f64; 2]>,
    /// Density compensation weights, one per sample, mean 1 per frame.
    pub dcf: Vec<f64>,
    pub n_frames: usize,
    pub samples_per_frame: usize,
}

impl Trajectory {
    pub fn frame_coords(&self, l: usize) -> &[[f64; 2]] {
        let m = self.samples_per_frame;
        &self.coords[l * m..(l + 1) * m]
    }

    pub fn frame_dcf(&self, l: usize) -> &[f64] {
        let m = self.samples_per_frame;
        &self.dcf[l * m..(l + 1) * m]
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.n_frames * self.samples_per_frame
            || self.dcf.len() != self.coords.len()
        {
            return Err(Error::DimensionMismatch("trajectory buffer sizes".into()));
        }
        for c in &self.coords {
            if !(c[0].is_finite() && c[1].is_finite())
                || c[0] < -0.5
                || c[0] >= 0.5
                || c[1] < -0.5
                || c[1] >= 0.5
            {
                return Err(Error::InvalidParameter(format!(
                    "coordinate ({}, {}) outside [-0.5, 0.5)",
                    c[0], c[1]
                )));
            }
        }
        if self.dcf.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("dcf weights must be positive".into()));
        }
        Ok(())
    }
}

/// Build the spiral trajectory for an `height`×`width` image.
///
/// `density_exponent` >= 1 concentrates samples near the k-space center;
/// `rotations` is the number of full turns of one arm. Density weights are
/// the analytic radius × arc-spacing product of the parametrization,
/// normalized to mean 1 per frame.
pub fn make_spiral_trajectory(
    height: usize,
    width: usize,
    n_frames: usize,
    samples_per_frame: usize,
    density_exponent: f64,
    rotations: usize,
) -> Result<Trajectory> {
    if height == 0 || width == 0 || n_frames == 0 {
        return Err(Error::InvalidParameter("empty trajectory dimensions".into()));
    }
    if samples_per_frame < 1 {
        return Err(Error::InvalidParameter("samples_per_frame must be >= 1".into()));
    }
    if density_exponent < 1.0 {
        return Err(Error::InvalidParameter("density_exponent must be >= 1".into()));
    }

    let m = samples_per_frame;
    // Base arm; s = i/m stays strictly below 1 so the radius stays below 0.5.
    let radius = |s: f64| 0.5 * s.powf(density_exponent);
    let angle = |s: f64| 2.0 * std::f64::consts::PI * rotations as f64 * s;

    let mut dcf_frame = vec![0.0f64; m];
    if m == 1 {
        dcf_frame[0] = 1.0;
    } else {
        // Arc spacing from the parametrization, radius at midpoints so the
        // center sample keeps a positive weight.
        let point = |s: f64| {
            let r = radius(s);
            let (sa, ca) = angle(s).sin_cos();
            [r * ca, r * sa]
        };
        for i in 0..m {
            let s = i as f64 / m as f64;
            let ds = 0.5 / m as f64;
            let a = point((s - ds).max(0.0));
            let b = point(s + ds);
            let spacing = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let r_mid = radius((i as f64 + 0.5) / m as f64);
            dcf_frame[i] = r_mid * spacing;
        }
        let mean = dcf_frame.iter().sum::<f64>() / m as f64;
        for w in dcf_frame.iter_mut() {
            *w /= mean;
        }
    }

    let mut coords = Vec::with_capacity(n_frames * m);
    let mut dcf = Vec::with_capacity(n_frames * m);
    for l in 0..n_frames {
        let rot = GOLDEN_ANGLE_RAD * l as f64;
        for i in 0..m {
            let s = i as f64 / m as f64;
            let r = radius(s);
            let (sa, ca) = (angle(s) + rot).sin_cos();
            coords.push([r * ca, r * sa]);
        }
        dcf.extend_from_slice(&dcf_frame);
    }

    let traj = Trajectory { coords, dcf, n_frames, samples_per_frame: m };
    traj.validate()?;
    Ok(traj)
}
