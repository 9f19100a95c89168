//! MRF dictionary: the (T1, T2) grid of simulated fingerprints, its SVD
//! temporal basis, compression to K channels, and exhaustive matching.
//!
//! Atoms are l2-normalized before the SVD so long-T1 entries do not dominate
//! the basis; compression itself applies to the raw atoms. The singular-vector
//! phase is fixed (largest-magnitude entry real positive) for reproducibility.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::epg::{epg_fisp, SequenceParams, TissueParams};
use crate::error::{Error, Result};
use crate::operator::Tsmi;
use crate::svd::svd_jacobi;

#[derive(Debug, Clone)]
pub struct Dictionary {
    /// Grid entries in T1-major order, PD fixed to 1.
    pub grid: Vec<TissueParams>,
    /// Atom matrix, row-major D×L; row d is `epg_fisp` of grid entry d.
    pub atoms: Vec<Complex64>,
    pub seq: SequenceParams,
}

impl Dictionary {
    pub fn n_atoms(&self) -> usize {
        self.grid.len()
    }

    pub fn n_timeframes(&self) -> usize {
        self.seq.n_timeframes()
    }

    pub fn atom(&self, d: usize) -> &[Complex64] {
        let l = self.n_timeframes();
        &self.atoms[d * l..(d + 1) * l]
    }
}

/// Default desk-scale grid: T1 100..3000 ms step 100, T2 10..300 ms step 10.
pub fn desk_scale_grids() -> (Vec<f64>, Vec<f64>) {
    let t1 = (1..=30).map(|i| 100.0 * i as f64).collect();
    let t2 = (1..=30).map(|i| 10.0 * i as f64).collect();
    (t1, t2)
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter(format!("{name} grid is empty")));
    }
    if grid[0] <= 0.0 {
        return Err(Error::InvalidParameter(format!("{name} grid must be positive")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(format!("{name} grid must be strictly increasing")));
    }
    Ok(())
}

/// Simulate one atom per (T1, T2) pair of the Cartesian grid with T2 <= T1.
pub fn build_dictionary(
    t1_grid: &[f64],
    t2_grid: &[f64],
    seq: &SequenceParams,
) -> Result<Dictionary> {
    check_grid("t1", t1_grid)?;
    check_grid("t2", t2_grid)?;
    seq.validate()?;

    let mut grid = Vec::new();
    for &t1 in t1_grid {
        for &t2 in t2_grid {
            if t2 <= t1 {
                grid.push(TissueParams::new(t1, t2, Complex64::new(1.0, 0.0)));
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter(
            "no grid entries satisfy T2 <= T1".into(),
        ));
    }

    let fingerprints: Result<Vec<_>> = grid
        .par_iter()
        .map(|t| epg_fisp(t.t1_ms, t.t2_ms, seq))
        .collect();
    let fingerprints = fingerprints?;
    let l = seq.n_timeframes();
    let mut atoms = Vec::with_capacity(grid.len() * l);
    for fp in fingerprints {
        atoms.extend_from_slice(&fp.signal);
    }
    Ok(Dictionary { grid, atoms, seq: seq.clone() })
}

/// SVD temporal basis: top-k right singular vectors of the normalized atom
/// matrix, stored row-major L×K with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdBasis {
    pub v: Vec<Complex64>,
    pub k: usize,
    pub n_timeframes: usize,
    pub singular_values: Vec<f64>,
}

impl SvdBasis {
    /// Compress an L-frame fingerprint to K channels: c = b · v.
    pub fn compress_fingerprint(&self, fp: &[Complex64]) -> Vec<Complex64> {
        let mut c = vec![Complex64::new(0.0, 0.0); self.k];
        for (l, &b) in fp.iter().enumerate() {
            let row = &self.v[l * self.k..(l + 1) * self.k];
            for (ck, &vk) in c.iter_mut().zip(row) {
                *ck += b * vk;
            }
        }
        c
    }

    /// Temporal expansion of K channels back to frame `l`: sum_k c_k v*[l,k].
    pub fn expand_frame(&self, c: &[Complex64], l: usize) -> Complex64 {
        let row = &self.v[l * self.k..(l + 1) * self.k];
        c.iter().zip(row).map(|(ck, vk)| ck * vk.conj()).sum()
    }

    /// Max deviation of v^H v from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.k {
            for j in 0..self.k {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in 0..self.n_timeframes {
                    acc += self.v[l * self.k + i].conj() * self.v[l * self.k + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - want).norm());
            }
        }
        worst
    }
}

/// Unit-normalize each atom row; zero rows stay zero.
fn normalized_atoms(dict: &Dictionary) -> Vec<Complex64> {
    let l = dict.n_timeframes();
    let mut out = dict.atoms.clone();
    for row in out.chunks_exact_mut(l) {
        let n = row.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in row.iter_mut() {
                *x /= n;
            }
        }
    }
    out
}

pub fn compute_svd_basis(dict: &Dictionary, k: usize) -> Result<SvdBasis> {
    let d = dict.n_atoms();
    let l = dict.n_timeframes();
    if k < 1 || k > d.min(l) {
        return Err(Error::InvalidParameter(format!(
            "basis size {k} outside 1..={}",
            d.min(l)
        )));
    }

    let a = normalized_atoms(dict);
    // One-sided Jacobi wants rows >= cols; run on the conjugate transpose
    // when the dictionary is squat. For A = U S V^H, A^H = V S U^H, so the
    // left factor of A^H is the V we need.
    let v_full: Vec<Complex64>; // row-major L×r
    let s_full: Vec<f64>;
    if d >= l {
        let svd = svd_jacobi(&a, d, l)?;
        v_full = svd.v;
        s_full = svd.s;
    } else {
        let mut ah = vec![Complex64::new(0.0, 0.0); l * d];
        for r in 0..d {
            for c in 0..l {
                ah[c * d + r] = a[r * l + c].conj();
            }
        }
        let svd = svd_jacobi(&ah, l, d)?;
        v_full = svd.u;
        s_full = svd.s;
    }
    let r = s_full.len();

    let mut v = vec![Complex64::new(0.0, 0.0); l * k];
    for t in 0..k {
        // Phase convention: largest-magnitude entry real positive.
        let mut best = 0usize;
        let mut best_mag = -1.0f64;
        for row in 0..l {
            let mag = v_full[row * r + t].norm();
            if mag > best_mag {
                best_mag = mag;
                best = row;
            }
        }
        let pivot = v_full[best * r + t];
        let phase = if best_mag > 0.0 { pivot.conj() / best_mag } else { Complex64::new(1.0, 0.0) };
        for row in 0..l {
            v[row * k + t] = v_full[row * r + t] * phase;
        }
    }

    Ok(SvdBasis {
        v,
        k,
        n_timeframes: l,
        singular_values: s_full[..k].to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct CompressedDictionary {
    /// Compressed atoms, row-major D×K: atoms · v.
    pub atoms_k: Vec<Complex64>,
    pub basis: SvdBasis,
    pub grid: Vec<TissueParams>,
}

impl CompressedDictionary {
    pub fn n_atoms(&self) -> usize {
        self.grid.len()
    }

    pub fn atom(&self, d: usize) -> &[Complex64] {
        &self.atoms_k[d * self.basis.k..(d + 1) * self.basis.k]
    }
}

pub fn compress(dict: &Dictionary, basis: &SvdBasis) -> Result<CompressedDictionary> {
    if basis.n_timeframes != dict.n_timeframes() {
        return Err(Error::DimensionMismatch(format!(
            "basis L {} vs dictionary L {}",
            basis.n_timeframes,
            dict.n_timeframes()
        )));
    }
    let d = dict.n_atoms();
    let mut atoms_k = Vec::with_capacity(d * basis.k);
    for row in 0..d {
        atoms_k.extend_from_slice(&basis.compress_fingerprint(dict.atom(row)));
    }
    Ok(CompressedDictionary { atoms_k, basis: basis.clone(), grid: dict.grid.clone() })
}

/// Exhaustive per-pixel matching: argmax of the normalized correlation
/// |<x, atom>| / ||atom||, with PD from the projection onto the winner.
/// Zero pixels return the zero sentinel.
pub fn dict_match(tsmi: &Tsmi, cdict: &CompressedDictionary) -> Result<Vec<TissueParams>> {
    let k = cdict.basis.k;
    if tsmi.n_channels != k {
        return Err(Error::DimensionMismatch(format!(
            "tsmi channels {} vs dictionary K {}",
            tsmi.n_channels, k
        )));
    }
    let d = cdict.n_atoms();
    let norms: Vec<f64> = (0..d)
        .map(|j| cdict.atom(j).iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt())
        .collect();

    let out: Vec<TissueParams> = (0..tsmi.n_pixels())
        .into_par_iter()
        .map(|p| {
            let x = tsmi.pixel(p);
            if x.iter().map(|v| v.norm_sqr()).sum::<f64>() == 0.0 {
                return TissueParams::zero();
            }
            let mut best = 0usize;
            let mut best_score = -1.0f64;
            let mut best_ip = Complex64::new(0.0, 0.0);
            for j in 0..d {
                if norms[j] == 0.0 {
                    continue;
                }
                let atom = cdict.atom(j);
                let mut ip = Complex64::new(0.0, 0.0);
                for (xv, av) in x.iter().zip(atom) {
                    ip += xv * av.conj();
                }
                let score = ip.norm() / norms[j];
                if score > best_score {
                    best_score = score;
                    best = j;
                    best_ip = ip;
                }
            }
            let mut t = cdict.grid[best];
            t.pd = best_ip / (norms[best] * norms[best]);
            t
        })
        .collect();
    Ok(out)
}
