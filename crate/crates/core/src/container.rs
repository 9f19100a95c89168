//! Flat binary containers for every persisted artifact. All files share one
//! layout family: 4-byte magic, u32 version, u64 dimensions, then
//! little-endian float64 payloads (complex arrays interleave re/im).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::dictionary::{Dictionary, SvdBasis};
use crate::epg::{SequenceParams, TissueParams};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::operator::KSpaceData;
use crate::trajectory::Trajectory;

pub const CONTAINER_VERSION: u32 = 1;

pub const MAGIC_DICTIONARY: &[u8; 4] = b"MRFD";
pub const MAGIC_TRAJECTORY: &[u8; 4] = b"MRFT";
pub const MAGIC_KSPACE: &[u8; 4] = b"MRFK";
pub const MAGIC_MODEL: &[u8; 4] = b"MRFM";
pub const MAGIC_QMAPS: &[u8; 4] = b"MRFQ";

struct Sink<W: Write> {
    w: W,
    path: std::path::PathBuf,
}

impl<W: Write> Sink<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&self.path, e))
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&self.path, e))
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
    fn complexes(&mut self, vs: &[Complex64]) -> Result<()> {
        for v in vs {
            self.w.write_all(&v.re.to_le_bytes()).map_err(|e| Error::io(&self.path, e))?;
            self.w.write_all(&v.im.to_le_bytes()).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b).map_err(|e| Error::io(&self.path, e))
    }
}

struct Source<R: Read> {
    r: R,
    path: std::path::PathBuf,
}

impl<R: Read> Source<R> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::BadContainer { path: self.path.clone(), reason: reason.into() }
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b).map_err(|_| self.bad("truncated u32"))?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b).map_err(|_| self.bad("truncated u64"))?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 8 * n];
        self.r.read_exact(&mut buf).map_err(|_| self.bad("truncated f64 array"))?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn complexes(&mut self, n: usize) -> Result<Vec<Complex64>> {
        let raw = self.f64s(2 * n)?;
        Ok(raw.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).map_err(|_| self.bad("truncated bytes"))?;
        Ok(buf)
    }
}

fn open_sink(path: &Path, magic: &[u8; 4]) -> Result<Sink<BufWriter<std::fs::File>>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink = Sink { w: BufWriter::new(file), path: path.to_path_buf() };
    sink.bytes(magic)?;
    sink.u32(CONTAINER_VERSION)?;
    Ok(sink)
}

fn open_source(path: &Path, magic: &[u8; 4]) -> Result<Source<BufReader<std::fs::File>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut src = Source { r: BufReader::new(file), path: path.to_path_buf() };
    let got = src.bytes(4)?;
    if got != magic {
        return Err(src.bad(format!(
            "magic mismatch: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let version = src.u32()?;
    if version != CONTAINER_VERSION {
        return Err(src.bad(format!("unsupported version {version}")));
    }
    Ok(src)
}

/// Dictionary plus its SVD basis and the sequence that generated the atoms.
pub fn save_dictionary(path: &Path, dict: &Dictionary, basis: &SvdBasis) -> Result<()> {
    let d = dict.n_atoms();
    let l = dict.n_timeframes();
    let mut s = open_sink(path, MAGIC_DICTIONARY)?;
    s.u64(d as u64)?;
    s.u64(l as u64)?;
    s.u64(basis.k as u64)?;
    s.f64s(&[dict.seq.tr_ms, dict.seq.te_ms, dict.seq.ti_ms])?;
    s.f64s(&dict.seq.flip_angles_deg)?;
    s.f64s(&dict.grid.iter().map(|t| t.t1_ms).collect::<Vec<_>>())?;
    s.f64s(&dict.grid.iter().map(|t| t.t2_ms).collect::<Vec<_>>())?;
    s.complexes(&dict.atoms)?;
    s.complexes(&basis.v)?;
    s.f64s(&basis.singular_values)?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<(Dictionary, SvdBasis)> {
    let mut s = open_source(path, MAGIC_DICTIONARY)?;
    let d = s.u64()? as usize;
    let l = s.u64()? as usize;
    let k = s.u64()? as usize;
    let timing = s.f64s(3)?;
    let flips = s.f64s(l)?;
    let t1 = s.f64s(d)?;
    let t2 = s.f64s(d)?;
    let atoms = s.complexes(d * l)?;
    let v = s.complexes(l * k)?;
    let sigma = s.f64s(k)?;
    let seq = SequenceParams {
        flip_angles_deg: flips,
        tr_ms: timing[0],
        te_ms: timing[1],
        ti_ms: timing[2],
    };
    seq.validate()?;
    let grid = t1
        .into_iter()
        .zip(t2)
        .map(|(a, b)| TissueParams::new(a, b, Complex64::new(1.0, 0.0)))
        .collect();
    Ok((
        Dictionary { grid, atoms, seq },
        SvdBasis { v, k, n_timeframes: l, singular_values: sigma },
    ))
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut s = open_sink(path, MAGIC_TRAJECTORY)?;
    s.u64(traj.n_frames as u64)?;
    s.u64(traj.samples_per_frame as u64)?;
    let flat: Vec<f64> = traj.coords.iter().flat_map(|c| [c[0], c[1]]).collect();
    s.f64s(&flat)?;
    s.f64s(&traj.dcf)?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let mut s = open_source(path, MAGIC_TRAJECTORY)?;
    let l = s.u64()? as usize;
    let m = s.u64()? as usize;
    let flat = s.f64s(2 * l * m)?;
    let dcf = s.f64s(l * m)?;
    let coords = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let traj = Trajectory { coords, dcf, n_frames: l, samples_per_frame: m };
    traj.validate()?;
    Ok(traj)
}

pub fn save_kspace(path: &Path, y: &KSpaceData) -> Result<()> {
    let mut s = open_sink(path, MAGIC_KSPACE)?;
    s.u64(y.n_coils as u64)?;
    s.u64(y.n_frames as u64)?;
    s.u64(y.samples_per_frame as u64)?;
    s.complexes(&y.samples)?;
    Ok(())
}

pub fn load_kspace(path: &Path) -> Result<KSpaceData> {
    let mut s = open_source(path, MAGIC_KSPACE)?;
    let c = s.u64()? as usize;
    let l = s.u64()? as usize;
    let m = s.u64()? as usize;
    let samples = s.complexes(c * l * m)?;
    Ok(KSpaceData { samples, n_coils: c, n_frames: l, samples_per_frame: m })
}

/// Ordered named parameter groups (e.g. encoder then decoder) in one file.
pub fn save_param_groups(path: &Path, groups: &[&ParamSet]) -> Result<()> {
    let mut s = open_sink(path, MAGIC_MODEL)?;
    s.u64(groups.len() as u64)?;
    for set in groups {
        s.u64(set.params.len() as u64)?;
        for p in &set.params {
            s.u64(p.name.len() as u64)?;
            s.bytes(p.name.as_bytes())?;
            s.u64(p.shape.len() as u64)?;
            for &dim in &p.shape {
                s.u64(dim as u64)?;
            }
            s.f64s(&p.values)?;
        }
    }
    Ok(())
}

/// Restore parameter groups saved by [`save_param_groups`] into existing
/// sets; names and shapes must match.
pub fn load_param_groups(path: &Path, groups: &mut [&mut ParamSet]) -> Result<()> {
    let mut s = open_source(path, MAGIC_MODEL)?;
    let n_groups = s.u64()? as usize;
    if n_groups != groups.len() {
        return Err(s.bad(format!("expected {} parameter groups, file has {n_groups}", groups.len())));
    }
    for set in groups.iter_mut() {
        let n = s.u64()? as usize;
        if n != set.params.len() {
            return Err(s.bad(format!("group size {n} vs expected {}", set.params.len())));
        }
        for p in set.params.iter_mut() {
            let name_len = s.u64()? as usize;
            let name = String::from_utf8(s.bytes(name_len)?)
                .map_err(|_| s.bad("parameter name is not utf-8"))?;
            if name != p.name {
                return Err(s.bad(format!("parameter name {name} vs expected {}", p.name)));
            }
            let ndim = s.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(s.u64()? as usize);
            }
            if shape != p.shape {
                return Err(s.bad(format!("shape {shape:?} vs expected {:?} for {name}", p.shape)));
            }
            p.values = s.f64s(p.values.len())?;
        }
    }
    Ok(())
}

/// Quantitative maps: T1/T2/|PD|/phase planes plus the mask.
pub fn save_qmaps(
    path: &Path,
    qmaps: &[TissueParams],
    mask: &[bool],
    height: usize,
    width: usize,
) -> Result<()> {
    if qmaps.len() != height * width || mask.len() != qmaps.len() {
        return Err(Error::DimensionMismatch("qmaps buffer sizes".into()));
    }
    let mut s = open_sink(path, MAGIC_QMAPS)?;
    s.u64(height as u64)?;
    s.u64(width as u64)?;
    s.f64s(&qmaps.iter().map(|q| q.t1_ms).collect::<Vec<_>>())?;
    s.f64s(&qmaps.iter().map(|q| q.t2_ms).collect::<Vec<_>>())?;
    s.f64s(&qmaps.iter().map(|q| q.pd.norm()).collect::<Vec<_>>())?;
    s.f64s(&qmaps.iter().map(|q| q.pd.arg()).collect::<Vec<_>>())?;
    s.f64s(&mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<_>>())?;
    Ok(())
}

pub fn load_qmaps(path: &Path) -> Result<(Vec<TissueParams>, Vec<bool>, usize, usize)> {
    let mut s = open_source(path, MAGIC_QMAPS)?;
    let h = s.u64()? as usize;
    let w = s.u64()? as usize;
    let n = h * w;
    let t1 = s.f64s(n)?;
    let t2 = s.f64s(n)?;
    let mag = s.f64s(n)?;
    let phase = s.f64s(n)?;
    let mask_raw = s.f64s(n)?;
    let qmaps = (0..n)
        .map(|i| TissueParams::new(t1[i], t2[i], Complex64::from_polar(mag[i], phase[i])))
        .collect();
    Ok((qmaps, mask_raw.iter().map(|&v| v != 0.0).collect(), h, w))
}
