//! Binary dataset container and its key=value manifest sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{ensure, LssError, Result};
use crate::field::{CellKind, FlagGrid, MacField2, ScalarField};

use super::{ControlTrack, DatasetManifest, Frame, SceneKind, SceneSequence};

const MAGIC: &[u8; 4] = b"LSSD";
const VERSION: u16 = 1;
pub(crate) const HEADER_BYTES: usize = 24;

pub(crate) fn frame_bytes(n_sp: usize, w: usize, h: usize) -> usize {
    4 * (n_sp + (w + 1) * h + w * (h + 1) + w * h) + w * h
}

/// `<path>.manifest`
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes all scenes plus a manifest sidecar. Scenes must share kind,
/// resolution and frame count.
pub fn write_dataset(path: &Path, sequences: &[SceneSequence]) -> Result<()> {
    ensure!(!sequences.is_empty(), "cannot write an empty dataset");
    let first = &sequences[0];
    let manifest = DatasetManifest::from_sequences(sequences, &first.kind.solver_config())?;
    write_dataset_with(path, sequences, &manifest)
}

/// Like [`write_dataset`] but with a caller-built manifest, e.g. one that
/// records a non-default solver configuration.
pub fn write_dataset_with(path: &Path, sequences: &[SceneSequence], manifest: &DatasetManifest) -> Result<()> {
    ensure!(!sequences.is_empty(), "cannot write an empty dataset");
    let first = &sequences[0];
    let (w, h) = first.dims();
    let n_sp = first.kind.n_controls();
    for s in sequences {
        s.validate()?;
        ensure!(
            s.kind == first.kind && s.dims() == (w, h) && s.len() == first.len(),
            "scenes in one dataset must share kind, resolution and frame count"
        );
    }
    let mut buf = Vec::with_capacity(HEADER_BYTES + sequences.len() * first.len() * frame_bytes(n_sp, w, h));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(first.kind.code());
    buf.push(n_sp as u8);
    for v in [w, h, first.len(), sequences.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in sequences {
        for (k, f) in s.frames.iter().enumerate() {
            put_f32s(&mut buf, s.controls.frame(k));
            put_f32s(&mut buf, &f.u.u_x);
            put_f32s(&mut buf, &f.u.u_y);
            put_f32s(&mut buf, f.rho.data());
            buf.extend(f.flags.labels().iter().map(|&c| (c == CellKind::Solid) as u8));
        }
    }
    fs::write(path, &buf)?;
    fs::write(manifest_path(path), manifest.to_text())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::parse(&fs::read_to_string(manifest_path(path))?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos;
        let out: Vec<f64> =
            self.take(4 * n).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if let Some(k) = out.iter().position(|v| !v.is_finite()) {
            return Err(parse_err(start + 4 * k, "non-finite value"));
        }
        Ok(out)
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> LssError {
    LssError::Parse { offset: offset as u64, message: message.into() }
}

/// Reads a dataset written by [`write_dataset`]. Scene seeds come from the
/// manifest sidecar when present and default to scene indices otherwise.
pub fn read_dataset(path: &Path) -> Result<Vec<SceneSequence>> {
    let bytes = fs::read(path)?;
    let mut seqs = decode(&bytes)?;
    match read_manifest(path) {
        Ok(m) if m.seeds.len() == seqs.len() => {
            for (s, seed) in seqs.iter_mut().zip(m.seeds) {
                s.seed = seed;
            }
        }
        Ok(_) => log::warn!("manifest seed list does not match {}", path.display()),
        Err(LssError::Io(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(seqs)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Vec<SceneSequence>> {
    if bytes.len() < HEADER_BYTES {
        return Err(LssError::Length { expected: HEADER_BYTES as u64, actual: bytes.len() as u64 });
    }
    if &bytes[0..4] != MAGIC {
        return Err(parse_err(0, "bad magic, not a dataset file"));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = u16::from_le_bytes(cur.take(2).try_into().unwrap());
    if version != VERSION {
        return Err(parse_err(4, format!("unsupported version {version}")));
    }
    let code = cur.take(1)[0];
    let kind = SceneKind::from_code(code).ok_or_else(|| parse_err(6, format!("unknown scene kind {code}")))?;
    let n_sp = cur.take(1)[0] as usize;
    if n_sp != kind.n_controls() {
        return Err(parse_err(7, format!("{kind} has {} controls, header says {n_sp}", kind.n_controls())));
    }
    let w = cur.u32() as usize;
    let h = cur.u32() as usize;
    if w < 3 || h < 3 {
        return Err(parse_err(8, format!("resolution {w}x{h} is too small")));
    }
    let frames = cur.u32() as usize;
    if frames == 0 {
        return Err(parse_err(16, "frame count is zero"));
    }
    let scenes = cur.u32() as usize;
    let expected = (HEADER_BYTES as u64)
        .saturating_add((scenes as u64).saturating_mul(frames as u64).saturating_mul(frame_bytes(n_sp, w, h) as u64));
    if bytes.len() as u64 != expected {
        return Err(LssError::Length { expected, actual: bytes.len() as u64 });
    }

    let mut seqs = Vec::with_capacity(scenes);
    for s in 0..scenes {
        let mut controls = Vec::with_capacity(frames * n_sp);
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            let ctl_at = cur.pos;
            let c = cur.f32s(n_sp)?;
            if c.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(parse_err(ctl_at, "control value outside [-1, 1]"));
            }
            controls.extend(c);
            let ux = cur.f32s((w + 1) * h)?;
            let uy = cur.f32s(w * (h + 1))?;
            let rho = cur.f32s(w * h)?;
            let flags_at = cur.pos;
            let labels = cur
                .take(w * h)
                .iter()
                .enumerate()
                .map(|(k, &b)| match b {
                    0 => Ok(CellKind::Fluid),
                    1 => Ok(CellKind::Solid),
                    _ => Err(parse_err(flags_at + k, format!("invalid flag byte {b}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let flags = FlagGrid::from_labels(w, h, labels).map_err(|e| parse_err(flags_at, e.to_string()))?;
            out.push(Frame {
                u: MacField2::from_vecs(w, h, ux, uy)?,
                rho: ScalarField::from_vec(w, h, rho)?,
                flags,
            });
        }
        seqs.push(SceneSequence {
            kind,
            frames: out,
            controls: ControlTrack::new(n_sp, controls)?,
            seed: s as u64,
        });
    }
    Ok(seqs)
}
