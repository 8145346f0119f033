//! Checkpoint container: architecture metadata plus named 32-bit tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{LssError, Result};
use crate::field::{mac_to_center, CenterVelocity, FieldTensor, MacField2, ScalarField};

use super::model::{NetConfig, Network};
use super::params::ParamStore;

const MAGIC: &[u8; 4] = b"LSSC";
const VERSION: u16 = 1;

/// Input scaling frozen at training time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    /// Largest face velocity magnitude over the training split.
    pub vel_scale: f64,
}

impl NormStats {
    /// Co-located network input: velocities divided by `vel_scale`, density
    /// unchanged.
    pub fn normalize(&self, u: &MacField2, rho: &ScalarField) -> Result<FieldTensor> {
        let mut vel = mac_to_center(u);
        self.scale_velocity(&mut vel, 1.0 / self.vel_scale);
        FieldTensor::from_parts(&vel, rho)
    }

    pub fn normalize_center(&self, vel: &CenterVelocity, rho: &ScalarField) -> Result<FieldTensor> {
        let mut vel = vel.clone();
        self.scale_velocity(&mut vel, 1.0 / self.vel_scale);
        FieldTensor::from_parts(&vel, rho)
    }

    /// Physical velocity of a network output.
    pub fn denormalize_velocity(&self, x: &FieldTensor) -> CenterVelocity {
        let mut vel = x.velocity();
        self.scale_velocity(&mut vel, self.vel_scale);
        vel
    }

    fn scale_velocity(&self, vel: &mut CenterVelocity, s: f64) {
        vel.ux.data_mut().iter_mut().chain(vel.uy.data_mut().iter_mut()).for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub stats: NormStats,
    pub seed: u64,
    pub steps: u64,
    /// Free-form training metadata (config echo, scene kind, ...).
    pub extra: BTreeMap<String, String>,
}

fn metadata_text(ckpt: &Checkpoint) -> String {
    let c = &ckpt.net.cfg;
    let mut m: BTreeMap<String, String> = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("net.width", c.width.to_string());
    put("net.height", c.height.to_string());
    put("net.levels", c.levels.to_string());
    put("net.res_blocks", c.res_blocks.to_string());
    put("net.base_channels", c.base_channels.to_string());
    put("net.max_channels", c.max_channels.to_string());
    put("net.kernel", c.kernel.to_string());
    put("net.leaky_slope", c.leaky_slope.to_string());
    put("net.total_dim", c.total_dim.to_string());
    put("net.n_sp", c.n_sp.to_string());
    put("net.split_fraction", c.split_fraction.to_string());
    put("net.lstm_layers", c.lstm_layers.to_string());
    put("net.hidden", c.hidden.to_string());
    put("net.conv1d_channels", c.conv1d_channels.to_string());
    put("net.window", c.window.to_string());
    put("stats.vel_scale", ckpt.stats.vel_scale.to_string());
    put("meta.seed", ckpt.seed.to_string());
    put("meta.steps", ckpt.steps.to_string());
    for (k, v) in &ckpt.extra {
        m.insert(format!("extra.{k}"), v.replace('\n', " "));
    }
    m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_metadata(text: &str, offset: u64) -> Result<(NetConfig, NormStats, u64, u64, BTreeMap<String, String>)> {
    let perr = |message: String| LssError::Parse { offset, message };
    let mut m = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| perr(format!("metadata line '{line}' is not key=value")))?;
        m.insert(k.to_string(), v.to_string());
    }
    fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str, offset: u64) -> Result<T> {
        let v = m.get(k).ok_or_else(|| LssError::Parse { offset, message: format!("metadata lacks '{k}'") })?;
        v.parse().map_err(|_| LssError::Parse { offset, message: format!("metadata '{k}' is malformed: {v}") })
    }
    let cfg = NetConfig {
        width: get(&m, "net.width", offset)?,
        height: get(&m, "net.height", offset)?,
        levels: get(&m, "net.levels", offset)?,
        res_blocks: get(&m, "net.res_blocks", offset)?,
        base_channels: get(&m, "net.base_channels", offset)?,
        max_channels: get(&m, "net.max_channels", offset)?,
        kernel: get(&m, "net.kernel", offset)?,
        leaky_slope: get(&m, "net.leaky_slope", offset)?,
        total_dim: get(&m, "net.total_dim", offset)?,
        n_sp: get(&m, "net.n_sp", offset)?,
        split_fraction: get(&m, "net.split_fraction", offset)?,
        lstm_layers: get(&m, "net.lstm_layers", offset)?,
        hidden: get(&m, "net.hidden", offset)?,
        conv1d_channels: get(&m, "net.conv1d_channels", offset)?,
        window: get(&m, "net.window", offset)?,
    };
    let stats = NormStats { vel_scale: get(&m, "stats.vel_scale", offset)? };
    let extra = m
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok((cfg, stats, get(&m, "meta.seed", offset)?, get(&m, "meta.steps", offset)?, extra))
}

/// Serializes a checkpoint; parameter values are stored as 32-bit floats.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = metadata_text(ckpt);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(ckpt.net.params.len() as u32).to_le_bytes());
    for p in ckpt.net.params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.shape.len() as u8);
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(LssError::Length {
            expected: (self.pos + n) as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(LssError::Parse { offset: 0, message: "bad magic, not a checkpoint".into() });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(LssError::Parse { offset: 4, message: format!("unsupported checkpoint version {version}") });
    }
    let meta_len = r.u32()? as usize;
    let meta_at = r.pos as u64;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| LssError::Parse { offset: meta_at, message: "metadata is not UTF-8".into() })?;
    let (cfg, stats, seed, steps, extra) = parse_metadata(meta, meta_at)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| LssError::Parse { offset: at, message: "record name is not UTF-8".into() })?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params
            .insert(&name, shape, data)
            .map_err(|e| LssError::Parse { offset: at, message: e.to_string() })?;
    }
    if r.pos != bytes.len() {
        return Err(LssError::Parse { offset: r.pos as u64, message: "trailing bytes after last record".into() });
    }
    let records_end = r.pos as u64;
    let net = Network::from_parts(cfg, params).map_err(|e| match e {
        LssError::Contract(m) => LssError::Parse { offset: records_end, message: m },
        other => other,
    })?;
    Ok(Checkpoint { net, stats, seed, steps, extra })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
