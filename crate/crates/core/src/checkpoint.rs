//! Single-file checkpoint archive: named weight arrays, optimizer moments,
//! the diffusion schedule, the RNG cursor, and a config echo, behind a magic
//! header and version field. Loading verifies names and shapes loudly —
//! a checkpoint never silently reinterprets weights.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::Params;
use crate::training::TrainState;

const MAGIC: &[u8; 8] = b"WSRCKPT\0";
const VERSION: u32 = 1;

/// One stored array. Weights are f32; optimizer moments are f64.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// In-memory image of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    /// Resolved run configuration, stored as opaque text.
    pub config_echo: String,
    /// Schedule betas, 1-based order.
    pub betas: Vec<f64>,
    pub iteration: u64,
    pub noise_seed: u64,
    pub noise_counter: u64,
    pub opt_gen_step: u64,
    pub opt_disc_step: u64,
    /// Array groups: gen, disc, ema, opt_gen.m, opt_gen.v, opt_disc.m,
    /// opt_disc.v.
    pub groups: Vec<(String, Vec<NamedArray>)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&[NamedArray]> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, a)| a.as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, self.version);
        put_str(&mut buf, &self.config_echo);
        put_u32(&mut buf, self.betas.len() as u32);
        for b in &self.betas {
            buf.extend_from_slice(&b.to_le_bytes());
        }
        for v in [
            self.iteration,
            self.noise_seed,
            self.noise_counter,
            self.opt_gen_step,
            self.opt_disc_step,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut buf, self.groups.len() as u32);
        for (name, arrays) in &self.groups {
            put_str(&mut buf, name);
            put_u32(&mut buf, arrays.len() as u32);
            for a in arrays {
                put_str(&mut buf, &a.name);
                put_u32(&mut buf, a.shape.len() as u32);
                for d in &a.shape {
                    buf.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                match &a.data {
                    ArrayData::F32(v) => {
                        buf.push(0);
                        for x in v {
                            buf.extend_from_slice(&x.to_le_bytes());
                        }
                    }
                    ArrayData::F64(v) => {
                        buf.push(1);
                        for x in v {
                            buf.extend_from_slice(&x.to_le_bytes());
                        }
                    }
                }
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic (not a checkpoint file)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let config_echo = r.string()?;
        let n_betas = r.u32()? as usize;
        let mut betas = Vec::with_capacity(n_betas);
        for _ in 0..n_betas {
            betas.push(r.f64()?);
        }
        let iteration = r.u64()?;
        let noise_seed = r.u64()?;
        let noise_counter = r.u64()?;
        let opt_gen_step = r.u64()?;
        let opt_disc_step = r.u64()?;
        let n_groups = r.u32()? as usize;
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let gname = r.string()?;
            let n_arrays = r.u32()? as usize;
            let mut arrays = Vec::with_capacity(n_arrays);
            for _ in 0..n_arrays {
                let name = r.string()?;
                let ndim = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let numel: usize = shape.iter().product();
                let tag = r.take(1)?[0];
                let data = match tag {
                    0 => {
                        let raw = r.take(numel * 4)?;
                        ArrayData::F32(
                            raw.chunks_exact(4)
                                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                                .collect(),
                        )
                    }
                    1 => {
                        let raw = r.take(numel * 8)?;
                        ArrayData::F64(
                            raw.chunks_exact(8)
                                .map(|c| {
                                    f64::from_le_bytes([
                                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                                    ])
                                })
                                .collect(),
                        )
                    }
                    other => {
                        return Err(Error::Checkpoint(format!(
                            "{}: unknown dtype tag {other} for array '{name}'",
                            path.display()
                        )))
                    }
                };
                arrays.push(NamedArray { name, shape, data });
            }
            groups.push((gname, arrays));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes after checkpoint payload",
                path.display(),
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            config_echo,
            betas,
            iteration,
            noise_seed,
            noise_counter,
            opt_gen_step,
            opt_disc_step,
            groups,
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated (needed {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| {
            Error::Checkpoint(format!(
                "{}: invalid UTF-8 string at offset {}",
                self.path.display(),
                self.pos - n
            ))
        })
    }
}

/// Snapshot a parameter arena as f32 arrays in registration order.
pub fn params_to_arrays(params: &Params) -> Vec<NamedArray> {
    (0..params.len())
        .map(|i| NamedArray {
            name: params.name(i).to_string(),
            shape: params.tensor(i).shape().to_vec(),
            data: ArrayData::F32(params.tensor(i).data().to_vec()),
        })
        .collect()
}

/// Overwrite an arena's values from stored arrays. Every parameter must be
/// present with the exact shape; extra arrays are an error.
pub fn load_params_into(params: &mut Params, arrays: &[NamedArray], what: &str) -> Result<()> {
    let by_name: HashMap<&str, &NamedArray> =
        arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    if by_name.len() != arrays.len() {
        return Err(Error::Checkpoint(format!("{what}: duplicate array names")));
    }
    if arrays.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: checkpoint has {} arrays, model has {} parameters",
            arrays.len(),
            params.len()
        )));
    }
    for i in 0..params.len() {
        let name = params.name(i).to_string();
        let arr = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("{what}: missing array for parameter '{name}'"))
        })?;
        if arr.shape != params.tensor(i).shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: parameter '{name}' has shape {:?}, checkpoint stores {:?}",
                params.tensor(i).shape(),
                arr.shape
            )));
        }
        match &arr.data {
            ArrayData::F32(v) => params.set_data(i, v.clone()),
            ArrayData::F64(_) => {
                return Err(Error::Checkpoint(format!(
                    "{what}: parameter '{name}' stored as f64, expected f32 weights"
                )))
            }
        }
    }
    Ok(())
}

/// Snapshot optimizer moment buffers, named after their parameters.
fn moments_to_arrays(params: &Params, moments: &[Vec<f64>]) -> Vec<NamedArray> {
    moments
        .iter()
        .enumerate()
        .map(|(i, m)| NamedArray {
            name: params.name(i).to_string(),
            shape: params.tensor(i).shape().to_vec(),
            data: ArrayData::F64(m.clone()),
        })
        .collect()
}

fn arrays_to_moments(params: &Params, arrays: &[NamedArray], what: &str) -> Result<Vec<Vec<f64>>> {
    if arrays.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: {} moment arrays for {} parameters",
            arrays.len(),
            params.len()
        )));
    }
    let mut out = Vec::with_capacity(arrays.len());
    for (i, arr) in arrays.iter().enumerate() {
        if arr.name != params.name(i) || arr.shape != params.tensor(i).shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: moment array {i} is '{}' {:?}, expected '{}' {:?}",
                arr.name,
                arr.shape,
                params.name(i),
                params.tensor(i).shape()
            )));
        }
        match &arr.data {
            ArrayData::F64(v) => out.push(v.clone()),
            ArrayData::F32(_) => {
                return Err(Error::Checkpoint(format!(
                    "{what}: moment array '{}' stored as f32, expected f64",
                    arr.name
                )))
            }
        }
    }
    Ok(out)
}

/// Capture a full training state (plus the caller's config echo) as a
/// checkpoint image.
pub fn snapshot_train_state(state: &TrainState, config_echo: &str) -> Checkpoint {
    let (g_step, g_m, g_v) = state.opt_gen.state();
    let (d_step, d_m, d_v) = state.opt_disc.state();
    Checkpoint {
        version: VERSION,
        config_echo: config_echo.to_string(),
        betas: state.schedule.betas().to_vec(),
        iteration: state.iteration,
        noise_seed: state.noise.seed(),
        noise_counter: state.noise.counter(),
        opt_gen_step: g_step,
        opt_disc_step: d_step,
        groups: vec![
            ("gen".into(), params_to_arrays(&state.gen_params)),
            ("disc".into(), params_to_arrays(&state.disc_params)),
            ("ema".into(), params_to_arrays(&state.ema_params)),
            ("opt_gen.m".into(), moments_to_arrays(&state.gen_params, g_m)),
            ("opt_gen.v".into(), moments_to_arrays(&state.gen_params, g_v)),
            ("opt_disc.m".into(), moments_to_arrays(&state.disc_params, d_m)),
            ("opt_disc.v".into(), moments_to_arrays(&state.disc_params, d_v)),
        ],
    }
}

/// Restore weights, moments, iteration, and RNG cursor into a freshly
/// constructed state. The state's schedule must carry bit-identical betas.
pub fn restore_train_state(ckpt: &Checkpoint, state: &mut TrainState) -> Result<()> {
    if ckpt.betas != state.schedule.betas() {
        return Err(Error::Checkpoint(format!(
            "schedule mismatch: checkpoint has {} betas {:?}, state has {:?}",
            ckpt.betas.len(),
            ckpt.betas,
            state.schedule.betas()
        )));
    }
    let need = |name: &str| -> Result<&[NamedArray]> {
        ckpt.group(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing group '{name}'")))
    };
    load_params_into(&mut state.gen_params, need("gen")?, "gen")?;
    load_params_into(&mut state.disc_params, need("disc")?, "disc")?;
    load_params_into(&mut state.ema_params, need("ema")?, "ema")?;
    let g_m = arrays_to_moments(&state.gen_params, need("opt_gen.m")?, "opt_gen.m")?;
    let g_v = arrays_to_moments(&state.gen_params, need("opt_gen.v")?, "opt_gen.v")?;
    state.opt_gen.restore(ckpt.opt_gen_step, g_m, g_v)?;
    let d_m = arrays_to_moments(&state.disc_params, need("opt_disc.m")?, "opt_disc.m")?;
    let d_v = arrays_to_moments(&state.disc_params, need("opt_disc.v")?, "opt_disc.v")?;
    state.opt_disc.restore(ckpt.opt_disc_step, d_m, d_v)?;
    state.iteration = ckpt.iteration;
    state.noise = crate::rng::NoiseState::restore(ckpt.noise_seed, ckpt.noise_counter);
    Ok(())
}
