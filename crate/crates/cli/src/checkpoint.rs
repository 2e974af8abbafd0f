//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic "ECGT", format version u32,
//!   config JSON (len u32 + bytes), config hash (len u32 + hex bytes),
//!   step u64, epoch u32, best_val f64 bits, rng seed u64,
//!   named tensor table: count u32, then per tensor
//!     name (len u32 + bytes), no_decay u8, ndim u8, dims u64 each, f32 payload,
//!   optimizer flag u8; when 1: adam step u64 then m and v payloads per tensor.
//!
//! A reload plus one forward pass reproduces the pre-save forward bitwise.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ecgtext_core::model::{Model, ModelConfig};
use ecgtext_core::nn::ParamSet;
use ecgtext_core::optim::AdamW;
use ecgtext_core::tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::corpus_io::hex_string;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"ECGT";
pub const VERSION: u32 = 1;

/// Everything needed to restore a model (and optionally resume the optimizer).
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    pub epoch: u32,
    pub best_val: f64,
    pub rng_seed: u64,
    pub params: ParamSet<f32>,
    pub opt: Option<AdamW<f32>>,
}

/// Stable hash of the canonical config JSON (first 16 hex chars).
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    hex_string(&h.finalize())[..16].to_string()
}

fn write_tensor(w: &mut impl Write, t: &Tensor<f32>) -> io::Result<()> {
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn corrupt(msg: impl std::fmt::Display) -> CliError {
    CliError::data(format!("corrupt checkpoint: {msg}"))
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = io::BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg_json = serde_json::to_vec(&ckpt.config)?;
        w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
        w.write_all(&cfg_json)?;
        let hash = ckpt.config_hash.as_bytes();
        w.write_all(&(hash.len() as u32).to_le_bytes())?;
        w.write_all(hash)?;
        w.write_all(&ckpt.step.to_le_bytes())?;
        w.write_all(&ckpt.epoch.to_le_bytes())?;
        w.write_all(&ckpt.best_val.to_bits().to_le_bytes())?;
        w.write_all(&ckpt.rng_seed.to_le_bytes())?;

        w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
        for e in ckpt.params.entries() {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[u8::from(e.no_decay)])?;
            w.write_all(&[e.value.shape().len() as u8])?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_tensor(&mut w, &e.value)?;
        }
        match &ckpt.opt {
            Some(opt) => {
                w.write_all(&[1u8])?;
                w.write_all(&opt.step.to_le_bytes())?;
                for m in &opt.m {
                    write_tensor(&mut w, m)?;
                }
                for v in &opt.v {
                    write_tensor(&mut w, v)?;
                }
            }
            None => w.write_all(&[0u8])?,
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> CliResult<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| corrupt("unexpected end of file"))?;
        Ok(buf)
    }
    fn u8(&mut self) -> CliResult<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> CliResult<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> CliResult<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn string(&mut self) -> CliResult<String> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(corrupt("oversized string"));
        }
        String::from_utf8(self.bytes(n)?).map_err(|_| corrupt("invalid utf-8"))
    }
    fn f32_tensor(&mut self, shape: Vec<usize>) -> CliResult<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::from_vec(shape, data).map_err(|e| corrupt(e))
    }
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut r = Reader { inner: io::BufReader::new(file) };
    if r.bytes(4)? != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::data(format!(
            "checkpoint format version {version} unsupported (expected {VERSION})"
        )));
    }
    let cfg_json = r.string()?;
    let config: ModelConfig = serde_json::from_str(&cfg_json)?;
    let config_hash = r.string()?;
    let step = r.u64()?;
    let epoch = r.u32()?;
    let best_val = f64::from_bits(r.u64()?);
    let rng_seed = r.u64()?;

    let n_params = r.u32()? as usize;
    let mut params = ParamSet::new();
    let mut shapes = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let no_decay = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let value = r.f32_tensor(shape.clone())?;
        shapes.push(shape);
        params.add(name, value, no_decay);
    }
    let opt = if r.u8()? == 1 {
        let mut opt = AdamW::new(&params);
        opt.step = r.u64()?;
        for (i, shape) in shapes.iter().enumerate() {
            opt.m[i] = r.f32_tensor(shape.clone())?;
        }
        for (i, shape) in shapes.iter().enumerate() {
            opt.v[i] = r.f32_tensor(shape.clone())?;
        }
        Some(opt)
    } else {
        None
    };
    Ok(Checkpoint { config, config_hash, step, epoch, best_val, rng_seed, params, opt })
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        opt: Option<&AdamW<f32>>,
        step: u64,
        epoch: u32,
        best_val: f64,
        rng_seed: u64,
    ) -> Self {
        Checkpoint {
            config: model.cfg.clone(),
            config_hash: config_hash(&model.cfg),
            step,
            epoch,
            best_val,
            rng_seed,
            params: model.params.clone(),
            opt: opt.cloned(),
        }
    }

    /// Rebuild the model: wiring from the stored config, weights from the
    /// stored tensors. Every parameter name must match.
    pub fn build_model(&self) -> CliResult<Model<f32>> {
        let mut model: Model<f32> = Model::init(&self.config, self.rng_seed)
            .map_err(CliError::from)?;
        if model.params.len() != self.params.len() {
            return Err(corrupt(format!(
                "parameter count {} does not match config ({})",
                self.params.len(),
                model.params.len()
            )));
        }
        let copied = model.params.copy_matching(&self.params).map_err(CliError::from)?;
        if copied != model.params.len() {
            return Err(corrupt(format!(
                "only {copied} of {} parameters matched by name",
                model.params.len()
            )));
        }
        Ok(model)
    }

    /// Guard for eval/resume against a different configuration.
    pub fn verify_config_hash(&self, expected: &str) -> CliResult<()> {
        if self.config_hash != expected {
            return Err(CliError::data(format!(
                "config hash mismatch: checkpoint {} vs requested {}",
                self.config_hash, expected
            )));
        }
        Ok(())
    }
}
