//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCLRCKPT" version:u32
//! config: u32 length + flat key/value text
//! state: pretrained:u8 adapted:u8 toggles:5 x u8
//! rng: seed:[u8; 32] stream:u64 word_pos:u128
//! params: u32 count, then per param
//!     name: u32 length + utf8, trainable:u8, rows:u32, cols:u32, rows*cols f64
//! banks: u32 count, then per bank
//!     width:u32 momentum:f64 exact:u8 warnings:u64 classes:u32,
//!     then per class count:u64 present:u8 [width f64]
//! ```
//!
//! Encoding is a pure function of the model, so equal models give equal bytes.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::{ExperimentConfig, LossToggles};
use crate::error::{Error, Result};
use crate::model::{McLrd, ModelState};
use crate::router::ClassWeightBank;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"MCLRCKPT";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> std::result::Result<bool, String> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(format!("bad flag byte {b}")),
        }
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

fn toggles_bytes(t: LossToggles) -> [bool; 5] {
    [t.cls, t.dd, t.rd, t.ac, t.ada]
}

/// Serialises the model together with the experiment config it was built from.
pub fn to_bytes(model: &McLrd, cfg: &ExperimentConfig) -> Result<Vec<u8>> {
    if cfg.model != model.cfg {
        return Err(Error::Config("checkpoint config does not match the model".into()));
    }
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.str(&cfg.to_flat_string());

    w.u8(model.state.pretrained as u8);
    w.u8(model.state.adapted_with.is_some() as u8);
    for b in toggles_bytes(model.state.adapted_with.unwrap_or_default()) {
        w.u8(b as u8);
    }

    w.0.extend_from_slice(&model.rng.get_seed());
    w.u64(model.rng.get_stream());
    w.0.extend_from_slice(&model.rng.get_word_pos().to_le_bytes());

    w.u32(model.store.len());
    for (_, p) in model.store.iter() {
        w.str(&p.name);
        w.u8(p.trainable as u8);
        w.u32(p.value.rows());
        w.u32(p.value.cols());
        for &x in p.value.data() {
            w.f64(x);
        }
    }

    w.u32(model.class_banks.len());
    for b in &model.class_banks {
        w.u32(b.width);
        w.f64(b.momentum);
        w.u8(b.exact as u8);
        w.u64(b.warnings);
        w.u32(b.classes());
        for c in 0..b.classes() {
            w.u64(b.count(c));
            match b.mean(c) {
                None => w.u8(0),
                Some(m) => {
                    w.u8(1);
                    for &x in m {
                        w.f64(x);
                    }
                }
            }
        }
    }
    Ok(w.0)
}

fn decode(bytes: &[u8]) -> std::result::Result<Result<(McLrd, ExperimentConfig)>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let cfg = match ExperimentConfig::from_flat_str(&r.str()?) {
        Ok(c) => c,
        Err(e) => return Ok(Err(e)),
    };
    let mut model = match McLrd::new(&cfg.model, 0) {
        Ok(m) => m,
        Err(e) => return Ok(Err(e)),
    };

    let pretrained = r.flag()?;
    let adapted = r.flag()?;
    let mut t = [false; 5];
    for b in &mut t {
        *b = r.flag()?;
    }
    model.state = ModelState {
        pretrained,
        adapted_with: adapted.then_some(LossToggles {
            cls: t[0],
            dd: t[1],
            rd: t[2],
            ac: t[3],
            ada: t[4],
        }),
    };

    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    model.rng = rng;

    let n = r.u32()?;
    if n != model.store.len() {
        return Err(format!("{n} parameters, config implies {}", model.store.len()));
    }
    for _ in 0..n {
        let name = r.str()?;
        let trainable = r.flag()?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let id = model.store.id(&name).ok_or_else(|| format!("unknown parameter {name}"))?;
        if model.store.value(id).shape() != (rows, cols) {
            return Err(format!("parameter {name} has shape {rows}x{cols}"));
        }
        let data = (0..rows * cols).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        *model.store.value_mut(id) = Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
        model.store.set_trainable(id, trainable);
    }

    let n = r.u32()?;
    if n != model.sites.len() {
        return Err(format!("{n} class banks for {} sites", model.sites.len()));
    }
    let mut banks = Vec::with_capacity(n);
    for _ in 0..n {
        let width = r.u32()?;
        let momentum = r.f64()?;
        let exact = r.flag()?;
        let warnings = r.u64()?;
        let classes = r.u32()?;
        let (mut means, mut counts) = (Vec::with_capacity(classes), Vec::with_capacity(classes));
        for _ in 0..classes {
            counts.push(r.u64()?);
            means.push(if r.flag()? {
                Some((0..width).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?)
            } else {
                None
            });
        }
        banks.push(ClassWeightBank::restore(width, momentum, exact, means, counts, warnings).map_err(|e| e.to_string())?);
    }
    model.class_banks = banks;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Ok((model, cfg)))
}

/// Inverse of [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<(McLrd, ExperimentConfig)> {
    decode(bytes).map_err(|reason| Error::Checkpoint {
        path: Default::default(),
        reason,
    })?
}

pub fn save(path: &Path, model: &McLrd, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(path, to_bytes(model, cfg)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(McLrd, ExperimentConfig)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })?
}
