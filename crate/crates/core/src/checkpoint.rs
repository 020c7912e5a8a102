//! Binary checkpoints.
//!
//! Layout, little-endian: magic `PVCK`, `u32` version, the 32-byte SHA-256
//! digest of the model config, `u32` block count, then per block a `u32`
//! name length, the UTF-8 name, a `u64` value count and that many `f64`s.
//! Blocks are `student/<param>`, `teacher/<param>`, `adam/step`,
//! `adam/m/<param>`, `adam/v/<param>` and `flags`.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{PiVadModel, StageFlags, Teacher};
use crate::nn::ParamStore;
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named `f64` blocks under a config digest.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub blocks: Vec<(String, Vec<f64>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(block: &str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        block: block.to_string(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, block: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(corrupt(
                block,
                format!(
                    "truncated: needs {n} bytes at offset {}, file has {}",
                    self.at,
                    self.bytes.len()
                ),
            ));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, block: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, block)?))
    }

    fn u64(&mut self, block: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, block)?))
    }
}

impl Checkpoint {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            digest: config.digest(),
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.blocks.push((name.into(), values));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name).ok_or_else(|| corrupt(name, "missing"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        LittleEndian::write_u32(&mut b4, CHECKPOINT_VERSION);
        out.extend_from_slice(&b4);
        out.extend_from_slice(&self.digest);
        LittleEndian::write_u32(&mut b4, self.blocks.len() as u32);
        out.extend_from_slice(&b4);
        for (name, values) in &self.blocks {
            LittleEndian::write_u32(&mut b4, name.len() as u32);
            out.extend_from_slice(&b4);
            out.extend_from_slice(name.as_bytes());
            LittleEndian::write_u64(&mut b8, values.len() as u64);
            out.extend_from_slice(&b8);
            for &v in values {
                LittleEndian::write_f64(&mut b8, v);
                out.extend_from_slice(&b8);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "header")? != CHECKPOINT_MAGIC {
            return Err(corrupt("header", "bad magic"));
        }
        let version = r.u32("header")?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt("header", format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32, "header")?.try_into().expect("32 bytes");
        let count = r.u32("header")?;
        let mut blocks = Vec::new();
        for i in 0..count {
            let unnamed = format!("#{i}");
            let len = r.u32(&unnamed)? as usize;
            let name = std::str::from_utf8(r.take(len, &unnamed)?)
                .map_err(|_| corrupt(&unnamed, "name is not UTF-8"))?
                .to_string();
            let n = r.u64(&name)?;
            let bytes = usize::try_from(n)
                .ok()
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| corrupt(&name, format!("value count {n} overflows")))?;
            let raw = r.take(bytes, &name)?;
            blocks.push((
                name,
                raw.chunks_exact(8).map(LittleEndian::read_f64).collect(),
            ));
        }
        if r.at != bytes.len() {
            return Err(corrupt(
                "trailer",
                format!("{} unexpected trailing bytes", bytes.len() - r.at),
            ));
        }
        Ok(Self { digest, blocks })
    }

    pub fn check_digest(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.digest();
        if self.digest != expected {
            return Err(Error::DigestMismatch {
                found: hex(&self.digest),
                expected: hex(&expected),
            });
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}/{}", p.name), p.value.data().to_vec());
        }
    }

    fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for p in store.params_mut() {
            let name = format!("{prefix}/{}", p.name);
            let values = self.require(&name)?;
            if values.len() != p.value.numel() {
                return Err(corrupt(
                    &name,
                    format!("{} values, parameter has {}", values.len(), p.value.numel()),
                ));
            }
            p.value.data_mut().copy_from_slice(values);
        }
        Ok(())
    }
}

/// Serializes a student, its teacher if attached, stage flags and an
/// optional optimizer state.
pub fn model_checkpoint(model: &PiVadModel, adam: Option<&AdamState>) -> Checkpoint {
    let mut ck = Checkpoint::new(&model.config);
    ck.push_store("student", &model.student);
    if let Some(t) = &model.teacher {
        ck.push_store("teacher", &t.store);
    }
    if let Some(a) = adam {
        ck.push("adam/step", vec![a.step as f64]);
        for (((_, p), m), v) in model.student.iter().zip(&a.m).zip(&a.v) {
            ck.push(format!("adam/m/{}", p.name), m.clone());
            ck.push(format!("adam/v/{}", p.name), v.clone());
        }
    }
    let f = model.flags;
    ck.push(
        "flags",
        vec![
            f64::from(u8::from(f.warmed)),
            f64::from(u8::from(f.trained)),
        ],
    );
    ck
}

pub fn save_checkpoint(model: &PiVadModel, adam: Option<&AdamState>, path: &Path) -> Result<()> {
    model_checkpoint(model, adam).write(path)
}

fn restore_teacher(ck: &Checkpoint, config: &ModelConfig) -> Result<Teacher> {
    let mut t = Teacher::new(config, 0)?;
    ck.fill_store("teacher", &mut t.store)?;
    Ok(t)
}

pub fn restore_model(
    ck: &Checkpoint,
    config: &ModelConfig,
) -> Result<(PiVadModel, Option<AdamState>)> {
    ck.check_digest(config)?;
    let mut model = PiVadModel::new(config, 0)?;
    ck.fill_store("student", &mut model.student)?;
    if ck.blocks.iter().any(|(n, _)| n.starts_with("teacher/")) {
        model.teacher = Some(restore_teacher(ck, config)?);
    }
    let flags = ck.require("flags")?;
    if flags.len() != 2 || flags.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(corrupt(
            "flags",
            format!("expected two 0/1 values, got {flags:?}"),
        ));
    }
    model.flags = StageFlags {
        warmed: flags[0] == 1.0,
        trained: flags[1] == 1.0,
    };
    let adam = match ck.get("adam/step") {
        None => None,
        Some(step) => {
            let mut a = AdamState::new(&model.student);
            a.step = match step {
                [s] if *s >= 0.0 && s.fract() == 0.0 => *s as u64,
                _ => return Err(corrupt("adam/step", format!("bad step {step:?}"))),
            };
            for (((_, p), m), v) in model.student.iter().zip(&mut a.m).zip(&mut a.v) {
                for (kind, buf) in [("m", m), ("v", v)] {
                    let name = format!("adam/{kind}/{}", p.name);
                    let values = ck.require(&name)?;
                    if values.len() != buf.len() {
                        return Err(corrupt(&name, "length does not match its parameter"));
                    }
                    buf.copy_from_slice(values);
                }
            }
            Some(a)
        }
    };
    Ok((model, adam))
}

pub fn load_checkpoint(
    path: &Path,
    config: &ModelConfig,
) -> Result<(PiVadModel, Option<AdamState>)> {
    restore_model(&Checkpoint::read(path)?, config)
}

pub fn teacher_checkpoint(teacher: &Teacher) -> Checkpoint {
    let mut ck = Checkpoint::new(&teacher.config);
    ck.push_store("teacher", &teacher.store);
    ck
}

pub fn save_teacher(teacher: &Teacher, path: &Path) -> Result<()> {
    teacher_checkpoint(teacher).write(path)
}

/// Reads the `teacher/` blocks of any checkpoint.
pub fn load_teacher(path: &Path, config: &ModelConfig) -> Result<Teacher> {
    let ck = Checkpoint::read(path)?;
    ck.check_digest(config)?;
    restore_teacher(&ck, config)
}
