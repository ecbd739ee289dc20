//! Versioned binary checkpoints: parameters (plus optimizer state for
//! resumable adaptation), the detector config needed to rebuild the model,
//! the epoch index, and the experiment config hash for provenance.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::detector::{DetectorModel, ParamSet};
use crate::error::{Error, Result};
use crate::toy::{ToyDetector, ToyDetectorConfig};

const MAGIC: &[u8; 4] = b"SFDC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointKind {
    /// A single source-pretrained model.
    Pretrained { params: ParamSet },
    /// Mid-adaptation state: student, teacher, and optimizer velocity.
    AdaptState {
        student: ParamSet,
        teacher: ParamSet,
        velocity: Option<ParamSet>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub detector_config: ToyDetectorConfig,
    /// Epochs completed when this checkpoint was written.
    pub epoch: u32,
    pub kind: CheckpointKind,
}

impl Checkpoint {
    /// Rebuild a detector carrying `params`.
    fn build(&self, params: &ParamSet) -> Result<ToyDetector> {
        let mut model = ToyDetector::new(self.detector_config.clone(), 0)?;
        model.set_params(params)?;
        Ok(model)
    }

    /// The model to evaluate / adapt from: the pretrained model, or the
    /// student of an adaptation state.
    pub fn primary_model(&self) -> Result<ToyDetector> {
        match &self.kind {
            CheckpointKind::Pretrained { params } => self.build(params),
            CheckpointKind::AdaptState { student, .. } => self.build(student),
        }
    }

    pub fn teacher_model(&self) -> Result<Option<ToyDetector>> {
        match &self.kind {
            CheckpointKind::Pretrained { .. } => Ok(None),
            CheckpointKind::AdaptState { teacher, .. } => Ok(Some(self.build(teacher)?)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_u32(&mut buf, VERSION);
        write_bytes(&mut buf, self.config_hash.as_bytes());
        let det_json = serde_json::to_vec(&self.detector_config)?;
        write_bytes(&mut buf, &det_json);
        write_u32(&mut buf, self.epoch);
        match &self.kind {
            CheckpointKind::Pretrained { params } => {
                buf.push(1);
                write_params(&mut buf, params);
            }
            CheckpointKind::AdaptState {
                student,
                teacher,
                velocity,
            } => {
                buf.push(2);
                write_params(&mut buf, student);
                write_params(&mut buf, teacher);
                match velocity {
                    Some(v) => {
                        buf.push(1);
                        write_params(&mut buf, v);
                    }
                    None => buf.push(0),
                }
            }
        }
        crate::experiments::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path)
            .map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)
            .map_err(|e| Error::io("reading checkpoint", e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };

        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = cur.read_u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_hash = String::from_utf8(cur.read_bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("config hash is not utf-8".into()))?;
        let detector_config: ToyDetectorConfig = serde_json::from_slice(cur.read_bytes()?)?;
        let epoch = cur.read_u32()?;
        let kind = match cur.read_u8()? {
            1 => CheckpointKind::Pretrained {
                params: cur.read_params()?,
            },
            2 => {
                let student = cur.read_params()?;
                let teacher = cur.read_params()?;
                let velocity = match cur.read_u8()? {
                    0 => None,
                    1 => Some(cur.read_params()?),
                    other => {
                        return Err(Error::Checkpoint(format!(
                            "bad velocity tag {other}"
                        )))
                    }
                };
                CheckpointKind::AdaptState {
                    student,
                    teacher,
                    velocity,
                }
            }
            other => return Err(Error::Checkpoint(format!("bad kind tag {other}"))),
        };
        Ok(Checkpoint {
            config_hash,
            detector_config,
            epoch,
            kind,
        })
    }
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    write_u32(buf, bytes.len() as u32);
    buf.extend_from_slice(bytes);
}

fn write_params(buf: &mut Vec<u8>, params: &ParamSet) {
    write_u32(buf, params.arrays.len() as u32);
    for a in &params.arrays {
        write_u32(buf, a.ndim() as u32);
        for d in a.shape() {
            write_u32(buf, *d as u32);
        }
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.read_u32()? as usize;
        self.take(n)
    }

    fn read_f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn read_params(&mut self) -> Result<ParamSet> {
        let n_arrays = self.read_u32()? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let ndim = self.read_u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(self.read_u32()? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(self.read_f64()?);
            }
            arrays.push(
                ArrayD::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))?,
            );
        }
        Ok(ParamSet::new(arrays))
    }
}

/// Atomic write-then-rename used for all artifacts.
pub(crate) fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)
            .map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(bytes)
            .map_err(|e| Error::io("writing artifact", e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}
