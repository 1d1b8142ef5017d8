//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic     8 bytes   "DRLCKPT1"
//! version   u32
//! count     u32       number of sections
//! section × count:
//!   name_len  u16
//!   name      name_len bytes, UTF-8
//!   kind      u8        1 = f64 tensor, 2 = raw bytes
//!   ndim      u8        2 for tensors, 0 for bytes
//!   dims      u64 × ndim
//!   len       u64       payload length in bytes
//!   payload   len bytes (tensors: row-major f64)
//! crc32     u32       over every preceding byte
//! ```
//!
//! A trainer checkpoint starts with a `manifest` section (JSON: step,
//! configuration, masks, RNG and optimizer counters), followed by `runlog`
//! (the NDJSON log so far) and the tensors `param/<k>`, `adam/m/<k>`,
//! `adam/v/<k>`, `stats/frequency` and `stats/importance`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunLog, TrainConfig, Trainer};
use crate::adapters::MaskedLoraAdapter;
use crate::analysis::CovarianceAccumulator;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, RngState};
use crate::saliency::ExpertStatistics;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRLCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 1;
const KIND_BYTES: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum SectionData {
    Tensor(Matrix),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: SectionData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<Section>,
}

impl Container {
    pub fn push_tensor(&mut self, name: impl Into<String>, m: &Matrix) {
        self.sections.push(Section {
            name: name.into(),
            data: SectionData::Tensor(m.clone()),
        });
    }

    pub fn push_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.sections.push(Section {
            name: name.into(),
            data: SectionData::Bytes(bytes),
        });
    }

    fn find(&self, name: &str) -> Result<&SectionData> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.data)
            .ok_or_else(|| Error::io(0, format!("missing section {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        match self.find(name)? {
            SectionData::Tensor(m) => Ok(m),
            SectionData::Bytes(_) => Err(Error::io(0, format!("section {name:?} is not a tensor"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.find(name)? {
            SectionData::Bytes(b) => Ok(b),
            SectionData::Tensor(_) => Err(Error::io(0, format!("section {name:?} is not a byte section"))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = u32::try_from(self.sections.len()).map_err(|_| Error::io(0, "too many sections"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for s in &self.sections {
            let name = s.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::io(out.len() as u64, "section name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            match &s.data {
                SectionData::Tensor(m) => {
                    out.push(KIND_TENSOR);
                    out.push(2);
                    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
                    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
                    out.extend_from_slice(&((m.data().len() * 8) as u64).to_le_bytes());
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                SectionData::Bytes(b) => {
                    out.push(KIND_BYTES);
                    out.push(0);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Decodes a container; every failure reports the byte offset.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = CHECKPOINT_MAGIC.len() + 8;
        if bytes.len() < header + 4 {
            return Err(Error::io(bytes.len() as u64, "truncated checkpoint"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(Error::io(body_end as u64, "checksum mismatch"));
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: 0,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::io(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::io(8, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::io(start as u64 + 2, "section name is not UTF-8"))?
                .to_owned();
            let kind_at = r.pos;
            let kind = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u64()?);
            }
            let len_at = r.pos;
            let len = r.u64()?;
            let payload = r.take_u64(len)?;
            let data = match (kind, ndim) {
                (KIND_TENSOR, 2) => {
                    let elems = dims[0]
                        .checked_mul(dims[1])
                        .and_then(|n| n.checked_mul(8))
                        .ok_or_else(|| Error::io(len_at as u64, "tensor size overflows"))?;
                    if elems != len {
                        return Err(Error::io(len_at as u64, "tensor payload length does not match its shape"));
                    }
                    let data = payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    let m = Matrix::from_vec(dims[0] as usize, dims[1] as usize, data)
                        .map_err(|e| Error::io(len_at as u64 + 8, e.to_string()))?;
                    SectionData::Tensor(m)
                }
                (KIND_BYTES, 0) => SectionData::Bytes(payload.to_vec()),
                _ => return Err(Error::io(kind_at as u64, format!("bad section kind {kind} with {ndim} dims"))),
            };
            sections.push(Section { name, data });
        }
        if r.pos != body_end {
            return Err(Error::io(r.pos as u64, "trailing bytes after last section"));
        }
        Ok(Self { sections })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::io(self.pos as u64, format!("need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self, n: u64) -> Result<&'a [u8]> {
        let n = usize::try_from(n).map_err(|_| Error::io(self.pos as u64, "length does not fit in memory"))?;
        self.take(n)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: u64,
    config: TrainConfig,
    /// `[layer][expert]` → (up mask, down mask).
    masks: Vec<Vec<(Vec<bool>, Vec<bool>)>>,
    train_stream: RngState,
    growth_rng: RngState,
    alloc_rng: RngState,
    optimizer_step: u64,
    optimizer_param_steps: Vec<u64>,
    optimizer_lr: f64,
    stats_steps: u64,
    covariance: Vec<Vec<CovarianceAccumulator>>,
}

fn json_err(e: serde_json::Error) -> Error {
    Error::io(0, format!("bad manifest: {e}"))
}

impl Trainer {
    pub fn to_container(&self) -> Result<Container> {
        let net = &self.net;
        let masks = net
            .blocks
            .iter()
            .map(|b| {
                b.experts
                    .iter()
                    .map(|e| (e.up.mask().to_vec(), e.down.mask().to_vec()))
                    .collect()
            })
            .collect();
        let manifest = Manifest {
            step: self.step,
            config: self.config.clone(),
            masks,
            train_stream: self.train_gen.stream().state(),
            growth_rng: self.growth_rng.state(),
            alloc_rng: self.alloc_rng.state(),
            optimizer_step: self.optimizer.step,
            optimizer_param_steps: self.optimizer.param_steps.clone(),
            optimizer_lr: self.optimizer.config.lr,
            stats_steps: self.stats.steps(),
            covariance: self.covariance.clone(),
        };
        let mut c = Container::default();
        c.push_bytes("manifest", serde_json::to_vec(&manifest).map_err(json_err)?);
        c.push_bytes("runlog", self.log.to_ndjson()?.into_bytes());
        for (k, p) in net.params().into_iter().enumerate() {
            c.push_tensor(format!("param/{k}"), p);
        }
        for (k, (m, v)) in self.optimizer.first_moment.iter().zip(&self.optimizer.second_moment).enumerate() {
            c.push_tensor(format!("adam/m/{k}"), m);
            c.push_tensor(format!("adam/v/{k}"), v);
        }
        let (layers, experts, r_max) = self.stats.shape();
        let freq = Matrix::from_vec(layers, experts, self.stats.frequency_table().to_vec())?;
        let imp = Matrix::from_vec(layers * experts, r_max, self.stats.importance_table().to_vec())?;
        c.push_tensor("stats/frequency", &freq);
        c.push_tensor("stats/importance", &imp);
        Ok(c)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_container()?.encode()?;
        std::fs::write(path.as_ref(), bytes)
            .map_err(|e| Error::io(0, format!("cannot write {}: {e}", path.as_ref().display())))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(c.bytes("manifest")?).map_err(json_err)?;
        let mut trainer = Trainer::new(manifest.config.clone())?;
        let cfg = manifest.config;
        let (l_n, n_n) = (cfg.model.layers, cfg.model.experts);

        let n_params = trainer.net.params().len();
        let mut params = Vec::with_capacity(n_params);
        for k in 0..n_params {
            params.push(c.tensor(&format!("param/{k}"))?.clone());
        }
        for (k, (dst, src)) in trainer.net.params_mut().into_iter().zip(&params).enumerate() {
            if dst.shape() != src.shape() {
                return Err(Error::io(0, format!("param/{k} has shape {:?}, expected {:?}", src.shape(), dst.shape())));
            }
            *dst = src.clone();
        }
        if manifest.masks.len() != l_n || manifest.masks.iter().any(|l| l.len() != n_n) {
            return Err(Error::io(0, "mask table does not match the model"));
        }
        for (block, masks) in trainer.net.blocks.iter_mut().zip(&manifest.masks) {
            for (e, (up, down)) in block.experts.iter_mut().zip(masks) {
                let restore = |a: &MaskedLoraAdapter, mask: &Vec<bool>| {
                    MaskedLoraAdapter::from_parts(a.a().clone(), a.b().clone(), mask.clone(), a.scaling(), a.limits())
                };
                let new_up = restore(&e.up, up)?;
                let new_down = restore(&e.down, down)?;
                if new_up.rank() != new_down.rank() {
                    return Err(Error::io(0, "up and down adapter ranks differ"));
                }
                e.up = new_up;
                e.down = new_down;
            }
        }

        let opt = &mut trainer.optimizer;
        if manifest.optimizer_param_steps.len() != n_params {
            return Err(Error::io(0, "optimizer step table does not match the model"));
        }
        for k in 0..n_params {
            let m = c.tensor(&format!("adam/m/{k}"))?;
            let v = c.tensor(&format!("adam/v/{k}"))?;
            if m.shape() != params[k].shape() || v.shape() != params[k].shape() {
                return Err(Error::io(0, format!("adam moments {k} do not match the parameter")));
            }
            opt.first_moment[k] = m.clone();
            opt.second_moment[k] = v.clone();
        }
        opt.param_steps = manifest.optimizer_param_steps;
        opt.step = manifest.optimizer_step;
        opt.config.lr = manifest.optimizer_lr;

        let freq = c.tensor("stats/frequency")?;
        let imp = c.tensor("stats/importance")?;
        trainer.stats = ExpertStatistics::from_parts(
            cfg.saliency,
            l_n,
            n_n,
            cfg.ranks.r_max,
            freq.data().to_vec(),
            imp.data().to_vec(),
            manifest.stats_steps,
        )?;

        if manifest.covariance.len() != l_n || manifest.covariance.iter().any(|l| l.len() != n_n) {
            return Err(Error::io(0, "covariance table does not match the model"));
        }
        trainer.covariance = manifest.covariance;
        trainer.train_gen.set_stream(Rng::from_state(&manifest.train_stream)?);
        trainer.growth_rng = Rng::from_state(&manifest.growth_rng)?;
        trainer.alloc_rng = Rng::from_state(&manifest.alloc_rng)?;
        let log_text = std::str::from_utf8(c.bytes("runlog")?).map_err(|_| Error::io(0, "run log is not UTF-8"))?;
        trainer.log = RunLog::from_ndjson(log_text)?;
        if manifest.step > cfg.schedule.total_steps {
            return Err(Error::io(0, "checkpoint step beyond the end of training"));
        }
        trainer.step = manifest.step;
        Ok(trainer)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| Error::io(0, format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_container(&Container::decode(&bytes)?)
    }

    /// Loads a checkpoint written under `expected`; any configuration
    /// difference is a config error naming the first differing section.
    pub fn resume(path: impl AsRef<Path>, expected: &TrainConfig) -> Result<Self> {
        let trainer = Self::load_checkpoint(path)?;
        let got = &trainer.config;
        if got.model != expected.model {
            return Err(Error::config(
                "model",
                format!("checkpoint model {:?} differs from {:?}", got.model, expected.model),
            ));
        }
        if got != expected {
            return Err(Error::config("train", "checkpoint was written under a different configuration"));
        }
        Ok(trainer)
    }
}
