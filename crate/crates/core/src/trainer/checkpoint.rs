//! Versioned binary checkpoints: `HXCK`, a u32 version, a u32 section count,
//! then named sections (`u16` name length, name, `u64` payload length,
//! payload). All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::TrainConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::{Hyper, OptimizerState, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"HXCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Meta,
}

/// Where a run stands: `epoch` counts completed epochs of `stage`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub epoch: usize,
    /// Best validation accuracy so far and the epoch count when it was seen.
    pub best: Option<(f64, usize)>,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub norm: NormStats,
    pub state: TrainState,
    pub params: ParamSet,
    /// Parameters at the best validation score.
    pub best_params: Option<ParamSet>,
    pub optimizers: BTreeMap<String, OptimizerState>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    /// Parameters to evaluate: the validation-selected ones when present.
    pub fn eval_params(&self) -> &ParamSet {
        self.best_params.as_ref().unwrap_or(&self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&str, Vec<u8>)> = vec![
            ("config", self.config.render().into_bytes()),
            ("state", encode_state(&self.state)),
            ("norm", {
                let mut w = Writer::default();
                self.norm.mean.iter().chain(&self.norm.std).for_each(|v| w.f64(*v));
                w.0
            }),
            ("params", encode_params(&self.params)),
        ];
        if let Some(b) = &self.best_params {
            sections.push(("best", encode_params(b)));
        }
        if !self.optimizers.is_empty() {
            sections.push(("opt", encode_optimizers(&self.optimizers)));
        }
        if let Some(r) = &self.rng {
            let mut w = Writer::default();
            w.bytes(&r.seed);
            w.u64(r.stream);
            w.bytes(&r.word_pos.to_le_bytes());
            sections.push(("rng", w.0));
        }
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(sections.len() as u32);
        for (name, payload) in sections {
            w.str16(name);
            w.u64(payload.len() as u64);
            w.bytes(&payload);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..n {
            let name = r.str16()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            if sections.insert(name.clone(), payload).is_some() {
                return Err(Error::Format(format!("duplicate checkpoint section {name}")));
            }
        }
        r.finish()?;
        let need = |name: &str| {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks section {name}")))
        };
        for name in sections.keys() {
            if !["config", "state", "norm", "params", "best", "opt", "rng"].contains(&name.as_str()) {
                return Err(Error::Format(format!("unknown checkpoint section {name}")));
            }
        }
        let text = std::str::from_utf8(need("config")?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = TrainConfig::parse(text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let state = decode_state(need("state")?)?;
        let mut nr = Reader::new(need("norm")?);
        let mut vals = [0.0; 6];
        for v in &mut vals {
            *v = nr.f64()?;
        }
        nr.finish()?;
        let norm = NormStats {
            mean: [vals[0], vals[1], vals[2]],
            std: [vals[3], vals[4], vals[5]],
        };
        let params = decode_params(need("params")?)?;
        let best_params = sections.get("best").map(|b| decode_params(b)).transpose()?;
        let optimizers = match sections.get("opt") {
            Some(b) => decode_optimizers(b)?,
            None => BTreeMap::new(),
        };
        let rng = sections
            .get("rng")
            .map(|b| -> Result<RngState> {
                let mut r = Reader::new(b);
                let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
                r.finish()?;
                Ok(RngState { seed, stream, word_pos })
            })
            .transpose()?;
        Ok(Self {
            config,
            norm,
            state,
            params,
            best_params,
            optimizers,
            rng,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn encode_state(s: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(match s.stage {
        Stage::Pretrain => 1,
        Stage::Meta => 2,
    });
    w.u64(s.epoch as u64);
    match s.best {
        Some((acc, epoch)) => {
            w.u8(1);
            w.f64(acc);
            w.u64(epoch as u64);
        }
        None => w.u8(0),
    }
    w.0
}

fn decode_state(b: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(b);
    let stage = match r.u8()? {
        1 => Stage::Pretrain,
        2 => Stage::Meta,
        s => return Err(Error::Format(format!("unknown training stage code {s}"))),
    };
    let epoch = r.u64()? as usize;
    let best = match r.u8()? {
        0 => None,
        1 => Some((r.f64()?, r.u64()? as usize)),
        f => return Err(Error::Format(format!("bad best-score flag {f}"))),
    };
    r.finish()?;
    Ok(TrainState { stage, epoch, best })
}

fn encode_params(ps: &ParamSet) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(ps.len() as u32);
    for (path, p) in ps.iter() {
        w.str16(path);
        w.u8(p.trainable as u8);
        w.tensor(&p.value);
    }
    w.0
}

fn decode_params(b: &[u8]) -> Result<ParamSet> {
    let mut r = Reader::new(b);
    let n = r.u32()?;
    let mut ps = ParamSet::new();
    for _ in 0..n {
        let path = r.str16()?;
        let trainable = r.u8()? != 0;
        let t = r.tensor()?;
        ps.insert(path, t, trainable).map_err(|e| Error::Format(e.to_string()))?;
    }
    r.finish()?;
    Ok(ps)
}

fn encode_optimizers(opts: &BTreeMap<String, OptimizerState>) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(opts.len() as u32);
    for (name, o) in opts {
        w.str16(name);
        match o.hyper {
            Hyper::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                w.u8(1);
                [lr, momentum, weight_decay].iter().for_each(|v| w.f64(*v));
            }
            Hyper::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                w.u8(2);
                [lr, beta1, beta2, eps, weight_decay].iter().for_each(|v| w.f64(*v));
            }
        }
        w.u64(o.step);
        w.u32(o.buffers.len() as u32);
        for (path, bufs) in &o.buffers {
            w.str16(path);
            w.u8(bufs.len() as u8);
            bufs.iter().for_each(|t| w.tensor(t));
        }
    }
    w.0
}

fn decode_optimizers(b: &[u8]) -> Result<BTreeMap<String, OptimizerState>> {
    let mut r = Reader::new(b);
    let n = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let name = r.str16()?;
        let hyper = match r.u8()? {
            1 => Hyper::Sgd {
                lr: r.f64()?,
                momentum: r.f64()?,
                weight_decay: r.f64()?,
            },
            2 => Hyper::Adam {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            },
            k => return Err(Error::Format(format!("unknown optimizer kind {k}"))),
        };
        let mut o = OptimizerState::new(hyper);
        o.step = r.u64()?;
        let nb = r.u32()?;
        for _ in 0..nb {
            let path = r.str16()?;
            let k = r.u8()?;
            let bufs = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            o.buffers.insert(path, bufs);
        }
        out.insert(name, o);
    }
    r.finish()?;
    Ok(out)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str16(&mut self, s: &str) {
        self.bytes(&(s.len() as u16).to_le_bytes());
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.rank() as u8);
        t.shape().iter().for_each(|&d| self.u32(d as u32));
        t.data().iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 name in checkpoint".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}
