//! Binary checkpoints: run configuration, parameters, batch-norm buffers
//! and, optionally, the optimizer and training progress.
//!
//! Layout (little endian): magic `TAPMCKPT`, `u32` version, config text,
//! history text, `u64` completed epochs, `u64` optimizer step, `u32` record
//! count, then records of `u8` kind, name, `u32` rank, `u64` dims and `f32`
//! data. Strings are `u32` length-prefixed UTF-8.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layers::{BufferStore, ParamStore};
use crate::network::Model;
use crate::ops::RunningStats;
use crate::tensor::Tensor;
use crate::training::{EpochRecord, MetricCounts, Optimizer, TrainState};

pub const MAGIC: &[u8; 8] = b"TAPMCKPT";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BN_MEAN: u8 = 1;
const KIND_BN_VAR: u8 = 2;
const KIND_FIRST: u8 = 3;
const KIND_SECOND: u8 = 4;
const KIND_LOSSES: u8 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub state: Option<TrainState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn record(&mut self, kind: u8, name: &str, t: &Tensor<f32>) {
        self.0.push(kind);
        self.str(name);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointTruncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::CheckpointMalformed(format!("{what} is not UTF-8")))
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::CheckpointMalformed(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| Ok(self.u64("tensor shape")? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::CheckpointMalformed("tensor size overflows".into()))?;
        let bytes = self.take(n.checked_mul(4).ok_or(Error::CheckpointTruncated("tensor data"))?, "tensor data")?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(&shape, data)
    }
}

fn history_text(h: &[EpochRecord]) -> String {
    h.iter()
        .map(|r| {
            let c = &r.report.counts;
            format!(
                "{} {} {} {} {} {} {} {} {} {} {}\n",
                r.epoch, r.mean_loss, c.tp, c.fp, c.fn_, c.pixels, c.targets, c.detected, c.target_iou_sum, c.empty_images, c.images
            )
        })
        .collect()
}

fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    let bad = |l: &str| Error::CheckpointMalformed(format!("history line `{l}`"));
    text.lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            if f.len() != 11 {
                return Err(bad(l));
            }
            let u = |i: usize| f[i].parse::<usize>().map_err(|_| bad(l));
            let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad(l));
            let counts = MetricCounts {
                tp: u(2)?,
                fp: u(3)?,
                fn_: u(4)?,
                pixels: u(5)?,
                targets: u(6)?,
                detected: u(7)?,
                target_iou_sum: x(8)?,
                empty_images: u(9)?,
                images: u(10)?,
            };
            Ok(EpochRecord {
                epoch: u(0)?,
                mean_loss: x(1)?,
                report: counts.report(),
            })
        })
        .collect()
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&ck.config.to_text());
    let state = ck.state.as_ref();
    w.str(&state.map_or(String::new(), |s| history_text(&s.history)));
    w.u64(state.map_or(0, |s| s.epoch as u64));
    w.u64(state.map_or(0, |s| s.optimizer.step));
    let m = &ck.model;
    let mut count = m.params.len() + 2 * m.buffers.len();
    if let Some(s) = state {
        count += s.optimizer.first.len() + s.optimizer.second.len() + 1;
    }
    w.u32(count as u32);
    for (name, t) in m.params.iter() {
        w.record(KIND_PARAM, name, t);
    }
    for (name, s) in m.buffers.iter() {
        w.record(KIND_BN_MEAN, name, &s.mean);
        w.record(KIND_BN_VAR, name, &s.var);
    }
    if let Some(s) = state {
        for (name, t) in &s.optimizer.first {
            w.record(KIND_FIRST, name, t);
        }
        for (name, t) in &s.optimizer.second {
            w.record(KIND_SECOND, name, t);
        }
        let n = s.losses.len();
        w.record(KIND_LOSSES, "losses", &Tensor::new(&[n], s.losses.clone()).expect("1-d"));
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CheckpointMalformed("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            expected: VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let config = RunConfig::parse(&r.str("config")?)?;
    let history = parse_history(&r.str("history")?)?;
    let epoch = r.u64("epoch")? as usize;
    let step = r.u64("step")?;
    let count = r.u32("record count")? as usize;

    let template = Model::<f32>::new(config.model.clone(), 0)?;
    let mut params = ParamStore::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    let mut losses = None;
    for _ in 0..count {
        let kind = r.u8("record kind")?;
        let name = r.str("record name")?;
        let t = r.tensor()?;
        let expect = |shape: Option<&[usize]>| -> Result<()> {
            match shape {
                None => Err(Error::CheckpointUnknown(name.clone())),
                Some(s) if s != t.shape() => Err(Error::CheckpointMalformed(format!("`{name}` has shape {:?}, expected {s:?}", t.shape()))),
                Some(_) => Ok(()),
            }
        };
        let param_shape = template.params.get(&name).ok().map(|p| p.shape());
        let buf_shape = template.buffers.get(&name).ok().map(|b| b.mean.shape());
        match kind {
            KIND_PARAM => {
                expect(param_shape)?;
                params.insert(name.clone(), t);
            }
            KIND_BN_MEAN | KIND_BN_VAR => {
                expect(buf_shape)?;
                if kind == KIND_BN_MEAN { &mut means } else { &mut vars }.insert(name.clone(), t);
            }
            KIND_FIRST | KIND_SECOND => {
                expect(param_shape)?;
                if kind == KIND_FIRST { &mut first } else { &mut second }.insert(name.clone(), t);
            }
            KIND_LOSSES => losses = Some(t.into_data()),
            k => return Err(Error::CheckpointMalformed(format!("unknown record kind {k}"))),
        }
    }
    if r.pos != buf.len() {
        return Err(Error::CheckpointMalformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if let Some((name, _)) = template.params.iter().find(|(n, _)| !params.contains(n)) {
        return Err(Error::CheckpointMissing(name.clone()));
    }
    let mut buffers = BufferStore::new();
    for (name, _) in template.buffers.iter() {
        match (means.remove(name), vars.remove(name)) {
            (Some(mean), Some(var)) => buffers.insert(name.clone(), RunningStats { mean, var }),
            _ => return Err(Error::CheckpointMissing(name.clone())),
        }
    }
    let state = losses.map(|losses| TrainState {
        epoch,
        optimizer: Optimizer {
            config: config.loss.optimizer,
            step,
            first,
            second,
        },
        losses,
        history,
    });
    Ok(Checkpoint {
        model: Model {
            config: config.model.clone(),
            params,
            buffers,
        },
        config,
        state,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save keeps the previous file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, to_bytes(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
