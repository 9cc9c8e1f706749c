//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `GAVGCKP1`, then fields in declaration order.
//! Integers are little-endian `u32`/`u64`, reals little-endian IEEE-754
//! `f64`, and every sequence or string is prefixed by its `u64` length.

use std::path::Path;

use crate::averaging::{AveragerState, EmaState, TriggerState};
use crate::error::{GavgError, Result};
use crate::numerics::{ParamVector, RngState};
use crate::optimizers::OptState;
use crate::tasks::BnStats;

use super::record::RunRecord;
use super::write_atomic;

pub const MAGIC: &[u8; 8] = b"GAVGCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layout_version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub theta: ParamVector,
    pub bn_running: Vec<BnStats>,
    pub optimizer: OptState,
    /// Absent until the averaging start is known.
    pub averager: Option<AveragerState>,
    pub ema: Option<EmaState>,
    pub trigger: Option<TriggerState>,
    pub rng: RngState,
    pub records: Vec<RunRecord>,
    /// Training loss at every absorbed snapshot (convex tasks only).
    pub snapshot_losses: Vec<f64>,
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn u64s(&mut self, v: &[u64]) {
        self.len(v.len());
        v.iter().for_each(|x| self.u64(*x));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn flag(&mut self, present: bool) {
        self.u8(u8::from(present));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| GavgError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem as u64) > remaining {
            return Err(GavgError::Checkpoint(format!(
                "length {n} exceeds remaining {remaining} bytes"
            )));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn u64s(&mut self) -> Result<Vec<u64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| GavgError::Checkpoint("invalid UTF-8".into()))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(GavgError::Checkpoint(format!("bad presence flag {b}"))),
        }
    }
}

fn put_record(e: &mut Enc, r: &RunRecord) {
    e.u64(r.epoch);
    for v in [
        r.train_loss,
        r.train_acc,
        r.val_loss,
        r.val_acc,
        r.test_acc,
        r.lr,
    ] {
        e.f64(v);
    }
    e.flag(r.eff_lr.is_some());
    if let Some(v) = r.eff_lr {
        e.f64(v);
    }
    e.f64(r.theta_norm);
    e.flag(r.avg_active);
    e.u64(r.wall_ms);
}

fn get_record(d: &mut Dec) -> Result<RunRecord> {
    Ok(RunRecord {
        epoch: d.u64()?,
        train_loss: d.f64()?,
        train_acc: d.f64()?,
        val_loss: d.f64()?,
        val_acc: d.f64()?,
        test_acc: d.f64()?,
        lr: d.f64()?,
        eff_lr: if d.flag()? { Some(d.f64()?) } else { None },
        theta_norm: d.f64()?,
        avg_active: d.flag()?,
        wall_ms: d.u64()?,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Enc::default();
        e.0.extend_from_slice(MAGIC);
        e.u32(self.format_version);
        e.u32(self.layout_version);
        e.str(&self.config_hash);
        e.u64(self.seed);
        e.u64(self.epoch);
        e.u64(self.step);
        e.f64s(self.theta.as_slice());
        e.len(self.bn_running.len());
        for s in &self.bn_running {
            e.f64s(&s.mean);
            e.f64s(&s.var);
        }
        e.u64s(&self.optimizer.counters);
        e.len(self.optimizer.vectors.len());
        for v in &self.optimizer.vectors {
            e.f64s(v.as_slice());
        }
        e.flag(self.averager.is_some());
        if let Some(a) = &self.averager {
            e.f64s(a.theta_avg.as_slice());
            e.u64(a.n_models);
            e.u64(a.t_avg_start);
            e.u64(a.freq);
            e.u64s(&a.log);
        }
        e.flag(self.ema.is_some());
        if let Some(m) = &self.ema {
            e.f64s(m.theta_ema.as_slice());
            e.f64(m.rho);
            e.u64(m.count);
        }
        e.flag(self.trigger.is_some());
        if let Some(t) = &self.trigger {
            e.f64(t.best_metric);
            e.u32(t.epochs_since_improvement);
            e.u32(t.patience);
            e.flag(t.fired);
        }
        e.u64(self.rng.seed);
        e.u64(self.rng.stream_id);
        e.u128(self.rng.word_pos);
        e.len(self.records.len());
        for r in &self.records {
            put_record(&mut e, r);
        }
        e.f64s(&self.snapshot_losses);
        e.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..8] != MAGIC {
            return Err(GavgError::Checkpoint("missing GAVGCKP1 magic".into()));
        }
        let mut d = Dec { buf, pos: 8 };
        let format_version = d.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(GavgError::Checkpoint(format!(
                "unsupported format version {format_version}"
            )));
        }
        let layout_version = d.u32()?;
        let config_hash = d.str()?;
        let seed = d.u64()?;
        let epoch = d.u64()?;
        let step = d.u64()?;
        let theta = ParamVector::new(d.f64s()?);
        let n_bn = d.len(16)?;
        let mut bn_running = Vec::with_capacity(n_bn);
        for _ in 0..n_bn {
            bn_running.push(BnStats {
                mean: d.f64s()?,
                var: d.f64s()?,
            });
        }
        let counters = d.u64s()?;
        let n_vec = d.len(8)?;
        let vectors = (0..n_vec)
            .map(|_| d.f64s().map(ParamVector::new))
            .collect::<Result<_>>()?;
        let averager = if d.flag()? {
            Some(AveragerState {
                theta_avg: ParamVector::new(d.f64s()?),
                n_models: d.u64()?,
                t_avg_start: d.u64()?,
                freq: d.u64()?,
                log: d.u64s()?,
            })
        } else {
            None
        };
        let ema = if d.flag()? {
            Some(EmaState {
                theta_ema: ParamVector::new(d.f64s()?),
                rho: d.f64()?,
                count: d.u64()?,
            })
        } else {
            None
        };
        let trigger = if d.flag()? {
            Some(TriggerState {
                best_metric: d.f64()?,
                epochs_since_improvement: d.u32()?,
                patience: d.u32()?,
                fired: d.flag()?,
            })
        } else {
            None
        };
        let rng = RngState {
            seed: d.u64()?,
            stream_id: d.u64()?,
            word_pos: d.u128()?,
        };
        let n_rec = d.len(8)?;
        let records = (0..n_rec)
            .map(|_| get_record(&mut d))
            .collect::<Result<_>>()?;
        let snapshot_losses = d.f64s()?;
        if d.pos != buf.len() {
            return Err(GavgError::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - d.pos
            )));
        }
        Ok(Checkpoint {
            format_version,
            layout_version,
            config_hash,
            seed,
            epoch,
            step,
            theta,
            bn_running,
            optimizer: OptState { counters, vectors },
            averager,
            ema,
            trigger,
            rng,
            records,
            snapshot_losses,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
