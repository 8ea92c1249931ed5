//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "HOAC" | version u32
//! model config JSON (u32 length + bytes) | run config JSON (u32 length + bytes, "null" if absent)
//! step u64 | run seed u64 | best validation accuracy f64 (NaN if none)
//! parameter count u32, then per parameter:
//!     name (u32 length + UTF-8) | rank u32 | dims u32… | values f64…
//! optimiser flag u8; if 1, one accumulator per parameter (same shapes, f64…)
//! stack count u32, then per stack: arity u32, then per count sketch:
//!     d_in u32 | d_out u32 | seed u64 | h u32… | s i8…
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::decision::FusionSketches;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::sketch::{CountSketchParams, SketchStack};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HOAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub run: Option<RunConfig>,
    pub step: u64,
    pub run_seed: u64,
    pub best_val: Option<f64>,
    /// RMSProp accumulators in parameter order.
    pub optimizer: Option<Vec<Tensor>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn values(&mut self, t: &Tensor) {
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.at.checked_add(n).and_then(|end| self.buf.get(self.at..end)) {
            Some(s) => {
                self.at += n;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.buf.len() as u64,
                message: format!("truncated while reading {what} at byte {}", self.at),
            }),
        }
    }
    fn err<T>(&self, message: String) -> Result<T> {
        Err(Error::Format {
            offset: self.at as u64,
            message,
        })
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)?;
        self.take(n, what)
    }
    fn values(&mut self, shape: Vec<usize>, what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).or_else(|e| self.err(format!("{what}: {e}")))
    }
}

fn write_stack(w: &mut Writer, s: &SketchStack) {
    w.u32(s.arity());
    for p in s.iter() {
        w.u32(p.d_in());
        w.u32(p.d_out());
        w.u64(p.seed());
        for &h in p.hashes() {
            w.u32(h as usize);
        }
        for &s in p.signs() {
            w.u8(s as u8);
        }
    }
}

fn read_stack(r: &mut Reader) -> Result<SketchStack> {
    let arity = r.u32("stack arity")?;
    let mut ps = Vec::with_capacity(arity.min(8));
    for _ in 0..arity {
        let d_in = r.u32("sketch d_in")?;
        let d_out = r.u32("sketch d_out")?;
        let seed = r.u64("sketch seed")?;
        let h = (0..d_in)
            .map(|_| r.u32("hash map").map(|v| v as u32))
            .collect::<Result<Vec<_>>>()?;
        let s = r.take(d_in, "sign map")?.iter().map(|&b| b as i8).collect();
        let at = r.at;
        ps.push(CountSketchParams::from_maps(d_out, h, s, seed).map_err(|e| Error::Format {
            offset: at as u64,
            message: e.to_string(),
        })?);
    }
    let at = r.at;
    SketchStack::new(ps).map_err(|e| Error::Format {
        offset: at as u64,
        message: e.to_string(),
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        w.bytes(&serde_json::to_vec(&self.model.config)?);
        let run = match &self.run {
            Some(r) => serde_json::to_vec(&r.to_value())?,
            None => b"null".to_vec(),
        };
        w.bytes(&run);
        w.u64(self.step);
        w.u64(self.run_seed);
        w.f64(self.best_val.unwrap_or(f64::NAN));
        let store = &self.model.store;
        w.u32(store.len());
        for (name, t) in store.iter() {
            w.bytes(name.as_bytes());
            w.u32(t.rank());
            for &d in t.shape() {
                w.u32(d);
            }
            w.values(t);
        }
        match &self.optimizer {
            Some(acc) => {
                if acc.len() != store.len() {
                    return Err(Error::Contract(format!(
                        "{} optimiser accumulators for {} parameters",
                        acc.len(),
                        store.len()
                    )));
                }
                w.u8(1);
                for (a, (_, p)) in acc.iter().zip(store.iter()) {
                    if a.shape() != p.shape() {
                        return Err(Error::Contract("optimiser state shape differs from parameter".into()));
                    }
                    w.values(a);
                }
            }
            None => w.u8(0),
        }
        let sk = &self.model.sketches;
        let stacks: Vec<&SketchStack> = std::iter::once(&sk.inner).chain(sk.outer.as_ref()).collect();
        w.u32(stacks.len());
        for s in stacks {
            write_stack(&mut w, s);
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, at: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected HOAC".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let config: ModelConfig = serde_json::from_slice(r.bytes("model config")?)?;
        let run_json: serde_json::Value = serde_json::from_slice(r.bytes("run config")?)?;
        let run = match run_json {
            serde_json::Value::Null => None,
            v => Some(RunConfig::from_value(&v)?),
        };
        let step = r.u64("step")?;
        let run_seed = r.u64("run seed")?;
        let best = r.f64("best validation accuracy")?;
        let n = r.u32("parameter count")?;
        let mut store = ParamStore::new();
        let mut shapes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = String::from_utf8(r.bytes("parameter name")?.to_vec())
                .or_else(|_| r.err("parameter name is not UTF-8".into()))?;
            let rank = r.u32("rank")?;
            if rank == 0 || rank > 8 {
                return r.err(format!("parameter {name} has rank {rank}"));
            }
            let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
            let t = r.values(shape.clone(), "parameter values")?;
            if store.find(&name).is_some() {
                return r.err(format!("duplicate parameter {name}"));
            }
            store.add(name, t);
            shapes.push(shape);
        }
        let optimizer = match r.u8("optimiser flag")? {
            0 => None,
            1 => Some(
                shapes
                    .iter()
                    .map(|s| r.values(s.clone(), "optimiser state"))
                    .collect::<Result<Vec<_>>>()?,
            ),
            f => return r.err(format!("bad optimiser flag {f}")),
        };
        let stacks = r.u32("stack count")?;
        if !(1..=2).contains(&stacks) {
            return r.err(format!("expected 1 or 2 sketch stacks, found {stacks}"));
        }
        let inner = read_stack(&mut r)?;
        let outer = if stacks == 2 { Some(read_stack(&mut r)?) } else { None };
        if r.at != bytes.len() {
            return r.err("trailing bytes after checkpoint".into());
        }
        let sketches = FusionSketches::new(config.fusion, inner, outer)?;
        let model = Model::from_parts(config, store, sketches)?;
        Ok(Self {
            model,
            run,
            step,
            run_seed,
            best_val: (!best.is_nan()).then_some(best),
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
