//! Binary checkpoint: `AMLT`, version, parameter records, momentum records,
//! batch-generator state, then the training-state trailer. All integers and
//! floats are little-endian; tensor values are `f32`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainState;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"AMLT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: [usize; 4],
    pub values: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<Record>,
    pub momentum: Vec<Record>,
    pub rng: RngState,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore<f32>, rng: &ChaCha8Rng, state: &TrainState) -> Self {
        let record = |name: &str, t: &Tensor| Record {
            name: name.to_owned(),
            dims: t.shape().dims(),
            values: t.data().to_vec(),
        };
        Checkpoint {
            params: store.iter().map(|p| record(&p.name, &p.value)).collect(),
            momentum: store.iter().map(|p| record(&p.name, &p.momentum)).collect(),
            rng: RngState::capture(rng),
            state: state.clone(),
        }
    }

    /// Copies values and momentum into `store`; names and shapes must match
    /// the model exactly and in order.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        check_layout(&self.params, store)?;
        check_layout(&self.momentum, store)?;
        for ((p, rec), mom) in store.iter_mut().zip(&self.params).zip(&self.momentum) {
            p.value.data_mut().copy_from_slice(&rec.values);
            p.momentum.data_mut().copy_from_slice(&mom.values);
            p.zero_grad();
        }
        Ok(())
    }

    /// Copies parameter values only, for inference.
    pub fn apply_values(&self, store: &mut ParamStore<f32>) -> Result<()> {
        check_layout(&self.params, store)?;
        for (p, rec) in store.iter_mut().zip(&self.params) {
            p.value.data_mut().copy_from_slice(&rec.values);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for records in [&self.params, &self.momentum] {
            put_u32(&mut out, records.len() as u32);
            for r in records {
                put_u32(&mut out, r.name.len() as u32);
                out.extend_from_slice(r.name.as_bytes());
                put_u32(&mut out, 4);
                for d in r.dims {
                    put_u32(&mut out, d as u32);
                }
                for v in &r.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let s = &self.state;
        out.extend_from_slice(&s.iteration.to_le_bytes());
        out.extend_from_slice(&s.lr.to_le_bytes());
        out.push(s.prev_window.is_some() as u8);
        out.extend_from_slice(&s.prev_window.unwrap_or(0.0).to_le_bytes());
        put_u32(&mut out, s.history.len() as u32);
        for v in &s.history {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing AMLT magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let params = r.records()?;
        let momentum = r.records()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let iteration = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let lr = r.f64()?;
        let has_prev = r.take(1)?[0] != 0;
        let prev = r.f64()?;
        let n = r.u32()? as usize;
        let history = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            params,
            momentum,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            state: TrainState {
                iteration,
                lr,
                prev_window: has_prev.then_some(prev),
                history,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn check_layout(records: &[Record], store: &ParamStore<f32>) -> Result<()> {
    for (i, p) in store.iter().enumerate() {
        let Some(rec) = records.get(i) else {
            return Err(Error::ParameterMismatch {
                name: p.name.clone(),
                detail: "missing from checkpoint".into(),
            });
        };
        if rec.name != p.name {
            return Err(Error::ParameterMismatch {
                name: p.name.clone(),
                detail: format!("checkpoint has `{}` in its place", rec.name),
            });
        }
        if rec.dims != p.shape().dims() {
            return Err(Error::ParameterMismatch {
                name: p.name.clone(),
                detail: format!("shape {:?} in checkpoint, {} in model", rec.dims, p.shape()),
            });
        }
    }
    if let Some(extra) = records.get(store.len()) {
        return Err(Error::ParameterMismatch {
            name: extra.name.clone(),
            detail: "not present in the model".into(),
        });
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn records(&mut self) -> Result<Vec<Record>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| {
                Error::Checkpoint(format!(
                    "parameter name at byte {} is not UTF-8",
                    self.pos - len
                ))
            })?;
            let rank = self.u32()?;
            if rank != 4 {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has rank {rank}, expected 4"
                )));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = self.u32()? as usize;
            }
            let n: usize = dims.iter().product();
            let raw = self.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("extent overflow".into()))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push(Record { name, dims, values });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let a = store.register("a.weight", [2, 1, 3, 3], Init::Msra);
        store.register("a.bias", [1, 2, 1, 1], Init::Zero);
        for (i, v) in store.get_mut(a).value.data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.1 - 0.7;
        }
        store.get_mut(a).momentum.data_mut()[3] = 2.5;
        store
    }

    fn state() -> TrainState {
        TrainState {
            iteration: 42,
            lr: 1e-3,
            prev_window: Some(0.5),
            history: vec![3.0, 2.0, 1.5],
        }
    }

    #[test]
    fn round_trip() {
        let store = sample_store();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(3);
        rng.set_word_pos(99);
        let ck = Checkpoint::capture(&store, &rng, &state());
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"AMLT");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.rng.restore(), rng);

        let mut fresh = ParamStore::new();
        fresh.register("a.weight", [2, 1, 3, 3], Init::Msra);
        fresh.register("a.bias", [1, 2, 1, 1], Init::Zero);
        back.apply(&mut fresh).unwrap();
        for (p, q) in fresh.iter().zip(store.iter()) {
            assert_eq!(p.value, q.value);
            assert_eq!(p.momentum, q.momentum);
        }
    }

    #[test]
    fn first_mismatching_parameter_is_named() {
        let ck = Checkpoint::capture(&sample_store(), &ChaCha8Rng::seed_from_u64(0), &state());
        let mut other = ParamStore::new();
        other.register("a.weight", [2, 1, 3, 3], Init::Msra);
        other.register("a.bias", [1, 3, 1, 1], Init::Zero);
        match ck.apply(&mut other) {
            Err(Error::ParameterMismatch { name, .. }) => assert_eq!(name, "a.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint::capture(&sample_store(), &ChaCha8Rng::seed_from_u64(0), &state());
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
