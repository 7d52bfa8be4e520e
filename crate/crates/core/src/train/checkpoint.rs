//! Binary checkpoint format.
//!
//! Layout, all integers little-endian `u64`:
//! magic `TRIKD` + version byte, config text (length + bytes), tensor
//! records (count, then name length, name, rank, extents, raw `f64` values),
//! momentum records in the same form, then the step counter. Batch-norm
//! running statistics travel as tensor records with `.running_mean` and
//! `.running_var` suffixes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::nn::{ParamStore, SpecList};
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 5] = b"TRIKD";
pub const VERSION: u8 = 1;
const MEAN: &str = ".running_mean";
const VAR: &str = ".running_var";

/// Everything needed to resume training.
#[derive(Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub momentum: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(store: ParamStore) -> Self {
        TrainState { store, momentum: BTreeMap::new(), step: 0 }
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, shape.len() as u64);
    for &e in shape {
        put_u64(out, e as u64);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(config: &str, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u64(&mut out, config.len() as u64);
    out.extend_from_slice(config.as_bytes());

    let running: Vec<_> = state.store.running().collect();
    put_u64(&mut out, (state.store.len() + 2 * running.len()) as u64);
    for (name, t) in state.store.params() {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    for (name, (mean, var)) in running {
        put_tensor(&mut out, &format!("{name}{MEAN}"), &[mean.len()], mean);
        put_tensor(&mut out, &format!("{name}{VAR}"), &[var.len()], var);
    }
    put_u64(&mut out, state.momentum.len() as u64);
    for (name, t) in &state.momentum {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    put_u64(&mut out, state.step);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        // Every counted item occupies at least one byte.
        if v > (self.bytes.len() - self.pos) as u64 * 8 + 8 {
            return Err(Error::Checkpoint(format!("implausible {what} {v} at byte {}", self.pos - 8)));
        }
        Ok(v as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string("tensor name")?;
        let rank = self.len("tensor rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len("tensor extent")?);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name.clone(), Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?))
    }
}

/// Returns the config text and the state.
pub fn decode(bytes: &[u8]) -> Result<(String, TrainState)> {
    if bytes.len() < 6 || &bytes[..5] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint: bad magic bytes".into()));
    }
    if bytes[5] != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {} (expected {VERSION})", bytes[5])));
    }
    let mut r = Reader { bytes, pos: 6 };
    let config = r.string("config")?;
    let mut store = ParamStore::default();
    let mut running: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for _ in 0..r.len("tensor count")? {
        let (name, t) = r.tensor()?;
        if let Some(bn) = name.strip_suffix(MEAN) {
            running.entry(bn.to_string()).or_default().0 = Some(t.into_data());
        } else if let Some(bn) = name.strip_suffix(VAR) {
            running.entry(bn.to_string()).or_default().1 = Some(t.into_data());
        } else {
            store.insert(name, t);
        }
    }
    for (name, pair) in running {
        match pair {
            (Some(m), Some(v)) => store.insert_running(name, m, v),
            _ => return Err(Error::Checkpoint(format!("running statistics for {name} are incomplete"))),
        }
    }
    let mut momentum = BTreeMap::new();
    for _ in 0..r.len("momentum count")? {
        let (name, t) = r.tensor()?;
        momentum.insert(name, t);
    }
    let step = r.u64("step counter")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok((config, TrainState { store, momentum, step }))
}

pub fn save(path: &Path, config: &str, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode(config, state)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<(String, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

/// Checks parameters and momentum buffers against the model's specs.
pub fn validate(state: &TrainState, specs: &SpecList) -> Result<()> {
    state.store.validate(specs)?;
    for (name, t) in &state.momentum {
        match state.store.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(Error::Checkpoint(format!("momentum buffer {name} has no matching parameter"))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Preset};
    use crate::model::model_specs;

    fn state() -> TrainState {
        let specs = model_specs(&ModelConfig::preset(Preset::Desk, 4));
        let mut s = TrainState::fresh(ParamStore::init(&specs, 3));
        let (name, t) = s.store.params().nth(5).map(|(n, t)| (n.clone(), t.clone())).unwrap();
        s.momentum.insert(name, Tensor::from_fn(t.shape(), |i| i as f64 * 1e-3));
        s.step = 17;
        s
    }

    #[test]
    fn bitwise_roundtrip() {
        let s = state();
        let bytes = encode("seed = 1\n", &s);
        let (cfg, back) = decode(&bytes).unwrap();
        assert_eq!(cfg, "seed = 1\n");
        assert_eq!(back.step, 17);
        assert_eq!(back.momentum, s.momentum);
        for (name, t) in s.store.params() {
            assert_eq!(back.store.get(name).unwrap().data(), t.data());
        }
        assert_eq!(encode("seed = 1\n", &back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode("", &state());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut v2 = bytes.clone();
        v2[5] = 2;
        assert!(matches!(decode(&v2), Err(Error::Checkpoint(m)) if m.contains("version 2")));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(m)) if m.contains("truncated")));
    }

    #[test]
    fn preset_mismatch_names_a_shape() {
        let s = state();
        let paper = model_specs(&ModelConfig::preset(Preset::Paper, 4));
        let err = validate(&s, &paper).unwrap_err().to_string();
        assert!(err.contains("shape") || err.contains("expected"), "{err}");
        validate(&s, &model_specs(&ModelConfig::preset(Preset::Desk, 4))).unwrap();
    }
}
