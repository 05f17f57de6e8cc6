//! Binary checkpoint format.
//!
//! Layout (little-endian):
//! `"INBOX1"` magic, a SHA-256 digest of everything after the digest field,
//! a fixed header (version, table counts, dimensions, margin, seed, completed
//! stage, flags), the parameter tables as `f32` in layout order (items, tags,
//! relations, users, attention nets, user nets), and — when flag bit 0 is set
//! — the optimizer state (step count plus first/second moments as `f32`).
//!
//! Any truncation or bit flip fails the length or digest check; a load never
//! yields a partial store.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Layout, ParamStore, Shapes};

const MAGIC: &[u8; 6] = b"INBOX1";
const VERSION: u32 = 1;

/// Adam moment buffers; persisted so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl OptimizerState {
    pub fn zeros(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    buf.reserve(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serialize the store (and optionally the optimizer state) to `path`.
pub fn checkpoint_save(
    store: &ParamStore,
    optimizer: Option<&OptimizerState>,
    path: &Path,
) -> Result<()> {
    let shapes = store.shapes();
    let mut body = Vec::with_capacity(64 + store.data.len() * 4);
    push_u32(&mut body, VERSION);
    push_u32(&mut body, shapes.n_items as u32);
    push_u32(&mut body, shapes.n_tags as u32);
    push_u32(&mut body, shapes.n_relations_aug as u32);
    push_u32(&mut body, shapes.n_users as u32);
    push_u32(&mut body, shapes.d as u32);
    push_u32(&mut body, shapes.hidden_width as u32);
    push_u32(&mut body, shapes.hidden_layers as u32);
    body.extend_from_slice(&(store.gamma as f32).to_le_bytes());
    body.extend_from_slice(&store.seed.to_le_bytes());
    push_u32(&mut body, store.stage_completed);
    push_u32(&mut body, optimizer.is_some() as u32);
    push_f32s(&mut body, &store.data);
    if let Some(opt) = optimizer {
        if opt.m.len() != store.data.len() || opt.v.len() != store.data.len() {
            return Err(Error::Shape(format!(
                "optimizer state has {} moments but the store has {} parameters",
                opt.m.len(),
                store.data.len()
            )));
        }
        body.extend_from_slice(&opt.step.to_le_bytes());
        push_f32s(&mut body, &opt.m);
        push_f32s(&mut body, &opt.v);
    }

    let digest = Sha256::digest(&body);
    let mut out = Vec::with_capacity(6 + 32 + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&digest);
    out.extend_from_slice(&body);
    std::fs::write(path, out)?;
    Ok(())
}

/// Load and validate a checkpoint. Returns the store and, when present, the
/// optimizer state.
pub fn checkpoint_load(path: &Path) -> Result<(ParamStore, Option<OptimizerState>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 6 + 32 {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[..6] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let stored: [u8; 32] = bytes[6..38].try_into().unwrap();
    let digest = Sha256::digest(&bytes[38..]);
    if digest.as_slice() != stored {
        return Err(corrupt("digest mismatch"));
    }

    let mut r = Reader {
        bytes: &bytes,
        pos: 38,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let n_items = r.u32()? as usize;
    let n_tags = r.u32()? as usize;
    let n_relations_aug = r.u32()? as usize;
    let n_users = r.u32()? as usize;
    let d = r.u32()? as usize;
    let hidden_width = r.u32()? as usize;
    let hidden_layers = r.u32()? as usize;
    let gamma = r.f32()? as f64;
    let seed = r.u64()?;
    let stage_completed = r.u32()?;
    let flags = r.u32()?;

    let shapes = Shapes {
        d,
        hidden_width,
        hidden_layers,
        n_items,
        n_tags,
        n_relations_aug,
        n_users,
    };
    if d == 0 || hidden_width == 0 || hidden_layers == 0 {
        return Err(corrupt("zero dimension in header"));
    }
    let layout = Layout::new(shapes);
    let count = layout.param_count();

    let expected = 38 + 52 + 4 * count + if flags & 1 != 0 { 8 + 8 * count } else { 0 };
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "header declares {count} parameters ({} bytes) but file has {}",
            expected,
            bytes.len()
        )));
    }

    let data = r.f32s(count)?;
    if !data.iter().all(|x| x.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    let optimizer = if flags & 1 != 0 {
        let step = r.u64()?;
        let m = r.f32s(count)?;
        let v = r.f32s(count)?;
        Some(OptimizerState { step, m, v })
    } else {
        None
    };

    Ok((
        ParamStore {
            layout,
            gamma,
            seed,
            stage_completed,
            data,
        },
        optimizer,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small_store() -> ParamStore {
        init_params(
            Shapes {
                d: 4,
                hidden_width: 4,
                hidden_layers: 1,
                n_items: 5,
                n_tags: 3,
                n_relations_aug: 4,
                n_users: 2,
            },
            12.0,
            None,
            99,
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let store = small_store();
        checkpoint_save(&store, None, &p1).unwrap();
        let (loaded, opt) = checkpoint_load(&p1).unwrap();
        assert!(opt.is_none());
        assert_eq!(loaded.data, store.data);
        assert_eq!(loaded.gamma, store.gamma);
        checkpoint_save(&loaded, None, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.ckpt");
        let store = small_store();
        let mut opt = OptimizerState::zeros(store.data.len());
        opt.step = 17;
        opt.m[3] = 0.25;
        opt.v[10] = 1.5;
        checkpoint_save(&store, Some(&opt), &p).unwrap();
        let (_, loaded) = checkpoint_load(&p).unwrap();
        assert_eq!(loaded.unwrap(), opt);
    }

    #[test]
    fn truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let store = small_store();
        checkpoint_save(&store, None, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for cut in [0, 5, 37, 40, bytes.len() - 1] {
            std::fs::write(&p, &bytes[..cut]).unwrap();
            assert!(
                matches!(checkpoint_load(&p), Err(Error::CorruptCheckpoint(_))),
                "truncation at {cut} accepted"
            );
        }
    }

    #[test]
    fn bit_flips_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        let store = small_store();
        checkpoint_save(&store, None, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        for pos in [0usize, 7, 20, 45, 60, bytes.len() - 2] {
            let mut corrupted = bytes.clone();
            corrupted[pos] ^= 0x10;
            std::fs::write(&p, &corrupted).unwrap();
            assert!(
                matches!(checkpoint_load(&p), Err(Error::CorruptCheckpoint(_))),
                "bit flip at {pos} accepted"
            );
        }
    }
}
