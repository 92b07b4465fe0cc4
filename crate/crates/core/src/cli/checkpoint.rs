//! Training checkpoints.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "CKPT" u8 version
//! u32 config length, config text (RunConfig::to_text)
//! u64 completed iterations
//! 32-byte rng seed, u64 rng stream, u128 rng word position
//! u32 parameter count, then per parameter: u32 name length, name bytes
//! one CTNT block per parameter, in name-table order
//! u64 loss count, f32 per completed episode
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::TrainState;
use crate::model::CatNet;
use crate::params::ParamStore;
use crate::tensor::{read_tensor_from, write_tensor_to};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.state.iteration as u64).to_le_bytes());
        let rng = &self.state.rng;
        out.extend_from_slice(&rng.get_seed());
        out.extend_from_slice(&rng.get_stream().to_le_bytes());
        out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        let params = &self.state.model.params;
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for name in params.names() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for (_, t) in params.iter() {
            write_tensor_to(&mut out, t).expect("writing to a Vec cannot fail");
        }
        out.extend_from_slice(&(self.state.losses.len() as u64).to_le_bytes());
        for l in &self.state.losses {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic: [u8; 4] = take(&mut r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let [version] = take::<1>(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text = String::from_utf8(take_vec(&mut r)?)
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let config = RunConfig::parse(&text)?;
        let iteration = u64::from_le_bytes(take(&mut r)?) as usize;
        let seed: [u8; 32] = take(&mut r)?;
        let stream = u64::from_le_bytes(take(&mut r)?);
        let word_pos = u128::from_le_bytes(take(&mut r)?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let n = u32::from_le_bytes(take(&mut r)?) as usize;
        let names = (0..n)
            .map(|_| {
                String::from_utf8(take_vec(&mut r)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut params = ParamStore::new();
        for name in names {
            let t = read_tensor_from(&mut r)?.with_requires_grad(true);
            if params.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            params.insert(name, t);
        }
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        if count != iteration {
            return Err(Error::Format(format!("{count} losses recorded for {iteration} iterations")));
        }
        let losses = (0..count)
            .map(|_| take(&mut r).map(f32::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        if r.position() as usize != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let model = CatNet::from_parts(config.model_config(), params)?;
        Ok(Checkpoint {
            config,
            state: TrainState {
                model,
                rng,
                iteration,
                losses,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))?;
    Ok(buf)
}

fn take_vec(r: &mut Cursor<&[u8]>) -> Result<Vec<u8>> {
    let len = u32::from_le_bytes(take(r)?) as usize;
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))?;
    Ok(buf)
}
