//! Checkpoint container: a JSON manifest followed by named parameter
//! arrays with shapes, values stored as 64-bit little-endian floats.
//! Round-trips are bit-exact; writes are atomic (temp file + rename).

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};

const MAGIC: &[u8; 8] = b"FFIDCKP1";

/// Text manifest stored at the head of the container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub stage: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<Model> {
        self.meta.config.validate()?;
        Ok(Model {
            config: self.meta.config,
            params: self.params,
        })
    }
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        let manifest = serde_json::to_vec(meta)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for e in params.iter() {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(if e.decay { 1u8 } else { 0u8 }).to_le_bytes())?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &dim in &e.shape {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let manifest_len = read_u64(&mut r)? as usize;
    let mut manifest = vec![0u8; manifest_len];
    r.read_exact(&mut manifest)?;
    let meta: CheckpointMeta = serde_json::from_slice(&manifest)?;
    let n_params = read_u64(&mut r)? as usize;
    let mut params = ParamSet::default();
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut decay = [0u8; 1];
        r.read_exact(&mut decay)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(&name, &shape, data, decay[0] == 1);
    }
    Ok(Checkpoint { meta, params })
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::init(
            ModelConfig {
                vocab_size: 32,
                d_model: 8,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                ffn_dim: 16,
                max_passage_len: 8,
                max_decode_len: 4,
                dropout: 0.0,
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = CheckpointMeta {
            config: model.config.clone(),
            stage: "stage1".into(),
            seed: 1,
            extra: Default::default(),
        };
        save_checkpoint(&path, &meta, &model.params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.stage, "stage1");
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.decay, b.decay);
            // bit-exact comparison
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        // and the same bytes again
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &loaded.meta, &loaded.params).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
