//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"LZYF"
//! version  u32 (currently 1)
//! config   num_blocks u32, block sizes u32 x num_blocks,
//!          ffn_width u32, embed_dim u32, num_heads u32,
//!          vocab_size u32, max_seq_len u32,
//!          hidden_dropout_p f64, attention_dropout u8,
//!          num_rel_buckets u32, rel_max_distance u32
//! count    u32 number of tensors
//! tensor*  name_len u32, name bytes (utf-8),
//!          rank u32, dims u64 x rank, payload f64 x prod(dims)
//! ```
//!
//! Tensors appear in registry declaration order; the loader rebuilds the
//! registry from the stored config and then demands an exact match of names
//! and shapes, so a truncated, reordered, or foreign file is rejected with a
//! checkpoint error rather than silently mis-assigned.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Layout, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LZYF";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| bad(format!("file ends inside {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.bytes(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }
}

impl Model {
    /// Writes config and every parameter tensor to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;

        let c = &self.config;
        let blocks = c.layout.blocks();
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for &b in blocks {
            w.write_all(&(b as u32).to_le_bytes())?;
        }
        for dim in [
            c.ffn_width,
            c.embed_dim,
            c.num_heads,
            c.vocab_size,
            c.max_seq_len,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&c.hidden_dropout_p.to_le_bytes())?;
        w.write_all(&[c.attention_dropout as u8])?;
        w.write_all(&(c.num_rel_buckets as u32).to_le_bytes())?;
        w.write_all(&(c.rel_max_distance as u32).to_le_bytes())?;

        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for entry in &self.params {
            let name = entry.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            let t = entry.tensor.as_ref();
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Model::save`], rebuilding config and
    /// parameters.  Any structural mismatch is a checkpoint error.
    pub fn load(path: &Path) -> Result<Model> {
        let mut r = Reader {
            inner: BufReader::new(File::open(path)?),
        };
        let magic = r.bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(bad("not a model checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }

        let num_blocks = r.u32("block count")? as usize;
        if num_blocks == 0 || num_blocks > 4096 {
            return Err(bad(format!("implausible block count {num_blocks}")));
        }
        let mut blocks = Vec::with_capacity(num_blocks);
        for _ in 0..num_blocks {
            blocks.push(r.u32("block sizes")? as usize);
        }
        let layout = Layout::from_blocks(blocks)
            .map_err(|e| bad(format!("stored layout invalid: {e}")))?;
        let ffn_width = r.u32("config")? as usize;
        let embed_dim = r.u32("config")? as usize;
        let num_heads = r.u32("config")? as usize;
        let vocab_size = r.u32("config")? as usize;
        let max_seq_len = r.u32("config")? as usize;
        let hidden_dropout_p = r.f64("config")?;
        let attention_dropout = match r.u8("config")? {
            0 => false,
            1 => true,
            other => return Err(bad(format!("attention_dropout flag {other} not 0/1"))),
        };
        let num_rel_buckets = r.u32("config")? as usize;
        let rel_max_distance = r.u32("config")? as usize;
        let config = ModelConfig {
            layout,
            ffn_width,
            embed_dim,
            num_heads,
            vocab_size,
            max_seq_len,
            hidden_dropout_p,
            attention_dropout,
            num_rel_buckets,
            rel_max_distance,
        };
        config
            .validate()
            .map_err(|e| bad(format!("stored config invalid: {e}")))?;

        let mut model = Model::new_uninit(config)?;
        let count = r.u32("tensor count")? as usize;
        if count != model.params.len() {
            return Err(bad(format!(
                "checkpoint stores {count} tensors but the config implies {}",
                model.params.len()
            )));
        }
        for i in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            if name_len > 1024 {
                return Err(bad(format!("implausible tensor name length {name_len}")));
            }
            let name = String::from_utf8(r.bytes(name_len, "tensor name")?)
                .map_err(|_| bad("tensor name is not utf-8"))?;
            let expect = &model.params[i].name;
            if &name != expect {
                return Err(bad(format!(
                    "tensor {i} is named '{name}' but '{expect}' was expected here"
                )));
            }
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(bad(format!("implausible rank {rank} for '{name}'")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dims")? as usize);
            }
            let expect_shape = model.params[i].tensor.shape();
            if shape != expect_shape {
                return Err(bad(format!(
                    "tensor '{name}' has shape {shape:?} but {expect_shape:?} was expected"
                )));
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            {
                // Bulk-read the payload instead of 8 bytes at a time.
                let byte_len = numel
                    .checked_mul(8)
                    .ok_or_else(|| bad("tensor payload size overflows"))?;
                let raw = r.bytes(byte_len, &format!("payload of '{name}'"))?;
                for (x, chunk) in data.iter_mut().zip(raw.chunks_exact(8)) {
                    *x = f64::from_le_bytes(chunk.try_into().unwrap());
                }
            }
            let tensor = Tensor::new(shape, data)?;
            if !tensor.is_all_finite() {
                return Err(bad(format!("tensor '{name}' contains non-finite values")));
            }
            *model.tensor_mut(crate::tensor::ParamId(i as u32)) = tensor;
        }

        let mut trailing = [0u8; 1];
        match r.inner.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(bad("trailing bytes after the last tensor")),
            Err(e) => return Err(Error::Io(e)),
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::tiny_model;
    use crate::tensor::Phase;

    #[test]
    fn roundtrip_preserves_config_params_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = tiny_model(42);
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();

        assert_eq!(loaded.config(), m.config());
        assert_eq!(loaded.num_tensors(), m.num_tensors());
        for ((_, n1, t1, d1), (_, n2, t2, d2)) in m.param_iter().zip(loaded.param_iter()) {
            assert_eq!(n1, n2);
            assert_eq!(d1, d2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data(), "payload drift in {n1}");
        }
        let tokens = [4u32, 9, 12, 5];
        let (a, _) = m.forward_logits(&tokens).unwrap();
        let (b, _) = loaded.forward_logits(&tokens).unwrap();
        assert_eq!(a.data(), b.data(), "loaded model must be bitwise identical");
    }

    #[test]
    fn rejects_bad_magic_truncation_trailing_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = tiny_model(1);
        m.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let try_load = |bytes: &[u8]| {
            let p = dir.path().join("mutant.bin");
            std::fs::write(&p, bytes).unwrap();
            Model::load(&p)
        };

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(try_load(&bad_magic), Err(Error::Checkpoint(_))));

        let truncated = &good[..good.len() - 9];
        assert!(matches!(try_load(truncated), Err(Error::Checkpoint(_))));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(try_load(&trailing), Err(Error::Checkpoint(_))));

        let mut nan = good.clone();
        let last8 = nan.len() - 8;
        nan[last8..].copy_from_slice(&f64::NAN.to_le_bytes());
        match try_load(&nan) {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains("non-finite"), "got: {msg}")
            }
            Err(e) => panic!("expected checkpoint error, got {e}"),
            Ok(_) => panic!("a NaN payload must not load"),
        }

        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(try_load(&bad_version), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn loaded_model_trains_identically_to_saved_one() {
        // Same dropout stream + same weights => same training-phase logits.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = tiny_model(5);
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        let run = |model: &Model| {
            let tape = crate::tensor::Tape::recording();
            let mut rng = crate::rng::stream(3, crate::rng::salt::DROPOUT);
            let (l, _) = model
                .forward(&tape, &[4, 5, 6, 7], Phase::Train, &mut rng)
                .unwrap();
            l.value().data().to_vec()
        };
        assert_eq!(run(&m), run(&loaded));
    }
}
