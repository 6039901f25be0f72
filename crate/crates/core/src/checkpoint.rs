//! Versioned parameter checkpoints (`.mick`).
//!
//! Little-endian, same discipline as the dataset format:
//!
//! ```text
//! "MICK" | u32 version = 1
//! u32 len | UTF-8 training config (key = value lines)
//! u32 K   | K × u32 training-split class counts
//! u32 num_arrays
//! per array: u32 name_len | name | u32 rank | rank × u32 dims | f32 values
//! ```

use std::path::Path;

use crate::config::TrainConfig;
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MICK_MAGIC: &[u8; 4] = b"MICK";
pub const MICK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub class_counts: Vec<usize>,
    pub params: ModelParams,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MICK_MAGIC);
        put_u32(&mut out, MICK_VERSION as usize);
        let cfg = self.config.to_kv();
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.class_counts.len());
        for &c in &self.class_counts {
            put_u32(&mut out, c);
        }
        let named = self.params.named();
        put_u32(&mut out, named.len());
        for (name, t) in named {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MICK_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"MICK\"".into(),
            });
        }
        let version = r.u32("version")?;
        if version != MICK_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let at = r.pos as u64;
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Format {
            offset: at,
            msg: "config is not UTF-8".into(),
        })?;
        let mut config = TrainConfig::default();
        config.apply_kv(text)?;
        config.validate()?;

        let k = r.u32("class count")? as usize;
        let class_counts = (0..k)
            .map(|_| r.u32("class counts").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;

        let mut params = ModelParams::init(&config.model, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let at = r.pos as u64;
        let count = r.u32("array count")? as usize;
        if count != expected.len() {
            return Err(Error::Format {
                offset: at,
                msg: format!("{count} arrays, configuration needs {}", expected.len()),
            });
        }
        let mut loaded = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let at = r.pos as u64;
            let name_len = r.u32("name length")? as usize;
            let name = r.take(name_len, "name")?;
            if name != want_name.as_bytes() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!(
                        "expected array {want_name}, found {}",
                        String::from_utf8_lossy(name)
                    ),
                });
            }
            let at = r.pos as u64;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if &shape != want_shape {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("array {want_name} has shape {shape:?}, expected {want_shape:?}"),
                });
            }
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n, "array data")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            loaded.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        Ok(Checkpoint {
            config,
            class_counts,
            params,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = TrainConfig::for_dataset("c_h = 8\nn_heads = 2\nc = 6", 3, 4, 5).unwrap();
        let mut params = ModelParams::init(&config.model, 3).unwrap();
        params.narrow_to_f32();
        Checkpoint {
            config,
            class_counts: vec![9, 4, 2],
            params,
        }
    }

    #[test]
    fn roundtrip_is_exact_at_f32() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn corrupt_headers_are_reported() {
        let bytes = sample().encode();
        assert!(matches!(
            Checkpoint::decode(&[]),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::decode(short),
            Err(Error::Format { .. })
        ));
    }
}
