//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"OTCP"
//! version u32
//! config_hash u64
//! iteration   u64
//! tensor section:   u32 count, then per tensor:
//!     name  u16 length + utf-8 bytes
//!     ndim  u8, dims u64 x ndim
//!     data  f64 x product(dims), little-endian bits
//! opt section flag u8 (0 = absent, 1 = present); when present:
//!     step u64, then a tensor section for first moments (`m.<name>`)
//!     and one for second moments (`v.<name>`)
//! ```
//!
//! Round-trips are bitwise; loading refuses a config-hash mismatch unless
//! forced.

use crate::error::{Error, Result};
use crate::tensor::ArrD;
use ndarray::IxDyn;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"OTCP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct TensorSection {
    pub tensors: Vec<(String, ArrD)>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moments: TensorSection,
    pub second_moments: TensorSection,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub iteration: u64,
    pub params: TensorSection,
    pub optimizer: Option<OptimizerState>,
}

impl TensorSection {
    pub fn get(&self, name: &str) -> Option<&ArrD> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let bytes = name.as_bytes();
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
            let dims = tensor.shape();
            out.write_all(&[dims.len() as u8])?;
            for &d in dims {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn read(inp: &mut impl Read) -> Result<Self> {
        let count = read_u32(inp)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u16(inp)? as usize;
            let mut name = vec![0u8; name_len];
            inp.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("invalid tensor name".into()))?;
            let ndim = read_u8(inp)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(inp)? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                inp.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((
                name,
                ArrD::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|_| Error::Checkpoint("tensor shape mismatch".into()))?,
            ));
        }
        Ok(TensorSection { tensors })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&ckpt.config_hash.to_le_bytes())?;
    out.write_all(&ckpt.iteration.to_le_bytes())?;
    ckpt.params.write(&mut out)?;
    match &ckpt.optimizer {
        None => out.write_all(&[0u8])?,
        Some(opt) => {
            out.write_all(&[1u8])?;
            out.write_all(&opt.step.to_le_bytes())?;
            opt.first_moments.write(&mut out)?;
            opt.second_moments.write(&mut out)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_hash: Option<u64>, force: bool) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut inp = bytes.as_slice();
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = read_u32(&mut inp)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_hash = read_u64(&mut inp)?;
    if let Some(expect) = expected_hash {
        if expect != config_hash && !force {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {config_hash:#018x}, config {expect:#018x} \
                 (pass force to load anyway)"
            )));
        }
    }
    let iteration = read_u64(&mut inp)?;
    let params = TensorSection::read(&mut inp)?;
    let optimizer = match read_u8(&mut inp)? {
        0 => None,
        1 => Some(OptimizerState {
            step: read_u64(&mut inp)?,
            first_moments: TensorSection::read(&mut inp)?,
            second_moments: TensorSection::read(&mut inp)?,
        }),
        other => {
            return Err(Error::Checkpoint(format!(
                "invalid optimizer flag {other}"
            )))
        }
    };
    Ok(Checkpoint {
        config_hash,
        iteration,
        params,
        optimizer,
    })
}

fn read_u8(inp: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    inp.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(inp: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    inp.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(inp: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    inp.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(inp: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    inp.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::rand_arr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Checkpoint {
            config_hash: 0xdead_beef,
            iteration: 420,
            params: TensorSection {
                tensors: vec![
                    ("a.weight".into(), rand_arr(&[3, 4], &mut rng)),
                    ("b.bias".into(), rand_arr(&[7], &mut rng)),
                ],
            },
            optimizer: Some(OptimizerState {
                step: 420,
                first_moments: TensorSection {
                    tensors: vec![("a.weight".into(), rand_arr(&[3, 4], &mut rng))],
                },
                second_moments: TensorSection {
                    tensors: vec![("a.weight".into(), rand_arr(&[3, 4], &mut rng))],
                },
            }),
        }
    }

    #[test]
    fn save_load_save_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = sample();
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1, Some(0xdead_beef), false).unwrap();
        assert_eq!(loaded.iteration, 420);
        assert_eq!(loaded.params.tensors.len(), 2);
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn hash_mismatch_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        assert!(load_checkpoint(&p, Some(1), false).is_err());
        assert!(load_checkpoint(&p, Some(1), true).is_ok());
        assert!(load_checkpoint(&p, None, false).is_ok());
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&p, None, false).is_err());
    }
}
