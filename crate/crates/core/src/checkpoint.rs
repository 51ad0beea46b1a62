//! Binary model snapshots.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "HVCLCKPT"  u32 version  u64 len  metadata (UTF-8)  u32 layers  layer*
//! layer   := u8 tag, then
//!   0 mixture:     u64 index, u32 top_k, u32 experts, gate, variational*
//!   1 variational: tensor mu, rho, prior mu, prior rho, bias
//!   2 dense:       tensor weight, bias
//! gate    := tensor weight, bias, prior weight, prior bias
//! tensor  := u32 rank, u64 dim*, f64 value*
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is exact.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::mixture::{GatingNet, MoveLayer};
use crate::model::{DenseLayer, Layer, Model};
use crate::tensor::Tensor;
use crate::variational::{GaussianMeanField, VariationalDense};

pub const MAGIC: &[u8; 8] = b"HVCLCKPT";
pub const VERSION: u32 = 1;

const TAG_MIXTURE: u8 = 0;
const TAG_VARIATIONAL: u8 = 1;
const TAG_DENSE: u8 = 2;

/// Upper bound on any single length field, to reject corrupt files early.
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub model: Model,
}

pub fn encode(model: &Model, metadata: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, metadata.len() as u64);
    out.extend_from_slice(metadata.as_bytes());
    put_u32(&mut out, model.layers.len() as u32);
    for layer in &model.layers {
        match layer {
            Layer::Mixture(m) => {
                out.push(TAG_MIXTURE);
                put_u64(&mut out, m.index as u64);
                put_u32(&mut out, m.top_k as u32);
                put_u32(&mut out, m.experts.len() as u32);
                for t in [
                    &m.gating.weight,
                    &m.gating.bias,
                    &m.gating.prior_weight,
                    &m.gating.prior_bias,
                ] {
                    put_tensor(&mut out, t);
                }
                for e in &m.experts {
                    put_variational(&mut out, e);
                }
            }
            Layer::Variational(v) => {
                out.push(TAG_VARIATIONAL);
                put_variational(&mut out, v);
            }
            Layer::Dense(d) => {
                out.push(TAG_DENSE);
                put_tensor(&mut out, &d.weight);
                put_tensor(&mut out, &d.bias);
            }
        }
    }
    out
}

/// Parses checkpoint bytes; `path` is used only in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
        path: path.to_path_buf(),
    };
    let mut magic = [0u8; 8];
    r.bytes(&mut magic)?;
    if &magic != MAGIC {
        return Err(r.fail("not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let meta_len = r.len()?;
    let mut meta = vec![0u8; meta_len];
    r.bytes(&mut meta)?;
    let metadata = String::from_utf8(meta).map_err(|_| r.fail("metadata is not UTF-8"))?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers as usize);
    for i in 0..n_layers {
        let tag = r.u8()?;
        let layer = match tag {
            TAG_MIXTURE => {
                let index = r.u64()? as usize;
                let top_k = r.u32()? as usize;
                let n_experts = r.u32()?;
                let gating = GatingNet {
                    weight: r.tensor()?,
                    bias: r.tensor()?,
                    prior_weight: r.tensor()?,
                    prior_bias: r.tensor()?,
                };
                let experts = (0..n_experts).map(|_| r.variational()).collect::<Result<Vec<_>>>()?;
                Layer::Mixture(MoveLayer::from_parts(index, experts, gating, top_k).map_err(|e| r.fail(e.to_string()))?)
            }
            TAG_VARIATIONAL => Layer::Variational(r.variational()?),
            TAG_DENSE => Layer::Dense(DenseLayer {
                weight: r.tensor()?,
                bias: r.tensor()?,
            }),
            other => return Err(r.fail(format!("layer {i}: unknown tag {other}"))),
        };
        layers.push(layer);
    }
    if (r.cur.position() as usize) != bytes.len() {
        return Err(r.fail("trailing bytes after last layer"));
    }
    let model = Model::from_layers(layers).map_err(|e| r.fail(e.to_string()))?;
    Ok(Checkpoint { metadata, model })
}

pub fn save(path: &Path, model: &Model, metadata: &str) -> Result<()> {
    fs::write(path, encode(model, metadata)).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    decode(&bytes, path)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.write_u32::<LittleEndian>(v).expect("vec write");
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.write_u64::<LittleEndian>(v).expect("vec write");
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        out.write_f64::<LittleEndian>(v).expect("vec write");
    }
}

fn put_variational(out: &mut Vec<u8>, v: &VariationalDense) {
    for t in [
        &v.posterior.mu,
        &v.posterior.rho,
        &v.prior().mu,
        &v.prior().rho,
        &v.bias,
    ] {
        put_tensor(out, t);
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: PathBuf,
}

impl Reader<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn truncated(&self) -> Error {
        self.fail(format!("truncated at byte {}", self.cur.position()))
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.cur.read_exact(buf).map_err(|_| self.truncated())
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.truncated())
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(|_| self.truncated())
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LittleEndian>().map_err(|_| self.truncated())
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if n > MAX_ELEMENTS || n > remaining {
            return Err(self.truncated());
        }
        Ok(n as usize)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > 2 {
            return Err(self.fail(format!("tensor of rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if (n as u64).saturating_mul(8) > remaining {
            return Err(self.truncated());
        }
        let mut data = vec![0.0; n];
        self.cur
            .read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| self.truncated())?;
        Tensor::new(shape, data).map_err(|e| self.fail(e.to_string()))
    }

    fn variational(&mut self) -> Result<VariationalDense> {
        let posterior = GaussianMeanField::new(self.tensor()?, self.tensor()?).map_err(|e| self.fail(e.to_string()))?;
        let prior = GaussianMeanField::new(self.tensor()?, self.tensor()?).map_err(|e| self.fail(e.to_string()))?;
        let bias = self.tensor()?;
        VariationalDense::from_parts(posterior, prior, bias).map_err(|e| self.fail(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, LayerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(kind: LayerKind) -> Model {
        let arch = Architecture {
            input_dim: 5,
            hidden: vec![4],
            output_dim: 3,
            experts: 3,
            top_k: 2,
        };
        let mut m = Model::new(&arch, kind, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        m.snapshot_priors();
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += 1e-3 / 3.0;
            }
        }
        m
    }

    #[test]
    fn roundtrip_is_exact() {
        for kind in [LayerKind::Mixture, LayerKind::Variational, LayerKind::Dense] {
            let m = model(kind);
            let bytes = encode(&m, "a=1\nb=2\n");
            let c = decode(&bytes, Path::new("mem")).unwrap();
            assert_eq!(c.model, m);
            assert_eq!(c.metadata, "a=1\nb=2\n");
            assert_eq!(encode(&c.model, &c.metadata), bytes);
        }
    }

    #[test]
    fn rejects_version_magic_and_truncation() {
        let bytes = encode(&model(LayerKind::Mixture), "");
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 99;
        let err = decode(&wrong_version, Path::new("x.ckpt")).unwrap_err().to_string();
        assert!(err.contains("version 99") && err.contains("x.ckpt"), "{err}");

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            decode(&wrong_magic, Path::new("x")),
            Err(Error::Checkpoint { .. })
        ));

        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..cut], Path::new("x")),
                Err(Error::Checkpoint { .. })
            ));
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, Path::new("x")).is_err());
    }
}
