//! Binary checkpoint format.
//!
//! ```text
//! "CSRN"  u16 version
//! u8 scale  u16 features  u16 n_pairs  u16 tap_src  u16 tap_dst  u8 variant
//! u32 entry count
//! per entry: u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!            rank × u32 extents, little-endian payload
//! u64 FNV-1a of every preceding byte
//! ```
//! All integers are little-endian.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{build_csrnet, CsrnetConfig, Variant};
use crate::autograd::LayerGraph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSRN";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub config: CsrnetConfig,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_graph<T: Scalar>(g: &LayerGraph<T>, config: &CsrnetConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            entries: g
                .params()
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.cast::<f32>().into_data(),
                })
                .collect(),
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let narrow16 = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| {
                Error::config(format!("{what} {v} does not fit the checkpoint header"))
            })
        };
        let mut out = Vec::with_capacity(64 + 4 * self.total_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(
            u8::try_from(c.scale)
                .map_err(|_| Error::config("scale does not fit the checkpoint header"))?,
        );
        out.extend_from_slice(&narrow16(c.features, "features")?.to_le_bytes());
        out.extend_from_slice(&narrow16(c.n_pairs, "n_pairs")?.to_le_bytes());
        out.extend_from_slice(&narrow16(c.local_tap_src, "tap_src")?.to_le_bytes());
        out.extend_from_slice(&narrow16(c.local_tap_dst, "tap_dst")?.to_le_bytes());
        out.push(c.variant.code());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&narrow16(e.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| Error::config("extent does not fit u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let hash = fnv1a64(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        Ok(out)
    }

    /// Parse and verify a checkpoint: magic, then integrity hash, then version.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("bad magic: not a checkpoint file".into()));
        }
        if bytes.len() < 4 + 2 + 8 {
            return Err(Error::Integrity("file truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(body) != stored {
            return Err(Error::Integrity(
                "hash mismatch: file is truncated or corrupted".into(),
            ));
        }

        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config = CsrnetConfig {
            scale: r.u8()? as usize,
            features: r.u16()? as usize,
            n_pairs: r.u16()? as usize,
            local_tap_src: r.u16()? as usize,
            local_tap_dst: r.u16()? as usize,
            variant: Variant::from_code(r.u8()?).map_err(|e| Error::Integrity(e.to_string()))?,
        };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Integrity(format!(
                    "entry '{name}': unknown dtype tag {dtype}"
                )));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Integrity("entry too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(CheckpointEntry { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after last entry",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            config,
            entries,
        })
    }

    /// Copy entries into a graph whose parameter set must match exactly.
    pub fn apply_to<T: Scalar>(&self, g: &mut LayerGraph<T>) -> Result<()> {
        let have: BTreeSet<&str> = g.params().iter().map(|p| p.name.as_str()).collect();
        let want: BTreeSet<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        if have != want {
            let missing: Vec<_> = have.difference(&want).take(3).collect();
            let extra: Vec<_> = want.difference(&have).take(3).collect();
            return Err(Error::Schema(format!(
                "parameter sets differ (missing from checkpoint: {missing:?}, unknown in checkpoint: {extra:?})"
            )));
        }
        for e in &self.entries {
            let p = g.param(&e.name).expect("name sets checked");
            if p.value.shape() != e.shape.as_slice() {
                return Err(Error::Schema(format!(
                    "parameter '{}' has shape {:?}, checkpoint holds {:?}",
                    e.name,
                    p.value.shape(),
                    e.shape
                )));
            }
        }
        for e in &self.entries {
            let p = g.param_mut(&e.name).expect("name sets checked");
            p.value = Tensor::new(&e.shape, e.data.clone())?.cast();
            p.grad.fill(T::zero());
        }
        Ok(())
    }

    /// Fail with a schema error unless the checkpoint was built for `scale`.
    pub fn expect_scale(&self, scale: usize) -> Result<()> {
        if self.config.scale != scale {
            return Err(Error::Schema(format!(
                "checkpoint is for scale x{}, request is for x{scale}",
                self.config.scale
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("unexpected end of checkpoint data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn save_checkpoint<T: Scalar>(
    g: &LayerGraph<T>,
    cfg: &CsrnetConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint::from_graph(g, cfg).encode()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

/// Rebuild the network a checkpoint describes and load its parameters.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(LayerGraph<f32>, CsrnetConfig)> {
    let ckpt = read_checkpoint(path)?;
    ckpt.config
        .validate()
        .map_err(|e| Error::Integrity(format!("stored configuration is invalid: {e}")))?;
    let mut g = build_csrnet(&ckpt.config)?;
    ckpt.apply_to(&mut g)?;
    Ok((g, ckpt.config))
}

/// Load parameters into an existing graph; the name sets must match.
pub fn load_checkpoint_into<T: Scalar>(
    g: &mut LayerGraph<T>,
    path: impl AsRef<Path>,
) -> Result<CsrnetConfig> {
    let ckpt = read_checkpoint(path)?;
    ckpt.apply_to(g)?;
    Ok(ckpt.config)
}

/// Human-readable summary used by the `inspect` command.
pub fn inspect_checkpoint(ckpt: &Checkpoint) -> String {
    use std::fmt::Write;
    let c = &ckpt.config;
    let mut s = String::new();
    let _ = writeln!(s, "version\t{}", ckpt.version);
    let _ = writeln!(
        s,
        "config\tscale={} features={} n_pairs={} local_tap={}->{} variant={}",
        c.scale, c.features, c.n_pairs, c.local_tap_src, c.local_tap_dst, c.variant
    );
    for e in &ckpt.entries {
        let _ = writeln!(s, "param\t{}\t{:?}\t{}", e.name, e.shape, e.data.len());
    }
    let _ = writeln!(s, "total\t{}", ckpt.total_params());
    let _ = writeln!(s, "integrity\tok");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small() -> (LayerGraph<f32>, CsrnetConfig) {
        let cfg = CsrnetConfig::mini(4, 3);
        let mut g = build_csrnet(&cfg).unwrap();
        init_params(&mut g, 5);
        (g, cfg)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn header_layout() {
        let (g, cfg) = small();
        let bytes = Checkpoint::from_graph(&g, &cfg).encode().unwrap();
        assert_eq!(&bytes[..4], b"CSRN");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 3);
        assert_eq!(&bytes[7..9], &[4, 0]);
        assert_eq!(&bytes[9..11], &[2, 0]);
        assert_eq!(&bytes[11..13], &[2, 0]);
        assert_eq!(&bytes[13..15], &[5, 0]);
        assert_eq!(bytes[15], 0);
        assert_eq!(
            u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize,
            g.params().len()
        );
    }

    #[test]
    fn decode_round_trip() {
        let (g, cfg) = small();
        let ckpt = Checkpoint::from_graph(&g, &cfg);
        assert_eq!(Checkpoint::decode(&ckpt.encode().unwrap()).unwrap(), ckpt);
    }

    #[test]
    fn corruption_and_truncation_are_integrity_errors() {
        let (g, cfg) = small();
        let bytes = Checkpoint::from_graph(&g, &cfg).encode().unwrap();
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(
            Checkpoint::decode(&flipped),
            Err(Error::Integrity(_))
        ));
        for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::decode(&bytes[..cut]),
                Err(Error::Integrity(_))
            ));
        }
        assert!(matches!(
            Checkpoint::decode(b"PNG!...."),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let (g, cfg) = small();
        let mut ckpt = Checkpoint::from_graph(&g, &cfg);
        ckpt.version = 2;
        let bytes = ckpt.encode().unwrap();
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::UnsupportedVersion {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn name_set_mismatch_is_schema_error() {
        let (g, cfg) = small();
        let ckpt = Checkpoint::from_graph(&g, &cfg);
        let mut other = build_csrnet::<f32>(&CsrnetConfig::mini(4, 2)).unwrap();
        assert!(matches!(ckpt.apply_to(&mut other), Err(Error::Schema(_))));
        assert!(matches!(ckpt.expect_scale(2), Err(Error::Schema(_))));
        assert!(ckpt.expect_scale(3).is_ok());
    }
}
