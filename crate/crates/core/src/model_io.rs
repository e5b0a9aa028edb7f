//! Binary encoder files.
//!
//! Layout (little-endian): magic `VEILENC\0`, u32 schema version, the
//! architecture spec as a length-prefixed string, the encoder name, a u32
//! block count, then per block its name, u32 rank, u64 dims and f64 values.
//! A SHA-256 of everything before it closes the file.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{ArchitectureSpec, Encoder, EncoderNetwork};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VEILENC\0";
pub const SCHEMA_VERSION: u32 = 1;

/// Named state blocks (`layer{i}.{field}`) in serialization order.
pub fn state_blocks(enc: &EncoderNetwork) -> Vec<(String, &Tensor)> {
    enc.net
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.state().into_iter().map(move |(f, t)| (format!("layer{i}.{f}"), t)))
        .collect()
}

pub fn encoder_to_bytes(enc: &EncoderNetwork) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    put_str(&mut b, &enc.spec.to_string());
    put_str(&mut b, enc.name());
    let blocks = state_blocks(enc);
    b.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        put_str(&mut b, &name);
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

pub fn encoder_from_bytes(bytes: &[u8]) -> Result<EncoderNetwork> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Corrupt("encoder file truncated".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Corrupt("encoder checksum mismatch".into()));
    }
    let mut r = Cursor { b: body, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Corrupt("not an encoder file".into()));
    }
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(Error::Schema(format!("encoder schema version {version}, expected {SCHEMA_VERSION}")));
    }
    let spec: ArchitectureSpec = r.string()?.parse()?;
    let name = r.string()?;
    // Initial values are overwritten below; the rng only satisfies the builder.
    let mut enc = EncoderNetwork::build_unchecked(&spec, &mut ChaCha8Rng::seed_from_u64(0))?.with_name(name);
    let count = r.u32()? as usize;
    let expected: Vec<(String, Vec<usize>)> =
        state_blocks(&enc).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if count != expected.len() {
        return Err(Error::Corrupt(format!("{count} state blocks, architecture needs {}", expected.len())));
    }
    let mut values = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &name != want_name || &shape != want_shape {
            return Err(Error::Corrupt(format!("block {name} {shape:?} where {want_name} {want_shape:?} expected")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        values.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect::<Vec<_>>());
    }
    if r.at != body.len() {
        return Err(Error::Corrupt("trailing bytes after state blocks".into()));
    }
    let mut it = values.into_iter();
    for layer in &mut enc.net.layers {
        for (_, t) in layer.state_mut() {
            t.data_mut().copy_from_slice(&it.next().expect("count checked"));
        }
    }
    Ok(enc)
}

pub fn save_encoder(enc: &EncoderNetwork, path: &Path) -> Result<()> {
    fs::write(path, encoder_to_bytes(enc))?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<EncoderNetwork> {
    let bytes = fs::read(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    encoder_from_bytes(&bytes)
}

/// Hex SHA-256 of the serialized encoder.
pub fn encoder_hash(enc: &EncoderNetwork) -> String {
    hex(&Sha256::digest(encoder_to_bytes(enc)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Corrupt("encoder file truncated".into()))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("non-utf8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::layers::Mode;
    use crate::networks::NormVariant;
    use crate::seed::stream;

    fn trained_like() -> EncoderNetwork {
        let spec = ArchitectureSpec::encoder_variant([3, 8, 8], [2, 2, 2], NormVariant::PerLocationWithBias);
        let mut enc = EncoderNetwork::build_unchecked(&spec, &mut stream(5, "init")).unwrap().with_name("probe");
        let mut r = stream(5, "x");
        let x = Tensor::from_fn([6, 3, 8, 8], |_| r.gen::<f64>() - 0.5);
        enc.encode_mut(&x, Mode::Train).unwrap();
        enc
    }

    #[test]
    fn reload_is_exact() {
        let enc = trained_like();
        let back = encoder_from_bytes(&encoder_to_bytes(&enc)).unwrap();
        assert_eq!(back.spec, enc.spec);
        assert_eq!(back.name(), "probe");
        for ((n1, a), (n2, b)) in state_blocks(&enc).iter().zip(state_blocks(&back)) {
            assert_eq!(n1, &n2);
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(encoder_hash(&enc), encoder_hash(&back));
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = encoder_to_bytes(&trained_like());
        for at in [0, 9, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[at] ^= 1;
            assert!(matches!(encoder_from_bytes(&b), Err(Error::Corrupt(_))), "byte {at}");
        }
        assert!(matches!(encoder_from_bytes(&bytes[..20]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn newer_schema_is_refused() {
        let mut b = encoder_to_bytes(&trained_like());
        b.truncate(b.len() - 32);
        b[8..12].copy_from_slice(&2u32.to_le_bytes());
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        assert!(matches!(encoder_from_bytes(&b), Err(Error::Schema(_))));
    }
}
