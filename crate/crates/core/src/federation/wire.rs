//! Binary sample file, little-endian throughout.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "FPSB"
//! 4       2         version (u16) = 1
//! 6       2         layer count L (u16)
//! 8       4·L       layer sizes (u32 each)
//! 8+4L    1         activation code (0 = ReLU)
//! 9+4L    1         task code (0 = regression, 1 = classification)
//! 10+4L   4         client id (u32)
//! 14+4L   4         dataset size (u32)
//! 18+4L   4         sample count S (u32)
//! 22+4L   8·S·P     parameters, f64, sample-major
//! end-4   4         CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! A file therefore occupies `26 + 4·L + 8·S·P` bytes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Activation, Architecture, ModelParams, Task};
use crate::sampler::PosteriorSamples;

pub const MAGIC: [u8; 4] = *b"FPSB";
pub const VERSION: u16 = 1;

/// Bytes outside the per-layer descriptor and the parameter payload.
pub const FIXED_OVERHEAD: usize = 26;

pub fn encoded_len(layers: usize, samples: usize, params: usize) -> usize {
    FIXED_OVERHEAD + 4 * layers + 8 * samples * params
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::InvalidConfig(format!("{what} {value} exceeds u32")))
}

pub fn serialize_samples(s: &PosteriorSamples) -> Result<Vec<u8>> {
    let arch = &s.arch;
    let sizes = arch.layer_sizes();
    let layer_count = u16::try_from(sizes.len())
        .map_err(|_| Error::InvalidConfig("too many layers for the sample format".into()))?;
    let p = arch.parameter_count();
    let mut out = Vec::with_capacity(encoded_len(sizes.len(), s.len(), p));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&layer_count.to_le_bytes());
    for &size in sizes {
        out.extend_from_slice(&to_u32(size, "layer size")?.to_le_bytes());
    }
    out.push(arch.activation().code());
    out.push(arch.task().code());
    out.extend_from_slice(&s.client_id.to_le_bytes());
    out.extend_from_slice(&to_u32(s.dataset_size, "dataset size")?.to_le_bytes());
    out.extend_from_slice(&to_u32(s.len(), "sample count")?.to_le_bytes());
    for sample in &s.samples {
        for v in sample.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn deserialize_samples(bytes: &[u8]) -> Result<PosteriorSamples> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let layers = cur.u16()? as usize;
    let sizes = (0..layers)
        .map(|_| cur.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let activation_code = cur.u8()?;
    let task_code = cur.u8()?;
    let client_id = cur.u32()?;
    let dataset_size = cur.u32()? as usize;
    let count = cur.u32()? as usize;

    let activation = Activation::from_code(activation_code)
        .ok_or_else(|| Error::InvalidArchitecture(format!("unknown activation code {activation_code}")))?;
    let task = Task::from_code(task_code)
        .ok_or_else(|| Error::InvalidArchitecture(format!("unknown task code {task_code}")))?;
    let arch = Arc::new(Architecture::new(sizes, activation, task)?);
    let p = arch.parameter_count();

    let expected = encoded_len(layers, count, p);
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }

    let payload = &body[cur.pos..];
    let mut samples = Vec::with_capacity(count);
    for (s, chunk) in payload.chunks_exact(8 * p).enumerate() {
        let mut values = Vec::with_capacity(p);
        for (j, b) in chunk.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(b.try_into().expect("eight bytes"));
            if !v.is_finite() {
                return Err(Error::NonFinitePayload(s * p + j));
            }
            values.push(v);
        }
        samples.push(ModelParams::new(Arc::clone(&arch), values)?);
    }
    PosteriorSamples::new(client_id, arch, samples, dataset_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> PosteriorSamples {
        let arch = Arc::new(Architecture::mlp(2, &[3], 1, Task::Regression).unwrap());
        let samples = (0..2)
            .map(|s| {
                let values = (0..arch.parameter_count())
                    .map(|j| (s * 100 + j) as f64 * 0.1 - 0.35)
                    .collect();
                ModelParams::new(Arc::clone(&arch), values).unwrap()
            })
            .collect();
        PosteriorSamples::new(4, arch, samples, 321).unwrap()
    }

    #[test]
    fn round_trip_and_size() {
        let s = fixture();
        let bytes = serialize_samples(&s).unwrap();
        // 3 layer sizes, 2 samples of 13 parameters: 26 + 12 + 208.
        assert_eq!(bytes.len(), 246);
        assert_eq!(bytes.len(), encoded_len(3, 2, 13));
        let back = deserialize_samples(&bytes).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn header_layout() {
        let bytes = serialize_samples(&fixture()).unwrap();
        assert_eq!(&bytes[0..4], b"FPSB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[3, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[20..22], &[0, 0]);
        assert_eq!(&bytes[22..26], &[4, 0, 0, 0]);
        assert_eq!(&bytes[26..30], &321u32.to_le_bytes());
        assert_eq!(&bytes[30..34], &[2, 0, 0, 0]);
    }

    #[test]
    fn distinct_errors() {
        let bytes = serialize_samples(&fixture()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize_samples(&bad), Err(Error::BadMagic { .. })));

        let short = &bytes[..bytes.len() - 9];
        assert!(matches!(deserialize_samples(short), Err(Error::Truncated { .. })));
        assert!(matches!(
            deserialize_samples(&bytes[..3]),
            Err(Error::Truncated { .. })
        ));

        let mut flipped = bytes.clone();
        flipped[40] ^= 0x01;
        assert!(matches!(
            deserialize_samples(&flipped),
            Err(Error::CrcMismatch { .. })
        ));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(
            deserialize_samples(&version),
            Err(Error::UnsupportedVersion(2))
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            deserialize_samples(&long),
            Err(Error::TrailingBytes { .. })
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut bytes = serialize_samples(&fixture()).unwrap();
        let at = 34;
        bytes[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            deserialize_samples(&bytes),
            Err(Error::NonFinitePayload(0))
        ));
    }
}
