use std::fs;
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FBSD";
pub const VERSION: u32 = 1;
/// magic, version, count, height, width, channels, dtype.
pub const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 1 + 1;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::data(format!("{what} {v} does not fit in u16")))
    };
    let (h, w) = (narrow(ds.height, "height")?, narrow(ds.width, "width")?);
    let c = u8::try_from(ds.channels).map_err(|_| Error::data("too many channels"))?;
    let count = u32::try_from(ds.len()).map_err(|_| Error::data("too many samples"))?;
    let per = ds.height * ds.width * ds.channels;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (2 + per));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.push(c);
    out.push(0);
    for s in &ds.samples {
        if s.image.len() != per {
            return Err(Error::data("sample size disagrees with dataset geometry"));
        }
        out.extend_from_slice(&s.label.to_le_bytes());
        out.extend_from_slice(&s.image);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"FBSD\""));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = u32_at(8) as usize;
    let (h, w) = (u16_at(12) as usize, u16_at(14) as usize);
    let c = bytes[16] as usize;
    if bytes[17] != 0 {
        return Err(Error::format(17, format!("unsupported dtype {}", bytes[17])));
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::format(12, "zero image extent"));
    }
    let record = 2 + h * w * c;
    let expected = HEADER_LEN + count * record;
    if bytes.len() != expected {
        let at = bytes.len().min(expected) as u64;
        return Err(Error::format(
            at,
            format!(
                "file is {} bytes but header declares {count} samples of {h}x{w}x{c} ({expected} bytes)",
                bytes.len()
            ),
        ));
    }
    let samples = bytes[HEADER_LEN..]
        .chunks(record)
        .map(|r| Sample {
            label: u16::from_le_bytes([r[0], r[1]]),
            image: r[2..].to_vec(),
        })
        .collect();
    Dataset::new(h, w, c, samples)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let samples = (0..3)
            .map(|i| Sample {
                image: vec![i as u8; 2 * 3],
                label: i,
            })
            .collect();
        Dataset::new(1, 2, 3, samples).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dataset(&tiny()).unwrap();
        assert_eq!(&bytes[0..4], b"FBSD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * 8);
    }

    #[test]
    fn rejects_bad_magic_version_and_length() {
        let good = encode_dataset(&tiny()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 4, .. })));
        let short = &good[..good.len() - 1];
        assert!(matches!(decode_dataset(short), Err(Error::Format { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(Error::Format { .. })));
        assert!(matches!(decode_dataset(&good[..5]), Err(Error::Format { offset: 5, .. })));
    }
}
