//! Reader for the IDX binary format used by the handwritten-digit dataset.
//!
//! Header: two zero bytes, a type byte (0x08 = unsigned byte), the number of
//! dimensions, then one big-endian `u32` per dimension. Only unsigned-byte
//! payloads are supported.

use std::path::Path;

use super::{Dataset, Targets};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// A decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Parses an unsigned-byte IDX array of any rank.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0)?;
    if magic >> 16 != 0 {
        return Err(Error::Idx(format!("bad magic {magic:#010x}")));
    }
    if (magic >> 8) & 0xff != 0x08 {
        return Err(Error::Idx("only unsigned-byte payloads are supported".into()));
    }
    let rank = (magic & 0xff) as usize;
    if rank == 0 {
        return Err(Error::Idx("rank must be positive".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for r in 0..rank {
        let d = be_u32(bytes, 4 + 4 * r)? as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Idx("dimension product overflows".into()))?;
        dims.push(d);
    }
    let header = 4 + 4 * rank;
    let payload = &bytes[header..];
    if payload.len() != count {
        return Err(Error::Idx(format!(
            "payload holds {} bytes, header declares {count}",
            payload.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Parses an image file (magic 0x00000803): returns `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if be_u32(bytes, 0)? != IMAGES_MAGIC {
        return Err(Error::Idx("expected image magic 0x00000803".into()));
    }
    let arr = parse_idx(bytes)?;
    Ok((arr.dims[0], arr.dims[1], arr.dims[2], arr.data))
}

/// Parses a label file (magic 0x00000801).
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if be_u32(bytes, 0)? != LABELS_MAGIC {
        return Err(Error::Idx("expected label magic 0x00000801".into()));
    }
    Ok(parse_idx(bytes)?.data)
}

/// Builds a classification dataset from a pair of IDX files, pixels scaled to
/// [0, 1]. `limit` keeps only the first samples.
pub fn load_digits(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    let (count, rows, cols, pixels) = parse_images(&read(images)?)?;
    let labels = parse_labels(&read(labels)?)?;
    if labels.len() != count {
        return Err(Error::Idx(format!(
            "{count} images but {} labels",
            labels.len()
        )));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let dim = rows * cols;
    let features = pixels[..n * dim].iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels[..n].iter().map(|&y| usize::from(y)).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(features, dim, Targets::Labels { labels, classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, r: u32, c: u32) -> Vec<u8> {
        let mut b = IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, r, c] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend((0..n * r * c).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn parses_images_and_labels() {
        let (n, r, c, px) = parse_images(&image_file(2, 3, 2)).unwrap();
        assert_eq!((n, r, c), (2, 3, 2));
        assert_eq!(px.len(), 12);

        let mut lb = LABELS_MAGIC.to_be_bytes().to_vec();
        lb.extend_from_slice(&3u32.to_be_bytes());
        lb.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_labels(&lb).unwrap(), vec![7, 0, 9]);
        assert!(parse_images(&lb).is_err());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse_idx(&[]).is_err());
        assert!(parse_idx(&[0, 0, 8]).is_err());
        let mut f = image_file(2, 2, 2);
        f.pop();
        assert!(parse_idx(&f).is_err());
        let huge = [0, 0, 8, 3, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff];
        assert!(parse_idx(&huge).is_err());
        assert!(parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 1, 0]).is_err());
    }
}
