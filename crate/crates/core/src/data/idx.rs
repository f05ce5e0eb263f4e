use std::io::Write;
use std::path::{Path, PathBuf};

use super::{read_maybe_gzip, DataError, Dataset, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.offset;
        if rest < n {
            return Err(DataError::Truncated { path: self.path.to_path_buf(), offset: self.bytes.len(), needed: n - rest });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn header<'a>(path: &'a Path, bytes: &'a [u8], magic: u32) -> Result<Cursor<'a>> {
    let mut c = Cursor { path, bytes, offset: 0 };
    let found = c.u32()?;
    if found != magic {
        return Err(DataError::BadMagic { path: path.to_path_buf(), expected: magic, found });
    }
    Ok(c)
}

/// Loads an IDX image/label file pair (optionally gzip-compressed). Pixels
/// are scaled to `[0, 1]`; the result has shape `[N, 1, rows, cols]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ibytes = read_maybe_gzip(ip)?;
    let lbytes = read_maybe_gzip(lp)?;

    let mut ic = header(ip, &ibytes, IMAGES_MAGIC)?;
    let n = ic.u32()? as usize;
    let rows = ic.u32()? as usize;
    let cols = ic.u32()? as usize;
    let mut lc = header(lp, &lbytes, LABELS_MAGIC)?;
    let nl = lc.u32()? as usize;
    if n != nl {
        return Err(DataError::CountMismatch { images: n, labels: nl });
    }
    let pixels = ic.take(n * rows * cols)?;
    let raw_labels = lc.take(n)?;

    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let features = Tensor::new(vec![n, 1, rows, cols], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    let k = raw_labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let labels = raw_labels.iter().map(|&l| l as usize).collect();
    let names = (0..k).map(|c| c.to_string()).collect();
    Dataset::new(features, labels, names)
}

/// Writes an uncompressed IDX pair from byte pixels; the inverse of
/// [`load_idx`] for tests and data preparation.
pub fn write_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8], label_bytes: &[u8]) -> Result<()> {
    let n = label_bytes.len();
    if pixels.len() != n * rows * cols {
        return Err(DataError::Invalid(format!("{} pixels for {n} images of {rows}x{cols}", pixels.len())));
    }
    let write = |path: &Path, parts: &[&[u8]]| -> Result<()> {
        let io = |source| DataError::Io { path: PathBuf::from(path), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        for p in parts {
            f.write_all(p).map_err(io)?;
        }
        Ok(())
    };
    let be = |x: usize| (x as u32).to_be_bytes();
    write(images.as_ref(), &[&IMAGES_MAGIC.to_be_bytes(), &be(n), &be(rows), &be(cols), pixels])?;
    write(labels.as_ref(), &[&LABELS_MAGIC.to_be_bytes(), &be(n), label_bytes])
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;

    fn fixture(dir: &Path) -> (PathBuf, PathBuf, Vec<u8>) {
        let pixels: Vec<u8> = (0..3 * 2 * 3).map(|i| (i * 15) as u8).collect();
        let (ip, lp) = (dir.join("img"), dir.join("lbl"));
        write_idx(&ip, &lp, 2, 3, &pixels, &[2, 0, 1]).unwrap();
        (ip, lp, pixels)
    }

    #[test]
    fn roundtrip_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp, pixels) = fixture(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.features.shape(), &[3, 1, 2, 3]);
        assert_eq!(ds.labels, vec![2, 0, 1]);
        for (v, p) in ds.features.data().iter().zip(&pixels) {
            assert_eq!(*v, *p as f64 / 255.0);
        }
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp, _) = fixture(dir.path());
        let gz = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(std::fs::File::create(&gz).unwrap(), flate2::Compression::default());
        enc.write_all(&std::fs::read(&ip).unwrap()).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx(&gz, &lp).unwrap(), load_idx(&ip, &lp).unwrap());
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp, _) = fixture(dir.path());
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 4]).unwrap();
        match load_idx(&ip, &lp) {
            Err(DataError::Truncated { offset, needed, .. }) => {
                assert_eq!(offset, 16 + 14);
                assert_eq!(needed, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn swapped_files_fail_on_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp, _) = fixture(dir.path());
        let err = load_idx(&lp, &ip).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { found: 0x801, .. }), "{err}");
        assert!(err.to_string().contains("0x00000801"));
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp, _) = fixture(dir.path());
        let (ip2, lp2) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&ip2, &lp2, 2, 3, &[0; 12], &[0, 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp2), Err(DataError::CountMismatch { images: 3, labels: 2 })));
        let _ = (ip2, lp);
    }
}
