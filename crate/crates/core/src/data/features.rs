//! `MMCF` feature files: one modality per file, rows aligned by index.
//!
//! Layout (little-endian): magic `MMCF`, version `u32`, modality tag `u8`,
//! count `u32`, dim `u32`, `count·dim` `f32` values row-major, then `count`
//! `u32` labels where `0xFFFFFFFF` marks an unlabeled row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::tensor::Tensor2D;

const MAGIC: &[u8; 4] = b"MMCF";
const VERSION: u32 = 1;
/// Label value stored for rows without a concept.
pub const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub modality: Modality,
    /// `count×dim`, widened from the stored `f32`.
    pub features: Tensor2D,
    pub labels: Vec<Option<u32>>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_feature_file(path: &Path, modality: Modality, features: &Tensor2D, labels: &[Option<u32>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, modality, features, labels)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_features(w: &mut impl Write, modality: Modality, features: &Tensor2D, labels: &[Option<u32>]) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(Error::Format(format!("{} labels for {} rows", labels.len(), features.rows())));
    }
    if labels.contains(&Some(UNLABELED)) {
        return Err(Error::Format(format!("label {UNLABELED} is reserved for unlabeled rows")));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[modality.tag()])?;
    w.write_all(&to_u32(features.rows(), "row count")?.to_le_bytes())?;
    w.write_all(&to_u32(features.cols(), "dimension")?.to_le_bytes())?;
    for &v in features.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    for l in labels {
        w.write_all(&l.unwrap_or(UNLABELED).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    read_features(&mut BufReader::new(File::open(path)?))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated feature file while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_features(r: &mut impl Read) -> Result<FeatureFile> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected MMCF")));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let mut tag = [0u8; 1];
    read_exact(r, &mut tag, "modality tag")?;
    let modality = Modality::from_tag(tag[0]).ok_or_else(|| Error::Format(format!("unknown modality tag {}", tag[0])))?;
    let count = read_u32(r, "count")? as usize;
    let dim = read_u32(r, "dim")? as usize;
    let total = count
        .checked_mul(dim)
        .ok_or_else(|| Error::Format(format!("{count}×{dim} overflows")))?;

    let mut values = Vec::with_capacity(total.min(1 << 24));
    let mut b = [0u8; 4];
    for _ in 0..total {
        read_exact(r, &mut b, "feature values")?;
        values.push(f64::from(f32::from_le_bytes(b)));
    }
    let mut labels = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let l = read_u32(r, "labels")?;
        labels.push((l != UNLABELED).then_some(l));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after labels".into()));
    }
    Ok(FeatureFile {
        modality,
        features: Tensor2D::from_vec(count, dim, values)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(m: Modality, x: &Tensor2D, labels: &[Option<u32>]) -> Result<FeatureFile> {
        let mut buf = Vec::new();
        write_features(&mut buf, m, x, labels)?;
        read_features(&mut buf.as_slice())
    }

    #[test]
    fn empty_file_is_header_only() {
        let mut buf = Vec::new();
        write_features(&mut buf, Modality::Audio, &Tensor2D::zeros(0, 16), &[]).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 1 + 4 + 4);
        let f = read_features(&mut buf.as_slice()).unwrap();
        assert_eq!(f.features.shape(), (0, 16));
        assert!(f.labels.is_empty());
    }

    #[test]
    fn f32_values_round_trip_bitwise() {
        let x = Tensor2D::from_fn(3, 16, |r, c| f64::from((r as f32 * 1.37 - c as f32 * 0.219).sin()));
        let labels = [Some(2), None, Some(0)];
        let f = round_trip(Modality::Text, &x, &labels).unwrap();
        assert_eq!(f.modality, Modality::Text);
        assert_eq!(f.labels, labels);
        for (a, b) in f.features.data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let x = Tensor2D::full(5, 2, 1.5);
        let mut buf = Vec::new();
        write_features(&mut buf, Modality::Video, &x, &[None; 5]).unwrap();
        // Drop the last row's values and all labels: n = 5 declared, 4 rows present.
        let cut = 17 + 4 * 2 * 4;
        assert!(matches!(read_features(&mut &buf[..cut]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_features(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_features(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut long = buf;
        long.push(0);
        assert!(matches!(read_features(&mut long.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_labels_rejected() {
        assert!(round_trip(Modality::Video, &Tensor2D::zeros(2, 2), &[None]).is_err());
        assert!(round_trip(Modality::Video, &Tensor2D::zeros(1, 2), &[Some(UNLABELED)]).is_err());
    }
}
