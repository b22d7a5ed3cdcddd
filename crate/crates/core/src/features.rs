//! Binary feature dumps: `DDAN-FEAT-v1`, then little-endian `u32` row count,
//! `u32` dim, then per row `u32` identity, `u32` domain and `dim` × `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 12] = b"DDAN-FEAT-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub identities: Vec<u32>,
    pub domains: Vec<u32>,
    /// rows × dim, stored at f32 precision.
    pub features: Array2<f32>,
}

impl FeatureDump {
    pub fn from_f64(identities: Vec<u32>, domains: Vec<u32>, features: &Array2<f64>) -> Result<Self> {
        if identities.len() != features.nrows() || domains.len() != features.nrows() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} identities / {} domains",
                features.nrows(),
                identities.len(),
                domains.len()
            )));
        }
        Ok(Self {
            identities,
            domains,
            features: features.mapv(|v| v as f32),
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    /// Feature rows grouped by domain, in row order.
    pub fn by_domain(&self) -> BTreeMap<u32, Array2<f64>> {
        let mut rows: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &d) in self.domains.iter().enumerate() {
            rows.entry(d).or_default().push(i);
        }
        let all = self.features_f64();
        rows.into_iter().map(|(d, idx)| (d, all.select(Axis(0), &idx))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (8 + 4 * self.dim()));
        out.extend_from_slice(FEATURE_MAGIC);
        out.write_u32::<LittleEndian>(self.len() as u32).unwrap();
        out.write_u32::<LittleEndian>(self.dim() as u32).unwrap();
        for (i, row) in self.features.rows().into_iter().enumerate() {
            out.write_u32::<LittleEndian>(self.identities[i]).unwrap();
            out.write_u32::<LittleEndian>(self.domains[i]).unwrap();
            for &v in row {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("feature", reason.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 12];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != FEATURE_MAGIC {
            return Err(bad("missing DDAN-FEAT-v1 magic"));
        }
        let rows = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let dim = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
        let expected = 20 + rows * (8 + 4 * dim);
        if bytes.len() != expected {
            return Err(bad(&format!("expected {expected} bytes for {rows} x {dim}, found {}", bytes.len())));
        }
        let mut identities = Vec::with_capacity(rows);
        let mut domains = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            identities.push(cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated row"))?);
            domains.push(cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated row"))?);
            for _ in 0..dim {
                data.push(cur.read_f32::<LittleEndian>().map_err(|_| bad("truncated row"))?);
            }
        }
        let features = Array2::from_shape_vec((rows, dim), data).map_err(|e| bad(&e.to_string()))?;
        Ok(Self {
            identities,
            domains,
            features,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let dump = FeatureDump::from_f64(vec![7], vec![2], &array![[1.0, -0.5]]).unwrap();
        let bytes = dump.to_bytes();
        assert_eq!(&bytes[..12], b"DDAN-FEAT-v1");
        assert_eq!(&bytes[12..20], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[20..28], &[7, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[32..36], &(-0.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn malformed_inputs() {
        assert!(FeatureDump::from_bytes(b"DDAN-FEAT-v2\0\0\0\0\0\0\0\0").is_err());
        let mut bytes = FeatureDump::from_f64(vec![1, 2], vec![0, 0], &array![[1.0], [2.0]]).unwrap().to_bytes();
        bytes.pop();
        assert!(FeatureDump::from_bytes(&bytes).is_err());
        assert!(FeatureDump::from_f64(vec![1], vec![0, 1], &array![[1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 0usize..6, dim in 0usize..5, seed in any::<u32>()) {
            let feats = Array2::from_shape_fn((rows, dim), |(i, j)| (i as f64 * 0.37 - j as f64) * (seed % 17) as f64);
            let ids: Vec<u32> = (0..rows as u32).map(|i| i.wrapping_mul(seed)).collect();
            let doms: Vec<u32> = (0..rows as u32).map(|i| i % 3).collect();
            let dump = FeatureDump::from_f64(ids, doms, &feats).unwrap();
            prop_assert_eq!(FeatureDump::from_bytes(&dump.to_bytes()).unwrap(), dump);
        }
    }
}
