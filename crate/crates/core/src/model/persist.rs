//! Binary parameter blobs: magic, version, JSON config header, f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use super::config::CareConfig;
use super::params::CareParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CAREPARM";
const VERSION: u32 = 1;

impl CareParams {
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = serde_json::to_vec(self.config())?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        let flat = self.to_flat();
        out.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a blob; the stored config decides the layout.
    pub fn read_from(mut input: impl Read, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a CARE parameter file".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf).map_err(|_| bad("truncated version".into()))?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        input.read_exact(&mut u32buf).map_err(|_| bad("truncated header length".into()))?;
        let mut header = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        input.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
        let config: CareConfig = serde_json::from_slice(&header).map_err(|e| bad(format!("config header: {e}")))?;
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf).map_err(|_| bad("truncated count".into()))?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut payload = Vec::new();
        input.read_to_end(&mut payload)?;
        if payload.len() != count * 8 {
            return Err(bad(format!("expected {} payload bytes, found {}", count * 8, payload.len())));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_flat(&config, &values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f, path)
    }
}

/// Names every config field on which `stored` and `wanted` disagree.
pub fn config_mismatches(stored: &CareConfig, wanted: &CareConfig) -> Vec<String> {
    let mut out = Vec::new();
    macro_rules! cmp {
        ($($f:ident),*) => {$(
            if stored.$f != wanted.$f {
                out.push(format!("{}: checkpoint {:?}, config {:?}", stringify!($f), stored.$f, wanted.$f));
            }
        )*};
    }
    cmp!(domains, classes, input_shape, base_shape, elab_shape, attention_heads, weight_mode, relevance_kernel);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let p = CareParams::init(&CareConfig::tiny(), 3).unwrap();
        let bytes = p.to_bytes();
        let q = CareParams::read_from(&bytes[..], Path::new("mem")).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_truncated_and_foreign_blobs() {
        let p = CareParams::init(&CareConfig::tiny(), 3).unwrap();
        let bytes = p.to_bytes();
        assert!(matches!(
            CareParams::read_from(&bytes[..bytes.len() - 3], Path::new("mem")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(CareParams::read_from(&b"NOTCARE!xxxx"[..], Path::new("mem")), Err(Error::Format { .. })));
    }

    #[test]
    fn mismatch_names_fields() {
        let a = CareConfig::tiny();
        let mut b = a.clone();
        b.classes = 9;
        b.elab_shape = [2, 2, 2];
        let m = config_mismatches(&a, &b);
        assert_eq!(m.len(), 2);
        assert!(m[0].starts_with("classes") && m[1].starts_with("elab_shape"));
    }
}
