//! `FVDS` video dataset files.
//!
//! Layout, all integers little-endian: magic `FVDS`, u32 version (1), u32
//! sample count, then per sample u32 id, u16 label, u16 T, u16 H, u16 W and
//! `T·H·W·3` raw bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use faster_core::synth::{Dataset, VideoSample, CHANNELS};

use crate::error::{LabError, Result};

pub const MAGIC: [u8; 4] = *b"FVDS";
pub const VERSION: u32 = 1;

pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + dataset.samples.iter().map(|s| 12 + s.pixels.len()).sum::<usize>());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(dataset.len()).map_err(|_| LabError::Data("too many samples for one file".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for s in &dataset.samples {
        let dim = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| LabError::Data(format!("sample {}: {} {} does not fit in u16", s.id, what, v)))
        };
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&s.label.to_le_bytes());
        out.extend_from_slice(&dim(s.frames, "frame count")?.to_le_bytes());
        out.extend_from_slice(&dim(s.height, "height")?.to_le_bytes());
        out.extend_from_slice(&dim(s.width, "width")?.to_le_bytes());
        out.extend_from_slice(&s.pixels);
    }
    Ok(out)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(LabError::Truncated {
                path: self.path.into(),
                offset: self.bytes.len() as u64,
                detail: format!("needed {} bytes for {}, {} left", n, what, self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse a dataset. With `num_classes` given every label must be below it;
/// otherwise the class count is one past the largest label.
pub fn decode(path: &Path, bytes: &[u8], num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = Reader { path, bytes, pos: 0 };
    let magic: [u8; 4] = match r.take(4, "magic") {
        Ok(m) => m.try_into().unwrap(),
        Err(_) => {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(LabError::BadMagic { path: path.into(), found });
        }
    };
    if magic != MAGIC {
        return Err(LabError::BadMagic { path: path.into(), found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LabError::UnsupportedVersion {
            path: path.into(),
            what: "dataset",
            found: version as u64,
            supported: VERSION as u64,
        });
    }
    let count = r.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let ctx = format!("sample {i}");
        let id = r.u32(&ctx)?;
        let label = r.u16(&ctx)?;
        let t = r.u16(&ctx)? as usize;
        let h = r.u16(&ctx)? as usize;
        let w = r.u16(&ctx)? as usize;
        let pixels = r.take(t * h * w * CHANNELS, &format!("frames of sample {i}"))?.to_vec();
        if let Some(k) = num_classes {
            if label as usize >= k {
                return Err(LabError::LabelOutOfRange {
                    path: path.into(),
                    id,
                    label,
                    classes: k,
                });
            }
        }
        let sample = VideoSample::new(id, label, t, h, w, pixels)
            .map_err(|e| LabError::Data(format!("{}: {}", path.display(), e)))?;
        samples.push(sample);
    }
    if r.pos != bytes.len() {
        return Err(LabError::Data(format!(
            "{}: {} trailing bytes after {} samples",
            path.display(),
            bytes.len() - r.pos,
            count
        )));
    }
    let inferred = samples.iter().map(|s| s.label as usize + 1).max().unwrap_or(0);
    Ok(Dataset {
        num_classes: num_classes.unwrap_or(inferred),
        samples,
    })
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = encode(dataset)?;
    let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| LabError::io(path, e))
}

pub fn read_dataset(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(path, &bytes, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            num_classes: 3,
            samples: vec![
                VideoSample::new(7, 2, 2, 1, 2, (0..12).collect()).unwrap(),
                VideoSample::new(9, 0, 1, 2, 2, (100..112).collect()).unwrap(),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let b = encode(&tiny()).unwrap();
        assert_eq!(&b[..4], b"FVDS");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[7, 0, 0, 0]);
        assert_eq!(&b[16..18], &[2, 0]);
        assert_eq!(b.len(), 12 + 2 * 12 + 24);
    }

    #[test]
    fn round_trip() {
        let d = tiny();
        let back = decode(Path::new("mem"), &encode(&d).unwrap(), Some(3)).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn distinct_failures() {
        let b = encode(&tiny()).unwrap();
        let p = Path::new("mem");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(p, &bad, None), Err(LabError::BadMagic { .. })));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(decode(p, &v2, None), Err(LabError::UnsupportedVersion { found: 2, .. })));
        assert!(matches!(decode(p, &b[..b.len() - 1], None), Err(LabError::Truncated { .. })));
        assert!(matches!(decode(p, &b, Some(2)), Err(LabError::LabelOutOfRange { label: 2, .. })));
        assert!(matches!(decode(p, b"FV", None), Err(LabError::BadMagic { .. })));
    }
}
