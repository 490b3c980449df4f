//! Binary portable graymap (P5) files and atomic writes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale raster with samples in `[0, maxval]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Graymap {
    /// Quantise `[0,1]` values to 8 bits, `round(v * 255)` after clamping.
    pub fn from_unit_u8(values: &[f64], height: usize, width: usize) -> Self {
        Self::from_unit(values, height, width, 255)
    }

    /// Quantise `[0,1]` values to 16 bits.
    pub fn from_unit_u16(values: &[f64], height: usize, width: usize) -> Self {
        Self::from_unit(values, height, width, u16::MAX)
    }

    fn from_unit(values: &[f64], height: usize, width: usize, maxval: u16) -> Self {
        assert_eq!(values.len(), height * width);
        let m = maxval as f64;
        Graymap {
            width,
            height,
            maxval,
            samples: values.iter().map(|&v| (v.clamp(0.0, 1.0) * m).round() as u16).collect(),
        }
    }

    pub fn to_unit(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.samples.iter().map(|&s| s as f64 / m).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            // 16-bit samples are big-endian
            out.extend(self.samples.iter().flat_map(|s| s.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated graymap header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
        }
        if fields[0] != "P5" {
            return Err(format!("expected P5 magic, found {:?}", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > u16::MAX as usize {
            return Err(format!("unsupported maxval {maxval}"));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let n = width * height;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let raster = bytes.get(pos..pos + need).ok_or("truncated graymap raster")?;
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        if samples.iter().any(|&s| s as usize > maxval) {
            return Err("sample exceeds maxval".into());
        }
        Ok(Graymap {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

/// Write through a sibling temporary file and rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
