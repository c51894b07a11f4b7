//! Flat binary raster container: a plain-text header file next to a raw
//! payload.
//!
//! Header lines, in any order:
//!
//! ```text
//! width=<int>
//! height=<int>
//! bands=<int>
//! dtype=f32          # or i16 for label rasters
//! layout=bsq
//! data=<payload path relative to the header>
//! ```
//!
//! The payload is raw little-endian values, band-sequential, row-major
//! within each band; its byte length must equal width*height*bands times
//! the element size. Loads and saves are bit-exact.

use crate::error::{Error, Result};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// In-memory f32 raster, band-sequential row-major (matching the payload).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Raster {
    pub fn new(bands: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != bands * height * width {
            return Err(Error::shape(
                "Raster::new",
                format!("{} values", bands * height * width),
                format!("{}", values.len()),
            ));
        }
        Ok(Raster { bands, height, width, values })
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Self {
        Raster {
            bands,
            height,
            width,
            values: vec![0.0; bands * height * width],
        }
    }

    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f32 {
        self.values[(band * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, band: usize, y: usize, x: usize, v: f32) {
        self.values[(band * self.height + y) * self.width + x] = v;
    }
}

/// Single-band i16 raster used for ground-truth labels and prediction maps.
/// Class 0 means unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub values: Vec<i16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, values: Vec<i16>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "LabelRaster::new",
                format!("{} values", height * width),
                format!("{}", values.len()),
            ));
        }
        Ok(LabelRaster { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelRaster { height, width, values: vec![0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> i16 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: i16) {
        self.values[y * self.width + x] = v;
    }

    /// Highest class id present.
    pub fn max_class(&self) -> usize {
        self.values.iter().copied().max().unwrap_or(0).max(0) as usize
    }
}

struct Header {
    width: usize,
    height: usize,
    bands: usize,
    dtype: String,
    payload: PathBuf,
}

fn parse_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut width = None;
    let mut height = None;
    let mut bands = None;
    let mut dtype = None;
    let mut layout = None;
    let mut data = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format {
                what: format!("raster header {}", path.display()),
                detail: format!("line {}: expected key=value, got `{line}`", lineno + 1),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let parse_dim = |v: &str, k: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|_| Error::Format {
                what: format!("raster header {}", path.display()),
                detail: format!("{k} must be a positive integer, got `{v}`"),
            })
        };
        match key {
            "width" => width = Some(parse_dim(value, "width")?),
            "height" => height = Some(parse_dim(value, "height")?),
            "bands" => bands = Some(parse_dim(value, "bands")?),
            "dtype" => dtype = Some(value.to_string()),
            "layout" => layout = Some(value.to_string()),
            "data" => data = Some(value.to_string()),
            other => {
                return Err(Error::Format {
                    what: format!("raster header {}", path.display()),
                    detail: format!("unknown header key `{other}`"),
                })
            }
        }
    }
    let missing = |k: &str| Error::Format {
        what: format!("raster header {}", path.display()),
        detail: format!("missing key `{k}`"),
    };
    let layout = layout.ok_or_else(|| missing("layout"))?;
    if layout != "bsq" {
        return Err(Error::Format {
            what: format!("raster header {}", path.display()),
            detail: format!("unsupported layout `{layout}` (only bsq)"),
        });
    }
    let dtype = dtype.ok_or_else(|| missing("dtype"))?;
    if dtype != "f32" && dtype != "i16" {
        return Err(Error::UnknownDtype(dtype));
    }
    let data = data.ok_or_else(|| missing("data"))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(Header {
        width: width.ok_or_else(|| missing("width"))?,
        height: height.ok_or_else(|| missing("height"))?,
        bands: bands.ok_or_else(|| missing("bands"))?,
        dtype,
        payload: base.join(data),
    })
}

fn read_payload(header: &Header, elem_size: usize) -> Result<Vec<u8>> {
    let expected = (header.width * header.height * header.bands * elem_size) as u64;
    let bytes = fs::read(&header.payload).map_err(|e| Error::io(&header.payload, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: header.payload.clone(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Load an f32 raster from its header file.
pub fn load_raster(header_path: impl AsRef<Path>) -> Result<Raster> {
    let header = parse_header(header_path.as_ref())?;
    if header.dtype != "f32" {
        return Err(Error::Format {
            what: format!("raster header {}", header_path.as_ref().display()),
            detail: format!("expected dtype f32, got {}", header.dtype),
        });
    }
    let bytes = read_payload(&header, 4)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Raster::new(header.bands, header.height, header.width, values)
}

/// Load an i16 label raster (single band) from its header file.
pub fn load_labels(header_path: impl AsRef<Path>) -> Result<LabelRaster> {
    let header = parse_header(header_path.as_ref())?;
    if header.dtype != "i16" {
        return Err(Error::Format {
            what: format!("raster header {}", header_path.as_ref().display()),
            detail: format!("expected dtype i16, got {}", header.dtype),
        });
    }
    if header.bands != 1 {
        return Err(Error::Format {
            what: format!("raster header {}", header_path.as_ref().display()),
            detail: format!("label rasters are single-band, got {} bands", header.bands),
        });
    }
    let bytes = read_payload(&header, 2)?;
    let values: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    LabelRaster::new(header.height, header.width, values)
}

fn write_header(
    header_path: &Path,
    width: usize,
    height: usize,
    bands: usize,
    dtype: &str,
    payload_name: &str,
) -> Result<()> {
    let text = format!(
        "width={width}\nheight={height}\nbands={bands}\ndtype={dtype}\nlayout=bsq\ndata={payload_name}\n"
    );
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))
}

fn payload_path_for(header_path: &Path) -> (PathBuf, String) {
    let name = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "raster".to_string());
    let payload_name = format!("{name}.raw");
    let payload = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&payload_name);
    (payload, payload_name)
}

/// Save an f32 raster: header at `header_path`, payload next to it as
/// `<stem>.raw`.
pub fn save_raster(header_path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let header_path = header_path.as_ref();
    let (payload, payload_name) = payload_path_for(header_path);
    write_header(header_path, raster.width, raster.height, raster.bands, "f32", &payload_name)?;
    let file = fs::File::create(&payload).map_err(|e| Error::io(&payload, e))?;
    let mut w = BufWriter::new(file);
    for v in &raster.values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&payload, e))?;
    }
    w.flush().map_err(|e| Error::io(&payload, e))
}

/// Save an i16 label raster.
pub fn save_labels(header_path: impl AsRef<Path>, labels: &LabelRaster) -> Result<()> {
    let header_path = header_path.as_ref();
    let (payload, payload_name) = payload_path_for(header_path);
    write_header(header_path, labels.width, labels.height, 1, "i16", &payload_name)?;
    let file = fs::File::create(&payload).map_err(|e| Error::io(&payload, e))?;
    let mut w = BufWriter::new(file);
    for v in &labels.values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&payload, e))?;
    }
    w.flush().map_err(|e| Error::io(&payload, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_raster_round_trips_by_value() {
        // 2x2 single band, values 1..4 in row-major order
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("tiny.hdr");
        let r = Raster::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_raster(&header, &r).unwrap();
        let back = load_raster(&header).unwrap();
        assert_eq!(back.get(0, 0, 0), 1.0);
        assert_eq!(back.get(0, 0, 1), 2.0);
        assert_eq!(back.get(0, 1, 0), 3.0);
        assert_eq!(back.get(0, 1, 1), 4.0);
        assert_eq!(back, r);
    }

    #[test]
    fn houston_geometry_header_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("houston.hdr");
        let payload = dir.path().join("houston.raw");
        // 1-band stand-in payload sized for a 1905x349 slice
        std::fs::write(
            &header,
            "width=1905\nheight=349\nbands=1\ndtype=f32\nlayout=bsq\ndata=houston.raw\n",
        )
        .unwrap();
        std::fs::write(&payload, vec![0u8; 1905 * 349 * 4]).unwrap();
        let r = load_raster(&header).unwrap();
        assert_eq!((r.width, r.height), (1905, 349));
    }

    #[test]
    fn payload_size_mismatch_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("bad.hdr");
        let payload = dir.path().join("bad.raw");
        std::fs::write(
            &header,
            "width=2\nheight=2\nbands=1\ndtype=f32\nlayout=bsq\ndata=bad.raw\n",
        )
        .unwrap();
        std::fs::write(&payload, vec![0u8; 10]).unwrap();
        let err = load_raster(&header).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 16 bytes") && msg.contains("got 10"), "{msg}");
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("odd.hdr");
        std::fs::write(
            &header,
            "width=1\nheight=1\nbands=1\ndtype=f64\nlayout=bsq\ndata=odd.raw\n",
        )
        .unwrap();
        assert!(matches!(load_raster(&header), Err(Error::UnknownDtype(_))));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("labels.hdr");
        let l = LabelRaster::new(2, 3, vec![0, 1, 2, 3, 0, 15]).unwrap();
        save_labels(&header, &l).unwrap();
        assert_eq!(load_labels(&header).unwrap(), l);
    }
}
