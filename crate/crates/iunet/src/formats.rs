//! Raw tensor files and 8-bit PGM images.
//!
//! A tensor is stored as two files: `name.bin` with the values as
//! little-endian f64 in channel-first row-major order, and `name.json` with
//! `{"shape": [...], "dtype": "f64", "layout": "channel-first-row-major"}`.

use std::fs;
use std::path::{Path, PathBuf};

use iunet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

const LAYOUT: &str = "channel-first-row-major";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
    layout: String,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `path` (values) and its `.json` sidecar (shape).
pub fn write_tensor(path: &Path, t: &Tensor) -> AppResult<()> {
    let mut bytes = Vec::with_capacity(t.nbytes());
    for v in t.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))?;
    let meta = Sidecar { shape: t.shape(), dtype: "f64".into(), layout: LAYOUT.into() };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string(&meta)?).map_err(|e| AppError::io(&side, e))
}

pub fn read_tensor(path: &Path) -> AppResult<Tensor> {
    let side = sidecar_path(path);
    let meta: Sidecar = serde_json::from_str(&fs::read_to_string(&side).map_err(|e| AppError::io(&side, e))?)?;
    if meta.dtype != "f64" || meta.layout != LAYOUT {
        return Err(AppError::Config(format!("{}: unsupported dtype/layout {}/{}", side.display(), meta.dtype, meta.layout)));
    }
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(AppError::Config(format!("{}: {} bytes for shape {:?}", path.display(), bytes.len(), meta.shape)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(Tensor::from_shape_vec(&meta.shape, data)?)
}

/// A grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Gray {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(1, &[self.height, self.width], self.pixels.clone()).expect("pixel count matches extents")
    }

    /// Maps `t` (one channel, 2-d) linearly from `[lo, hi]` to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, lo: f64, hi: f64) -> AppResult<Gray> {
        if t.channels() != 1 || t.dim() != 2 {
            return Err(AppError::Config(format!("image needs shape [1, H, W], got {:?}", t.shape())));
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        Ok(Gray {
            height: t.spatial()[0],
            width: t.spatial()[1],
            pixels: t.as_slice().iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect(),
        })
    }

    /// 8-bit levels, rounding to nearest.
    pub fn levels(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, img: &Gray) -> AppResult<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.levels());
    fs::write(path, out).map_err(|e| AppError::io(path, e))
}

/// Reads a binary PGM with maxval ≤ 255; values are scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> AppResult<Gray> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    parse_pgm(&bytes).map_err(|m| AppError::Config(format!("{}: {m}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> Result<Gray, String> {
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
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected binary PGM (P5), found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + width * height).ok_or("truncated pixel data")?;
    Ok(Gray { width, height, pixels: data.iter().map(|&b| b as f64 / maxval as f64).collect() })
}

/// Lays the channels of a `[C, H, W]` tensor out as tiles, `cols` per row,
/// all mapped with the common range `[lo, hi]`.
pub fn tile_channels(t: &Tensor, cols: usize, lo: f64, hi: f64) -> AppResult<Gray> {
    if t.dim() != 2 || cols == 0 {
        return Err(AppError::Config(format!("tiling needs a [C, H, W] tensor, got {:?}", t.shape())));
    }
    let (c, h, w) = (t.channels(), t.spatial()[0], t.spatial()[1]);
    let rows = c.div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pixels = vec![0.0; width * height];
    for k in 0..c {
        let (tr, tc) = (k / cols, k % cols);
        let ch = t.channel(k);
        for i in 0..h {
            for j in 0..w {
                pixels[(tr * h + i) * width + tc * w + j] = ((ch[i * w + j] - lo) / span).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Gray { width, height, pixels })
}
