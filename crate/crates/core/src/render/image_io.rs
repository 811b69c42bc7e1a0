//! Image import/export: binary PPM (P6, 8-bit) for RGB and binary PGM
//! (P5, 16-bit big-endian per the Netpbm spec) for depth in millimeters,
//! with a text sidecar (`<file>.txt`) recording the near/far range.
//! Invalid depth pixels are stored as 0.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// RGB image, row-major `(v, u, c)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf { width, height, data: vec![0.0; width * height * 3] }
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> [f32; 3] {
        let b = (v * self.width + u) * 3;
        [self.data[b], self.data[b + 1], self.data[b + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f32; 3]) {
        let b = (v * self.width + u) * 3;
        self.data[b..b + 3].copy_from_slice(&rgb);
    }

    /// Plain bilinear resize (used to bring camera images to the BEV token
    /// resolution).
    pub fn resized(&self, width: usize, height: usize) -> ImageBuf {
        let mut out = ImageBuf::new(width, height);
        for v in 0..height {
            for u in 0..width {
                let sx = (u as f64 + 0.5) / width as f64 * self.width as f64 - 0.5;
                let sy = (v as f64 + 0.5) / height as f64 * self.height as f64 - 0.5;
                let x0 = sx.floor().clamp(0.0, (self.width - 1) as f64) as usize;
                let y0 = sy.floor().clamp(0.0, (self.height - 1) as f64) as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let tx = (sx - x0 as f64).clamp(0.0, 1.0) as f32;
                let ty = (sy - y0 as f64).clamp(0.0, 1.0) as f32;
                let mut rgb = [0.0f32; 3];
                for (c, out_c) in rgb.iter_mut().enumerate() {
                    let p00 = self.pixel(x0, y0)[c];
                    let p01 = self.pixel(x1, y0)[c];
                    let p10 = self.pixel(x0, y1)[c];
                    let p11 = self.pixel(x1, y1)[c];
                    *out_c = (1.0 - ty) * ((1.0 - tx) * p00 + tx * p01)
                        + ty * ((1.0 - tx) * p10 + tx * p11);
                }
                out.set_pixel(u, v, rgb);
            }
        }
        out
    }
}

/// Rendered or analytic depth, meters; `valid` marks rays that hit anything.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
    pub near: f32,
    pub far: f32,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, near: f32, far: f32) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
            near,
            far,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(img: &ImageBuf, path: &Path) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len());
    for &v in &img.data {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    write_atomic(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<ImageBuf> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, body) = parse_netpbm_header(path, &bytes, b'6')?;
    if maxval != 255 {
        return Err(parse_err(path, 0, format!("unsupported PPM maxval {maxval}")));
    }
    let need = w * h * 3;
    if body.len() < need {
        return Err(parse_err(path, (bytes.len() - body.len()) as u64, "truncated PPM payload".into()));
    }
    let data = body[..need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(ImageBuf { width: w, height: h, data })
}

/// 16-bit PGM in millimeters (big-endian sample bytes), plus sidecar.
pub fn write_pgm_depth(map: &DepthMap, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for (i, &d) in map.depth.iter().enumerate() {
        let mm = if map.valid[i] {
            ((d as f64) * 1000.0).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&mm.to_be_bytes());
    }
    write_atomic(path, &out)?;
    let sidecar = format!("near {}\nfar {}\n", map.near, map.far);
    write_atomic(&sidecar_path(path), sidecar.as_bytes())
}

pub fn read_pgm_depth(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, body) = parse_netpbm_header(path, &bytes, b'5')?;
    if maxval != 65535 {
        return Err(parse_err(path, 0, format!("expected 16-bit PGM, maxval {maxval}")));
    }
    let need = w * h * 2;
    if body.len() < need {
        return Err(parse_err(path, (bytes.len() - body.len()) as u64, "truncated PGM payload".into()));
    }
    let mut depth = vec![0.0f32; w * h];
    let mut valid = vec![false; w * h];
    for i in 0..w * h {
        let mm = u16::from_be_bytes([body[2 * i], body[2 * i + 1]]);
        if mm > 0 {
            depth[i] = mm as f32 / 1000.0;
            valid[i] = true;
        }
    }
    let (mut near, mut far) = (0.0f32, 0.0f32);
    let sidecar = std::fs::read_to_string(sidecar_path(path))
        .map_err(|e| Error::io(sidecar_path(path), e))?;
    for line in sidecar.lines() {
        let mut it = line.split_whitespace();
        match (it.next(), it.next()) {
            (Some("near"), Some(v)) => near = v.parse().unwrap_or(0.0),
            (Some("far"), Some(v)) => far = v.parse().unwrap_or(0.0),
            _ => {}
        }
    }
    Ok(DepthMap { width: w, height: h, depth, valid, near, far })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".txt");
    PathBuf::from(s)
}

fn parse_err(path: &Path, offset: u64, message: String) -> Error {
    Error::Parse { path: path.to_path_buf(), offset, message }
}

fn parse_netpbm_header<'a>(
    path: &Path,
    bytes: &'a [u8],
    kind: u8,
) -> Result<(usize, usize, usize, &'a [u8])> {
    if bytes.len() < 2 || bytes[0] != b'P' || bytes[1] != kind {
        return Err(parse_err(path, 0, format!("not a P{} netpbm file", kind as char)));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, pos as u64, "malformed netpbm header".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().unwrap();
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(path, pos as u64, "missing header terminator".into()));
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], &bytes[pos..]))
}
