//! PNG output for rendered views, samples and feature overlays.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes 8-bit RGB pixels (row-major, 3 bytes each) as a PNG.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape("png", format!("{} bytes for {width}x{height} RGB", rgb.len())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = enc.write_header().map_err(to_io)?;
    w.write_image_data(rgb).map_err(to_io)?;
    w.finish().map_err(to_io)
}

/// Planar `[3, H, W]` values in `[-1, 1]` to interleaved 8-bit RGB.
pub fn signed_chw_to_rgb(chw: &[f64], height: usize, width: usize) -> Vec<u8> {
    let hw = height * width;
    let mut out = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            let v = chw[c * hw + i].clamp(-1.0, 1.0);
            out.push(((v + 1.0) * 127.5).round() as u8);
        }
    }
    out
}

/// Nearest-neighbor upscaling of an RGB image by an integer factor.
pub fn upscale_rgb(rgb: &[u8], width: usize, height: usize, factor: usize) -> Vec<u8> {
    let (ow, oh) = (width * factor, height * factor);
    let mut out = Vec::with_capacity(ow * oh * 3);
    for y in 0..oh {
        for x in 0..ow {
            let i = ((y / factor) * width + x / factor) * 3;
            out.extend_from_slice(&rgb[i..i + 3]);
        }
    }
    out
}

/// Writes horizontally concatenated RGB tiles of equal size.
pub fn write_strip(path: &Path, tiles: &[Vec<u8>], width: usize, height: usize) -> Result<()> {
    let n = tiles.len();
    let mut out = vec![0u8; n * width * height * 3];
    for (t, tile) in tiles.iter().enumerate() {
        for y in 0..height {
            let dst = (y * n * width + t * width) * 3;
            out[dst..dst + width * 3].copy_from_slice(&tile[y * width * 3..(y + 1) * width * 3]);
        }
    }
    write_rgb_png(path, n * width, height, &out)
}
