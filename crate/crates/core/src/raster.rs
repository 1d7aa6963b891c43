//! Raster resampling, geometric augmentation and grayscale image I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::tensor::{Grid, LabelMap};

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(src: &Grid, height: usize, width: usize) -> Grid {
    if src.height == height && src.width == width {
        return src.clone();
    }
    let sy = src.height as f64 / height as f64;
    let sx = src.width as f64 / width as f64;
    let axis = |i: usize, scale: f64, n: usize| {
        let f = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, sx, src.width)).collect();
    let mut out = Grid::zeros(height, width);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, src.height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = src.get(y0, x0) * (1.0 - fx) + src.get(y0, x1) * fx;
            let bot = src.get(y1, x0) * (1.0 - fx) + src.get(y1, x1) * fx;
            out.set(y, x, top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Nearest-neighbor resize for label rasters.
pub fn resize_nearest(src: &LabelMap, height: usize, width: usize) -> LabelMap {
    if src.height == height && src.width == width {
        return src.clone();
    }
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * src.height as f64 / height as f64).floor() as usize;
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * src.width as f64 / width as f64).floor() as usize;
            data.push(src.get(sy.min(src.height - 1), sx.min(src.width - 1)));
        }
    }
    LabelMap {
        height,
        width,
        data,
    }
}

pub fn flip_horizontal(src: &Grid) -> Grid {
    let mut out = Grid::zeros(src.height, src.width);
    for y in 0..src.height {
        for x in 0..src.width {
            out.set(y, x, src.get(y, src.width - 1 - x));
        }
    }
    out
}

/// Rotation about the center by `degrees` with bilinear sampling and zero fill.
pub fn rotate(src: &Grid, degrees: f64) -> Grid {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (src.height as f64 - 1.0) / 2.0;
    let cx = (src.width as f64 - 1.0) / 2.0;
    let mut out = Grid::zeros(src.height, src.width);
    for y in 0..src.height {
        for x in 0..src.width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            out.set(y, x, sample_zero(src, sy, sx));
        }
    }
    out
}

fn sample_zero(src: &Grid, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= src.height as f64 || xx >= src.width as f64 {
            0.0
        } else {
            src.get(yy as usize, xx as usize)
        }
    };
    (at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx) * (1.0 - fy)
        + (at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx) * fy
}

/// Decodes a grayscale image into `[0,1]` intensities (8- or 16-bit).
pub fn read_gray(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => img
            .to_luma16()
            .pixels()
            .map(|p| p.0[0] as f64 / 65535.0)
            .collect(),
        other => other.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
    };
    Grid::from_vec(h, w, data)
}

/// Label raster stored as 8-bit gray values equal to class indices.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let buf = img.to_luma8();
    LabelMap::from_vec(
        buf.height() as usize,
        buf.width() as usize,
        buf.pixels().map(|p| p.0[0] as u32).collect(),
    )
}

pub fn encode_png_u8(width: usize, height: usize, data: Vec<u8>) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Dimension("pixel buffer size".into()))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Export(e.to_string()))?;
    Ok(bytes)
}

pub fn encode_png_u16(width: usize, height: usize, data: Vec<u16>) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Dimension("pixel buffer size".into()))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Export(e.to_string()))?;
    Ok(bytes)
}

/// 16-bit PNG of a `[0,1]` raster (values clamped).
pub fn gray_png(grid: &Grid) -> Result<Vec<u8>> {
    let data = grid
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    encode_png_u16(grid.width, grid.height, data)
}

pub fn labels_png(labels: &LabelMap) -> Result<Vec<u8>> {
    let data = labels
        .data
        .iter()
        .map(|&v| {
            u8::try_from(v).map_err(|_| Error::Export(format!("class index {v} does not fit 8 bits")))
        })
        .collect::<Result<Vec<u8>>>()?;
    encode_png_u8(labels.width, labels.height, data)
}
