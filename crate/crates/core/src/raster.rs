//! Minimal RGB raster: just enough to load an image, black out everything
//! outside two boxes, and re-encode the result for the embedder.
//!
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and belongs to a box when its
//! centre `(i + 0.5, j + 0.5)` lies in `[x_min, x_max) x [y_min, y_max)`.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::BBox;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    /// Row-major RGB8.
    data: Vec<u8>,
}

impl Raster {
    pub const CHANNELS: usize = 3;

    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!("empty raster {width}x{height}")));
        }
        let expected = width as usize * height as usize * Self::CHANNELS;
        if data.len() != expected {
            return Err(Error::validation(format!(
                "raster {width}x{height} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Raster { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.repeat(width as usize * height as usize);
        Self::new(width, height, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::write_buffer_with_format(
            &mut Cursor::new(&mut out),
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Half-open pixel index range whose centres fall in `[lo, hi)`.
    fn span(lo: f64, hi: f64, limit: u32) -> (usize, usize) {
        let first = (lo - 0.5).ceil().max(0.0) as usize;
        let end = ((hi - 0.5).ceil().max(0.0) as usize).min(limit as usize);
        (first, end.max(first))
    }
}

/// Keep the pixels of `image` inside the union of the two boxes and zero the rest.
pub fn mask_image(image: &Raster, subject: &BBox, object: &BBox) -> Result<Raster> {
    let (w, h) = (image.width as f64, image.height as f64);
    for b in [subject, object] {
        if !b.within(w, h) {
            return Err(Error::validation(format!(
                "box {:?} outside {}x{} image",
                b.as_array(),
                image.width,
                image.height
            )));
        }
    }
    let row_bytes = image.width as usize * Raster::CHANNELS;
    let mut data = vec![0u8; image.data.len()];
    for b in [subject, object] {
        let (x0, x1) = Raster::span(b.x_min, b.x_max, image.width);
        let (y0, y1) = Raster::span(b.y_min, b.y_max, image.height);
        for y in y0..y1 {
            let row = y * row_bytes;
            let range = row + x0 * Raster::CHANNELS..row + x1 * Raster::CHANNELS;
            data[range.clone()].copy_from_slice(&image.data[range]);
        }
    }
    Ok(Raster {
        width: image.width,
        height: image.height,
        data,
    })
}
