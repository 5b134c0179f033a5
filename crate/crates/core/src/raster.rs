//! 8-bit RGB rasters and their on-disk representation.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::signal::CoeffPlane;
use crate::{Error, Result};

pub const RED: usize = 0;
pub const GREEN: usize = 1;
pub const BLUE: usize = 2;

/// Row-major interleaved RGB samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{}x{} RGB raster needs {} samples, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Raster {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, channel: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + channel]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, channel: usize, value: u8) {
        self.data[(y * self.width + x) * 3 + channel] = value;
    }

    /// Samples of one channel in row-major order.
    pub fn channel(&self, channel: usize) -> Vec<u8> {
        self.data.iter().skip(channel).step_by(3).copied().collect()
    }

    pub fn set_channel(&mut self, channel: usize, samples: &[u8]) -> Result<()> {
        if samples.len() != self.pixel_count() {
            return Err(Error::Shape(format!(
                "channel has {} samples, expected {}",
                samples.len(),
                self.pixel_count()
            )));
        }
        for (dst, &src) in self.data.iter_mut().skip(channel).step_by(3).zip(samples) {
            *dst = src;
        }
        Ok(())
    }

    pub fn channel_plane(&self, channel: usize) -> CoeffPlane {
        let values = self.channel(channel).into_iter().map(f64::from).collect();
        CoeffPlane::from_values(self.width, self.height, values)
    }

    /// Mean of the three channels per pixel.
    pub fn luminance_plane(&self) -> CoeffPlane {
        let values = self
            .data
            .chunks_exact(3)
            .map(|px| (f64::from(px[0]) + f64::from(px[1]) + f64::from(px[2])) / 3.0)
            .collect();
        CoeffPlane::from_values(self.width, self.height, values)
    }

    pub fn from_rgb_image(img: &RgbImage) -> Self {
        Raster {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().clone(),
        }
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("raster length invariant")
    }

    /// Loads any PNG/JPEG/BMP file, converting to 3-channel RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?;
        Ok(Raster::from_rgb_image(&img.to_rgb8()))
    }

    /// Saves in the format implied by the extension (PNG when unknown).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
        if format == ImageFormat::Jpeg {
            let bytes = crate::attacks::encode_jpeg(self, 95)?;
            return std::fs::write(path, bytes).map_err(|e| Error::io(path, e));
        }
        self.to_rgb_image().save_with_format(path, format)?;
        Ok(())
    }
}
