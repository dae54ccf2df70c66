use std::path::Path;

use reform_autodiff::Tensor;

use crate::error::{CoreError, Result};

/// Square RGB image, channel-major, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || data.len() != 3 * size * size {
            return Err(CoreError::InvalidImage(format!(
                "expected {} values for a {size}x{size} RGB image, got {}",
                3 * size * size,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let plane = size * size;
        let mut data = vec![0.0; 3 * plane];
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            chunk.fill(rgb[c]);
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.size + y) * self.size + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        self.data[(channel * self.size + y) * self.size + x] = v;
    }

    #[inline]
    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// `[1, 3, size, size]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.size, self.size], self.data.clone()).expect("consistent shape")
    }

    pub fn batch(images: &[Image]) -> Result<Tensor> {
        let size = images
            .first()
            .ok_or_else(|| CoreError::InvalidImage("empty batch".into()))?
            .size;
        let mut data = Vec::with_capacity(images.len() * 3 * size * size);
        for img in images {
            if img.size != size {
                return Err(CoreError::InvalidImage("mixed image sizes in batch".into()));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(vec![images.len(), 3, size, size], data)?)
    }

    /// Sample `index` of a `[N, 3, S, S]` tensor.
    pub fn from_batch(t: &Tensor, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(CoreError::InvalidImage(format!("not an RGB image batch: {s:?}")));
        }
        Image::new(s[2], t.batch_item(index)?.into_data())
    }

    pub fn unbatch(t: &Tensor) -> Result<Vec<Self>> {
        (0..t.shape().first().copied().unwrap_or(0))
            .map(|i| Self::from_batch(t, i))
            .collect()
    }

    /// 8-bit quantization: `round((v + 1) * 127.5)`, clamped.
    pub fn quantize(v: f32) -> u8 {
        ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
    }

    pub fn dequantize(p: u8) -> f32 {
        p as f32 / 127.5 - 1.0
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut rgb = Vec::with_capacity(3 * self.size * self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                for c in 0..3 {
                    rgb.push(Self::quantize(self.get(c, y, x)));
                }
            }
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.size as u32, self.size as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| CoreError::Png(e.to_string()))?;
            writer
                .write_image_data(&rgb)
                .map_err(|e| CoreError::Png(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decodes a square 8-bit RGB, RGBA, gray or gray-alpha PNG.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| CoreError::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| CoreError::Png("image too large".into()))?];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| CoreError::Png(e.to_string()))?;
        if info.width != info.height {
            return Err(CoreError::InvalidImage(format!(
                "expected a square image, got {}x{}",
                info.width, info.height
            )));
        }
        let size = info.width as usize;
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(CoreError::Png(format!("unsupported color type {other:?}"))),
        };
        let mut img = Image::filled(size, [0.0; 3]);
        for y in 0..size {
            for x in 0..size {
                let px = &buf[(y * size + x) * channels..];
                let rgb = if channels >= 3 {
                    [px[0], px[1], px[2]]
                } else {
                    [px[0]; 3]
                };
                img.set_rgb(y, x, rgb.map(Self::dequantize));
            }
        }
        Ok(img)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png(&std::fs::read(path)?)
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        Self {
            size: self.size,
            data: self.data.iter().map(|&v| Self::dequantize(Self::quantize(v))).collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / self.data.len() as f32
    }
}
