//! Images, layer sets and the compositing operators behind `x = y ⊕ z`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default floor applied before taking logarithms.
pub const LOG_EPSILON: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeTag {
    /// Intensities in `[0, 1]`.
    Unit,
    /// Natural logarithm of unit intensities.
    Log,
    /// Unbounded linear intensities, e.g. an unclipped additive blend.
    Linear,
}

/// `channels x height x width`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    range: RangeTag,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        range: RangeTag,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image has a zero dimension".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at index {i}")));
        }
        if range == RangeTag::Unit {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Range(format!("unit-range image holds {v}")));
            }
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
            range,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, range: RangeTag) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels], range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel as a row-major plane.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts([1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Builds an image from sample 0 of a `[1, c, h, w]` tensor.
    pub fn from_tensor(t: &Tensor, range: RangeTag) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 {
            return Err(Error::Shape(format!("expected a single sample, got batch {n}")));
        }
        Image::new(h, w, c, t.data().to_vec(), range)
    }

    /// Clamps into `[0, 1]` and retags as unit range.
    pub fn clamped_unit(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            range: RangeTag::Unit,
            ..self.clone()
        }
    }

    /// Converts any range to displayable unit intensities.
    pub fn to_display(&self) -> Image {
        match self.range {
            RangeTag::Unit => self.clone(),
            RangeTag::Linear => self.clamped_unit(),
            RangeTag::Log => from_log_domain(self).expect("log image converts"),
        }
    }

    /// Writes an 8- or 16-bit PNG, mapping `[0, 1]` linearly onto the integer range.
    pub fn save_png(&self, path: &Path, bit_depth: u8) -> Result<()> {
        let img = self.to_display();
        let (h, w, c) = img.dims();
        let interleaved = |scale: f64| -> Vec<f64> {
            let mut out = Vec::with_capacity(h * w * c);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out.push((img.get(ch, y, x) * scale).round());
                    }
                }
            }
            out
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let to_err = |e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        };
        match (bit_depth, c) {
            (8, 1) => image::GrayImage::from_raw(w as u32, h as u32, quantize_u8(&interleaved(255.0)))
                .expect("buffer length")
                .save(path)
                .map_err(to_err),
            (8, 3) => image::RgbImage::from_raw(w as u32, h as u32, quantize_u8(&interleaved(255.0)))
                .expect("buffer length")
                .save(path)
                .map_err(to_err),
            (16, 1) => image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
                w as u32,
                h as u32,
                quantize_u16(&interleaved(65535.0)),
            )
            .expect("buffer length")
            .save(path)
            .map_err(to_err),
            (16, 3) => image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(
                w as u32,
                h as u32,
                quantize_u16(&interleaved(65535.0)),
            )
            .expect("buffer length")
            .save(path)
            .map_err(to_err),
            _ => Err(Error::InvalidConfig(format!("unsupported PNG bit depth {bit_depth}"))),
        }
    }

    /// Reads an 8- or 16-bit grayscale or RGB PNG as a unit-range image.
    /// Alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let gray = matches!(
            dynimg.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        let sixteen = matches!(
            dynimg.color(),
            image::ColorType::L16
                | image::ColorType::La16
                | image::ColorType::Rgb16
                | image::ColorType::Rgba16
        );
        let c = if gray { 1 } else { 3 };
        let mut data = vec![0.0; h * w * c];
        let mut put = |ch: usize, y: usize, x: usize, v: f64| data[(ch * h + y) * w + x] = v;
        match (gray, sixteen) {
            (true, false) => {
                let buf = dynimg.to_luma8();
                for (x, y, p) in buf.enumerate_pixels() {
                    put(0, y as usize, x as usize, p.0[0] as f64 / 255.0);
                }
            }
            (true, true) => {
                let buf = dynimg.to_luma16();
                for (x, y, p) in buf.enumerate_pixels() {
                    put(0, y as usize, x as usize, p.0[0] as f64 / 65535.0);
                }
            }
            (false, false) => {
                let buf = dynimg.to_rgb8();
                for (x, y, p) in buf.enumerate_pixels() {
                    for ch in 0..3 {
                        put(ch, y as usize, x as usize, p.0[ch] as f64 / 255.0);
                    }
                }
            }
            (false, true) => {
                let buf = dynimg.to_rgb16();
                for (x, y, p) in buf.enumerate_pixels() {
                    for ch in 0..3 {
                        put(ch, y as usize, x as usize, p.0[ch] as f64 / 65535.0);
                    }
                }
            }
        }
        Image::new(h, w, c, data, RangeTag::Unit)
    }

    /// Broadcasts a single-channel image to three channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image {
            channels: 3,
            data,
            ..self.clone()
        }
    }
}

fn quantize_u8(v: &[f64]) -> Vec<u8> {
    v.iter().map(|&x| x.clamp(0.0, 255.0) as u8).collect()
}

fn quantize_u16(v: &[f64]) -> Vec<u16> {
    v.iter().map(|&x| x.clamp(0.0, 65535.0) as u16).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositeOp {
    /// Sum clamped to `[0, 1]`.
    AdditiveClipped,
    AdditiveUnclipped,
    /// Sum of log-domain layers (a product in linear intensity).
    LogAdditive,
}

/// Two or more same-sized layers plus the operator that blends them.
#[derive(Clone, Debug)]
pub struct LayerSet {
    layers: Vec<Image>,
    op: CompositeOp,
}

impl LayerSet {
    pub fn new(layers: Vec<Image>, op: CompositeOp) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a layer set needs at least 2 layers, got {}",
                layers.len()
            )));
        }
        let first = &layers[0];
        for (i, l) in layers.iter().enumerate().skip(1) {
            if !l.same_dims(first) {
                return Err(Error::InvalidInput(format!(
                    "layer {i} is {:?}, layer 0 is {:?}",
                    l.dims(),
                    first.dims()
                )));
            }
            if l.range() != first.range() {
                return Err(Error::Range(format!(
                    "layer {i} is {:?}, layer 0 is {:?}",
                    l.range(),
                    first.range()
                )));
            }
        }
        Ok(LayerSet { layers, op })
    }

    pub fn layers(&self) -> &[Image] {
        &self.layers
    }

    pub fn op(&self) -> CompositeOp {
        self.op
    }

    pub fn into_layers(self) -> Vec<Image> {
        self.layers
    }
}

/// Blends the layers pixel by pixel.
pub fn compose(set: &LayerSet) -> Result<Image> {
    let first = &set.layers[0];
    let range = first.range();
    match set.op {
        CompositeOp::LogAdditive if range != RangeTag::Log => {
            return Err(Error::Range(format!(
                "log-additive compositing needs log-domain layers, got {range:?}"
            )))
        }
        CompositeOp::AdditiveClipped | CompositeOp::AdditiveUnclipped if range == RangeTag::Log => {
            return Err(Error::Range(
                "additive compositing of log-domain layers; use log-additive".into(),
            ))
        }
        _ => {}
    }
    let mut sum = first.data.clone();
    for l in &set.layers[1..] {
        for (s, v) in sum.iter_mut().zip(&l.data) {
            *s += v;
        }
    }
    let (h, w, c) = first.dims();
    match set.op {
        CompositeOp::AdditiveClipped => {
            sum.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            Image::new(h, w, c, sum, RangeTag::Unit)
        }
        CompositeOp::AdditiveUnclipped => {
            let in_unit = sum.iter().all(|v| (0.0..=1.0).contains(v));
            let tag = if range == RangeTag::Unit && in_unit {
                RangeTag::Unit
            } else {
                RangeTag::Linear
            };
            Image::new(h, w, c, sum, tag)
        }
        CompositeOp::LogAdditive => Image::new(h, w, c, sum, RangeTag::Log),
    }
}

/// Elementwise `ln(max(v, epsilon))`.
pub fn to_log_domain(img: &Image, epsilon: f64) -> Result<Image> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("log epsilon must be positive, got {epsilon}")));
    }
    if img.range != RangeTag::Unit {
        return Err(Error::Range(format!(
            "log conversion expects a unit-range image, got {:?}",
            img.range
        )));
    }
    Ok(Image {
        data: img.data.iter().map(|&v| v.max(epsilon).ln()).collect(),
        range: RangeTag::Log,
        ..img.clone()
    })
}

/// Elementwise `exp`, clamped into `[0, 1]`.
pub fn from_log_domain(img: &Image) -> Result<Image> {
    if img.range != RangeTag::Log {
        return Err(Error::Range(format!("expected a log-domain image, got {:?}", img.range)));
    }
    Ok(Image {
        data: img.data.iter().map(|&v| v.exp().clamp(0.0, 1.0)).collect(),
        range: RangeTag::Unit,
        ..img.clone()
    })
}
