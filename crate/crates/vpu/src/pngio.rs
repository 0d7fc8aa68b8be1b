//! 8-bit PNG encoding of images, masks and probability maps.
//!
//! Values map to bytes by `round(v · 255)` and back by `/ 255`, so anything
//! already on the 8-bit grid round-trips exactly.

use vpu_core::{BinaryMask, ImagePlane, ProbMap};

use crate::error::{AppError, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| AppError::Invalid(format!("png header: {e}")))?;
    w.write_image_data(data).map_err(|e| AppError::Invalid(format!("png data: {e}")))?;
    w.finish().map_err(|e| AppError::Invalid(format!("png finish: {e}")))?;
    Ok(out)
}

/// Decoded pixels expanded to 8-bit gray, gray+alpha, RGB or RGBA.
struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut dec = png::Decoder::new(bytes);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| AppError::Corrupt(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| AppError::Corrupt(format!("png: {e}")))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(AppError::Corrupt("unexpanded palette png".into())),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    // rows may be padded; keep exactly width * channels bytes each
    let stride = info.line_size;
    let mut bytes = Vec::with_capacity(width * height * channels);
    for row in buf.chunks(stride).take(height) {
        bytes.extend_from_slice(&row[..width * channels]);
    }
    Ok(Decoded { width, height, channels, bytes })
}

pub fn encode_image(img: &ImagePlane) -> Result<Vec<u8>> {
    let (w, h) = (img.width(), img.height());
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(x, y);
            if p.len() == 1 {
                data.extend_from_slice(&[to_byte(p[0]); 3]);
            } else {
                data.extend(p.iter().take(3).map(|&v| to_byte(v)));
            }
        }
    }
    encode(w, h, png::ColorType::Rgb, &data)
}

/// Any 8/16-bit gray, RGB or palette PNG as an RGB plane; alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<ImagePlane> {
    let d = decode(bytes)?;
    let mut data = Vec::with_capacity(d.width * d.height * 3);
    for px in d.bytes.chunks(d.channels) {
        match d.channels {
            1 | 2 => data.extend_from_slice(&[px[0] as f64 / 255.0; 3]),
            _ => data.extend(px[..3].iter().map(|&b| b as f64 / 255.0)),
        }
    }
    Ok(ImagePlane::new(d.width, d.height, 3, data)?)
}

/// Grayscale, 255 for foreground.
pub fn encode_mask(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(mask.width(), mask.height(), png::ColorType::Grayscale, &data)
}

/// Foreground where the first channel exceeds 127.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let d = decode(bytes)?;
    let data = d.bytes.chunks(d.channels).map(|px| px[0] > 127).collect();
    Ok(BinaryMask::new(d.width, d.height, data)?)
}

/// Grayscale probabilities quantised to 8 bits.
pub fn encode_prob(prob: &ProbMap) -> Result<Vec<u8>> {
    let data: Vec<u8> = prob.data().iter().map(|&p| to_byte(p)).collect();
    encode(prob.width(), prob.height(), png::ColorType::Grayscale, &data)
}
