//! 8-bit PNG encoding for images, masks and palette-indexed parsings.

use std::io::Cursor;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{invalid, Result, VtonError};
use crate::image::{BinaryMask, ImageTensor};
use crate::segmentation::{SegmentationMap, Vocabulary, PALETTE};

fn png_err(e: impl std::fmt::Display) -> VtonError {
    VtonError::Png(e.to_string())
}

fn encode(width: usize, height: usize, color: ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(data).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(out)
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    data: Vec<u8>,
}

fn decode(bytes: &[u8], transform: Transformations) -> Result<Decoded> {
    let mut dec = Decoder::new(Cursor::new(bytes));
    dec.set_transformations(transform);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| VtonError::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != BitDepth::Eight {
        return Err(VtonError::Png(format!("expected 8-bit samples, got {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data: buf,
    })
}

pub fn encode_image(image: &ImageTensor) -> Result<Vec<u8>> {
    let color = if image.channels() == 3 {
        ColorType::Rgb
    } else {
        ColorType::Grayscale
    };
    encode(image.width(), image.height(), color, None, &image.to_bytes())
}

/// Decodes any 8-bit PNG to RGB (alpha dropped) or grayscale.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let d = decode(bytes, Transformations::EXPAND | Transformations::STRIP_16)?;
    let (channels, data) = match d.color {
        ColorType::Rgb => (3, d.data),
        ColorType::Grayscale => (1, d.data),
        ColorType::Rgba => (3, d.data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        ColorType::GrayscaleAlpha => (1, d.data.iter().step_by(2).copied().collect()),
        ColorType::Indexed => return Err(VtonError::Png("palette was not expanded".into())),
    };
    ImageTensor::from_bytes(d.height, d.width, channels, &data)
}

/// Force three channels, replicating grayscale.
pub fn decode_rgb(bytes: &[u8]) -> Result<ImageTensor> {
    let img = decode_image(bytes)?;
    if img.channels() == 3 {
        return Ok(img);
    }
    let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
    ImageTensor::new(img.height(), img.width(), 3, data)
}

pub fn encode_mask(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask.data().iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    encode(mask.width(), mask.height(), ColorType::Grayscale, None, &data)
}

/// Pixels with luma of at least 128 are on.
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let img = decode_image(bytes)?;
    let luma = img.luma();
    Ok(BinaryMask::from_fn(img.height(), img.width(), |y, x| {
        luma[y * img.width() + x] >= 0.5
    }))
}

/// Palette-indexed PNG whose indices are the label ids.
pub fn encode_parsing(map: &SegmentationMap) -> Result<Vec<u8>> {
    let palette: Vec<u8> = PALETTE.iter().flatten().copied().collect();
    encode(map.width(), map.height(), ColorType::Indexed, Some(palette), map.labels())
}

/// Accepts an indexed PNG (indices are labels) or an RGB PNG painted with
/// the standard palette.
pub fn decode_parsing(bytes: &[u8], vocabulary: Vocabulary) -> Result<SegmentationMap> {
    let d = decode(bytes, Transformations::IDENTITY)?;
    let labels = match d.color {
        ColorType::Indexed => d.data,
        ColorType::Rgb => d
            .data
            .chunks(3)
            .map(|p| {
                PALETTE
                    .iter()
                    .position(|c| c == p)
                    .map(|i| i as u8)
                    .ok_or_else(|| invalid(format!("colour {p:?} is not in the parsing palette")))
            })
            .collect::<Result<Vec<u8>>>()?,
        other => return Err(invalid(format!("parsing PNG must be indexed or RGB, got {other:?}"))),
    };
    SegmentationMap::new(d.height, d.width, labels, vocabulary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::label;

    #[test]
    fn image_round_trip_is_exact_on_8bit_values() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let img = ImageTensor::from_bytes(4, 3, 3, &bytes).unwrap();
        let back = decode_image(&encode_image(&img).unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn parsing_round_trip() {
        let mut map = SegmentationMap::filled(5, 4, label::BACKGROUND);
        map.set(2, 1, label::TORSO_GARMENT);
        map.set(4, 3, label::INDISTINCT);
        let png = encode_parsing(&map).unwrap();
        assert_eq!(decode_parsing(&png, Vocabulary::standard()).unwrap(), map);
    }

    #[test]
    fn mask_round_trip() {
        let mask = BinaryMask::from_fn(6, 5, |y, x| y > x);
        assert_eq!(decode_mask(&encode_mask(&mask).unwrap()).unwrap(), mask);
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(decode_image(b"not a png").is_err());
    }
}
