//! Minimal PNG encode/decode helpers used by the mask serializer and the
//! simulator's state-in-image channel.

use std::io::Cursor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PngError {
    #[error("png encode failed: {0}")]
    Encode(String),
    #[error("png decode failed: {0}")]
    Decode(String),
}

/// Encode an 8-bit grayscale image.
pub fn encode_gray(width: u32, height: u32, pixels: &[u8]) -> Result<Vec<u8>, PngError> {
    encode(width, height, pixels, png::ColorType::Grayscale, &[])
}

/// Encode an 8-bit RGB image with optional tEXt chunks.
pub fn encode_rgb(
    width: u32,
    height: u32,
    pixels: &[u8],
    text_chunks: &[(String, String)],
) -> Result<Vec<u8>, PngError> {
    encode(width, height, pixels, png::ColorType::Rgb, text_chunks)
}

fn encode(
    width: u32,
    height: u32,
    pixels: &[u8],
    color: png::ColorType,
    text_chunks: &[(String, String)],
) -> Result<Vec<u8>, PngError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text_chunks {
            enc.add_text_chunk(k.clone(), v.clone())
                .map_err(|e| PngError::Encode(e.to_string()))?;
        }
        let mut writer = enc.write_header().map_err(|e| PngError::Encode(e.to_string()))?;
        writer
            .write_image_data(pixels)
            .map_err(|e| PngError::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub struct DecodedPng {
    pub width: u32,
    pub height: u32,
    pub color: png::ColorType,
    pub pixels: Vec<u8>,
    pub text_chunks: Vec<(String, String)>,
}

pub fn decode(bytes: &[u8]) -> Result<DecodedPng, PngError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| PngError::Decode(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| {
        PngError::Decode("output buffer size overflow".to_string())
    })?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| PngError::Decode(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let mut text_chunks = Vec::new();
    for t in &reader.info().uncompressed_latin1_text {
        text_chunks.push((t.keyword.clone(), t.text.clone()));
    }
    for t in &reader.info().utf8_text {
        if let Ok(text) = t.get_text() {
            text_chunks.push((t.keyword.clone(), text));
        }
    }
    Ok(DecodedPng {
        width: info.width,
        height: info.height,
        color: info.color_type,
        pixels: buf,
        text_chunks,
    })
}

/// Parse just the header, for validating PNG bytes and their dimensions.
pub fn probe_dimensions(bytes: &[u8]) -> Result<(u32, u32), PngError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let reader = decoder.read_info().map_err(|e| PngError::Decode(e.to_string()))?;
    let info = reader.info();
    Ok((info.width, info.height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_roundtrip_with_text_chunk() {
        let pixels = vec![10u8; 4 * 4 * 3];
        let chunks = vec![("state".to_string(), "{\"q\":[1,2]}".to_string())];
        let bytes = encode_rgb(4, 4, &pixels, &chunks).unwrap();
        let decoded = decode(&bytes).unwrap();
        assert_eq!((decoded.width, decoded.height), (4, 4));
        assert_eq!(decoded.pixels, pixels);
        assert!(decoded
            .text_chunks
            .iter()
            .any(|(k, v)| k == "state" && v.contains("\"q\"")));
    }

    #[test]
    fn probe_rejects_garbage() {
        assert!(probe_dimensions(b"not a png").is_err());
    }
}
