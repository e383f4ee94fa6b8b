//! Binary PPM/PGM codecs (always available) and PNG (feature `png`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn decode_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Decode(format!("{}: {msg}", path.display()))
}

/// Reads an RGB image scaled to `[0,1]`. P6 always; PNG when built with the
/// `png` feature. The format is sniffed from the leading bytes.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image_bytes(&bytes).map_err(|e| match e {
        Error::Decode(m) => decode_err(path, m),
        other => other,
    })
}

pub fn decode_image_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P6") {
        return decode_ppm(bytes);
    }
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(bytes);
    }
    Err(Error::Decode("unsupported image format (expected binary PPM P6)".into()))
}

/// Width and height without decoding pixel data.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        let (w, h, _, _) = parse_pnm_header(&bytes, b"P6").map_err(|m| decode_err(path, m))?;
        return Ok((h, w));
    }
    let t = decode_image_bytes(&bytes).map_err(|e| match e {
        Error::Decode(m) => decode_err(path, m),
        other => other,
    })?;
    Ok((t.shape()[0], t.shape()[1]))
}

/// `(width, height, maxval, offset of pixel data)`.
fn parse_pnm_header(bytes: &[u8], magic: &[u8]) -> std::result::Result<(usize, usize, usize, usize), String> {
    if !bytes.starts_with(magic) {
        return Err("bad magic number".into());
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header value out of range")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err("zero image extent".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("invalid maxval {maxval}"));
    }
    Ok((w, h, maxval, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, maxval, off) = parse_pnm_header(bytes, b"P6").map_err(Error::Decode)?;
    let sample = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * sample;
    let data = bytes
        .get(off..off + need)
        .ok_or_else(|| Error::Decode(format!("pixel data truncated: need {need} bytes")))?;
    let scale = maxval as f64;
    let values = if sample == 1 {
        data.iter().map(|&b| b as f64 / scale).collect()
    } else {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Tensor::new(vec![h, w, 3], values)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary PPM of an `h×w×3` image with values in `[0,1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = *image.shape() else {
        return Err(Error::dim(format!("PPM needs h×w×3, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// 8-bit binary PGM of an `h×w` map with values in `[0,1]`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = *map.shape() else {
        return Err(Error::dim(format!("PGM needs h×w, got {:?}", map.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, maxval, off) = parse_pnm_header(bytes, b"P5").map_err(Error::Decode)?;
    if maxval > 255 {
        return Err(Error::Decode("16-bit PGM not supported".into()));
    }
    let data = bytes
        .get(off..off + w * h)
        .ok_or_else(|| Error::Decode("pixel data truncated".into()))?;
    Tensor::new(vec![h, w], data.iter().map(|&b| b as f64 / maxval as f64).collect())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes PNG for a `.png` extension (feature `png`), PPM otherwise.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        encode_png(image)?
    } else {
        encode_ppm(image)?
    };
    write_bytes(path, &bytes)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    write_bytes(path, &encode_pgm(map)?)
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Decode(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Decode("PNG too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Decode("unexpanded palette PNG".into())),
    };
    let mut out = Vec::with_capacity(w * h * 3);
    for p in px.chunks_exact(channels) {
        let rgb = if channels < 3 { [p[0]; 3] } else { [p[0], p[1], p[2]] };
        out.extend(rgb.iter().map(|&b| b as f64 / 255.0));
    }
    Tensor::new(vec![h, w, 3], out)
}

#[cfg(not(feature = "png"))]
fn decode_png(_: &[u8]) -> Result<Tensor> {
    Err(Error::Decode("PNG support not compiled in (enable the `png` feature)".into()))
}

#[cfg(feature = "png")]
fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = *image.shape() else {
        return Err(Error::dim(format!("PNG needs h×w×3, got {:?}", image.shape())));
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Decode(e.to_string()))?;
        let bytes: Vec<u8> = image.data().iter().map(|&v| to_byte(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::Decode(e.to_string()))?;
    }
    Ok(out)
}

#[cfg(not(feature = "png"))]
fn encode_png(_: &Tensor) -> Result<Vec<u8>> {
    Err(Error::param("PNG output needs the `png` feature"))
}
