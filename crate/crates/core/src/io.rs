//! File formats for images, masks, flow, depth, intrinsics and poses.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::{Field, Mask};

/// Magic number that opens a `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;
/// Sub-pixel resolution of KITTI flow PNGs.
pub const KITTI_FLOW_SCALE: f64 = 64.0;
/// Offset added to encoded KITTI flow values.
pub const KITTI_FLOW_OFFSET: f64 = 32768.0;
/// Resolution of KITTI depth PNGs (units per meter).
pub const KITTI_DEPTH_SCALE: f64 = 256.0;

const MAX_DIM: usize = 1 << 16;

fn check_dims(width: usize, height: usize, offset: u64) -> Result<()> {
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::parse(offset, format!("invalid dimensions {width}x{height}")));
    }
    Ok(())
}

fn read_u32_le(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(at as u64, "unexpected end of file"))
}

/// Encodes a two-channel flow field as `.flo`.
pub fn encode_flo(flow: &Field) -> Result<Vec<u8>> {
    flow.check_channels(2, "flow")?;
    let mut out = Vec::with_capacity(12 + 8 * flow.pixel_count());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for &v in flow.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a `.flo` file.
pub fn decode_flo(bytes: &[u8]) -> Result<Field> {
    let magic = f32::from_bits(read_u32_le(bytes, 0)?);
    if magic != FLO_MAGIC {
        return Err(Error::parse(0, format!("bad .flo magic {magic}")));
    }
    let width = read_u32_le(bytes, 4)? as i32;
    let height = read_u32_le(bytes, 8)? as i32;
    if width <= 0 || height <= 0 {
        return Err(Error::parse(4, format!("invalid dimensions {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    check_dims(width, height, 4)?;
    let expected = 12 + 8 * width * height;
    if bytes.len() != expected {
        return Err(Error::parse(
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Field::from_vec(width, height, 2, data)
}

/// Encodes a single-channel field as little-endian PFM (rows stored bottom-up).
pub fn encode_pfm(field: &Field) -> Result<Vec<u8>> {
    let tag = match field.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::domain(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", field.width(), field.height()).into_bytes();
    let row = field.width() * field.channels();
    for y in (0..field.height()).rev() {
        for &v in &field.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits the next whitespace-delimited header token, returning it and the
/// offset just past it.
fn header_token(bytes: &[u8], mut at: usize) -> Result<(&str, usize)> {
    while at < bytes.len() && bytes[at].is_ascii_whitespace() {
        at += 1;
    }
    let start = at;
    while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
        at += 1;
    }
    if start == at {
        return Err(Error::parse(start as u64, "unexpected end of header"));
    }
    let token = std::str::from_utf8(&bytes[start..at]).map_err(|_| Error::parse(start as u64, "non-ASCII header"))?;
    Ok((token, at))
}

/// Decodes a PFM file of either endianness.
pub fn decode_pfm(bytes: &[u8]) -> Result<Field> {
    let (tag, at) = header_token(bytes, 0)?;
    let channels = match tag {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(Error::parse(0, format!("bad PFM magic {tag:?}"))),
    };
    let (w, at_h) = header_token(bytes, at)?;
    let width: usize = w
        .parse()
        .map_err(|_| Error::parse(at as u64, format!("bad width {w:?}")))?;
    let (h, at_s) = header_token(bytes, at_h)?;
    let height: usize = h
        .parse()
        .map_err(|_| Error::parse(at_h as u64, format!("bad height {h:?}")))?;
    check_dims(width, height, at as u64)?;
    let (s, end) = header_token(bytes, at_s)?;
    let scale: f64 = s
        .parse()
        .map_err(|_| Error::parse(at_s as u64, format!("bad scale {s:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(at_s as u64, format!("bad scale {s:?}")));
    }
    if bytes.get(end).is_none_or(|b| !b.is_ascii_whitespace()) {
        return Err(Error::parse(end as u64, "missing separator after header"));
    }
    let body = &bytes[end + 1..];
    let row = width * channels;
    let expected = 4 * row * height;
    if body.len() != expected {
        return Err(Error::parse(
            (end + 1 + body.len().min(expected)) as u64,
            format!("expected {expected} data bytes, found {}", body.len()),
        ));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; row * height];
    for (k, c) in body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (k / row, k % row);
        data[(height - 1 - file_row) * row + col] = v as f64;
    }
    Field::from_vec(width, height, channels, data)
}

/// Decoding reads from memory, so an I/O failure means the data ended early.
fn png_error(e: png::DecodingError, len: usize) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::parse(len as u64, format!("PNG truncated: {io}")),
        other => Error::parse(0, format!("PNG: {other}")),
    }
}

/// Raw PNG samples widened to 16 bits.
struct PngSamples {
    width: usize,
    height: usize,
    channels: usize,
    bit_depth: u8,
    samples: Vec<u16>,
}

fn decode_png(bytes: &[u8]) -> Result<PngSamples> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_error(e, bytes.len()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(0, "PNG image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(e, bytes.len()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        png::BitDepth::Eight => buf.iter().map(|&b| b as u16).collect(),
        other => return Err(Error::parse(0, format!("unsupported PNG bit depth {other:?}"))),
    };
    Ok(PngSamples {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        bit_depth: info.bit_depth as u8,
        samples,
    })
}

fn encode_png(width: usize, height: usize, color: png::ColorType, samples: &[u16], sixteen: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(if sixteen {
            png::BitDepth::Sixteen
        } else {
            png::BitDepth::Eight
        });
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::domain(format!("PNG encoding: {e}")))?;
        let data: Vec<u8> = if sixteen {
            samples.iter().flat_map(|s| s.to_be_bytes()).collect()
        } else {
            samples.iter().map(|&s| s as u8).collect()
        };
        writer
            .write_image_data(&data)
            .map_err(|e| Error::domain(format!("PNG encoding: {e}")))?;
    }
    Ok(out)
}

fn quantize_u16(value: f64, what: &str) -> Result<u16> {
    let q = value.round();
    if !(0.0..=65535.0).contains(&q) {
        return Err(Error::domain(format!("{what} value {value} does not fit in 16 bits")));
    }
    Ok(q as u16)
}

/// Encodes flow as a KITTI 16-bit PNG; pixels outside `valid` are stored as invalid.
pub fn encode_kitti_flow(flow: &Field, valid: Option<&Mask>) -> Result<Vec<u8>> {
    flow.check_channels(2, "flow")?;
    let mut samples = Vec::with_capacity(3 * flow.pixel_count());
    for i in 0..flow.pixel_count() {
        let ok = valid.is_none_or(|m| m.data()[i]);
        if ok {
            for c in 0..2 {
                let v = flow.data()[2 * i + c] * KITTI_FLOW_SCALE + KITTI_FLOW_OFFSET;
                samples.push(quantize_u16(v, "flow")?);
            }
            samples.push(1);
        } else {
            samples.extend_from_slice(&[0, 0, 0]);
        }
    }
    encode_png(flow.width(), flow.height(), png::ColorType::Rgb, &samples, true)
}

/// Decodes a KITTI flow PNG into the flow field and its validity mask.
pub fn decode_kitti_flow(bytes: &[u8]) -> Result<(Field, Mask)> {
    let png = decode_png(bytes)?;
    if png.channels != 3 || png.bit_depth != 16 {
        return Err(Error::parse(
            0,
            format!(
                "KITTI flow needs 16-bit RGB, got {} channels at {} bits",
                png.channels, png.bit_depth
            ),
        ));
    }
    let n = png.width * png.height;
    let mut data = vec![0.0; 2 * n];
    let mut valid = vec![false; n];
    for i in 0..n {
        let s = &png.samples[3 * i..3 * i + 3];
        if s[2] != 0 {
            valid[i] = true;
            data[2 * i] = (s[0] as f64 - KITTI_FLOW_OFFSET) / KITTI_FLOW_SCALE;
            data[2 * i + 1] = (s[1] as f64 - KITTI_FLOW_OFFSET) / KITTI_FLOW_SCALE;
        }
    }
    Ok((
        Field::from_vec(png.width, png.height, 2, data)?,
        Mask::from_vec(png.width, png.height, valid)?,
    ))
}

/// Encodes depth as a KITTI 16-bit PNG; zero marks invalid pixels.
pub fn encode_kitti_depth(depth: &Field, valid: Option<&Mask>) -> Result<Vec<u8>> {
    depth.check_channels(1, "depth")?;
    let samples = depth
        .data()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if valid.is_some_and(|m| !m.data()[i]) || d <= 0.0 {
                return Ok(0);
            }
            quantize_u16(d * KITTI_DEPTH_SCALE, "depth")
        })
        .collect::<Result<Vec<u16>>>()?;
    encode_png(depth.width(), depth.height(), png::ColorType::Grayscale, &samples, true)
}

/// Decodes a KITTI depth PNG into depth and its validity mask.
pub fn decode_kitti_depth(bytes: &[u8]) -> Result<(Field, Mask)> {
    let png = decode_png(bytes)?;
    if png.channels != 1 || png.bit_depth != 16 {
        return Err(Error::parse(
            0,
            format!(
                "KITTI depth needs 16-bit grayscale, got {} channels at {} bits",
                png.channels, png.bit_depth
            ),
        ));
    }
    let data = png.samples.iter().map(|&s| s as f64 / KITTI_DEPTH_SCALE).collect();
    let valid = png.samples.iter().map(|&s| s != 0).collect();
    Ok((
        Field::from_vec(png.width, png.height, 1, data)?,
        Mask::from_vec(png.width, png.height, valid)?,
    ))
}

/// Decodes an 8- or 16-bit PNG into intensities in [0, 1]; alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<Field> {
    let png = decode_png(bytes)?;
    let color = match png.channels {
        1 | 2 => 1,
        _ => 3,
    };
    let max = if png.bit_depth == 16 { 65535.0 } else { 255.0 };
    let mut data = Vec::with_capacity(color * png.width * png.height);
    for px in png.samples.chunks_exact(png.channels) {
        data.extend(px[..color].iter().map(|&s| s as f64 / max));
    }
    Field::from_vec(png.width, png.height, color, data)
}

/// Encodes a one- or three-channel image with values in [0, 1] as 8-bit PNG.
pub fn encode_image(image: &Field) -> Result<Vec<u8>> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::domain(format!("images have 1 or 3 channels, got {c}"))),
    };
    let samples: Vec<u16> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    encode_png(image.width(), image.height(), color, &samples, false)
}

/// Encodes a mask as 8-bit PNG with 255 for set pixels.
pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let samples: Vec<u16> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_png(mask.width(), mask.height(), png::ColorType::Grayscale, &samples, false)
}

/// Decodes a mask PNG; any nonzero first channel counts as set.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let png = decode_png(bytes)?;
    let data = png.samples.chunks_exact(png.channels).map(|px| px[0] != 0).collect();
    Mask::from_vec(png.width, png.height, data)
}

/// Parses poses stored one per line as 12 numbers (row-major 3x4 matrix).
pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let values: Vec<f64> = trimmed
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(offset, format!("bad pose value: {e}")))?;
            let row: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| {
                Error::parse(offset, format!("pose line has {} values, expected 12", v.len()))
            })?;
            poses.push(Pose::from_row(&row).map_err(|e| Error::parse(offset, e.to_string()))?);
        }
        offset += line.len() as u64;
    }
    Ok(poses)
}

/// Formats poses one per line as 12 numbers.
pub fn format_poses(poses: &[Pose]) -> String {
    poses
        .iter()
        .map(|p| {
            let row: Vec<String> = p.to_row().iter().map(|v| format!("{v:e}")).collect();
            row.join(" ") + "\n"
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

pub fn read_flo(path: &Path) -> Result<Field> {
    decode_flo(&read(path)?)
}

pub fn write_flo(path: &Path, flow: &Field) -> Result<()> {
    Ok(fs::write(path, encode_flo(flow)?)?)
}

pub fn read_pfm(path: &Path) -> Result<Field> {
    decode_pfm(&read(path)?)
}

pub fn write_pfm(path: &Path, field: &Field) -> Result<()> {
    Ok(fs::write(path, encode_pfm(field)?)?)
}

pub fn read_kitti_flow(path: &Path) -> Result<(Field, Mask)> {
    decode_kitti_flow(&read(path)?)
}

pub fn write_kitti_flow(path: &Path, flow: &Field, valid: Option<&Mask>) -> Result<()> {
    Ok(fs::write(path, encode_kitti_flow(flow, valid)?)?)
}

pub fn read_kitti_depth(path: &Path) -> Result<(Field, Mask)> {
    decode_kitti_depth(&read(path)?)
}

pub fn write_kitti_depth(path: &Path, depth: &Field, valid: Option<&Mask>) -> Result<()> {
    Ok(fs::write(path, encode_kitti_depth(depth, valid)?)?)
}

pub fn read_image(path: &Path) -> Result<Field> {
    decode_image(&read(path)?)
}

pub fn write_image(path: &Path, image: &Field) -> Result<()> {
    Ok(fs::write(path, encode_image(image)?)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read(path)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    Ok(fs::write(path, encode_mask(mask)?)?)
}

/// Reads a flow field, choosing the format from the file extension
/// (`.flo`, otherwise KITTI PNG). Also returns the validity mask.
pub fn read_flow_any(path: &Path) -> Result<(Field, Mask)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        read_kitti_flow(path)
    } else {
        let flow = read_flo(path)?;
        let valid = Mask::from_fn(flow.width(), flow.height(), |x, y| {
            flow.get(x, y, 0).is_finite() && flow.get(x, y, 1).is_finite()
        });
        Ok((flow, valid))
    }
}

/// Reads a depth map, choosing the format from the file extension
/// (`.png` as KITTI depth, otherwise PFM). Also returns the validity mask.
pub fn read_depth_any(path: &Path) -> Result<(Field, Mask)> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        read_kitti_depth(path)
    } else {
        let depth = read_pfm(path)?;
        let valid = Mask::from_fn(depth.width(), depth.height(), |x, y| {
            let d = depth.at(x, y);
            d.is_finite() && d > 0.0
        });
        Ok((depth, valid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_flow_encoding_of_one_pixel() {
        let flow = Field::from_vec(1, 1, 2, vec![1.0, -0.5]).unwrap();
        let png = decode_png(&encode_kitti_flow(&flow, None).unwrap()).unwrap();
        assert_eq!(png.samples, vec![32832, 32736, 1]);
    }

    #[test]
    fn truncated_flo_reports_offset() {
        let flow = Field::filled(2, 2, 2, 0.5);
        let bytes = encode_flo(&flow).unwrap();
        match decode_flo(&bytes[..20]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
    }
}
