//! Binary PGM (P5) and PPM (P6) reading and writing, and conversion to the
//! codec's [0, 1] float tensors.

use ckbd::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Interleaved 8-bit samples, row-major.
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, String> {
        if width == 0 || height == 0 {
            return Err(format!("image dimensions must be positive, got {width}x{height}"));
        }
        if channels != 1 && channels != 3 {
            return Err(format!("unsupported channel count {channels}"));
        }
        if data.len() != width * height * channels {
            return Err(format!(
                "sample count {} does not match {width}x{height}x{channels}",
                data.len()
            ));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    /// Planar [1, C, H, W] tensor with samples scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![0.0f32; w * h * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * h + y) * w + x] =
                        self.data[(y * w + x) * c + ch] as f32 / 255.0;
                }
            }
        }
        Tensor::from_vec([1, c, h, w], data).expect("sizes agree")
    }

    /// Back from a [1, C, H, W] tensor, rounding and clamping to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self, String> {
        let [n, c, h, w] = t.shape();
        if n != 1 || (c != 1 && c != 3) {
            return Err(format!("cannot write tensor of shape {:?} as an image", t.shape()));
        }
        let mut data = vec![0u8; w * h * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.at(0, ch, y, x);
                    data[(y * w + x) * c + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        ImageBuffer::new(w, h, c, data)
    }
}

/// Parse a binary PGM/PPM. The header is validated before any payload byte
/// is consumed; malformed headers are rejected outright.
pub fn read_pnm(bytes: &[u8]) -> Result<ImageBuffer, String> {
    let mut pos = 0usize;
    let magic = take_token(bytes, &mut pos).ok_or("missing magic")?;
    let channels = match magic.as_slice() {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(format!(
                "unsupported magic {:?} (only binary P5/P6)",
                String::from_utf8_lossy(other)
            ))
        }
    };
    let width = parse_number(bytes, &mut pos).ok_or("bad or missing width")?;
    let height = parse_number(bytes, &mut pos).ok_or("bad or missing height")?;
    let maxval = parse_number(bytes, &mut pos).ok_or("bad or missing maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("image dimensions must be positive, got {width}x{height}"));
    }
    if width > 1 << 20 || height > 1 << 20 {
        return Err(format!("implausible dimensions {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (8-bit only)"));
    }
    // exactly one whitespace byte separates header and payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace before payload".into()),
    }
    let expected = width * height * channels;
    let payload = bytes.get(pos..pos + expected).ok_or(format!(
        "payload truncated: need {expected} bytes, have {}",
        bytes.len().saturating_sub(pos)
    ))?;
    let mut data = payload.to_vec();
    if maxval != 255 {
        let scale = 255.0 / maxval as f64;
        for v in &mut data {
            *v = ((*v as f64) * scale).round().min(255.0) as u8;
        }
    }
    ImageBuffer::new(width, height, channels, data)
}

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    loop {
        while bytes.get(*pos).is_some_and(|b| b.is_ascii_whitespace()) {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                *pos += 1;
            }
        } else {
            return;
        }
    }
}

fn take_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    if *pos > start {
        Some(bytes[start..*pos].to_vec())
    } else {
        None
    }
}

fn parse_number(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start || *pos - start > 9 {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

pub fn write_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}
