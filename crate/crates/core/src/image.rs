//! 8-bit RGB images: PPM (P6) read/write, PNG read, padding and cropping.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::reflect;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("empty image {width}x{height}")));
        }
        if data.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[3 * (y * self.width + x) + c]
    }

    /// `(3, H, W)` tensor with values in `[0, 255]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * w * h];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * w * h + i] = f64::from(px[c]);
            }
        }
        Tensor::new(vec![3, h, w], out).expect("consistent shape")
    }

    /// Round and clamp a `(3, H, W)` tensor to 8 bits.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 3 {
            return Err(Error::InvalidShape {
                op: "from_tensor",
                shape: t.shape().to_vec(),
                reason: "expected 3 channels".into(),
            });
        }
        let src = t.data();
        let mut data = vec![0u8; 3 * w * h];
        for i in 0..w * h {
            for ch in 0..3 {
                data[3 * i + ch] = src[ch * w * h + i].round().clamp(0.0, 255.0) as u8;
            }
        }
        Self::new(w, h, data)
    }

    /// Mirror-extend right and bottom edges to multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let w2 = self.width.div_ceil(m) * m;
        let h2 = self.height.div_ceil(m) * m;
        if (w2, h2) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * w2 * h2);
        for y in 0..h2 {
            let sy = reflect(y as isize, self.height);
            for x in 0..w2 {
                let sx = reflect(x as isize, self.width);
                let o = 3 * (sy * self.width + sx);
                data.extend_from_slice(&self.data[o..o + 3]);
            }
        }
        Self {
            width: w2,
            height: h2,
            data,
        }
    }

    /// Top-left `width × height` region.
    pub fn crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {width}x{height} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            let o = 3 * y * self.width;
            data.extend_from_slice(&self.data[o..o + 3 * width]);
        }
        Self::new(width, height, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(b"P6") {
            read_ppm(&mut &bytes[..])
        } else if bytes.starts_with(b"\x89PNG") {
            read_png(&bytes)
        } else {
            Err(Error::Format(format!("{}: not a PPM (P6) or PNG file", path.display())))
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_ppm_to(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }
}

fn ppm_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        let c = b[0];
        if c == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c as char);
    }
    if tok.is_empty() {
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(tok)
}

pub fn read_ppm(r: &mut impl Read) -> Result<RgbImage> {
    let mut r = BufReader::new(r);
    if ppm_token(&mut r)? != "P6" {
        return Err(Error::Format("only binary PPM (P6) is supported".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        ppm_token(&mut r)?
            .parse()
            .map_err(|_| Error::Format(format!("bad PPM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported (need 255)")));
    }
    let mut data = vec![0u8; 3 * width * height];
    r.read_exact(&mut data)
        .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
    RgbImage::new(width, height, data)
}

fn read_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Format("unexpanded indexed PNG".into())),
    };
    RgbImage::new(w, h, data)
}
