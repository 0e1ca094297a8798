//! Binary PPM (P6, maxval 255) images and the pixel ↔ model-space mapping.

use std::path::Path;

use crate::container::{read_file, write_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixels in `[0, 1]` map to `[-1, 1]`, the range the flow is trained in.
pub fn to_model_space(img: &Tensor) -> Tensor {
    img.map(|x| 2.0 * x - 1.0)
}

pub fn from_model_space(z: &Tensor) -> Tensor {
    z.map(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0))
}

pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `[H, W, 3]` image in `[0, 1]` as P6 bytes.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::InvalidImage(format!("expected [H, W, 3], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&x| quantize(x)));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::InvalidImage(m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6) file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero image extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h * 3 {
        return Err(bad(&format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            w * h * 3
        )));
    }
    Tensor::new(vec![h, w, 3], raster.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_file(path)?).map_err(|e| match e {
        Error::InvalidImage(m) => Error::InvalidImage(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(img)?)
}
