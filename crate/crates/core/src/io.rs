//! Raster file formats: PFM (float, 1 or 3 channels) and 8/16-bit PNG.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::Image;

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let mut buf = Vec::with_capacity(img.data.len() * 4 + 32);
    write!(buf, "{tag}\n{} {}\n-1.0\n", img.width, img.height).expect("vec write");
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..img.channels {
                buf.extend_from_slice(&img.get(c, y, x).to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    // Three whitespace-separated header tokens lines: tag, "w h", scale.
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(Error::format(path, format!("bad PFM tag {t}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, "bad PFM size"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f32 = fields[3].parse().map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let need = w * h * channels * 4;
    if bytes.len() < pos + need {
        return Err(Error::format(path, "truncated PFM data"));
    }
    let mut img = Image::zeros(w, h, channels);
    let mut p = pos;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                let raw = [bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]];
                let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
                img.set(c, y, x, v);
                p += 4;
            }
        }
    }
    Ok(img)
}

/// Writes a 1- or 3-channel image with values clamped to [0,1].
pub fn write_png(path: &Path, img: &Image, sixteen_bit: bool) -> Result<()> {
    let q = |v: f32, max: f32| (v.clamp(0.0, 1.0) * max).round();
    let res = match (img.channels, sixteen_bit) {
        (1, false) => ImageBuffer::<Luma<u8>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
            Luma([q(img.get(0, y as usize, x as usize), 255.0) as u8])
        })
        .save(path),
        (1, true) => ImageBuffer::<Luma<u16>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
            Luma([q(img.get(0, y as usize, x as usize), 65535.0) as u16])
        })
        .save(path),
        (3, false) => ImageBuffer::<Rgb<u8>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|c| q(img.get(c, y, x), 255.0) as u8))
        })
        .save(path),
        (3, true) => ImageBuffer::<Rgb<u16>, _>::from_fn(img.width as u32, img.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|c| q(img.get(c, y, x), 65535.0) as u16))
        })
        .save(path),
        (c, _) => return Err(Error::Shape(format!("PNG export supports 1 or 3 channels, got {c}"))),
    };
    res.map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Reads any supported 8/16-bit image as RGB in [0,1].
pub fn read_rgb(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    let rgb = dynimg.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::zeros(w, h, 3);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, p.0[c]);
        }
    }
    Ok(img)
}

/// Reads a mask; any pixel with luminance above one half is foreground.
pub fn read_mask(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    let l = dynimg.to_luma32f();
    let (w, h) = (l.width() as usize, l.height() as usize);
    let mut img = Image::zeros(w, h, 1);
    for (x, y, p) in l.enumerate_pixels() {
        img.set(0, y as usize, x as usize, if p.0[0] > 0.5 { 1.0 } else { 0.0 });
    }
    Ok(img)
}

/// Loads an image by extension: `.pfm` as float, anything else as 8/16-bit.
pub fn read_any(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => read_pfm(path),
        _ => read_rgb(path),
    }
}
