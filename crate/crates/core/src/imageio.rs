//! 8-bit PGM (P5) and PNG files to and from `[0, 1]` rasters.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::tv::{GrayImage, RgbImage};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_owned(),
        reason: e.to_string(),
    }
}

fn to_unit(v: u8) -> f64 {
    f64::from(v) / 255.0
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode(bytes: &[u8], origin: &Path) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| image_err(origin, e))
}

fn gray_from_dynamic(img: &DynamicImage) -> GrayImage {
    let l = img.to_luma8();
    let (w, h) = l.dimensions();
    GrayImage::new(w as usize, h as usize, l.pixels().map(|p| to_unit(p.0[0])).collect())
        .expect("decoded image is non-empty")
}

fn rgb_from_dynamic(img: &DynamicImage) -> RgbImage {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let channel = |c: usize| {
        GrayImage::new(w, h, rgb.pixels().map(|p| to_unit(p.0[c])).collect()).expect("non-empty")
    };
    RgbImage::from_channels(channel(0), channel(1), channel(2)).expect("same size")
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    Ok(gray_from_dynamic(&decode(bytes, Path::new("<memory>"))?))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(rgb_from_dynamic(&decode(bytes, Path::new("<memory>"))?))
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(gray_from_dynamic(&decode(&bytes, path)?))
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(rgb_from_dynamic(&decode(&bytes, path)?))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let bytes: Vec<u8> = img.pixels().iter().copied().map(to_byte).collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, img.width() as u32, img.height() as u32, image::ExtendedColorType::L8)
        .expect("in-memory PGM encoding");
    out
}

pub fn encode_gray_png(img: &GrayImage) -> Vec<u8> {
    let bytes: Vec<u8> = img.pixels().iter().copied().map(to_byte).collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("sized");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn encode_rgb_png(img: &RgbImage) -> Vec<u8> {
    let [r, g, b] = img.channels();
    let bytes: Vec<u8> = r
        .pixels()
        .iter()
        .zip(g.pixels())
        .zip(b.pixels())
        .flat_map(|((r, g), b)| [to_byte(*r), to_byte(*g), to_byte(*b)])
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("sized");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Writes a `.pgm` path as binary PGM, anything else as grayscale PNG.
pub fn write_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_pgm(path) { encode_pgm(img) } else { encode_gray_png(img) };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_rgb_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_rgb_png(img)).map_err(|e| Error::io(path, e))
}

/// True when the file should be handled as a single-channel image.
pub fn is_grayscale_path(path: impl AsRef<Path>) -> bool {
    is_pgm(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> GrayImage {
        GrayImage::from_fn(5, 3, |x, y| (x * 3 + y) as f64 * 17.0 / 255.0).unwrap()
    }

    #[test]
    fn pgm_is_p5_and_round_trips() {
        let img = ramp();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(decode_gray(&bytes).unwrap(), img);
    }

    #[test]
    fn rgb_png_round_trips() {
        let r = ramp();
        let g = GrayImage::filled(5, 3, 1.0).unwrap();
        let b = GrayImage::filled(5, 3, 0.0).unwrap();
        let img = RgbImage::from_channels(r, g, b).unwrap();
        let bytes = encode_rgb_png(&img);
        assert_eq!(decode_rgb(&bytes).unwrap(), img);
    }

    #[test]
    fn files_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let pgm = dir.path().join("a.pgm");
        write_gray(&pgm, &ramp()).unwrap();
        assert_eq!(read_gray(&pgm).unwrap(), ramp());
        assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
        assert!(read_gray(dir.path().join("missing.png")).is_err());
        std::fs::write(dir.path().join("junk.png"), b"nope").unwrap();
        assert!(matches!(read_rgb(dir.path().join("junk.png")), Err(Error::Image { .. })));
    }
}
