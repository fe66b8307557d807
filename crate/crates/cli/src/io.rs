//! Image file reading and writing.

use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageFormat, ImageReader};

use sodkit_core::fusion::RgbImage;

use crate::error::{CliError, Result};

/// 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    reader
        .decode()
        .map_err(|e| CliError::input(format!("cannot decode {}: {e}", path.display())))
}

fn is_eight_bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_)
    )
}

/// Reads a strictly single-channel 8-bit image (depth maps).
pub fn read_gray8_strict(path: &Path) -> Result<Gray8> {
    match decode(path)? {
        DynamicImage::ImageLuma8(buf) => Ok(Gray8 {
            height: buf.height() as usize,
            width: buf.width() as usize,
            data: buf.into_raw(),
        }),
        other => Err(CliError::input(format!(
            "{}: expected an 8-bit single-channel image, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Reads any 8-bit image as luminance (saliency maps and masks).
pub fn read_gray8(path: &Path) -> Result<Gray8> {
    let img = decode(path)?;
    if !is_eight_bit(&img) {
        return Err(CliError::input(format!(
            "{}: expected 8 bits per channel, got {:?}",
            path.display(),
            img.color()
        )));
    }
    let buf = img.into_luma8();
    Ok(Gray8 {
        height: buf.height() as usize,
        width: buf.width() as usize,
        data: buf.into_raw(),
    })
}

pub fn read_rgb8(path: &Path) -> Result<RgbImage> {
    let img = decode(path)?;
    if !is_eight_bit(&img) {
        return Err(CliError::input(format!(
            "{}: expected 8 bits per channel, got {:?}",
            path.display(),
            img.color()
        )));
    }
    let buf = img.into_rgb8();
    Ok(RgbImage::new(buf.height() as usize, buf.width() as usize, buf.into_raw())?)
}

fn save(path: &Path, data: &[u8], height: usize, width: usize, color: ExtendedColorType) -> Result<()> {
    image::save_buffer_with_format(path, data, width as u32, height as u32, color, ImageFormat::Png)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    save(path, data, height, width, ExtendedColorType::L8)
}

/// `data` is pixel-interleaved RGB.
pub fn write_rgb_png(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    save(path, data, height, width, ExtendedColorType::Rgb8)
}

/// Bilinear (triangle filter) resize of an 8-bit gray image.
pub fn resize_gray(img: &Gray8, height: usize, width: usize) -> Gray8 {
    if (img.height, img.width) == (height, width) {
        return img.clone();
    }
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone()).expect("valid buffer");
    let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
    Gray8 {
        height,
        width,
        data: out.into_raw(),
    }
}

pub fn resize_rgb(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    if (img.height, img.width) == (height, width) {
        return img.clone();
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone()).expect("valid buffer");
    let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
    RgbImage {
        height,
        width,
        data: out.into_raw(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let data: Vec<u8> = (0..12).map(|i| i * 20).collect();
        write_gray_png(&path, 3, 4, &data).unwrap();
        let back = read_gray8_strict(&path).unwrap();
        assert_eq!((back.height, back.width, back.data), (3, 4, data));
    }

    #[test]
    fn reads_pgm_and_rejects_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let pgm = dir.path().join("d.pgm");
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([7, 9]);
        std::fs::write(&pgm, bytes).unwrap();
        assert_eq!(read_gray8_strict(&pgm).unwrap().data, vec![7, 9]);

        let wide = dir.path().join("w.png");
        image::save_buffer_with_format(&wide, &[0u8, 1, 2, 3], 2, 1, ExtendedColorType::L16, ImageFormat::Png)
            .unwrap();
        assert!(matches!(read_gray8_strict(&wide), Err(CliError::Input(_))));
        assert!(matches!(read_gray8(&wide), Err(CliError::Input(_))));
    }
}
