//! 8-bit RGB PNG loading and saving.

use super::Rgb8Image;
use crate::error::{Error, Result};
use std::path::Path;

/// Loads an 8-bit PNG. Grayscale expands to three identical channels;
/// alpha channels are dropped; 16-bit files are rejected.
pub fn load_png(path: &Path) -> Result<Rgb8Image> {
    let dynimg = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    use image::DynamicImage::*;
    let rgb = match dynimg {
        ImageLuma8(_) | ImageLumaA8(_) | ImageRgb8(_) | ImageRgba8(_) => dynimg.to_rgb8(),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                msg: format!(
                    "unsupported pixel format {:?}: only 8-bit PNGs are accepted",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0u8; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = p.0[c];
        }
    }
    Ok(Rgb8Image {
        width: w,
        height: h,
        data,
    })
}

pub fn save_png(img: &Rgb8Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width, img.height);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            p.0[c] = img.data[c * h * w + y * w + x];
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Rgb8Image {
            width: 5,
            height: 4,
            data: (0..60).map(|i| (i * 7 % 256) as u8).collect(),
        };
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        let img = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::from_fn(3, 3, |x, y| {
            image::Rgb([(x * 1000) as u16, (y * 1000) as u16, 0])
        });
        img.save(&path).unwrap();
        let err = load_png(&path).unwrap_err().to_string();
        assert!(err.contains("8-bit"), "{err}");
    }

    #[test]
    fn grayscale_expands_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = image::GrayImage::from_fn(2, 2, |x, y| image::Luma([(x + 2 * y) as u8 * 40]));
        img.save(&path).unwrap();
        let rgb = load_png(&path).unwrap();
        assert_eq!(rgb.width, 2);
        for i in 0..4 {
            let v = rgb.data[i];
            assert_eq!(rgb.data[4 + i], v);
            assert_eq!(rgb.data[8 + i], v);
        }
    }
}
