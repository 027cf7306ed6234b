//! PNG and FT1 image files.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`. Masks are `[H, W]`
//! and stored as 8-bit grayscale PNGs with `round(255 m)`.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn is_ft1(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ft1"))
}

/// Loads a PNG (as RGB) or an FT1 tensor as a `[C, H, W]` image.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if is_ft1(path) {
        let t = Tensor::load_ft1(path)?;
        return match *t.shape() {
            [_, _, _] => Ok(t),
            [h, w] => t.reshape(&[1, h, w]),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected a [C, H, W] image, got shape {:?}", t.shape()),
            }),
        };
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in decoded.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a one- or three-channel image with values in `[0, 1]` as PNG.
pub fn save_image_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let &[c, h, w] = image.shape() else {
        return Err(Error::invalid(format!("expected [C, H, W], got {:?}", image.shape())));
    };
    let d = image.data();
    match c {
        1 => save_mask_png(&image.reshape(&[h, w])?, path),
        3 => {
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                Rgb([to_byte(d[i]), to_byte(d[h * w + i]), to_byte(d[2 * h * w + i])])
            });
            Ok(img.save(path)?)
        }
        _ => Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    }
}

/// Writes an `[H, W]` mask as an 8-bit grayscale PNG, `round(255 m)`.
pub fn save_mask_png(mask: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::invalid(format!("expected [H, W], got {:?}", mask.shape()))),
    };
    let d = mask.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_byte(d[y as usize * w + x as usize])])
    });
    Ok(img.save(path.as_ref())?)
}

/// Reads a grayscale PNG (or FT1) mask into `[H, W]` values in `[0, 1]`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if is_ft1(path) {
        let t = Tensor::load_ft1(path)?;
        return match *t.shape() {
            [_, _] => Ok(t),
            [1, h, w] => t.reshape(&[h, w]),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected an [H, W] mask, got shape {:?}", t.shape()),
            }),
        };
    }
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Tensor::new(&[h, w], data)
}

/// Min-max normalised grayscale rendering of an `[H, W]` map.
pub fn save_heatmap_png(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    save_mask_png(&map.map(|v| (v - lo) / span), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mask_png_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::random(&[13, 17], 0.0, 1.0, &mut r);
        let path = dir.path().join("m.png");
        save_mask_png(&m, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back.shape(), m.shape());
        assert!(back.max_abs_diff(&m) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn image_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::random(&[3, 5, 7], 0.0, 1.0, &mut r).map(|v| (v * 255.0).round() / 255.0);
        let path = dir.path().join("x.png");
        save_image_png(&x, &path).unwrap();
        assert!(load_image(&path).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn ft1_images_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ft1");
        Tensor::full(&[4, 5], 0.25).save_ft1(&path).unwrap();
        assert_eq!(load_image(&path).unwrap().shape(), &[1, 4, 5]);
        assert_eq!(load_mask(&path).unwrap().shape(), &[4, 5]);
        Tensor::ones(&[2]).save_ft1(&path).unwrap();
        assert!(load_image(&path).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_image("/nonexistent/picture.png").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/picture.png"));
    }

    #[test]
    fn heatmap_spans_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        save_heatmap_png(&Tensor::new(&[1, 3], vec![-2.0, 0.0, 2.0]).unwrap(), &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[2], 1.0);
    }
}
