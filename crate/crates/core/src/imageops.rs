//! Planar float images and the handful of raster helpers shared by the
//! renderer, the dataset writer and the inference CLI.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Channel-first RGB image, values in [0, 1].
pub type Image = Array3<f64>;
/// Single-channel map, values in [0, 1].
pub type Mask = Array2<f64>;

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value onto the 8-bit grid the PNG files use.
pub fn quantize(img: &Image) -> Image {
    img.mapv(|v| f64::from(to_u8(v)) / 255.0)
}

pub fn quantize_mask(m: &Mask) -> Mask {
    m.mapv(|v| f64::from(to_u8(v)) / 255.0)
}

pub fn write_rgb_png(img: ArrayView3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(img[[0, y, x]]), to_u8(img[[1, y, x]]), to_u8(img[[2, y, x]])])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_gray_png(m: ArrayView2<f64>, path: &Path) -> Result<()> {
    let (h, w) = m.dim();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(m[[y as usize, x as usize]])]));
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Image::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

pub fn read_gray_png(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Mask::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = f64::from(px[0]) / 255.0;
    }
    Ok(out)
}

/// Separable Gaussian blur with zero padding. `sigma <= 0` returns a copy.
pub fn gaussian_blur(m: &Mask, sigma: f64) -> Mask {
    if sigma <= 0.0 {
        return m.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = m.dim();
    let mut tmp = Mask::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - radius;
                if xx >= 0 && (xx as usize) < w {
                    acc += wk * m[[y, xx as usize]];
                }
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Mask::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wk) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - radius;
                if yy >= 0 && (yy as usize) < h {
                    acc += wk * tmp[[yy as usize, x]];
                }
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Replicates a mask into three identical channels for side-by-side display.
pub fn mask_as_rgb(m: &Mask) -> Image {
    let (h, w) = m.dim();
    let mut out = Image::zeros((3, h, w));
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch.assign(m);
    }
    out
}

/// Horizontal strip of equally sized images.
pub fn hstack(images: &[Image]) -> Result<Image> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("nothing to stack".into()));
    };
    let (c, h, w) = first.dim();
    let mut out = Image::zeros((c, h, w * images.len()));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape(format!("{:?} vs {:?}", img.dim(), (c, h, w))));
        }
        out.slice_mut(s![.., .., i * w..(i + 1) * w]).assign(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_mass_away_from_borders() {
        let mut m = Mask::zeros((31, 31));
        m[[15, 15]] = 1.0;
        let b = gaussian_blur(&m, 1.5);
        assert!((b.sum() - 1.0).abs() < 1e-12);
        assert!(b[[15, 15]] > b[[15, 16]]);
        // compact support
        assert_eq!(b[[15, 15 + 6]], 0.0);
    }

    #[test]
    fn png_round_trip_is_lossless_on_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantize(&Image::from_shape_fn((3, 5, 7), |(c, y, x)| {
            ((c * 31 + y * 7 + x) % 17) as f64 / 16.0
        }));
        let p = dir.path().join("a.png");
        write_rgb_png(img.view(), &p).unwrap();
        assert_eq!(read_rgb_png(&p).unwrap(), img);

        let m = Mask::from_shape_fn((4, 6), |(y, x)| ((x + y) % 2) as f64);
        let q = dir.path().join("m.png");
        write_gray_png(m.view(), &q).unwrap();
        assert_eq!(read_gray_png(&q).unwrap(), m);
    }

    #[test]
    fn missing_png_is_reported_by_path() {
        let err = read_rgb_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(p) if p.ends_with("x.png")));
    }
}
