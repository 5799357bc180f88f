//! Dataset splits loaded into batched `f32` tensors.

use std::path::{Path, PathBuf};

use ndarray::{s, Array4, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageops::{read_rgb_png, Image, Mask};
use crate::nn::{Real, Tensor};
use crate::synth::{list_real_images, read_sample, Manifest, RenderSample, Split};

/// Stacks `3 × H × W` images into an `N × 3 × H × W` tensor.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("no images to stack".into()));
    };
    let (c, h, w) = first.dim();
    if let Some(bad) = images.iter().find(|i| i.dim() != (c, h, w)) {
        return Err(Error::Shape(format!("image {:?} differs from {:?}", bad.dim(), (c, h, w))));
    }
    Ok(Array4::from_shape_fn((images.len(), c, h, w), |(n, c, y, x)| {
        T::of(images[n][[c, y, x]])
    }))
}

pub fn masks_to_tensor<T: Real>(masks: &[&Mask]) -> Result<Tensor<T>> {
    let Some(first) = masks.first() else {
        return Err(Error::Shape("no masks to stack".into()));
    };
    let (h, w) = first.dim();
    if let Some(bad) = masks.iter().find(|m| m.dim() != (h, w)) {
        return Err(Error::Shape(format!("mask {:?} differs from {:?}", bad.dim(), (h, w))));
    }
    Ok(Array4::from_shape_fn((masks.len(), 1, h, w), |(n, _, y, x)| {
        T::of(masks[n][[y, x]])
    }))
}

/// Item `n` of a batch as a `C × H × W` float image.
pub fn tensor_item<T: Real>(t: &Tensor<T>, n: usize) -> Image {
    t.index_axis(Axis(0), n).mapv(|v| v.f64())
}

/// Rows `idx` of a batch, in that order.
pub fn gather<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    t.select(Axis(0), idx)
}

/// One split of a paired synthetic dataset.
#[derive(Debug, Clone)]
pub struct PairedSet {
    pub ids: Vec<String>,
    pub image: Tensor<f32>,
    pub i_g: Tensor<f32>,
    pub i_s: Tensor<f32>,
    pub i_f: Tensor<f32>,
    pub m_g: Tensor<f32>,
    pub m_s: Tensor<f32>,
}

impl PairedSet {
    pub fn from_samples(ids: Vec<String>, samples: &[RenderSample]) -> Result<Self> {
        let imgs = |f: fn(&RenderSample) -> &Image| images_to_tensor(&samples.iter().map(f).collect::<Vec<_>>());
        let masks = |f: fn(&RenderSample) -> &Mask| masks_to_tensor(&samples.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            ids,
            image: imgs(|s| &s.i)?,
            i_g: imgs(|s| &s.i_g)?,
            i_s: imgs(|s| &s.i_s)?,
            i_f: imgs(|s| &s.i_f)?,
            m_g: masks(|s| &s.m_g)?,
            m_s: masks(|s| &s.m_s)?,
        })
    }

    /// Reads every sample of `split` listed in the manifest under `root`.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        Self::load_with(root, &manifest, split)
    }

    pub fn load_with(root: &Path, manifest: &Manifest, split: Split) -> Result<Self> {
        let ids: Vec<String> = manifest.ids(split).map(|e| e.id.clone()).collect();
        if ids.is_empty() {
            return Err(Error::Config(format!("dataset {} has no {split:?} samples", root.display())));
        }
        let samples = ids
            .par_iter()
            .map(|id| read_sample(&Manifest::sample_dir(root, id)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(ids, &samples)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image.dim().2
    }

    /// The first `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.ids.truncate(n);
        for t in [
            &mut self.image,
            &mut self.i_g,
            &mut self.i_s,
            &mut self.i_f,
            &mut self.m_g,
            &mut self.m_s,
        ] {
            *t = t.slice(s![..n, .., .., ..]).to_owned();
        }
        self
    }
}

/// Real-domain images: an explicit directory of PNGs if given, otherwise the
/// manifest's `real/` list.
pub fn load_real_set(root: &Path, manifest: &Manifest, real_dir: Option<&Path>) -> Result<Tensor<f32>> {
    let paths: Vec<PathBuf> = match real_dir {
        Some(dir) => list_real_images(dir)?,
        None => manifest.real.iter().map(|r| root.join(r)).collect(),
    };
    if paths.is_empty() {
        return Err(Error::Config("no real-domain images found".into()));
    }
    let images = paths.par_iter().map(|p| read_rgb_png(p)).collect::<Result<Vec<_>>>()?;
    images_to_tensor(&images.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthConfig};

    #[test]
    fn split_tensors_match_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n: 12,
            n_real: 4,
            ..SynthConfig::default()
        };
        let m = synth_dataset(&cfg, dir.path(), false).unwrap();
        let train = PairedSet::load(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), m.ids(Split::Train).count());
        assert_eq!(train.image.dim(), (train.len(), 3, 64, 64));
        assert_eq!(train.m_s.dim(), (train.len(), 1, 64, 64));
        let s = read_sample(&Manifest::sample_dir(dir.path(), &train.ids[1])).unwrap();
        assert_eq!(tensor_item(&train.i_f, 1), s.i_f.mapv(|v| v as f32 as f64));
        assert_eq!(train.clone().truncate(2).len(), 2);

        let real = load_real_set(dir.path(), &m, None).unwrap();
        assert_eq!(real.dim(), (4, 3, 64, 64));
        let real_dir = load_real_set(dir.path(), &m, Some(&dir.path().join("real"))).unwrap();
        assert_eq!(real, real_dir);
        let empty = tempfile::tempdir().unwrap();
        assert!(load_real_set(dir.path(), &m, Some(empty.path())).is_err());
    }

    #[test]
    fn gather_picks_rows_in_order() {
        let t = Array4::from_shape_fn((4, 1, 1, 1), |(n, ..)| n as f32);
        assert_eq!(gather(&t, &[3, 0]).into_raw_vec_and_offset().0, vec![3.0, 0.0]);
    }
}
