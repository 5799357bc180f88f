//! On-disk dataset: one directory per sample plus a JSON manifest.
//!
//! ```text
//! <out>/manifest.json
//! <out>/samples/<id>/{I,Ig,Is,If}.png, {Mg,Ms}.png, meta.json
//! <out>/real/<id>.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::face::{make_face_proxy_with, DEFAULT_CANDIDATE_PAIRS};
use super::glasses::{make_glasses_with, GlassesConfig};
use super::render::{render_sample, RenderSample, SampleMeta};
use super::scene::{sample_scene, SceneRanges};
use super::stylize::{stylize_real_domain, StylizeConfig};
use crate::align::sample_wearing_style;
use crate::error::{Error, Result};
use crate::imageops::{read_gray_png, read_rgb_png, write_gray_png, write_rgb_png, Image};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    /// Stylized "real-domain" images rendered alongside the paired samples.
    pub n_real: usize,
    pub candidate_pairs: usize,
    pub glasses: GlassesConfig,
    pub scene: SceneRanges,
    pub stylize: StylizeConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            image_size: 64,
            seed: 0,
            split: [0.8, 0.1, 0.1],
            n_real: 1000,
            candidate_pairs: DEFAULT_CANDIDATE_PAIRS,
            glasses: GlassesConfig::default(),
            scene: SceneRanges::default(),
            stylize: StylizeConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size {} < 32", self.image_size)));
        }
        if self.split.iter().any(|f| *f < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be >= 0 and sum to 1", self.split)));
        }
        if self.candidate_pairs == 0 {
            return Err(Error::EmptyCandidates);
        }
        let [lo, hi] = self.glasses.stroke_width;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("stroke_width range {:?} invalid", self.glasses.stroke_width)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Short hex digest of a value's canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub config: SynthConfig,
    pub samples: Vec<ManifestEntry>,
    /// Paths of real-domain images relative to the dataset root.
    pub real: Vec<String>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::corrupt(&path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn sample_dir(root: &Path, id: &str) -> PathBuf {
        root.join("samples").join(id)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th sample under a master seed.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(seed.wrapping_add(stream.wrapping_mul(0xA24B_AED4_963E_E407)))
}

/// Renders the sample for `seed` under `cfg`.
pub fn generate_sample(cfg: &SynthConfig, seed: u64) -> Result<RenderSample> {
    let face = make_face_proxy_with(derive(seed, 1), cfg.candidate_pairs);
    let glasses = make_glasses_with(derive(seed, 2), &cfg.glasses);
    let style = sample_wearing_style(&face, derive(seed, 3))?;
    let scene = sample_scene(derive(seed, 4), cfg.image_size, &cfg.scene);
    let mut s = render_sample(&face, &glasses, &style, &scene, seed)?;
    s.meta.config_hash = cfg.hash();
    Ok(s)
}

/// Real-domain proxy image for `seed`.
pub fn generate_real(cfg: &SynthConfig, seed: u64) -> Result<Image> {
    let s = generate_sample(cfg, seed)?;
    Ok(stylize_real_domain(&s.i, derive(seed, 5), &cfg.stylize))
}

/// Exact-count split: samples ordered by a hash of their seed, then cut at
/// the configured fractions.
pub fn assign_splits(seeds: &[u64], fractions: [f64; 3]) -> Vec<Split> {
    let n = seeds.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(seeds[i] ^ 0x5111_7000_0000_0000), i));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub fn write_sample(sample: &RenderSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rgb_png(sample.i.view(), &dir.join("I.png"))?;
    write_rgb_png(sample.i_g.view(), &dir.join("Ig.png"))?;
    write_rgb_png(sample.i_s.view(), &dir.join("Is.png"))?;
    write_rgb_png(sample.i_f.view(), &dir.join("If.png"))?;
    write_gray_png(sample.m_g.view(), &dir.join("Mg.png"))?;
    write_gray_png(sample.m_s.view(), &dir.join("Ms.png"))?;
    let meta = serde_json::to_string_pretty(&sample.meta)?;
    let p = dir.join("meta.json");
    fs::write(&p, meta).map_err(|e| Error::io(&p, e))
}

pub fn read_sample(dir: &Path) -> Result<RenderSample> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(meta_path.clone()),
        _ => Error::io(&meta_path, e),
    })?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    let s = RenderSample {
        i: read_rgb_png(&dir.join("I.png"))?,
        i_g: read_rgb_png(&dir.join("Ig.png"))?,
        i_s: read_rgb_png(&dir.join("Is.png"))?,
        i_f: read_rgb_png(&dir.join("If.png"))?,
        m_g: read_gray_png(&dir.join("Mg.png"))?,
        m_s: read_gray_png(&dir.join("Ms.png"))?,
        attenuation: None,
        meta,
    };
    let dim = s.i.dim();
    let (_, h, w) = dim;
    if [&s.i_g, &s.i_s, &s.i_f].iter().any(|m| m.dim() != dim) || s.m_g.dim() != (h, w) || s.m_s.dim() != (h, w) {
        return Err(Error::corrupt(dir, "channel dimensions disagree"));
    }
    Ok(s)
}

fn prepare_out_dir(out_dir: &Path, overwrite: bool) -> Result<()> {
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::OutputExists(out_dir.to_path_buf()));
            }
            if !out_dir.join(MANIFEST_FILE).exists() {
                return Err(Error::Config(format!(
                    "refusing to overwrite {}: it does not look like a dataset (no {MANIFEST_FILE})",
                    out_dir.display()
                )));
            }
            fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        }
    }
    fs::create_dir_all(out_dir.join("samples")).map_err(|e| Error::io(out_dir, e))?;
    fs::create_dir_all(out_dir.join("real")).map_err(|e| Error::io(out_dir, e))?;
    Ok(())
}

/// Renders and writes the whole dataset. Samples are rendered in parallel;
/// the manifest is written once at the end.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path, overwrite: bool) -> Result<Manifest> {
    cfg.validate()?;
    prepare_out_dir(out_dir, overwrite)?;

    let seeds: Vec<u64> = (0..cfg.n as u64).map(|i| sample_seed(cfg.seed, i)).collect();
    let splits = assign_splits(&seeds, cfg.split);
    let hash = cfg.hash();

    let samples = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let id = format!("s{i:06}");
            let sample = generate_sample(cfg, seed)?;
            write_sample(&sample, &Manifest::sample_dir(out_dir, &id))?;
            Ok(ManifestEntry {
                id,
                seed,
                split: splits[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let real = (0..cfg.n_real as u64)
        .into_par_iter()
        .map(|j| {
            let seed = sample_seed(cfg.seed, cfg.n as u64 + j);
            let rel = format!("real/r{j:06}.png");
            write_rgb_png(generate_real(cfg, seed)?.view(), &out_dir.join(&rel))?;
            Ok(rel)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config_hash: hash,
        config: cfg.clone(),
        samples,
        real,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Lists `.png` files of a directory of real-domain images, sorted by name.
pub fn list_real_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::{quantize, quantize_mask};

    fn small() -> SynthConfig {
        SynthConfig {
            n: 10,
            n_real: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn writes_exact_sample_count_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let m = synth_dataset(&small(), &out, false).unwrap();
        assert_eq!(m.samples.len(), 10);
        let dirs = fs::read_dir(out.join("samples")).unwrap().count();
        assert_eq!(dirs, 10);
        assert_eq!(Manifest::load(&out).unwrap(), m);
        assert_eq!(list_real_images(&out.join("real")).unwrap().len(), 3);
        for e in &m.samples {
            read_sample(&Manifest::sample_dir(&out, &e.id)).unwrap();
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        synth_dataset(&small(), &a, false).unwrap();
        synth_dataset(&small(), &b, false).unwrap();
        for entry in walk(&a) {
            let rel = entry.strip_prefix(&a).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn existing_directory_needs_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        synth_dataset(&small(), &out, false).unwrap();
        assert!(matches!(synth_dataset(&small(), &out, false), Err(Error::OutputExists(_))));
        synth_dataset(&small(), &out, true).unwrap();

        let foreign = dir.path().join("foreign");
        fs::create_dir_all(&foreign).unwrap();
        fs::write(foreign.join("notes.txt"), "keep me").unwrap();
        assert!(synth_dataset(&small(), &foreign, true).is_err());
        assert!(foreign.join("notes.txt").exists());
    }

    #[test]
    fn split_counts_follow_fractions() {
        for n in [10usize, 97, 200, 1000] {
            let seeds: Vec<u64> = (0..n as u64).map(|i| sample_seed(3, i)).collect();
            let splits = assign_splits(&seeds, [0.8, 0.1, 0.1]);
            let count = |s| splits.iter().filter(|x| **x == s).count() as f64;
            let nf = n as f64;
            assert!((count(Split::Train) - 0.8 * nf).abs() <= 1.0);
            assert!((count(Split::Val) - 0.1 * nf).abs() <= 1.0);
            assert!((count(Split::Test) - 0.1 * nf).abs() <= 1.0);
        }
    }

    #[test]
    fn write_then_read_is_identity_on_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = generate_sample(&small(), 77).unwrap();
        for img in [&mut s.i, &mut s.i_g, &mut s.i_s, &mut s.i_f] {
            *img = quantize(img);
        }
        s.m_g = quantize_mask(&s.m_g);
        s.m_s = quantize_mask(&s.m_s);
        s.attenuation = None;
        write_sample(&s, dir.path()).unwrap();
        assert_eq!(read_sample(dir.path()).unwrap(), s);
    }

    #[test]
    fn missing_channel_and_corrupt_meta_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(&small(), 5).unwrap();
        write_sample(&s, dir.path()).unwrap();
        fs::remove_file(dir.path().join("Ms.png")).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(Error::MissingFile(p)) if p.ends_with("Ms.png")));

        write_sample(&s, dir.path()).unwrap();
        fs::write(dir.path().join("meta.json"), "{ not json").unwrap();
        assert!(matches!(read_sample(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn meta_carries_row_major_transform_and_anchor_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(&small(), 9).unwrap();
        write_sample(&s, dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(v["transform"]["rotation"].as_array().unwrap().len(), 9);
        assert_eq!(v["transform"]["translation"].as_array().unwrap().len(), 3);
        assert!(v["transform"]["scale"].as_f64().unwrap() > 0.0);
        assert_eq!(v["glasses_anchors"].as_array().unwrap().len(), 4);
        assert_eq!(v["face_anchors"][0].as_array().unwrap().len(), 3);
        assert_eq!(v["light_direction"].as_array().unwrap().len(), 3);
        assert_eq!(v["config_hash"].as_str().unwrap(), small().hash());
    }
}
