//! Metrics and the ablation harness.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PairedSet;
use crate::error::{Error, Result};
use crate::mask_stage::{MaskModel, MaskWiring};
use crate::nn::{Real, Tensor};
use crate::removal::{RemovalModel, RemovalWiring, StepTarget, MASK_THRESHOLD};
use crate::synth::Split;
use crate::trainer::{
    load_checkpoint, mask_model_from_checkpoint, predict_masks, removal_model_from_checkpoint, run_removal, train_mask_stage,
    train_removal_stage, Stage, TrainConfig,
};

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Intersection over union of two masks binarized at 0.5. Two empty masks
/// count as a perfect match.
pub fn iou<T: Real>(pred: &[T], truth: &[T]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (p.f64() >= MASK_THRESHOLD, t.f64() >= MASK_THRESHOLD);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-image IoU of `N × 1 × H × W` batches.
pub fn batch_iou<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Vec<f64>> {
    check_same(pred, truth, "iou")?;
    let pred = pred.as_standard_layout();
    let truth = truth.as_standard_layout();
    let per = pred.len() / pred.dim().0.max(1);
    Ok(pred
        .as_slice()
        .expect("standard layout")
        .chunks(per)
        .zip(truth.as_slice().expect("standard layout").chunks(per))
        .map(|(p, t)| iou(p, t))
        .collect())
}

/// Mean absolute difference over all elements.
pub fn l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    crate::removal::l1_loss(a, b)
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`; `+∞` for identical
/// inputs.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b, "psnr")?;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Pipeline variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationVariant {
    Full,
    /// Two mask nets on raw images, no adaptation.
    WoDa,
    /// One mask net with a two-channel output.
    WoMultistepMask,
    /// Shadow mask first, guiding the glass mask.
    SmGuidedGm,
    /// Removal without the shadow mask.
    WoSm,
    /// Removal without the glass mask (and so without the mask operation).
    WoGm,
    /// One removal net.
    WoMultistepRemoval,
    /// De-Glass before De-Shadow, first step trained against the glass-free
    /// shadowed image.
    DeglassFirst,
    /// De-Glass reads the shadow-free image unblanked.
    WoMo,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        AblationVariant::Full,
        AblationVariant::WoDa,
        AblationVariant::WoMultistepMask,
        AblationVariant::SmGuidedGm,
        AblationVariant::WoSm,
        AblationVariant::WoGm,
        AblationVariant::WoMultistepRemoval,
        AblationVariant::DeglassFirst,
        AblationVariant::WoMo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "FULL",
            AblationVariant::WoDa => "WO_DA",
            AblationVariant::WoMultistepMask => "WO_MULTISTEP_MASK",
            AblationVariant::SmGuidedGm => "SM_GUIDED_GM",
            AblationVariant::WoSm => "WO_SM",
            AblationVariant::WoGm => "WO_GM",
            AblationVariant::WoMultistepRemoval => "WO_MULTISTEP_REMOVAL",
            AblationVariant::DeglassFirst => "DEGLASS_FIRST",
            AblationVariant::WoMo => "WO_MO",
        }
    }

    /// `(mask wiring, adaptation on)` of the variant.
    pub fn mask_wiring(self) -> (MaskWiring, bool) {
        match self {
            AblationVariant::WoDa => (MaskWiring::GlassGuidesShadow, false),
            AblationVariant::WoMultistepMask => (MaskWiring::Joint, true),
            AblationVariant::SmGuidedGm => (MaskWiring::ShadowGuidesGlass, true),
            _ => (MaskWiring::GlassGuidesShadow, true),
        }
    }

    pub fn removal_wiring(self) -> RemovalWiring {
        match self {
            AblationVariant::WoSm => RemovalWiring::NoShadowMask,
            AblationVariant::WoGm => RemovalWiring::NoGlassMask,
            AblationVariant::WoMultistepRemoval => RemovalWiring::SingleStep,
            AblationVariant::DeglassFirst => RemovalWiring::GlassThenShadow,
            AblationVariant::WoMo => RemovalWiring::NoMaskOp,
            _ => RemovalWiring::ShadowThenGlass,
        }
    }

    /// The config with this variant's wiring applied.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (mask_wiring, use_da) = self.mask_wiring();
        TrainConfig {
            mask_wiring,
            use_da,
            removal_wiring: self.removal_wiring(),
            ..cfg.clone()
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        AblationVariant::ALL.into_iter().find(|v| v.name() == norm).ok_or_else(|| {
            let names: Vec<&str> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Metrics of one trained pipeline on a held-out split. Removal metrics are
/// absent when only the mask stage was run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    /// Seed of the run, or `mean` for the per-variant summary.
    pub seed: String,
    pub split: Split,
    pub n_images: usize,
    pub glass_iou: f64,
    pub shadow_iou: f64,
    /// First-step output against its target (shadow-free, or glass-free for
    /// the glass-first order).
    pub l1_intermediate: Option<f64>,
    pub l1_final: Option<f64>,
    pub psnr_final: Option<f64>,
    /// L1 between the untouched input and the glasses- and shadow-free truth.
    pub l1_input: Option<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.iter().copied().collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

impl EvalReport {
    /// Per-seed rows of a variant.
    pub fn seed_rows(&self, variant: AblationVariant) -> Vec<&EvalRow> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant.name() && r.seed != "mean")
            .collect()
    }

    /// Mean over the seed rows of each variant, in first-seen order.
    pub fn summary(&self) -> Vec<EvalRow> {
        let mut variants: Vec<&str> = Vec::new();
        for r in self.rows.iter().filter(|r| r.seed != "mean") {
            if !variants.contains(&r.variant.as_str()) {
                variants.push(&r.variant);
            }
        }
        variants
            .into_iter()
            .map(|v| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.variant == v && r.seed != "mean").collect();
                let col = |f: fn(&EvalRow) -> Option<f64>| mean_opt(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                EvalRow {
                    variant: v.to_string(),
                    seed: "mean".into(),
                    split: rows[0].split,
                    n_images: rows[0].n_images,
                    glass_iou: mean(&rows.iter().map(|r| r.glass_iou).collect::<Vec<_>>()),
                    shadow_iou: mean(&rows.iter().map(|r| r.shadow_iou).collect::<Vec<_>>()),
                    l1_intermediate: col(|r| r.l1_intermediate),
                    l1_final: col(|r| r.l1_final),
                    psnr_final: col(|r| r.psnr_final),
                    l1_input: col(|r| r.l1_input),
                    config_hash: rows.iter().map(|r| r.config_hash.as_str()).collect::<Vec<_>>().join("+"),
                }
            })
            .collect()
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    /// Writes `<stem>.csv` (seed rows then summary rows) and `<stem>.json`.
    pub fn persist(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        let summary = self.summary();
        for r in self.rows.iter().filter(|r| r.seed != "mean").chain(&summary) {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::json!({ "rows": self.rows, "summary": summary });
        std::fs::write(&json_path, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

/// Mean glass and shadow IoU of a mask model over a split.
pub fn eval_masks(model: &MaskModel<f32>, set: &PairedSet) -> Result<(f64, f64)> {
    let p = predict_masks(model, &set.image)?;
    Ok((mean(&batch_iou(&p.m_g, &set.m_g)?), mean(&batch_iou(&p.m_s, &set.m_s)?)))
}

/// All metrics of a mask + removal pipeline over a split.
pub fn eval_removal(mask: &MaskModel<f32>, removal: Option<&RemovalModel<f32>>, set: &PairedSet, split: Split) -> Result<EvalRow> {
    let p = predict_masks(mask, &set.image)?;
    let mut row = EvalRow {
        variant: String::new(),
        seed: String::new(),
        split,
        n_images: set.len(),
        glass_iou: mean(&batch_iou(&p.m_g, &set.m_g)?),
        shadow_iou: mean(&batch_iou(&p.m_s, &set.m_s)?),
        l1_intermediate: None,
        l1_final: None,
        psnr_final: None,
        l1_input: None,
        config_hash: String::new(),
    };
    if let Some(r) = removal {
        let (mid, fin) = run_removal(r, &set.image, &p)?;
        let target = match r.cfg.wiring.first_target() {
            StepTarget::ShadowFree => &set.i_g,
            StepTarget::GlassFree => &set.i_s,
            StepTarget::Final => &set.i_f,
        };
        row.l1_intermediate = mid.map(|m| l1(&m, target)).transpose()?;
        row.l1_final = Some(l1(&fin, &set.i_f)?);
        row.psnr_final = Some(psnr(&fin, &set.i_f)?);
        row.l1_input = Some(l1(&set.image, &set.i_f)?);
    }
    Ok(row)
}

/// How much of the pipeline an ablation run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunScope {
    Masks,
    Pipeline,
}

/// Directory of a mask-stage run. Variants that differ only in the removal
/// stage share it.
pub fn mask_run_dir(root: &Path, cfg: &TrainConfig) -> PathBuf {
    root.join("mask").join(format!("{}-seed{}", cfg.stage_hash(Stage::Mask), cfg.seed))
}

pub fn removal_run_dir(root: &Path, cfg: &TrainConfig) -> PathBuf {
    root.join("removal")
        .join(format!("{}-seed{}", cfg.stage_hash(Stage::Removal), cfg.seed))
}

/// Trains (or picks up already finished runs of) the rewired pipeline for
/// every seed and evaluates the best-on-validation checkpoints on the test
/// split. Runs live under `root`; the report is written to
/// `root/<VARIANT>.{csv,json}`.
pub fn run_ablation(variant: AblationVariant, base: &TrainConfig, seeds: &[u64], root: &Path, scope: RunScope) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Config("run_ablation needs at least one seed".into()));
    }
    let test = PairedSet::load(&base.data, Split::Test)?;
    let mut report = EvalReport::default();
    for &seed in seeds {
        let mut cfg = variant.apply(base);
        cfg.seed = seed;
        cfg.out_dir = mask_run_dir(root, &cfg);
        let (mask_last, mask_best) = crate::trainer::checkpoint_paths(&cfg.out_dir, Stage::Mask);
        let resume = mask_last.exists().then_some(mask_last.as_path());
        train_mask_stage(&cfg, resume)?;
        let mask_ckpt = load_checkpoint(&mask_best)?;
        let mask = mask_model_from_checkpoint(&mask_ckpt)?;
        let mut hash = cfg.stage_hash(Stage::Mask);

        let removal = if scope == RunScope::Pipeline {
            let mut rcfg = cfg.clone();
            rcfg.out_dir = removal_run_dir(root, &cfg);
            let (last, best) = crate::trainer::checkpoint_paths(&rcfg.out_dir, Stage::Removal);
            let resume = last.exists().then_some(last.as_path());
            train_removal_stage(&rcfg, Some(&mask_best), resume)?;
            hash = rcfg.stage_hash(Stage::Removal);
            Some(removal_model_from_checkpoint(&load_checkpoint(&best)?)?)
        } else {
            None
        };
        let mut row = eval_removal(&mask, removal.as_ref(), &test, Split::Test)?;
        row.variant = variant.name().into();
        row.seed = seed.to_string();
        row.config_hash = hash;
        log::info!(
            "{variant} seed {seed}: iou {:.3}/{:.3} l1 {:?}",
            row.glass_iou,
            row.shadow_iou,
            row.l1_final
        );
        report.rows.push(row);
    }
    report.persist(root, variant.name())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Vec<f64> {
        bits.iter().map(|b| *b as f64).collect()
    }

    #[test]
    fn iou_hand_cases() {
        let a = mask(&[1, 1, 0, 0, 0, 0]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &mask(&[0, 0, 1, 1, 0, 0])), 0.0);
        // prediction covers half of the truth plus an equally large extra area
        let truth = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let pred = mask(&[1, 1, 0, 0, 1, 1, 0, 0]);
        assert!((iou(&pred, &truth) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&mask(&[0, 0]), &mask(&[0, 0])), 1.0);
        // soft values binarize at one half
        assert_eq!(iou(&[0.5, 0.49], &[1.0, 0.0]), 1.0);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 1..64), seed in 0u64..1000) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| ((v * 7.0 + i as f64 + seed as f64) * 0.37).fract()).collect();
            let x = iou(&a, &b);
            prop_assert_eq!(x, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn batch_iou_is_per_image() {
        let t = Array4::from_shape_fn((2, 1, 2, 2), |(n, _, y, _)| if n == 0 { 1.0 } else { y as f64 });
        let p = Array4::from_elem((2, 1, 2, 2), 1.0);
        assert_eq!(batch_iou(&p, &t).unwrap(), vec![1.0, 0.5]);
        assert!(batch_iou(&p, &Array4::zeros((1, 1, 2, 2))).is_err());
    }

    #[test]
    fn l1_and_psnr_identities() {
        let a = Array4::from_shape_fn((1, 3, 4, 4), |(_, c, y, x)| (c + y + x) as f64 / 10.0);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.mapv(|v| v + 0.1);
        // MSE 0.01 gives 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b).unwrap() > 0.0);
        assert!((l1(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn variants_parse_and_map_to_wirings() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert_eq!("wo-mo".parse::<AblationVariant>().unwrap(), AblationVariant::WoMo);
        let e = "nope".parse::<AblationVariant>().unwrap_err().to_string();
        assert!(e.contains("nope") && e.contains("DEGLASS_FIRST"));

        // FULL is the default pipeline
        let base = TrainConfig::default();
        assert_eq!(AblationVariant::Full.apply(&base), base);
        assert!(!AblationVariant::WoDa.apply(&base).use_da);
        assert_eq!(AblationVariant::SmGuidedGm.apply(&base).mask_wiring, MaskWiring::ShadowGuidesGlass);
        assert_eq!(AblationVariant::WoMultistepMask.apply(&base).mask_wiring, MaskWiring::Joint);
        assert_eq!(AblationVariant::DeglassFirst.removal_wiring().first_target(), StepTarget::GlassFree);
        // removal-only variants share the FULL mask stage
        let d = std::path::Path::new("r");
        assert_eq!(mask_run_dir(d, &AblationVariant::WoMo.apply(&base)), mask_run_dir(d, &base));
        assert_ne!(mask_run_dir(d, &AblationVariant::WoDa.apply(&base)), mask_run_dir(d, &base));
    }

    #[test]
    fn report_summary_and_persistence() {
        let row = |seed: &str, g: f64, l: Option<f64>| EvalRow {
            variant: "FULL".into(),
            seed: seed.into(),
            split: Split::Test,
            n_images: 4,
            glass_iou: g,
            shadow_iou: g / 2.0,
            l1_intermediate: None,
            l1_final: l,
            psnr_final: l,
            l1_input: None,
            config_hash: "h".into(),
        };
        let rep = EvalReport {
            rows: vec![row("0", 0.4, Some(1.0)), row("1", 0.8, Some(2.0))],
        };
        let s = rep.summary();
        assert_eq!(s.len(), 1);
        assert!((s[0].glass_iou - 0.6).abs() < 1e-12);
        assert_eq!(s[0].l1_final, Some(1.5));
        assert_eq!(s[0].l1_intermediate, None);
        let dir = tempfile::tempdir().unwrap();
        let (c, j) = rep.persist(dir.path(), "t").unwrap();
        let text = std::fs::read_to_string(c).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().starts_with("variant,seed,split"));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(j).unwrap()).unwrap();
        assert_eq!(json["summary"][0]["seed"], "mean");
    }
}
