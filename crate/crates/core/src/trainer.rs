//! Two-phase training: the mask stage first, then the removal stage on the
//! frozen mask predictions. Checkpoints, resume and loss logs live here too.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::s;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gather, load_real_set, PairedSet};
use crate::error::{Error, Result};
use crate::evalkit::{batch_iou, mean};
use crate::mask_stage::{
    concat_batch, mask_loss, MaskLossComponents, MaskLossWeights, MaskModel, MaskPair, MaskStageConfig, MaskWiring, SynBatch,
};
use crate::nn::{read_container, write_container, Adam, AdamConfig, Container, ParameterStore, Tensor};
use crate::removal::{l1_loss, RemovalBatch, RemovalModel, RemovalStageConfig, RemovalWeights, RemovalWiring, StepTarget};
use crate::synth::{config_hash, sample_seed, Manifest, Split};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "DEGLASS_CONFIG";

/// Images per forward pass when predicting outside of training.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs_mask: usize,
    pub epochs_removal: usize,
    pub lambda_adv: f64,
    pub lambda_mask: f64,
    pub lambda_de_s: f64,
    pub lambda_de_g: f64,
    /// Expected side length of the dataset images; 0 accepts whatever the
    /// dataset holds.
    pub image_size: usize,
    pub seed: u64,
    /// Root of a synthesized dataset (the directory holding `manifest.json`).
    pub data: PathBuf,
    /// Directory of real-domain PNGs; defaults to the dataset's `real/` list.
    pub real_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Mask-stage checkpoint the removal stage starts from.
    pub mask_checkpoint: Option<PathBuf>,
    /// Use at most this many training samples (0 = all).
    pub max_train: usize,
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub feature_channels: usize,
    pub da_blocks: usize,
    pub disc_channels: usize,
    pub mask_wiring: MaskWiring,
    pub use_da: bool,
    pub removal_wiring: RemovalWiring,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = MaskStageConfig::default();
        let r = RemovalStageConfig::default();
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            epochs_mask: 30,
            epochs_removal: 80,
            lambda_adv: 0.1,
            lambda_mask: 1.0,
            lambda_de_s: 1.0,
            lambda_de_g: 1.0,
            image_size: 0,
            seed: 0,
            data: PathBuf::from("data"),
            real_dir: None,
            out_dir: PathBuf::from("runs"),
            mask_checkpoint: None,
            max_train: 0,
            base_channels: m.base_channels,
            n_residual_blocks: m.n_residual_blocks,
            feature_channels: m.feature_channels,
            da_blocks: m.da_blocks,
            disc_channels: m.disc_channels,
            mask_wiring: m.wiring,
            use_da: m.use_da,
            removal_wiring: r.wiring,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_table(t: toml::Table) -> Result<Self> {
        let cfg: TrainConfig = toml::Value::Table(t)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// File values over defaults, then `key=value` overrides over both.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingFile(p.to_path_buf()),
                    _ => Error::io(p, e),
                })?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda_adv", self.lambda_adv),
            ("lambda_mask", self.lambda_mask),
            ("lambda_de_s", self.lambda_de_s),
            ("lambda_de_g", self.lambda_de_g),
        ];
        if let Some((k, v)) = pos.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{k} must be positive and finite, got {v}")));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("adam betas must be < 1".into()));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs_mask", self.epochs_mask),
            ("epochs_removal", self.epochs_removal),
            ("base_channels", self.base_channels),
            ("n_residual_blocks", self.n_residual_blocks),
            ("feature_channels", self.feature_channels),
            ("da_blocks", self.da_blocks),
            ("disc_channels", self.disc_channels),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        Ok(())
    }

    pub fn mask_config(&self) -> MaskStageConfig {
        MaskStageConfig {
            base_channels: self.base_channels,
            n_residual_blocks: self.n_residual_blocks,
            feature_channels: self.feature_channels,
            da_blocks: self.da_blocks,
            disc_channels: self.disc_channels,
            wiring: self.mask_wiring,
            use_da: self.use_da,
        }
    }

    pub fn removal_config(&self) -> RemovalStageConfig {
        RemovalStageConfig {
            base_channels: self.base_channels,
            n_residual_blocks: self.n_residual_blocks,
            wiring: self.removal_wiring,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Hash of everything that shapes a stage's run, leaving out epoch
    /// counts and paths (so a run may be resumed with a longer schedule or
    /// from a moved directory) and, for the mask stage, the removal-only keys.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut c = self.clone();
        c.epochs_mask = 0;
        c.epochs_removal = 0;
        c.data = PathBuf::new();
        c.real_dir = None;
        c.out_dir = PathBuf::new();
        c.mask_checkpoint = None;
        if stage == Stage::Mask {
            let d = TrainConfig::default();
            c.removal_wiring = d.removal_wiring;
            c.lambda_de_s = d.lambda_de_s;
            c.lambda_de_g = d.lambda_de_g;
        }
        config_hash(&c)
    }
}

/// Sets `key=value` pairs on a TOML table. Dotted keys address nested
/// tables; values parse as TOML literals and fall back to plain strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let parts: Vec<&str> = k.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut t = &mut *table;
        for p in path {
            let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            t = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{o}`: `{p}` is not a table")))?;
        }
        t.insert(last.to_string(), parse_override(v.trim()));
    }
    Ok(())
}

fn parse_override(v: &str) -> toml::Value {
    format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mask,
    Removal,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Mask => "mask",
            Stage::Removal => "removal",
        }
    }
}

/// Mean training losses and validation metrics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Epochs completed.
    pub epoch: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub opt_g_step: u64,
    pub opt_d_step: u64,
    /// Validation score of the best epoch so far (higher is better).
    pub best_score: f64,
    pub best_epoch: usize,
    /// Prediction-net hash of the mask stage the run used or produced.
    pub mask_hash: String,
}

/// Parameters, optimizer moments and run metadata.
///
/// Tensor prefixes: `model.` (the stage's nets), `mask.` (the frozen mask
/// stage inside a removal checkpoint), `opt_g.` and `opt_d.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParameterStore,
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_container(
        path,
        &Container {
            metadata: serde_json::to_value(&c.meta)?,
            tensors: c.tensors.clone(),
        },
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = read_container(path)?;
    let meta = serde_json::from_value(c.metadata).map_err(|e| Error::corrupt(path, format!("checkpoint metadata: {e}")))?;
    Ok(Checkpoint { meta, tensors: c.tensors })
}

/// Rebuilds the mask stage stored in a mask or removal checkpoint.
pub fn mask_model_from_checkpoint(c: &Checkpoint) -> Result<MaskModel<f32>> {
    let store = match c.meta.stage {
        Stage::Mask => c.tensors.sub("model"),
        Stage::Removal => c.tensors.sub("mask"),
    };
    let mut m = MaskModel::new(c.meta.config.mask_config(), c.meta.config.seed)?;
    m.load_store(&store)?;
    Ok(m)
}

pub fn removal_model_from_checkpoint(c: &Checkpoint) -> Result<RemovalModel<f32>> {
    if c.meta.stage != Stage::Removal {
        return Err(Error::Incompatible(
            "expected a removal-stage checkpoint, found a mask-stage one".into(),
        ));
    }
    let mut m = RemovalModel::new(c.meta.config.removal_config(), c.meta.config.seed)?;
    m.load_store(&c.tensors.sub("model"))?;
    Ok(m)
}

/// Mask-stage predictions for a whole set, in chunks.
pub fn predict_masks(model: &MaskModel<f32>, images: &Tensor<f32>) -> Result<MaskPair<f32>> {
    let n = images.dim().0;
    let mut parts: Vec<MaskPair<f32>> = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        parts.push(model.predict(&images.slice(s![start..end, .., .., ..]).to_owned())?);
    }
    let cat = |f: fn(&MaskPair<f32>) -> &Tensor<f32>| parts.iter().skip(1).fold(f(&parts[0]).clone(), |acc, p| concat_batch(&acc, f(p)));
    Ok(MaskPair {
        m_g: cat(|p| &p.m_g),
        m_s: cat(|p| &p.m_s),
    })
}

/// Removal outputs `(intermediate, final)` for a whole set, in chunks.
pub fn run_removal(model: &RemovalModel<f32>, images: &Tensor<f32>, masks: &MaskPair<f32>) -> Result<(Option<Tensor<f32>>, Tensor<f32>)> {
    let n = images.dim().0;
    let (mut mid, mut fin): (Option<Tensor<f32>>, Option<Tensor<f32>>) = (None, None);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let r = s![start..(start + EVAL_CHUNK).min(n), .., .., ..];
        let m = MaskPair {
            m_g: masks.m_g.slice(r).to_owned(),
            m_s: masks.m_s.slice(r).to_owned(),
        };
        let b = model.forward(&images.slice(r).to_owned(), &m)?;
        fin = Some(match fin {
            None => b.final_image,
            Some(acc) => concat_batch(&acc, &b.final_image),
        });
        if let Some(i) = b.intermediate {
            mid = Some(match mid {
                None => i,
                Some(acc) => concat_batch(&acc, &i),
            });
        }
    }
    Ok((mid, fin.ok_or_else(|| Error::Shape("empty image set".into()))?))
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let tag = match stage {
        Stage::Mask => 0x6d61_736b,
        Stage::Removal => 0x7265_6d76,
    };
    ChaCha8Rng::seed_from_u64(sample_seed(seed ^ tag, epoch as u64))
}

fn guard(values: &[(&'static str, f64)], epoch: usize, step: usize) -> Result<()> {
    match values.iter().find(|(_, v)| !v.is_finite()) {
        Some((component, _)) => Err(Error::NonFiniteLoss { component, epoch, step }),
        None => Ok(()),
    }
}

fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = history.first() {
        let mut header = vec!["epoch".to_string()];
        header.extend(first.values.keys().cloned());
        w.write_record(&header)?;
    }
    for r in history {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.values.values().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct DataSets {
    train: PairedSet,
    val: PairedSet,
    root: PathBuf,
    manifest: Manifest,
}

fn load_data(cfg: &TrainConfig) -> Result<DataSets> {
    let manifest = Manifest::load(&cfg.data)?;
    let mut train = PairedSet::load_with(&cfg.data, &manifest, Split::Train)?;
    if cfg.max_train > 0 {
        train = train.truncate(cfg.max_train);
    }
    let val = PairedSet::load_with(&cfg.data, &manifest, Split::Val)?;
    if cfg.image_size != 0 && train.image_size() != cfg.image_size {
        return Err(Error::Config(format!(
            "image_size is {} but the dataset holds {}² images",
            cfg.image_size,
            train.image_size()
        )));
    }
    Ok(DataSets {
        train,
        val,
        root: cfg.data.clone(),
        manifest,
    })
}

/// Result of a training phase.
pub struct MaskRun {
    pub model: MaskModel<f32>,
    pub checkpoint: Checkpoint,
    pub last_path: PathBuf,
    pub best_path: PathBuf,
}

pub struct RemovalRun {
    pub mask: MaskModel<f32>,
    pub model: RemovalModel<f32>,
    pub checkpoint: Checkpoint,
    pub last_path: PathBuf,
    pub best_path: PathBuf,
    /// Mask-stage prediction-net hash before and after the phase.
    pub mask_hash_before: String,
    pub mask_hash_after: String,
}

pub fn checkpoint_paths(out_dir: &Path, stage: Stage) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("{}_last.ckpt", stage.name())),
        out_dir.join(format!("{}_best.ckpt", stage.name())),
    )
}

fn resume_meta(path: &Path, cfg: &TrainConfig, stage: Stage) -> Result<Checkpoint> {
    let c = load_checkpoint(path)?;
    if c.meta.stage != stage {
        return Err(Error::Incompatible(format!(
            "{} is a {:?}-stage checkpoint",
            path.display(),
            c.meta.stage
        )));
    }
    if c.meta.config_hash != cfg.stage_hash(stage) {
        return Err(Error::Incompatible(format!(
            "{} was written with config hash {}, current config hashes to {}",
            path.display(),
            c.meta.config_hash,
            cfg.stage_hash(stage)
        )));
    }
    Ok(c)
}

fn mask_batch(set: &PairedSet, idx: &[usize]) -> SynBatch<f32> {
    SynBatch {
        image: gather(&set.image, idx),
        m_g: gather(&set.m_g, idx),
        m_s: gather(&set.m_s, idx),
    }
}

/// Validation IoUs and cross entropies of a mask model.
pub fn mask_metrics(model: &MaskModel<f32>, set: &PairedSet) -> Result<BTreeMap<String, f64>> {
    let p = predict_masks(model, &set.image)?;
    Ok(BTreeMap::from([
        ("val_iou_glass".to_string(), mean(&batch_iou(&p.m_g, &set.m_g)?)),
        ("val_iou_shadow".to_string(), mean(&batch_iou(&p.m_s, &set.m_s)?)),
        ("val_bce_glass".to_string(), mask_loss(&set.m_g, &p.m_g)?),
        ("val_bce_shadow".to_string(), mask_loss(&set.m_s, &p.m_s)?),
    ]))
}

/// Trains the mask stage for `cfg.epochs_mask` epochs, optionally continuing
/// from a checkpoint written by an earlier run with the same config.
pub fn train_mask_stage(cfg: &TrainConfig, resume: Option<&Path>) -> Result<MaskRun> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let real = if cfg.use_da {
        Some(load_real_set(&data.root, &data.manifest, cfg.real_dir.as_deref())?)
    } else {
        None
    };
    let mut model = MaskModel::<f32>::new(cfg.mask_config(), cfg.seed)?;
    let mut opt_g = Adam::new(cfg.adam());
    let mut opt_d = Adam::new(cfg.adam());
    let mut meta = CheckpointMeta {
        stage: Stage::Mask,
        epoch: 0,
        config_hash: cfg.stage_hash(Stage::Mask),
        config: cfg.clone(),
        history: Vec::new(),
        opt_g_step: 0,
        opt_d_step: 0,
        best_score: f64::NEG_INFINITY,
        best_epoch: 0,
        mask_hash: String::new(),
    };
    if let Some(path) = resume {
        let c = resume_meta(path, cfg, Stage::Mask)?;
        model.load_store(&c.tensors.sub("model"))?;
        opt_g = Adam::from_store(cfg.adam(), c.meta.opt_g_step, &c.tensors.sub("opt_g"))?;
        opt_d = Adam::from_store(cfg.adam(), c.meta.opt_d_step, &c.tensors.sub("opt_d"))?;
        meta = CheckpointMeta {
            config: cfg.clone(),
            ..c.meta
        };
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let (last_path, best_path) = checkpoint_paths(&cfg.out_dir, Stage::Mask);
    let weights = MaskLossWeights {
        adv: cfg.lambda_adv,
        mask: cfg.lambda_mask,
    };
    let n = data.train.len();

    for epoch in meta.epoch + 1..=cfg.epochs_mask {
        let mut rng = epoch_rng(cfg.seed, Stage::Mask, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut real_order: Vec<usize> = real.as_ref().map(|r| (0..r.dim().0).collect()).unwrap_or_default();
        real_order.shuffle(&mut rng);
        let mut real_pos = 0;

        let mut sum = MaskLossComponents::default();
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = mask_batch(&data.train, idx);
            // one real image per synthetic one, cycling through the shuffled set
            let real_batch = real.as_ref().map(|r| {
                let ridx: Vec<usize> = (0..idx.len()).map(|k| real_order[(real_pos + k) % real_order.len()]).collect();
                real_pos += idx.len();
                gather(r, &ridx)
            });
            let comp = model.train_step(&batch, real_batch.as_ref(), &mut opt_g, cfg.use_da.then_some(&mut opt_d), &weights)?;
            guard(
                &[
                    ("adv_d", comp.adv_d),
                    ("adv_g", comp.adv_g),
                    ("bce_glass", comp.glass),
                    ("bce_shadow", comp.shadow),
                ],
                epoch,
                step,
            )?;
            sum.add(&comp.scaled(idx.len() as f64));
        }
        let avg = sum.scaled(1.0 / n as f64);
        let mut values = mask_metrics(&model, &data.val)?;
        values.insert("adv_d".into(), avg.adv_d);
        values.insert("adv_g".into(), avg.adv_g);
        values.insert("bce_glass".into(), avg.glass);
        values.insert("bce_shadow".into(), avg.shadow);
        let score = (values["val_iou_glass"] + values["val_iou_shadow"]) / 2.0;
        log::info!(
            "mask epoch {epoch}/{}: bce {:.4}/{:.4} adv {:.4}/{:.4} val iou {:.3}/{:.3}",
            cfg.epochs_mask,
            avg.glass,
            avg.shadow,
            avg.adv_d,
            avg.adv_g,
            values["val_iou_glass"],
            values["val_iou_shadow"]
        );
        meta.history.push(EpochRecord { epoch, values });
        meta.epoch = epoch;
        meta.opt_g_step = opt_g.step;
        meta.opt_d_step = opt_d.step;
        meta.mask_hash = model.predictor_hash();
        let improved = score > meta.best_score;
        if improved {
            meta.best_score = score;
            meta.best_epoch = epoch;
        }
        let ckpt = mask_checkpoint(&model, &opt_g, &opt_d, &meta);
        save_checkpoint(&last_path, &ckpt)?;
        if improved {
            save_checkpoint(&best_path, &ckpt)?;
        }
        write_loss_csv(&cfg.out_dir.join("mask_loss.csv"), &meta.history)?;
    }
    let checkpoint = mask_checkpoint(&model, &opt_g, &opt_d, &meta);
    if !last_path.exists() {
        save_checkpoint(&last_path, &checkpoint)?;
    }
    Ok(MaskRun {
        model,
        checkpoint,
        last_path,
        best_path,
    })
}

fn mask_checkpoint(model: &MaskModel<f32>, opt_g: &Adam<f32>, opt_d: &Adam<f32>, meta: &CheckpointMeta) -> Checkpoint {
    let mut tensors = ParameterStore::default();
    tensors.merge_prefixed("model", &model.store());
    tensors.merge_prefixed("opt_g", &opt_g.to_store());
    tensors.merge_prefixed("opt_d", &opt_d.to_store());
    Checkpoint {
        meta: meta.clone(),
        tensors,
    }
}

fn first_target(set: &PairedSet, wiring: RemovalWiring) -> &Tensor<f32> {
    match wiring.first_target() {
        StepTarget::ShadowFree => &set.i_g,
        StepTarget::GlassFree => &set.i_s,
        StepTarget::Final => &set.i_f,
    }
}

/// Validation L1 of a removal model on precomputed masks.
pub fn removal_metrics(model: &RemovalModel<f32>, set: &PairedSet, masks: &MaskPair<f32>) -> Result<BTreeMap<String, f64>> {
    let (mid, fin) = run_removal(model, &set.image, masks)?;
    let mut v = BTreeMap::from([("val_l1_final".to_string(), l1_loss(&fin, &set.i_f)?)]);
    if let Some(mid) = mid {
        v.insert("val_l1_first".into(), l1_loss(&mid, first_target(set, model.cfg.wiring))?);
    }
    Ok(v)
}

/// Trains the removal stage on masks predicted by the frozen mask stage from
/// `mask_checkpoint` (or `cfg.mask_checkpoint`).
pub fn train_removal_stage(cfg: &TrainConfig, mask_checkpoint: Option<&Path>, resume: Option<&Path>) -> Result<RemovalRun> {
    cfg.validate()?;
    let mask_path = mask_checkpoint
        .or(cfg.mask_checkpoint.as_deref())
        .ok_or_else(|| Error::Config("the removal stage needs a mask checkpoint (mask_checkpoint)".into()))?;
    let mask_ckpt = load_checkpoint(mask_path)?;
    if mask_ckpt.meta.stage != Stage::Mask {
        return Err(Error::Incompatible(format!(
            "{} is not a mask-stage checkpoint",
            mask_path.display()
        )));
    }
    let mut mask = mask_model_from_checkpoint(&mask_ckpt)?;
    mask.set_frozen(true);
    let mask_hash_before = mask.predictor_hash();

    let data = load_data(cfg)?;
    // the mask stage is fixed, so its predictions are computed once
    let train_masks = predict_masks(&mask, &data.train.image)?;
    let val_masks = predict_masks(&mask, &data.val.image)?;

    let mut model = RemovalModel::<f32>::new(cfg.removal_config(), cfg.seed)?;
    let mut opt = Adam::new(cfg.adam());
    let mut meta = CheckpointMeta {
        stage: Stage::Removal,
        epoch: 0,
        config_hash: cfg.stage_hash(Stage::Removal),
        config: cfg.clone(),
        history: Vec::new(),
        opt_g_step: 0,
        opt_d_step: 0,
        best_score: f64::NEG_INFINITY,
        best_epoch: 0,
        mask_hash: mask_hash_before.clone(),
    };
    if let Some(path) = resume {
        let c = resume_meta(path, cfg, Stage::Removal)?;
        if c.meta.mask_hash != mask_hash_before {
            return Err(Error::Incompatible(format!(
                "{} was trained on a different mask stage",
                path.display()
            )));
        }
        model.load_store(&c.tensors.sub("model"))?;
        opt = Adam::from_store(cfg.adam(), c.meta.opt_g_step, &c.tensors.sub("opt_g"))?;
        meta = CheckpointMeta {
            config: cfg.clone(),
            ..c.meta
        };
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let (last_path, best_path) = checkpoint_paths(&cfg.out_dir, Stage::Removal);
    let weights = RemovalWeights {
        de_s: cfg.lambda_de_s,
        de_g: cfg.lambda_de_g,
    };
    let targets = first_target(&data.train, cfg.removal_wiring);
    let n = data.train.len();

    for epoch in meta.epoch + 1..=cfg.epochs_removal {
        let mut rng = epoch_rng(cfg.seed, Stage::Removal, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut first, mut last) = (0.0, 0.0);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = RemovalBatch {
                image: gather(&data.train.image, idx),
                masks: MaskPair {
                    m_g: gather(&train_masks.m_g, idx),
                    m_s: gather(&train_masks.m_s, idx),
                },
                first_target: gather(targets, idx),
                final_target: gather(&data.train.i_f, idx),
            };
            let c = model.train_step(&batch, &mut opt, &weights)?;
            guard(&[("l1_first", c.first), ("l1_final", c.last)], epoch, step)?;
            first += c.first * idx.len() as f64;
            last += c.last * idx.len() as f64;
        }
        let mut values = removal_metrics(&model, &data.val, &val_masks)?;
        values.insert("l1_first".into(), first / n as f64);
        values.insert("l1_final".into(), last / n as f64);
        log::info!(
            "removal epoch {epoch}/{}: l1 {:.4}/{:.4} val l1 {:.4}",
            cfg.epochs_removal,
            first / n as f64,
            last / n as f64,
            values["val_l1_final"]
        );
        let score = -values["val_l1_final"];
        meta.history.push(EpochRecord { epoch, values });
        meta.epoch = epoch;
        meta.opt_g_step = opt.step;
        let improved = score > meta.best_score;
        if improved {
            meta.best_score = score;
            meta.best_epoch = epoch;
        }
        let ckpt = removal_checkpoint(&mask, &model, &opt, &meta);
        save_checkpoint(&last_path, &ckpt)?;
        if improved {
            save_checkpoint(&best_path, &ckpt)?;
        }
        write_loss_csv(&cfg.out_dir.join("removal_loss.csv"), &meta.history)?;
    }
    let checkpoint = removal_checkpoint(&mask, &model, &opt, &meta);
    if !last_path.exists() {
        save_checkpoint(&last_path, &checkpoint)?;
    }
    let mask_hash_after = mask.predictor_hash();
    if mask_hash_after != mask_hash_before {
        return Err(Error::Incompatible("mask-stage parameters changed during removal training".into()));
    }
    Ok(RemovalRun {
        mask,
        model,
        checkpoint,
        last_path,
        best_path,
        mask_hash_before,
        mask_hash_after,
    })
}

fn removal_checkpoint(mask: &MaskModel<f32>, model: &RemovalModel<f32>, opt: &Adam<f32>, meta: &CheckpointMeta) -> Checkpoint {
    let mut tensors = ParameterStore::default();
    tensors.merge_prefixed("model", &model.store());
    tensors.merge_prefixed("mask", &mask.store());
    tensors.merge_prefixed("opt_g", &opt.to_store());
    Checkpoint {
        meta: meta.clone(),
        tensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthConfig};

    fn tiny_data(dir: &Path) {
        let cfg = SynthConfig {
            n: 24,
            n_real: 8,
            split: [0.5, 0.25, 0.25],
            ..SynthConfig::default()
        };
        synth_dataset(&cfg, dir, false).unwrap();
    }

    fn tiny_cfg(data: &Path, out: &Path) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs_mask: 2,
            epochs_removal: 2,
            data: data.to_path_buf(),
            out_dir: out.to_path_buf(),
            base_channels: 4,
            n_residual_blocks: 1,
            feature_channels: 8,
            da_blocks: 1,
            disc_channels: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_file_and_overrides() {
        let d = TrainConfig::default();
        assert_eq!((d.lr, d.beta1, d.beta2, d.batch_size), (1e-4, 0.5, 0.999, 8));
        assert_eq!((d.epochs_mask, d.epochs_removal), (30, 80));
        assert_eq!((d.lambda_adv, d.lambda_mask, d.lambda_de_s, d.lambda_de_g), (0.1, 1.0, 1.0, 1.0));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "lr = 0.002\nbatch_size = 4\nmask_wiring = \"joint\"\n").unwrap();
        let c = TrainConfig::load(Some(&p), &["batch_size=2".into(), "data=/tmp/x y".into(), "use_da=false".into()]).unwrap();
        assert_eq!((c.lr, c.batch_size, c.use_da), (0.002, 2, false));
        assert_eq!(c.mask_wiring, MaskWiring::Joint);
        assert_eq!(c.data, PathBuf::from("/tmp/x y"));

        let err = TrainConfig::load(None, &["learning_rate=0.1".into()]).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(TrainConfig::load(None, &["lr=-1".into()]).is_err());
        assert!(TrainConfig::load(None, &["lr".into()]).is_err());
        let mut nested = toml::Table::new();
        apply_overrides(&mut nested, &["a.b=[1.0, 2.5]".into(), "a.c=x".into()]).unwrap();
        assert_eq!(nested["a"]["b"].as_array().unwrap().len(), 2);
        assert_eq!(nested["a"]["c"].as_str(), Some("x"));
        assert!(TrainConfig::load(None, &["batch_size=0".into()]).is_err());
        assert!(matches!(
            TrainConfig::load(Some(&dir.path().join("nope.toml")), &[]),
            Err(Error::MissingFile(_))
        ));

        let mut longer = d.clone();
        longer.epochs_mask = 99;
        longer.out_dir = "elsewhere".into();
        assert_eq!(longer.stage_hash(Stage::Removal), d.stage_hash(Stage::Removal));
        longer.removal_wiring = RemovalWiring::SingleStep;
        assert_eq!(longer.stage_hash(Stage::Mask), d.stage_hash(Stage::Mask));
        assert_ne!(longer.stage_hash(Stage::Removal), d.stage_hash(Stage::Removal));
        longer.lr = 3e-4;
        assert_ne!(longer.stage_hash(Stage::Mask), d.stage_hash(Stage::Mask));
    }

    #[test]
    fn non_finite_losses_abort_with_the_component() {
        let e = guard(&[("adv_d", 0.3), ("bce_glass", f64::NAN)], 3, 7).unwrap_err();
        assert!(matches!(
            e,
            Error::NonFiniteLoss {
                component: "bce_glass",
                epoch: 3,
                step: 7
            }
        ));
        assert!(guard(&[("x", 1.0)], 0, 0).is_ok());
    }

    #[test]
    fn two_phase_smoke_run() {
        let data = tempfile::tempdir().unwrap();
        tiny_data(data.path());
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(data.path(), out.path());

        let run = train_mask_stage(&cfg, None).unwrap();
        assert_eq!(run.checkpoint.meta.history.len(), 2);
        assert!(run.last_path.exists() && run.best_path.exists());
        assert!(out.path().join("mask_loss.csv").exists());
        // the saved checkpoint reproduces the model exactly
        let back = mask_model_from_checkpoint(&load_checkpoint(&run.last_path).unwrap()).unwrap();
        let probe = PairedSet::load(data.path(), Split::Test).unwrap();
        assert_eq!(back.predict(&probe.image).unwrap(), run.model.predict(&probe.image).unwrap());

        // seeded rerun gives the identical loss history
        let out2 = tempfile::tempdir().unwrap();
        let again = train_mask_stage(&tiny_cfg(data.path(), out2.path()), None).unwrap();
        assert_eq!(again.checkpoint.meta.history, run.checkpoint.meta.history);

        let r = train_removal_stage(&cfg, Some(&run.last_path), None).unwrap();
        assert_eq!(r.mask_hash_before, r.mask_hash_after);
        assert_eq!(r.mask_hash_before, run.model.predictor_hash());
        let ck = load_checkpoint(&r.last_path).unwrap();
        assert_eq!(mask_model_from_checkpoint(&ck).unwrap().predictor_hash(), r.mask_hash_before);
        let rm = removal_model_from_checkpoint(&ck).unwrap();
        let masks = predict_masks(&r.mask, &probe.image).unwrap();
        assert_eq!(
            run_removal(&rm, &probe.image, &masks).unwrap(),
            run_removal(&r.model, &probe.image, &masks).unwrap()
        );

        assert!(matches!(train_removal_stage(&cfg, None, None), Err(Error::Config(_))));
        assert!(matches!(
            train_removal_stage(&cfg, Some(&r.last_path), None),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn resumed_runs_match_uninterrupted_ones() {
        let data = tempfile::tempdir().unwrap();
        tiny_data(data.path());
        let full_dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(data.path(), full_dir.path());
        cfg.epochs_mask = 3;
        cfg.epochs_removal = 3;
        let full = train_mask_stage(&cfg, None).unwrap();
        let full_r = train_removal_stage(&cfg, Some(&full.last_path), None).unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let mut short = tiny_cfg(data.path(), part_dir.path());
        short.epochs_mask = 1;
        short.epochs_removal = 1;
        let first = train_mask_stage(&short, None).unwrap();
        let resume_dir = tempfile::tempdir().unwrap();
        let mut rest = cfg.clone();
        rest.out_dir = resume_dir.path().to_path_buf();
        let resumed = train_mask_stage(&rest, Some(&first.last_path)).unwrap();
        let a = &full.checkpoint.meta.history;
        let b = &resumed.checkpoint.meta.history;
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            for (k, v) in &x.values {
                assert!((v - y.values[k]).abs() <= 1e-6, "{k}: {v} vs {}", y.values[k]);
            }
        }
        assert_eq!(full.model.predictor_hash(), resumed.model.predictor_hash());

        let first_r = train_removal_stage(&short, Some(&full.last_path), None).unwrap();
        let resumed_r = train_removal_stage(&rest, Some(&full.last_path), Some(&first_r.last_path)).unwrap();
        let fa = full_r.checkpoint.meta.history.last().unwrap().values["l1_final"];
        let fb = resumed_r.checkpoint.meta.history.last().unwrap().values["l1_final"];
        assert!((fa - fb).abs() <= 1e-6);

        // a changed config cannot resume
        let mut other = rest.clone();
        other.lr = 5e-4;
        assert!(matches!(
            train_mask_stage(&other, Some(&first.last_path)),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn missing_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("absent"), dir.path());
        assert!(matches!(train_mask_stage(&cfg, None), Err(Error::MissingFile(_))));
    }
}
