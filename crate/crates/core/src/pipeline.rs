//! Training loop and the command implementations behind the CLI.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Dtype};
use crate::dataset::{load_dataset, Dataset, ImageSample};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{self, ConfusionCounts, Metrics, SliceEmbedding, SweepResult};
use crate::fsutil::{read_json, write_atomic, write_json};
use crate::model::{batch_gradients, Model, ModelConfig, ModelInput, TrainItem};
use crate::objectives::{LossBreakdown, LossWeights};
use crate::parallel::{self, Execution};
use crate::params::{Adam, AdamConfig, FreezeUnit, ParamStore};
use crate::pseudo::{self, Gammas, SideCar};
use crate::raster::{flip_horizontal, read_labels, rotate};
use crate::synthetic::SynthSpec;
use crate::tensor::{Grid, Heatmap, LabelMap};
use crate::text::{EmbeddingCache, TextConfig, TextEmbeddingSet};

/// JSON schema of the training configuration.
pub const CONFIG_SCHEMA: &str = include_str!("../data/train_config.schema.json");

/// An encoder preset name or an explicit configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncoderSpec {
    Preset(String),
    Custom(EncoderConfig),
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Preset("mit_b2".into())
    }
}

impl EncoderSpec {
    pub fn resolve(&self) -> Result<EncoderConfig> {
        let cfg = match self {
            EncoderSpec::Preset(name) => match name.as_str() {
                "mit_b2" => EncoderConfig::mit_b2(),
                "toy" => EncoderConfig::toy(),
                "gradcheck" => EncoderConfig::gradcheck(),
                other => return Err(Error::Config(format!("unknown encoder preset `{other}`"))),
            },
            EncoderSpec::Custom(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub enabled: bool,
    pub hflip: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum relative intensity scaling.
    pub jitter: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip: true,
            rotation_deg: 10.0,
            jitter: 0.1,
        }
    }
}

impl Augmentation {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

fn default_input_size() -> [usize; 2] {
    [512, 512]
}
fn default_weights() -> [f64; 4] {
    [1.0, 1.0, 1.0, 1.0]
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    30
}
fn default_freeze() -> Vec<String> {
    vec!["proj".into(), "1".into(), "2".into()]
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default = "default_input_size")]
    pub input_size: [usize; 2],
    /// Weights of the four loss terms.
    #[serde(default = "default_weights")]
    pub loss_weights: [f64; 4],
    #[serde(default)]
    pub gammas: Gammas,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Frozen units: "proj" and stage numbers "1".."4".
    #[serde(default = "default_freeze")]
    pub freeze: Vec<String>,
    #[serde(default)]
    pub augment: Augmentation,
    #[serde(default)]
    pub text: TextConfig,
    #[serde(default)]
    pub execution: Execution,
    /// Keep one checkpoint per epoch besides `last.ckpt`.
    #[serde(default = "default_true")]
    pub keep_epoch_checkpoints: bool,
}

impl TrainConfig {
    pub fn new(manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            output_dir: output_dir.into(),
            encoder: EncoderSpec::default(),
            input_size: default_input_size(),
            loss_weights: default_weights(),
            gammas: Gammas::default(),
            optimizer: AdamConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            freeze: default_freeze(),
            augment: Augmentation::default(),
            text: TextConfig::default(),
            execution: Execution::default(),
            keep_epoch_checkpoints: true,
        }
    }

    /// Settings for training from scratch on a generated synthetic set: toy
    /// encoder with spatial reduction, nothing frozen, similarity-map fusion.
    pub fn desk_scale(manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, spec: &SynthSpec) -> Self {
        let mut encoder = EncoderConfig::toy();
        encoder.sr_ratios = [4, 2, 1, 1];
        let mut c = Self::new(manifest, output_dir);
        c.encoder = EncoderSpec::Custom(encoder);
        c.input_size = [spec.height, spec.width];
        c.gammas = Gammas { cam: 0.0, sim3: 1.0, sim4: 1.0 };
        c.optimizer.lr = 5e-4;
        c.freeze = Vec::new();
        c.text.clip_dim = spec.clip_dim;
        c.text.desc_dim = spec.desc_dim;
        c.text.seed = spec.text_seed;
        c.keep_epoch_checkpoints = false;
        c
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: TrainConfig = read_json(path).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{}: {source}", path.display())),
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        if let Some(p) = self.text.label_cache.as_mut() {
            fix(p);
        }
        if let Some(p) = self.text.description_cache.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer betas must lie in [0,1) and eps be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.weights()?;
        self.gammas.validate()?;
        self.freeze_units()?;
        let enc = self.encoder.resolve()?;
        enc.check_input(self.input_size[0], self.input_size[1])?;
        let a = &self.augment;
        if !(a.rotation_deg >= 0.0 && (0.0..1.0).contains(&a.jitter)) {
            return Err(Error::Config("augmentation ranges must be nonnegative and jitter below 1".into()));
        }
        if self.text.clip_dim == 0 || self.text.desc_dim == 0 {
            return Err(Error::Config("text embedding widths must be positive".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        let w = LossWeights::from_array(self.loss_weights);
        w.validate()?;
        Ok(w)
    }

    pub fn freeze_units(&self) -> Result<Vec<FreezeUnit>> {
        self.freeze
            .iter()
            .map(|s| FreezeUnit::parse(s))
            .collect()
    }
}

/// Metadata stored in each checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: ModelConfig,
    pub classes: Vec<String>,
    pub input_size: [usize; 2],
    pub text: TextConfig,
    pub gammas: Gammas,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            l1: b.l1,
            l2: b.l2,
            l3: b.l3,
            l4: b.l4,
            total: b.total,
        }
    }
}

#[derive(Serialize)]
struct LogHeader<'a> {
    loss_weights: [f64; 4],
    gammas: Gammas,
    optimizer: &'a AdamConfig,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    freeze: &'a [String],
    input_size: [usize; 2],
    encoder: &'a EncoderConfig,
    num_params: usize,
    num_trainable: usize,
}

/// In-memory training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub text: TextEmbeddingSet,
    pub store: ParamStore,
    pub model: Model,
    pub adam: Adam,
    structural: Vec<Grid>,
    rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let [h, w] = config.input_size;
        let dataset = load_dataset(&config.manifest, (h, w), config.execution)?;
        let base = config.manifest.parent().unwrap_or(Path::new("."));
        let text = config.text.resolve(&dataset, base)?;
        let structural = parallel::try_map(config.execution, &dataset.samples, ImageSample::structural_input)?;
        let mcfg = ModelConfig {
            encoder: config.encoder.resolve()?,
            num_classes: dataset.num_classes(),
            clip_dim: text.clip_dim(),
            desc_dim: text.desc_dim().max(1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &mcfg, &mut rng)?;
        store.freeze(&config.freeze_units()?);
        let adam = Adam::new(config.optimizer.clone(), store.len());
        Ok(Self {
            config,
            dataset,
            text,
            store,
            model,
            adam,
            structural,
            rng,
            step: 0,
            epoch: 0,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::from_array(self.config.loss_weights)
    }

    fn train_indices(&self) -> Vec<usize> {
        self.dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == crate::dataset::Split::Train)
            .map(|(i, _)| i)
            .collect()
    }

    /// One optimizer step on the given sample indices.
    pub fn step_on(&mut self, batch: &[usize]) -> Result<LossBreakdown> {
        let mut views = Vec::with_capacity(batch.len());
        for &i in batch {
            let img = self.dataset.samples[i].image.clone();
            let st = self.structural[i].clone();
            views.push(augment_pair(&img, &st, &self.config.augment, &mut self.rng));
        }
        let mut items = Vec::with_capacity(batch.len());
        for (&i, (image, structural)) in batch.iter().zip(views) {
            let s = &self.dataset.samples[i];
            items.push(TrainItem {
                image,
                structural,
                description: self.text.description(&s.id)?,
                label: &s.label,
            });
        }
        let weights = self.weights();
        let (grads, breakdown) = batch_gradients(
            &self.model,
            &self.store,
            &self.text.label_matrix,
            &items,
            &weights,
            self.config.execution,
        )?;
        self.step += 1;
        if !breakdown.is_finite() {
            return Err(Error::Numeric {
                step: self.step,
                breakdown: format!(
                    "l1={} l2={} l3={} l4={} total={}",
                    breakdown.l1, breakdown.l2, breakdown.l3, breakdown.l4, breakdown.total
                ),
            });
        }
        self.adam.step(&mut self.store, &grads);
        Ok(breakdown)
    }

    /// One pass over the shuffled training split.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let mut order = self.train_indices();
        if order.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        order.shuffle(&mut self.rng);
        let bs = self.config.batch_size;
        for chunk in order.chunks(bs) {
            let b = self.step_on(chunk)?;
            on_step(&StepRecord::new(self.step, self.epoch, &b))?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            model: self.model.config.clone(),
            classes: self.dataset.classes.clone(),
            input_size: self.config.input_size,
            text: self.config.text.clone(),
            gammas: self.config.gammas,
            seed: self.config.seed,
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.meta()).map_err(|e| Error::Export(e.to_string()))?;
        checkpoint::save(path, &self.store, Some(&self.adam), meta, Dtype::F64)
    }

    fn log_header(&self) -> Result<String> {
        let h = LogHeader {
            loss_weights: self.config.loss_weights,
            gammas: self.config.gammas,
            optimizer: &self.config.optimizer,
            batch_size: self.config.batch_size,
            epochs: self.config.epochs,
            seed: self.config.seed,
            freeze: &self.config.freeze,
            input_size: self.config.input_size,
            encoder: &self.model.config.encoder,
            num_params: self.store.num_scalars(),
            num_trainable: self.store.num_trainable_scalars(),
        };
        let v = serde_json::json!({ "header": h });
        Ok(v.to_string())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.total)
    }

    pub fn last_epoch_mean(&self) -> Option<f64> {
        let last = self.steps.last()?.epoch;
        let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == last).map(|s| s.total).collect();
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Applies one sampled flip/rotation to both grids and intensity jitter to
/// the image only.
pub fn augment_pair<R: Rng>(image: &Grid, structural: &Grid, a: &Augmentation, rng: &mut R) -> (Grid, Grid) {
    if !a.enabled {
        return (image.clone(), structural.clone());
    }
    let flip = a.hflip && rng.random_bool(0.5);
    let angle = if a.rotation_deg > 0.0 {
        rng.random_range(-a.rotation_deg..=a.rotation_deg)
    } else {
        0.0
    };
    let gain = if a.jitter > 0.0 {
        1.0 + rng.random_range(-a.jitter..=a.jitter)
    } else {
        1.0
    };
    let geo = |g: &Grid| {
        let g = if flip { flip_horizontal(g) } else { g.clone() };
        if angle != 0.0 {
            rotate(&g, angle)
        } else {
            g
        }
    };
    let mut x = geo(image);
    x.data.iter_mut().for_each(|v| *v = (*v * gain).clamp(0.0, 1.0));
    (x, geo(structural))
}

/// Runs every epoch, writing `train_log.jsonl`, per-epoch checkpoints and
/// `last.ckpt` into the output directory.
pub fn train(config: TrainConfig) -> Result<(Trainer, TrainOutcome)> {
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut trainer = Trainer::new(config)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", trainer.log_header()?).map_err(|e| Error::io(&log_path, e))?;
    let mut steps = Vec::new();
    let last = out.join("last.ckpt");
    for _ in 0..trainer.config.epochs {
        trainer.run_epoch(|rec| {
            let line = serde_json::to_string(rec).map_err(|e| Error::Export(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            steps.push(rec.clone());
            Ok(())
        })?;
        if trainer.config.keep_epoch_checkpoints {
            trainer.save_checkpoint(&out.join(format!("epoch_{:03}.ckpt", trainer.epoch)))?;
        }
        trainer.save_checkpoint(&last)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok((
        trainer,
        TrainOutcome {
            checkpoint: last,
            log: log_path,
            steps,
        },
    ))
}

/// Trains `repeat` times with consecutive seeds into `run_<i>` subdirectories.
pub fn train_repeated(config: &TrainConfig, repeat: usize) -> Result<Vec<TrainOutcome>> {
    (0..repeat)
        .map(|i| {
            let mut c = config.clone();
            c.seed = config.seed + i as u64;
            c.output_dir = config.output_dir.join(format!("run_{i}"));
            train(c).map(|(_, o)| o)
        })
        .collect()
}

/// A trained model restored from a checkpoint.
pub struct Restored {
    pub meta: RunMeta,
    pub store: ParamStore,
    pub model: Model,
    pub id: String,
}

pub fn restore(path: &Path) -> Result<Restored> {
    let ck = checkpoint::load(path)?;
    let meta: RunMeta = serde_json::from_value(ck.header.meta.clone())
        .map_err(|e| Error::Checkpoint {
            tensor: "<header>".into(),
            reason: format!("run metadata: {e}"),
        })?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&mut store, &meta.model, &mut rng)?;
    ck.apply(&mut store, None, None)?;
    Ok(Restored {
        meta,
        store,
        model,
        id: checkpoint::file_id(path)?,
    })
}

/// A dataset prepared for inference with a restored model.
pub struct Inference {
    pub restored: Restored,
    pub dataset: Dataset,
    pub text: TextEmbeddingSet,
    pub structural: Vec<Grid>,
}

impl Inference {
    pub fn new(restored: Restored, manifest: &Path, exec: Execution) -> Result<Self> {
        let [h, w] = restored.meta.input_size;
        let dataset = load_dataset(manifest, (h, w), exec)?;
        if dataset.classes != restored.meta.classes {
            return Err(Error::Dimension(format!(
                "checkpoint classes {:?} differ from dataset classes {:?}",
                restored.meta.classes, dataset.classes
            )));
        }
        let base = manifest.parent().unwrap_or(Path::new("."));
        let text = restored.meta.text.resolve(&dataset, base)?;
        if text.label_matrix.cols() != restored.meta.model.clip_dim
            || (!dataset.samples.is_empty() && text.desc_dim() != restored.meta.model.desc_dim)
        {
            return Err(Error::Dimension("text embedding widths differ from the checkpoint".into()));
        }
        let structural = parallel::try_map(exec, &dataset.samples, ImageSample::structural_input)?;
        Ok(Self {
            restored,
            dataset,
            text,
            structural,
        })
    }

    pub fn from_trainer(trainer: &Trainer) -> Result<Self> {
        let bytes_meta = trainer.meta();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&mut store, &bytes_meta.model, &mut rng)?;
        for id in trainer.store.ids() {
            *store.value_mut(id) = trainer.store.value(id).clone();
        }
        Ok(Self {
            restored: Restored {
                meta: bytes_meta,
                store,
                model,
                id: "in-memory".into(),
            },
            dataset: trainer.dataset.clone(),
            text: trainer.text.clone(),
            structural: trainer.structural.clone(),
        })
    }

    /// Normalized lesion heatmaps at input resolution for sample `i`.
    pub fn foreground(&self, i: usize, gammas: &Gammas) -> Result<Heatmap> {
        let s = &self.dataset.samples[i];
        let r = &self.restored;
        let input = ModelInput {
            image: &s.image,
            structural: &self.structural[i],
            description: self.text.description(&s.id)?,
            label_matrix: &self.text.label_matrix,
        };
        let src = r.model.cam_sources(&r.store, &input)?;
        pseudo::fuse_heatmaps(&src.cam, &src.sim3, &src.sim4, gammas, s.image.height, s.image.width)
    }

    pub fn foregrounds(&self, gammas: &Gammas, exec: Execution) -> Result<Vec<Heatmap>> {
        parallel::map_range(exec, self.dataset.samples.len(), |i| self.foreground(i, gammas))
            .into_iter()
            .collect()
    }

    /// Writes one label image and side-car per sample; returns the count.
    pub fn export_pseudo(&self, out: &Path, lambda: f64, gammas: &Gammas, dump_cams: bool, exec: Execution) -> Result<usize> {
        pseudo::check_lambda(lambda)?;
        gammas.validate()?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let written = parallel::map_range(exec, self.dataset.samples.len(), |i| -> Result<()> {
            let s = &self.dataset.samples[i];
            let fg = self.foreground(i, gammas)?;
            let labels = pseudo::label_map(&fg, lambda)?;
            pseudo::export(
                out,
                &labels,
                &SideCar {
                    id: s.id.clone(),
                    classes: self.dataset.classes.clone(),
                    lambda,
                    gammas: *gammas,
                    checkpoint: self.restored.id.clone(),
                },
            )?;
            if dump_cams {
                pseudo::dump_cams(out, &s.id, &self.dataset.classes, &fg)?;
            }
            Ok(())
        });
        written.into_iter().collect::<Result<Vec<()>>>().map(|v| v.len())
    }

    /// Threshold sweep over samples that carry masks.
    pub fn sweep(&self, gammas: &Gammas, exec: Execution) -> Result<SweepResult> {
        let idx: Vec<usize> = (0..self.dataset.samples.len())
            .filter(|&i| self.dataset.samples[i].mask.is_some())
            .collect();
        let fgs = parallel::try_map(exec, &idx, |&i| self.foreground(i, gammas))?;
        let gts: Vec<LabelMap> = idx
            .iter()
            .map(|&i| self.dataset.samples[i].mask.clone().unwrap())
            .collect();
        eval::sweep(&fgs, &gts, self.dataset.num_classes(), exec)
    }
}

pub fn pseudo_cmd(
    ckpt: &Path,
    manifest: &Path,
    lambda: f64,
    gammas: &Gammas,
    out: &Path,
    dump_cams: bool,
    exec: Execution,
) -> Result<usize> {
    pseudo::check_lambda(lambda)?;
    gammas.validate()?;
    let inf = Inference::new(restore(ckpt)?, manifest, exec)?;
    inf.export_pseudo(out, lambda, gammas, dump_cams, exec)
}

pub fn sweep_cmd(ckpt: &Path, manifest: &Path, gammas: Option<Gammas>, out: &Path, exec: Execution) -> Result<SweepResult> {
    let restored = restore(ckpt)?;
    let gammas = gammas.unwrap_or(restored.meta.gammas);
    let inf = Inference::new(restored, manifest, exec)?;
    let result = inf.sweep(&gammas, exec)?;
    write_json(out, &Metrics::from_sweep(&inf.dataset.classes, &result))?;
    Ok(result)
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "png") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Compares every `<id>.png` in `pred` with the same file name in `gt`.
pub fn evaluate(pred: &Path, gt: &Path, out: &Path, exec: Execution) -> Result<Metrics> {
    let stems = png_stems(pred)?;
    if stems.is_empty() {
        return Err(Error::Metric(format!("no prediction images in {}", pred.display())));
    }
    let pairs = parallel::try_map(exec, &stems, |id| -> Result<(LabelMap, LabelMap)> {
        let load = |p: PathBuf| {
            if !p.exists() {
                return Err(Error::Load {
                    id: id.clone(),
                    reason: format!("missing file {}", p.display()),
                });
            }
            read_labels(&p).map_err(|e| Error::Load {
                id: id.clone(),
                reason: e.to_string(),
            })
        };
        let p = load(pred.join(format!("{id}.png")))?;
        let g = load(gt.join(format!("{id}.png")))?;
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::Dimension(format!(
                "`{id}`: prediction {}x{} vs ground truth {}x{}",
                p.height, p.width, g.height, g.width
            )));
        }
        Ok((p, g))
    })?;
    let side = pred.join(format!("{}.json", stems[0]));
    let classes: Vec<String> = if side.exists() {
        read_json::<SideCar>(&side)?.classes
    } else {
        let max = pairs
            .iter()
            .flat_map(|(p, g)| p.data.iter().chain(&g.data))
            .copied()
            .max()
            .unwrap_or(0);
        (0..=max).map(|k| format!("class{k}")).collect()
    };
    let counts = eval::count_dataset(&pairs, classes.len(), exec)?;
    let metrics = Metrics::from_report(&classes, &counts.miou()?);
    write_json(out, &metrics)?;
    Ok(metrics)
}

/// Confusion counts for label maps held in memory.
pub fn score(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        c.accumulate(p, g)?;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextReport {
    pub histogram: BTreeMap<String, Vec<(String, usize)>>,
    pub similarity: Vec<(usize, f64)>,
}

/// Word histograms and slice-window similarity. Groups and slice order come
/// from the manifest when given; otherwise one group and one volume ordered
/// by id.
pub fn analyze_text(captions: &Path, embeddings: &Path, manifest: Option<&Path>, out: &Path) -> Result<TextReport> {
    let caps = crate::text::read_captions(captions)?;
    let cache = EmbeddingCache::open(embeddings)?;
    let entries = match manifest {
        Some(m) => Some(crate::dataset::DatasetManifest::read(m)?),
        None => None,
    };
    let group_of = |id: &str| -> String {
        let tags = entries
            .as_ref()
            .and_then(|m| m.samples.iter().find(|s| s.id == id))
            .map(|s| s.labels.clone());
        match tags {
            Some(t) if t.is_empty() => "healthy".into(),
            Some(t) => t.join("+"),
            None => "all".into(),
        }
    };
    let grouped: Vec<(String, String)> = caps.iter().map(|(id, c)| (group_of(id), c.clone())).collect();
    let histogram = eval::word_frequency(&grouped);

    let mut slices = Vec::new();
    for (n, key) in cache.keys().enumerate() {
        let entry = entries.as_ref().and_then(|m| m.samples.iter().find(|s| s.id == key));
        let (volume_id, slice_index) = match entry {
            Some(s) => (
                s.volume_id.clone().unwrap_or_else(|| "all".into()),
                s.slice_index.map_or(n as i64, |i| i as i64),
            ),
            None => ("all".into(), n as i64),
        };
        slices.push(SliceEmbedding {
            volume_id,
            slice_index,
            vector: cache.get(key)?,
        });
    }
    let similarity = eval::sliding_similarity(&slices, &eval::default_windows())?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    eval::write_csv(&out.join("histogram.csv"), &eval::histogram_csv(&histogram))?;
    eval::write_csv(&out.join("similarity.csv"), &eval::similarity_csv(&similarity))?;
    Ok(TextReport { histogram, similarity })
}

/// Writes a starter configuration file.
pub fn write_config(path: &Path, config: &TrainConfig) -> Result<()> {
    write_json(path, config)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}
