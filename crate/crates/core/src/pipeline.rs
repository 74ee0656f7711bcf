//! Run configuration, checkpoints, and the train / eval / segment / baseline
//! / gen-data commands behind the command-line front end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{BackboneConfig, Hierarchy};
use crate::error::{Error, Result};
use crate::eval::{
    compute_metrics, labels_to_i64, ransac_segment, region_grow_segment, MetricsReport, RansacConfig,
    RegionGrowConfig, SampleMetrics,
};
use crate::geom::Point3;
use crate::loss::LossBreakdown;
use crate::maskhead::{DistanceEncoding, MaskHeadConfig};
use crate::model::{LossOptions, ModelConfig, RoofSegModel, TrainingTarget};
use crate::nn::Ctx;
use crate::optim::{clip_global_norm, AdamW, Schedule};
use crate::params::ParamStore;
use crate::querydec::DecoderConfig;
use crate::roofgen::{
    load_split, resample, write_dataset, write_xyzl, DatasetRecipe, RoofFamily, RoofSample, Split,
};

pub const ENV_PREFIX: &str = "ROOFSEG_";
pub const LOSS_CSV_HEADER: &str = "step,l_mask,l_plane,l_cls,l_edge,total";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScale {
    MultiScale,
    FullResolution,
}

impl FeatureScale {
    pub fn name(self) -> &'static str {
        match self {
            FeatureScale::MultiScale => "multi-scale",
            FeatureScale::FullResolution => "full-resolution",
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Every setting of a run. Loaded from `key = value` text; see
/// [`RunConfig::KEYS`] for the accepted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    pub families: Vec<RoofFamily>,
    pub sigma: f64,
    pub points: usize,
    pub data_seed: u64,
    pub queries: usize,
    pub decoders: usize,
    pub n_knn: usize,
    pub edge_k: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub resample: usize,
    pub seed: u64,
    pub feature_scale: FeatureScale,
    pub reinject_position: bool,
    pub distance_encoding: DistanceEncoding,
    pub eamm: bool,
    pub adaptive_weights: bool,
    pub plane_loss: bool,
    pub iou_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let recipe = DatasetRecipe::default();
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            train_count: recipe.train,
            test_count: recipe.test,
            families: recipe.families,
            sigma: recipe.sigma,
            points: recipe.points,
            data_seed: recipe.seed,
            queries: 16,
            decoders: 8,
            n_knn: 30,
            edge_k: 30,
            batch_size: 24,
            epochs: 50,
            learning_rate: 1e-4,
            min_learning_rate: 1e-6,
            weight_decay: 1e-4,
            warmup_steps: 0,
            clip_norm: 1.0,
            resample: 2048,
            seed: 0,
            feature_scale: FeatureScale::MultiScale,
            reinject_position: true,
            distance_encoding: DistanceEncoding::Tiled,
            eamm: true,
            adaptive_weights: true,
            plane_loss: true,
            iou_threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 28] = [
        "data_dir",
        "out_dir",
        "train_count",
        "test_count",
        "families",
        "sigma",
        "points",
        "data_seed",
        "queries",
        "decoders",
        "n_knn",
        "edge_k",
        "batch_size",
        "epochs",
        "learning_rate",
        "min_learning_rate",
        "weight_decay",
        "warmup_steps",
        "clip_norm",
        "resample",
        "seed",
        "feature_scale",
        "reinject_position",
        "distance_encoding",
        "eamm",
        "adaptive_weights",
        "plane_loss",
        "iou_threshold",
    ];

    /// Sets one key from its text form. Values are checked by [`Self::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got '{v}'"));
        macro_rules! num {
            ($t:ty) => {
                v.parse::<$t>().map_err(|_| bad(stringify!($t)))?
            };
        }
        let flag = || parse_bool(v).ok_or_else(|| bad("true or false"));
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_count" => self.train_count = num!(usize),
            "test_count" => self.test_count = num!(usize),
            "families" => {
                self.families = v
                    .split(',')
                    .map(|f| f.trim().parse::<RoofFamily>())
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Config(format!("families: {e}")))?
            }
            "sigma" => self.sigma = num!(f64),
            "points" => self.points = num!(usize),
            "data_seed" => self.data_seed = num!(u64),
            "queries" => self.queries = num!(usize),
            "decoders" => self.decoders = num!(usize),
            "n_knn" => self.n_knn = num!(usize),
            "edge_k" => self.edge_k = num!(usize),
            "batch_size" => self.batch_size = num!(usize),
            "epochs" => self.epochs = num!(u64),
            "learning_rate" => self.learning_rate = num!(f64),
            "min_learning_rate" => self.min_learning_rate = num!(f64),
            "weight_decay" => self.weight_decay = num!(f64),
            "warmup_steps" => self.warmup_steps = num!(u64),
            "clip_norm" => self.clip_norm = num!(f64),
            "resample" => self.resample = num!(usize),
            "seed" => self.seed = num!(u64),
            "feature_scale" => {
                self.feature_scale = match v {
                    "multi-scale" => FeatureScale::MultiScale,
                    "full-resolution" => FeatureScale::FullResolution,
                    _ => return Err(bad("multi-scale or full-resolution")),
                }
            }
            "reinject_position" => self.reinject_position = flag()?,
            "distance_encoding" => {
                self.distance_encoding = match v {
                    "tiled" => DistanceEncoding::Tiled,
                    "sinusoidal" => DistanceEncoding::Sinusoidal,
                    _ => return Err(bad("tiled or sinusoidal")),
                }
            }
            "eamm" => self.eamm = flag()?,
            "adaptive_weights" => self.adaptive_weights = flag()?,
            "plane_loss" => self.plane_loss = flag()?,
            "iou_threshold" => self.iou_threshold = num!(f64),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "train_count" => self.train_count.to_string(),
            "test_count" => self.test_count.to_string(),
            "families" => self.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
            "sigma" => self.sigma.to_string(),
            "points" => self.points.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "queries" => self.queries.to_string(),
            "decoders" => self.decoders.to_string(),
            "n_knn" => self.n_knn.to_string(),
            "edge_k" => self.edge_k.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "min_learning_rate" => self.min_learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "resample" => self.resample.to_string(),
            "seed" => self.seed.to_string(),
            "feature_scale" => self.feature_scale.name().to_string(),
            "reinject_position" => self.reinject_position.to_string(),
            "distance_encoding" => match self.distance_encoding {
                DistanceEncoding::Tiled => "tiled".into(),
                DistanceEncoding::Sinusoidal => "sinusoidal".into(),
            },
            "eamm" => self.eamm.to_string(),
            "adaptive_weights" => self.adaptive_weights.to_string(),
            "plane_loss" => self.plane_loss.to_string(),
            "iou_threshold" => self.iou_threshold.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Later lines win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `ROOFSEG_<KEY>` overrides from `vars`. Unknown keys with the
    /// prefix are rejected.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                self.set(&key, &value).map_err(|e| Error::Config(format!("{name}: {e}")))?;
            }
        }
        self.validate()
    }

    /// Canonical text form: every key in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    /// Text of the keys that affect training, for matching runs.
    pub fn training_fingerprint(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            if matches!(k, "data_dir" | "out_dir" | "iou_threshold") {
                continue;
            }
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.families.is_empty() {
            return fail("families must list at least one roof family".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be finite and nonnegative, got {}", self.sigma));
        }
        if self.points < 16 || self.resample < 16 {
            return fail("points and resample must be at least 16".into());
        }
        if self.queries == 0 || self.decoders == 0 {
            return fail("queries and decoders must be positive".into());
        }
        if self.n_knn == 0 || self.n_knn >= self.resample || self.edge_k == 0 || self.edge_k >= self.points {
            return fail("n_knn and edge_k must be positive and below the point count".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate >= 0.0) || self.min_learning_rate > self.learning_rate {
            return fail("learning rates must satisfy 0 <= min_learning_rate <= learning_rate, learning_rate > 0".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return fail("weight_decay and clip_norm must be nonnegative".into());
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return fail("iou_threshold must lie in (0, 1]".into());
        }
        let largest = self.families.iter().map(|f| f.plane_count()).max().unwrap_or(0);
        if largest > self.queries {
            return fail(format!("{largest} planes per roof exceed {} queries", self.queries));
        }
        Ok(())
    }

    pub fn recipe(&self) -> DatasetRecipe {
        DatasetRecipe {
            train: self.train_count,
            test: self.test_count,
            families: self.families.clone(),
            sigma: self.sigma,
            points: self.points,
            seed: self.data_seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig {
                queries: self.queries,
                decoders: self.decoders,
                full_resolution: self.feature_scale == FeatureScale::FullResolution,
                reinject_position: self.reinject_position,
                ..DecoderConfig::default()
            },
            head: MaskHeadConfig {
                distance_encoding: self.distance_encoding,
                ..MaskHeadConfig::default()
            },
            init_seed: self.seed,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            eamm: self.eamm,
            adaptive_weights: self.adaptive_weights,
            plane_loss: self.plane_loss,
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size) as u64
    }

    pub fn ablation_label(&self) -> String {
        format!(
            "eamm={},adaptive_weights={},plane_loss={}",
            on_off(self.eamm),
            on_off(self.adaptive_weights),
            on_off(self.plane_loss)
        )
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

const MAGIC: &[u8; 8] = b"RSEGCKPT";
const VERSION: u32 = 1;

/// Complete training state: parameters, optimizer moments, run config,
/// data RNG and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<NamedArray>,
    pub optimizer_steps: u64,
    pub moments: Vec<(Array2<f32>, Array2<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub trainable: bool,
    pub value: Array2<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn array(&mut self) -> Result<Array2<f32>> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        let raw = self.take(r.checked_mul(c).and_then(|x| x.checked_mul(4)).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Array2::from_shape_vec((r, c), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_array(out: &mut Vec<u8>, a: &Array2<f32>) {
    out.extend((a.nrows() as u32).to_le_bytes());
    out.extend((a.ncols() as u32).to_le_bytes());
    for x in a.iter() {
        out.extend(x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, store: &ParamStore<f32>, opt: &AdamW<f32>, rng: &ChaCha8Rng, epoch: u64, step: u64) -> Self {
        Self {
            config_text: config.to_text(),
            epoch,
            step,
            rng: RngState::capture(rng),
            params: store
                .iter()
                .map(|(id, name, v)| NamedArray {
                    name: name.to_string(),
                    trainable: store.is_trainable(id),
                    value: v.clone(),
                })
                .collect(),
            optimizer_steps: opt.steps,
            moments: opt.m.iter().cloned().zip(opt.v.iter().cloned()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text);
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.rng.seed);
        out.extend(self.rng.stream.to_le_bytes());
        out.extend(self.rng.word_pos.to_le_bytes());
        out.extend((self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(p.trainable as u8);
            put_array(&mut out, &p.value);
        }
        out.extend(self.optimizer_steps.to_le_bytes());
        out.extend((self.moments.len() as u32).to_le_bytes());
        for (m, v) in &self.moments {
            put_array(&mut out, m);
            put_array(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config_text = r.string()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad trainable flag {b}"))),
            };
            params.push(NamedArray {
                name,
                trainable,
                value: r.array()?,
            });
        }
        let optimizer_steps = r.u64()?;
        let mcount = r.u32()? as usize;
        let mut moments = Vec::with_capacity(mcount.min(4096));
        for _ in 0..mcount {
            let m = r.array()?;
            let v = r.array()?;
            moments.push((m, v));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config_text,
            epoch,
            step,
            rng,
            params,
            optimizer_steps,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
    }

    /// Copies the saved parameters into `store`, which must have the same
    /// names and shapes in the same order.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, p) in ids.into_iter().zip(&self.params) {
            if store.name(id) != p.name || store.value(id).dim() != p.value.dim() {
                return Err(Error::Checkpoint(format!("parameter {} does not match the model layout", p.name)));
            }
            store.value_mut(id).assign(&p.value);
        }
        Ok(())
    }

    /// Model and parameters as saved.
    pub fn build_model(&self) -> Result<(RunConfig, RoofSegModel, ParamStore<f32>)> {
        let config = self.config()?;
        let mut store = ParamStore::new();
        let model = RoofSegModel::new(&mut store, config.model_config())?;
        self.restore_params(&mut store)?;
        Ok((config, model, store))
    }

    pub fn optimizer(&self, store: &ParamStore<f32>, weight_decay: f64) -> Result<AdamW<f32>> {
        let mut opt = AdamW::new(store, weight_decay);
        if self.moments.len() != opt.m.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        for (i, (m, v)) in self.moments.iter().enumerate() {
            if m.dim() != opt.m[i].dim() || v.dim() != opt.v[i].dim() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
            opt.m[i] = m.clone();
            opt.v[i] = v.clone();
        }
        opt.steps = self.optimizer_steps;
        Ok(opt)
    }
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<usize> {
    config.validate()?;
    let entries = write_dataset(&config.data_dir, &config.recipe())?;
    Ok(entries.len())
}

/// Progress notifications from [`train`].
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step { epoch: u64, step: u64, loss: LossBreakdown, lr: f64, seconds: f64 },
    Epoch { epoch: u64, mean_total: f64, checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: u64,
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub epoch_means: Vec<f64>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

pub fn latest_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("latest.ckpt")
}

fn loss_row(step: u64, b: &LossBreakdown) -> String {
    format!(
        "{step},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        b.mask, b.plane, b.cls, b.edge, b.total
    )
}

/// Writes the offending batch for inspection and returns the error to report.
fn dump_nonfinite(out_dir: &Path, step: u64, batch: &[(String, RoofSample)], detail: &str) -> Error {
    let dir = out_dir.join(format!("nonfinite_step_{step}"));
    let mut written = Vec::new();
    for (i, (name, s)) in batch.iter().enumerate() {
        let p = dir.join(format!("sample_{i:02}.xyzl"));
        let header = vec![format!("source {name}")];
        if write_xyzl(&p, s.cloud.coords(), s.labels(), &header).is_ok() {
            written.push(p);
        }
    }
    let _ = fs::write(dir.join("reason.txt"), format!("{detail}\n"));
    Error::Numerical(format!("{detail} at step {step}; batch dumped to {}", dir.display()))
}

/// Runs the training loop, starting fresh or from `resume`.
pub fn train(config: &RunConfig, resume: Option<&Path>, mut progress: impl FnMut(&TrainEvent)) -> Result<TrainSummary> {
    config.validate()?;
    let data = load_split(&config.data_dir, Split::Train, config.edge_k)?;
    if data.is_empty() {
        return Err(Error::invalid(format!("{} has no training samples", config.data_dir.display())));
    }
    let mut store = ParamStore::<f32>::new();
    let model = RoofSegModel::new(&mut store, config.model_config())?;
    let (mut opt, mut rng, start_epoch, mut step) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let saved = ck.config()?;
            if saved.training_fingerprint() != config.training_fingerprint() {
                return Err(Error::Config(format!("{} was trained with a different configuration", path.display())));
            }
            ck.restore_params(&mut store)?;
            (ck.optimizer(&store, config.weight_decay)?, ck.rng.restore(), ck.epoch, ck.step)
        }
        None => (AdamW::new(&store, config.weight_decay), ChaCha8Rng::seed_from_u64(config.seed), 0, 0),
    };
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let cfg_path = config.out_dir.join("config.txt");
    fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let csv_path = config.out_dir.join("loss.csv");
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    if resume.is_some() {
        if let Ok(old) = fs::read_to_string(&csv_path) {
            for line in old.lines().skip(1) {
                let s = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if s.is_some_and(|s| s <= step) {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
        }
    }
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;

    let per_epoch = config.steps_per_epoch(data.len());
    let schedule = Schedule {
        initial: config.learning_rate,
        minimum: config.min_learning_rate,
        warmup_steps: config.warmup_steps,
        total_steps: per_epoch * config.epochs,
    };
    let opts = config.loss_options();
    let mut epoch_means = Vec::new();
    let mut last_ckpt = latest_checkpoint(&config.out_dir);
    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let started = Instant::now();
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = resample(&data[i].1, config.resample, config.edge_k, &mut rng)?;
                batch.push((data[i].0.display().to_string(), s));
            }
            let mut grads: Vec<Option<Array2<f32>>> = vec![None; store.len()];
            let mut sum = LossBreakdown::default();
            for (_, s) in &batch {
                let coords = s.cloud.coords();
                let hierarchy = Hierarchy::build(coords, &model.backbone.config)?;
                let target = TrainingTarget::new(coords, s.labels(), &s.edge.flags, config.n_knn)?;
                let mut ctx = Ctx::train(&store, rng.random());
                let (loss, report) = model.objective(&mut ctx, coords, &hierarchy, &target, &opts)?;
                if !report.breakdown.total.is_finite() {
                    return Err(dump_nonfinite(&config.out_dir, step + 1, &batch, "non-finite loss"));
                }
                sum = sum.add(report.breakdown.clone());
                for (id, g) in ctx.tape.backward(loss).into_params() {
                    match &mut grads[id.index()] {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grads.iter_mut().flatten() {
                g.mapv_inplace(|x| x * inv);
            }
            let norm = clip_global_norm(&mut grads, config.clip_norm);
            if !norm.is_finite() {
                return Err(dump_nonfinite(&config.out_dir, step + 1, &batch, "non-finite gradient"));
            }
            let lr = schedule.learning_rate(step);
            opt.step(&mut store, &grads, lr);
            step += 1;
            let mean = sum.scaled(1.0 / batch.len() as f64);
            epoch_total += mean.total * batch.len() as f64;
            csv.push_str(&loss_row(step, &mean));
            fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
            progress(&TrainEvent::Step {
                epoch: epoch + 1,
                step,
                loss: mean,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        let ck = Checkpoint::capture(config, &store, &opt, &rng, epoch + 1, step);
        let path = checkpoint_path(&config.out_dir, epoch + 1);
        ck.save(&path)?;
        last_ckpt = latest_checkpoint(&config.out_dir);
        ck.save(&last_ckpt)?;
        let mean_total = epoch_total / data.len() as f64;
        epoch_means.push(mean_total);
        progress(&TrainEvent::Epoch {
            epoch: epoch + 1,
            mean_total,
            checkpoint: path,
        });
    }
    Ok(TrainSummary {
        epochs: config.epochs,
        steps: step,
        final_checkpoint: last_ckpt,
        loss_csv: csv_path,
        epoch_means,
    })
}

/// Trains into `out_dir`, continuing from its latest checkpoint when that
/// checkpoint was written with the same training settings. A finished run
/// is returned as is.
pub fn train_or_resume(config: &RunConfig, progress: impl FnMut(&TrainEvent)) -> Result<TrainSummary> {
    let latest = latest_checkpoint(&config.out_dir);
    let resume = match Checkpoint::load(&latest) {
        Ok(ck) if ck.config()?.training_fingerprint() == config.training_fingerprint() => Some(latest),
        Ok(_) => {
            return Err(Error::Config(format!(
                "{} holds a run with different settings",
                config.out_dir.display()
            )))
        }
        Err(_) => None,
    };
    train(config, resume.as_deref(), progress)
}

/// Classical methods evaluated next to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Ransac,
    RegionGrow,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Ransac => "ransac",
            Baseline::RegionGrow => "region-grow",
        }
    }

    pub fn segment(self, coords: &[Point3], seed: u64) -> Result<Vec<usize>> {
        let r = match self {
            Baseline::Ransac => ransac_segment(coords, &RansacConfig { seed, ..RansacConfig::default() })?,
            Baseline::RegionGrow => region_grow_segment(coords, &RegionGrowConfig::default())?,
        };
        Ok(r.labels)
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ransac" => Ok(Baseline::Ransac),
            "region-grow" | "region_grow" => Ok(Baseline::RegionGrow),
            other => Err(Error::Config(format!("unknown baseline '{other}'"))),
        }
    }
}

/// Metrics of one method on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub split: String,
    pub settings: String,
    pub report: MetricsReport,
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Network predictions for every sample, scored against the labels.
pub fn evaluate_model(
    model: &RoofSegModel,
    store: &ParamStore<f32>,
    samples: &[(PathBuf, RoofSample)],
    eamm: bool,
    iou_threshold: f64,
) -> Result<MetricsReport> {
    let mut metrics = Vec::with_capacity(samples.len());
    let mut names = Vec::with_capacity(samples.len());
    for (path, s) in samples {
        let mut ctx = Ctx::eval(store);
        let pred = model.predict(&mut ctx, s.cloud.coords(), eamm)?;
        if pred.masks.probabilities.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite mask on {}", path.display())));
        }
        metrics.push(compute_metrics(&pred.segmentation.labels_i64(), &labels_to_i64(s.labels()), iou_threshold)?);
        names.push(file_stem(path));
    }
    Ok(MetricsReport::aggregate(metrics, names, iou_threshold))
}

pub fn evaluate_baseline(baseline: Baseline, samples: &[(PathBuf, RoofSample)], seed: u64, iou_threshold: f64) -> Result<MetricsReport> {
    let mut metrics: Vec<SampleMetrics> = Vec::with_capacity(samples.len());
    let mut names = Vec::with_capacity(samples.len());
    for (path, s) in samples {
        let labels = baseline.segment(s.cloud.coords(), seed)?;
        metrics.push(compute_metrics(&labels_to_i64(&labels), &labels_to_i64(s.labels()), iou_threshold)?);
        names.push(file_stem(path));
    }
    Ok(MetricsReport::aggregate(metrics, names, iou_threshold))
}

fn write_reports(out_dir: &Path, reports: &[MethodReport]) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for r in reports {
        let stem = format!("metrics_{}_{}", r.split, r.method);
        let json = out_dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(r).expect("report serializes");
        fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        let csv = out_dir.join(format!("{stem}.csv"));
        let text = format!("# method {}\n# settings {}\n{}", r.method, r.settings, r.report.to_csv());
        fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    }
    let mut table = String::from("method,split,mCov,mWCov,mPrec,mRec,settings\n");
    for r in reports {
        let _ = writeln!(
            table,
            "{},{},{:.6},{:.6},{:.6},{:.6},\"{}\"",
            r.method, r.split, r.report.m_cov, r.report.m_wcov, r.report.m_prec, r.report.m_rec, r.settings
        );
    }
    let p = out_dir.join("summary.csv");
    fs::write(&p, table).map_err(|e| Error::io(&p, e))
}

/// Evaluates a checkpoint on `split` of the configured dataset. `eamm`
/// overrides the refinement switch of the checkpoint's config. Reports are
/// written to `out_dir`.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    eamm: Option<bool>,
    baselines: &[Baseline],
    out_dir: &Path,
) -> Result<Vec<MethodReport>> {
    let ck = Checkpoint::load(checkpoint)?;
    let (config, model, store) = ck.build_model()?;
    let samples = load_split(data_dir, split, config.edge_k)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("{} has no {split} samples", data_dir.display())));
    }
    let eamm = eamm.unwrap_or(config.eamm);
    let trained = config.ablation_label();
    let mut reports = vec![MethodReport {
        method: if eamm { "roofseg".into() } else { "roofseg-eamm-off".into() },
        split: split.to_string(),
        settings: format!("trained {trained}; inference eamm={}; epoch {}", on_off(eamm), ck.epoch),
        report: evaluate_model(&model, &store, &samples, eamm, config.iou_threshold)?,
    }];
    for &b in baselines {
        reports.push(MethodReport {
            method: b.name().into(),
            split: split.to_string(),
            settings: "defaults".into(),
            report: evaluate_baseline(b, &samples, config.seed, config.iou_threshold)?,
        });
    }
    write_reports(out_dir, &reports)?;
    Ok(reports)
}

pub fn cmd_baseline(data_dir: &Path, split: Split, baselines: &[Baseline], seed: u64, iou: f64, out_dir: &Path) -> Result<Vec<MethodReport>> {
    let samples = load_split(data_dir, split, crate::roofgen::DEFAULT_EDGE_K)?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("{} has no {split} samples", data_dir.display())));
    }
    let reports = baselines
        .iter()
        .map(|&b| {
            Ok(MethodReport {
                method: b.name().into(),
                split: split.to_string(),
                settings: "defaults".into(),
                report: evaluate_baseline(b, &samples, seed, iou)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_reports(out_dir, &reports)?;
    Ok(reports)
}

/// Reads `x y z [extra columns]` rows; `#` lines are skipped.
pub fn read_points(path: &Path) -> Result<Vec<Point3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if fields.len() < 3 {
            return Err(parse_err(format!("expected at least 3 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for c in 0..3 {
            p[c] = fields[c]
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(format!("bad coordinate '{}'", fields[c])))?;
        }
        out.push(p);
    }
    if out.len() < 4 {
        return Err(Error::invalid(format!("{} has {} points, need at least 4", path.display(), out.len())));
    }
    Ok(out)
}

/// Sidecar of a segmented file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentReport {
    pub input: String,
    pub points: usize,
    pub segments: usize,
    pub positive_masks: Vec<usize>,
    pub mask_scores: Vec<f64>,
    pub refined_masks: Vec<usize>,
    pub eamm: bool,
    pub checkpoint_epoch: u64,
    pub mean_confidence: f64,
}

/// Segments one point file at its native size; writes `output` and
/// `output.json`.
pub fn cmd_segment(checkpoint: &Path, input: &Path, output: &Path, eamm: Option<bool>) -> Result<SegmentReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let (config, model, store) = ck.build_model()?;
    let coords = read_points(input)?;
    let eamm = eamm.unwrap_or(config.eamm);
    let mut ctx = Ctx::eval(&store);
    let pred = model.predict(&mut ctx, &coords, eamm)?;
    let seg = &pred.segmentation;
    write_xyzl(output, &coords, &seg.labels, &["format xyzl-1".to_string(), format!("source {}", input.display())])?;
    let mut used: Vec<usize> = seg.labels.clone();
    used.sort_unstable();
    used.dedup();
    let report = SegmentReport {
        input: input.display().to_string(),
        points: coords.len(),
        segments: used.len(),
        positive_masks: seg.positive.clone(),
        mask_scores: pred.masks.scores.clone(),
        refined_masks: (0..pred.refined.len()).filter(|&i| pred.refined[i]).collect(),
        eamm,
        checkpoint_epoch: ck.epoch,
        mean_confidence: seg.confidence.iter().sum::<f64>() / coords.len() as f64,
    };
    let side = PathBuf::from(format!("{}.json", output.display()));
    fs::write(&side, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(|e| Error::io(&side, e))?;
    Ok(report)
}

/// Rows of a loss CSV keyed by step.
pub fn read_loss_csv(path: &Path) -> Result<BTreeMap<u64, LossBreakdown>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "malformed loss row".into(),
        };
        if v.len() != 6 {
            return Err(bad());
        }
        let f = |k: usize| v[k].parse::<f64>().map_err(|_| bad());
        out.insert(
            v[0].parse::<u64>().map_err(|_| bad())?,
            LossBreakdown {
                mask: f(1)?,
                plane: f(2)?,
                cls: f(3)?,
                edge: f(4)?,
                total: f(5)?,
            },
        );
    }
    Ok(out)
}
