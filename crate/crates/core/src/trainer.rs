//! Staged training: freeze sets, per-epoch learning-rate decay, Adam,
//! validation, metrics logs and resumable checkpoints.
//!
//! Train-state file (little-endian): `MMTS`, version u32, stage tag u8
//! (`0..=2`, 255 = none), stage-done u8, epoch u64, step-in-epoch u64,
//! global step u64, epoch loss sum f64, sampler seed (32 bytes), stream u64,
//! word position u128, moment count u32, then per parameter: Adam step u64
//! and, when nonzero, the first and second moments as f64. A parameter
//! checkpoint block follows.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use mmfuse_numcore::checkpoint::read_entries;
use mmfuse_numcore::{Graph, Gradients, NumError, ParamStore};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{self, VideoInput};
use crate::datamix::{PairRecord, Registry};
use crate::error::{Error, Result};
use crate::experts::{average_crop_embeddings, VideoFeatureSet};
use crate::model::Model;
use crate::retrieval::{compute_metrics, MetricReport};
use crate::rng;
use crate::scoring::similarity_matrix;
use crate::textpipe;

pub const STATE_MAGIC: &[u8; 4] = b"MMTS";
pub const STATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    S0,
    S1,
    S2,
}

impl StageId {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        [StageId::S0, StageId::S1, StageId::S2].get(t as usize).copied()
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextBackbone,
    Aggregator,
    Projection,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::TextBackbone, ParamGroup::Aggregator, ParamGroup::Projection];

    pub fn group_name(self) -> &'static str {
        match self {
            ParamGroup::TextBackbone => textpipe::BACKBONE_GROUP,
            ParamGroup::Aggregator => aggregator::GROUP,
            ParamGroup::Projection => textpipe::PROJECTION_GROUP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Use the primary feature file only.
    #[default]
    Center,
    /// Average the primary features with all crop variants.
    Mean,
}

impl std::str::FromStr for CropMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "center" => Ok(CropMode::Center),
            "mean" => Ok(CropMode::Mean),
            _ => Err(format!("unknown crop mode `{s}` (center|mean)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub id: StageId,
    pub examples_per_epoch: usize,
    pub num_epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    /// Names of registered datasets sampled in this stage.
    pub mix: Vec<String>,
    pub freeze: Vec<ParamGroup>,
    pub batch_size: usize,
    pub margin: f64,
}

impl StageConfig {
    fn base(id: StageId, examples: usize, epochs: usize, lr: f64, gamma: f64, mix: Vec<String>) -> Self {
        let freeze = match id {
            StageId::S0 | StageId::S1 => vec![ParamGroup::TextBackbone],
            StageId::S2 => vec![],
        };
        Self {
            id,
            examples_per_epoch: examples,
            num_epochs: epochs,
            lr,
            gamma,
            mix,
            freeze,
            batch_size: crate::scoring::FULL_BATCH,
            margin: crate::scoring::DEFAULT_MARGIN,
        }
    }

    /// Full-scale schedule. S0 samples the weakly supervised corpus, S1 and
    /// S2 the 13-corpus mix.
    pub fn full(id: StageId) -> Self {
        let mix10v3i: Vec<String> = crate::datamix::FULL_MIX.iter().map(|(n, _, _)| n.to_string()).collect();
        match id {
            StageId::S0 => Self::base(id, 60_000, 200, 5e-5, 0.98, vec!["HT100M".into()]),
            StageId::S1 => Self::base(id, 380_000, 45, 5e-5, 0.95, mix10v3i),
            StageId::S2 => Self::base(id, 200_000, 20, 2e-5, 0.8, mix10v3i),
        }
    }

    /// Minutes-scale schedule for synthetic benchmarks. Decay factors match
    /// the full schedule; learning rates are raised for the short runs.
    pub fn desk(id: StageId, mix: Vec<String>) -> Self {
        let mut s = match id {
            StageId::S0 => Self::base(id, 2048, 6, 2e-3, 0.98, mix),
            StageId::S1 => Self::base(id, 2048, 6, 2e-3, 0.95, mix),
            StageId::S2 => Self::base(id, 1024, 4, 5e-4, 0.8, mix),
        };
        s.batch_size = 32;
        s
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.examples_per_epoch.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.num_epochs) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.id)));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        let frozen_backbone = self.freeze.contains(&ParamGroup::TextBackbone);
        match self.id {
            StageId::S0 | StageId::S1 if !frozen_backbone => {
                return bad("text backbone must be frozen".into());
            }
            StageId::S2 if frozen_backbone => return bad("text backbone must be trainable".into()),
            _ => {}
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2".into());
        }
        if self.examples_per_epoch == 0 || self.num_epochs == 0 {
            return bad("examples_per_epoch and num_epochs must be positive".into());
        }
        if self.mix.is_empty() {
            return bad("dataset mix is empty".into());
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be ≥ 0".into());
        }
        Ok(())
    }
}

/// Stages must appear in S0 → S1 → S2 order, each at most once.
pub fn validate_stage_order(stages: &[StageConfig]) -> Result<()> {
    for w in stages.windows(2) {
        if w[0].id >= w[1].id {
            return Err(Error::Config(format!("stage {} may not follow {}", w[1].id, w[0].id)));
        }
    }
    Ok(())
}

fn decimal_parts(x: f64) -> (BigUint, i64) {
    let s = format!("{x:e}");
    let (mant, exp) = s.split_once('e').expect("exponent form");
    let exp: i64 = exp.parse().expect("exponent");
    match mant.split_once('.') {
        Some((int, frac)) => (
            format!("{int}{frac}").parse().expect("digits"),
            exp - frac.len() as i64,
        ),
        None => (mant.parse().expect("digits"), exp),
    }
}

/// `lr0 · γ^k`, evaluated exactly on the decimal values of `lr0` and `γ`
/// and rounded once to the nearest double. So `2e-5 · 0.8` gives the
/// double nearest to 1.6e-5, which a naive float product does not.
pub fn decayed_lr(lr0: f64, gamma: f64, k: usize) -> f64 {
    let (m0, e0) = decimal_parts(lr0);
    let (mg, eg) = decimal_parts(gamma);
    let digits = m0 * mg.pow(k as u32);
    let exp = e0 + eg * k as i64;
    format!("{digits}e{exp}").parse().expect("decimal literal")
}

pub fn lr_at_epoch(stage: &StageConfig, k: usize) -> Result<f64> {
    if k >= stage.num_epochs {
        return Err(Error::Invalid(format!(
            "epoch {k} out of range for stage {} with {} epochs",
            stage.id, stage.num_epochs
        )));
    }
    Ok(decayed_lr(stage.lr, stage.gamma, k))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    /// Indexed by parameter id; `None` until a parameter's first update.
    pub moments: Vec<Option<Moments>>,
    pub stage: Option<StageId>,
    pub stage_done: bool,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub epoch_loss_sum: f64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(store: ParamStore, seed: u64) -> Self {
        let n = store.len();
        Self {
            store,
            moments: vec![None; n],
            stage: None,
            stage_done: false,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            epoch_loss_sum: 0.0,
            rng: rng::stream(seed, "sampling"),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(STATE_MAGIC);
        b.extend_from_slice(&STATE_VERSION.to_le_bytes());
        b.push(self.stage.map_or(255, StageId::tag));
        b.push(u8::from(self.stage_done));
        b.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        b.extend_from_slice(&(self.step_in_epoch as u64).to_le_bytes());
        b.extend_from_slice(&self.global_step.to_le_bytes());
        b.extend_from_slice(&self.epoch_loss_sum.to_le_bytes());
        b.extend_from_slice(&self.rng.get_seed());
        b.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        b.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        b.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for m in &self.moments {
            match m {
                None => b.extend_from_slice(&0u64.to_le_bytes()),
                Some(m) => {
                    b.extend_from_slice(&m.t.to_le_bytes());
                    for x in m.m.iter().chain(&m.v) {
                        b.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        self.store.write_checkpoint(&mut b)?;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Restores a state into a store with the same parameter layout as
    /// `template` (names, shapes and trainable flags are taken from it).
    pub fn from_bytes(bytes: &[u8], template: &ParamStore) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(format!("train state: {m}"));
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(corrupt("truncated"));
            }
            let (h, t) = r.split_at(n);
            r = t;
            Ok(h)
        };
        if take(4)? != STATE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != STATE_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let tag = take(1)?[0];
        let stage = match tag {
            255 => None,
            t => Some(StageId::from_tag(t).ok_or_else(|| corrupt("bad stage tag"))?),
        };
        let stage_done = take(1)?[0] != 0;
        let u64_ = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let epoch = u64_(take(8)?) as usize;
        let step_in_epoch = u64_(take(8)?) as usize;
        let global_step = u64_(take(8)?);
        let epoch_loss_sum = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let seed: [u8; 32] = take(32)?.try_into().unwrap();
        let stream = u64_(take(8)?);
        let word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if count != template.len() {
            return Err(Error::Checkpoint(format!(
                "train state has {count} parameters, model has {}",
                template.len()
            )));
        }
        let mut moments = Vec::with_capacity(count);
        for id in template.ids() {
            let t = u64_(take(8)?);
            if t == 0 {
                moments.push(None);
                continue;
            }
            let n = template.value(id).numel();
            let vals: Vec<f64> = take(16 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            moments.push(Some(Moments {
                t,
                m: vals[..n].to_vec(),
                v: vals[n..].to_vec(),
            }));
        }
        let entries = read_entries(&mut r).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let mut store = template.clone();
        store.assign_entries(entries).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut rng_state = ChaCha8Rng::from_seed(seed);
        rng_state.set_stream(stream);
        rng_state.set_word_pos(word_pos);
        Ok(Self {
            store,
            moments,
            stage,
            stage_done,
            epoch,
            step_in_epoch,
            global_step,
            epoch_loss_sum,
            rng: rng_state,
        })
    }

    pub fn load(path: &Path, template: &ParamStore) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, template)
    }

    /// Applies the stage's freeze set to the store.
    pub fn apply_freeze(&mut self, stage: &StageConfig) {
        for g in ParamGroup::ALL {
            self.store.set_group_trainable(g.group_name(), !stage.freeze.contains(&g));
        }
    }

    fn adam_step(&mut self, grads: &Gradients, lr: f64, cfg: &AdamConfig) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            if !self.store.get(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let mom = self.moments[id.index()].get_or_insert_with(|| Moments {
                t: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            mom.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(mom.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(mom.t as i32);
            let p = self.store.get_mut(id).tensor.data_mut();
            for i in 0..g.len() {
                mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g[i];
                mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

/// Write to a temporary sibling, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    store.write_checkpoint(&mut buf)?;
    write_atomic(path, &buf)
}

pub fn load_params(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r: &[u8] = &bytes;
    if bytes.starts_with(STATE_MAGIC) {
        let st = TrainState::from_bytes(&bytes, store)?;
        *store = st.store;
        return Ok(());
    }
    let entries = read_entries(&mut r).map_err(|e| Error::Checkpoint(e.to_string()))?;
    store.assign_entries(entries).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Held-out caption/video pairs; `truth[q]` indexes `videos`.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub captions: Vec<String>,
    pub videos: Vec<VideoInput>,
    pub truth: Vec<usize>,
}

impl ValidationSet {
    /// One query per record, each against its own video.
    pub fn from_records(records: &[PairRecord], model: &Model, crop: CropMode) -> Result<Self> {
        let videos = resolve_inputs(records, model, crop)?;
        Ok(Self {
            captions: records.iter().map(|r| r.caption.clone()).collect(),
            videos,
            truth: (0..records.len()).collect(),
        })
    }
}

pub fn evaluate(model: &Model, store: &ParamStore, val: &ValidationSet) -> Result<MetricReport> {
    let texts: Vec<&str> = val.captions.iter().map(String::as_str).collect();
    let t = model.embed_texts(store, &texts)?;
    let v = model.embed_videos(store, &val.videos)?;
    let sim = similarity_matrix(&t, &v)?;
    compute_metrics(&sim, &val.truth)
}

/// Features of a record under the crop mode.
pub fn record_features(r: &PairRecord, crop: CropMode) -> Result<VideoFeatureSet> {
    let main = r.features.load()?;
    if crop == CropMode::Mean && !r.crops.is_empty() {
        let mut all = vec![(*main).clone()];
        for c in &r.crops {
            all.push((*c.load()?).clone());
        }
        Ok(average_crop_embeddings(&all)?)
    } else {
        Ok((*main).clone())
    }
}

pub fn resolve_inputs(records: &[PairRecord], model: &Model, crop: CropMode) -> Result<Vec<VideoInput>> {
    records
        .par_iter()
        .map(|r| {
            let feats = record_features(r, crop)?;
            VideoInput::from_features(&feats, &model.config.aggregator)
                .map_err(|e| Error::Data(format!("record `{}`: {e}", r.media_id)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: StageId,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub steps: u64,
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub mdr: Option<f64>,
    pub mnr: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// False when stopped early by [`TrainOptions::max_steps`].
    pub completed: bool,
    pub last_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub crop: CropMode,
    /// Write a train-state file after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append per-epoch records as JSON lines.
    pub metrics_path: Option<PathBuf>,
    /// Stop once the global step count reaches this value.
    pub max_steps: Option<u64>,
    /// End the stage after the first epoch whose validation R@1 reaches
    /// this value.
    pub stop_at_r1: Option<f64>,
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub registry: &'a Registry,
    pub validation: Option<&'a ValidationSet>,
    pub options: TrainOptions,
    inputs: Vec<Vec<VideoInput>>,
}

impl<'a> Trainer<'a> {
    /// Resolves every record's features up front.
    pub fn new(
        model: &'a Model,
        registry: &'a Registry,
        validation: Option<&'a ValidationSet>,
        options: TrainOptions,
    ) -> Result<Self> {
        let inputs = registry
            .datasets()
            .iter()
            .map(|d| resolve_inputs(&d.records, model, options.crop))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            registry,
            validation,
            options,
            inputs,
        })
    }

    /// Runs (or resumes) one stage. Parameters in the freeze set are not
    /// touched.
    pub fn run_stage(&self, state: &mut TrainState, stage: &StageConfig) -> Result<StageReport> {
        stage.validate()?;
        let mix: Vec<usize> = stage
            .mix
            .iter()
            .map(|n| {
                self.registry
                    .index_of(n)
                    .ok_or_else(|| Error::Data(format!("stage {}: unknown dataset `{n}`", stage.id)))
            })
            .collect::<Result<_>>()?;
        let sub = self.registry.subset(&stage.mix)?;
        let sampler = sub.sampler()?;

        if state.stage != Some(stage.id) || state.stage_done {
            state.stage = Some(stage.id);
            state.stage_done = false;
            state.epoch = 0;
            state.step_in_epoch = 0;
            state.epoch_loss_sum = 0.0;
        }
        state.apply_freeze(stage);

        let mut report = StageReport::default();
        let steps_per_epoch = stage.steps_per_epoch();
        while state.epoch < stage.num_epochs {
            let lr = lr_at_epoch(stage, state.epoch)?;
            while state.step_in_epoch < steps_per_epoch {
                if self.options.max_steps.is_some_and(|m| state.global_step >= m) {
                    return Ok(report);
                }
                let draws = sampler.draw(&mut state.rng, stage.batch_size);
                let mut texts = Vec::with_capacity(draws.len());
                let mut videos = Vec::with_capacity(draws.len());
                for d in &draws {
                    let ds = mix[d.dataset];
                    texts.push(self.registry.datasets()[ds].records[d.record].caption.as_str());
                    videos.push(self.inputs[ds][d.record].clone());
                }
                let step = self.step(state, &texts, &videos, stage, lr, &report)?;
                report.losses.push(step);
                state.epoch_loss_sum += step;
                state.step_in_epoch += 1;
                state.global_step += 1;
            }
            let record = self.finish_epoch(state, stage, lr, steps_per_epoch)?;
            log::info!(
                "stage {} epoch {} lr {:e} loss {:.5} R@1 {:?}",
                stage.id,
                record.epoch,
                record.lr,
                record.loss,
                record.r1
            );
            let reached = matches!((self.options.stop_at_r1, record.r1), (Some(t), Some(r)) if r >= t);
            report.epochs.push(record);
            state.epoch += 1;
            state.step_in_epoch = 0;
            state.epoch_loss_sum = 0.0;
            if let Some(dir) = &self.options.checkpoint_dir {
                let p = dir.join(format!("{}-epoch{:03}.mmts", stage.id, state.epoch - 1));
                state.save(&p)?;
                report.last_checkpoint = Some(p);
            }
            if reached {
                break;
            }
        }
        state.stage_done = true;
        report.completed = true;
        Ok(report)
    }

    fn step(
        &self,
        state: &mut TrainState,
        texts: &[&str],
        videos: &[VideoInput],
        stage: &StageConfig,
        lr: f64,
        report: &StageReport,
    ) -> Result<f64> {
        let non_finite = |state: &TrainState| Error::NonFiniteLoss {
            stage: stage.id.to_string(),
            step: state.global_step,
            last_good: report
                .last_checkpoint
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        };
        let (loss, grads) = {
            let mut g = Graph::new(&state.store);
            let loss = match self.model.batch_loss(&mut g, texts, videos, stage.margin) {
                Ok(l) => l,
                Err(Error::Num(NumError::NonFinite { .. })) => return Err(non_finite(state)),
                Err(e) => return Err(e),
            };
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite(state));
            }
            g.backward(loss)?;
            (value, g.param_grads())
        };
        state.adam_step(&grads, lr, &self.options.adam);
        Ok(loss)
    }

    fn finish_epoch(&self, state: &TrainState, stage: &StageConfig, lr: f64, steps: usize) -> Result<EpochRecord> {
        let metrics = match self.validation {
            Some(v) => Some(evaluate(self.model, &state.store, v)?),
            None => None,
        };
        let record = EpochRecord {
            stage: stage.id,
            epoch: state.epoch,
            lr,
            loss: state.epoch_loss_sum / steps as f64,
            steps: state.global_step,
            r1: metrics.as_ref().map(|m| m.r1),
            r5: metrics.as_ref().map(|m| m.r5),
            r10: metrics.as_ref().map(|m| m.r10),
            mdr: metrics.as_ref().map(|m| m.mdr),
            mnr: metrics.as_ref().map(|m| m.mnr),
        };
        if let Some(path) = &self.options.metrics_path {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            crate::retrieval::write_jsonl(&mut f, std::slice::from_ref(&record))?;
        }
        Ok(record)
    }
}

/// Reads a file fully, mapping errors to [`Error::Io`].
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut v = Vec::new();
    f.read_to_end(&mut v).map_err(|e| Error::io(path, e))?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_values() {
        let s2 = StageConfig::full(StageId::S2);
        assert_eq!(lr_at_epoch(&s2, 1).unwrap(), 1.6e-5);
        assert_eq!(lr_at_epoch(&s2, 0).unwrap(), 2e-5);
        let s1 = StageConfig::full(StageId::S1);
        assert_eq!(lr_at_epoch(&s1, 1).unwrap(), 4.75e-5);
        assert!(lr_at_epoch(&s1, 45).is_err());
        assert_eq!(lr_at_epoch(&StageConfig::full(StageId::S0), 1).unwrap(), 4.9e-5);
        assert_eq!(decayed_lr(1e-3, 1.0, 7), 1e-3);
        assert_eq!(decayed_lr(0.5, 0.5, 3), 0.0625);
    }

    #[test]
    fn full_presets() {
        let s0 = StageConfig::full(StageId::S0);
        assert_eq!((s0.examples_per_epoch, s0.num_epochs, s0.lr, s0.gamma), (60_000, 200, 5e-5, 0.98));
        let s1 = StageConfig::full(StageId::S1);
        assert_eq!((s1.examples_per_epoch, s1.num_epochs, s1.lr, s1.gamma), (380_000, 45, 5e-5, 0.95));
        assert_eq!(s1.mix.len(), 13);
        let s2 = StageConfig::full(StageId::S2);
        assert_eq!((s2.examples_per_epoch, s2.num_epochs, s2.lr, s2.gamma), (200_000, 20, 2e-5, 0.8));
        for s in [&s0, &s1, &s2] {
            s.validate().unwrap();
        }
        assert_eq!(s0.steps_per_epoch(), 235);
    }

    #[test]
    fn stage_validation() {
        let mut s = StageConfig::full(StageId::S1);
        s.freeze.clear();
        assert!(s.validate().is_err());
        let mut s = StageConfig::full(StageId::S2);
        s.freeze.push(ParamGroup::TextBackbone);
        assert!(s.validate().is_err());
        let mut s = StageConfig::full(StageId::S2);
        s.gamma = 1.5;
        assert!(s.validate().is_err());
        let stages = [StageConfig::full(StageId::S1), StageConfig::full(StageId::S0)];
        assert!(validate_stage_order(&stages).is_err());
    }
}
