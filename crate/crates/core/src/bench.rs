//! Desk-scale synthetic experiments: overfitting, stage ordering, image
//! mixing and temporal encoding.

use std::sync::Arc;
use std::time::Instant;

use mmfuse_numcore::ParamStore;
use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, ModalitySpec, PosMode};
use crate::datamix::{
    synth_corpus, ConceptWorld, DatasetSpec, FeatureRef, MediaKind, PairRecord, Registry, SynthCorpusSpec, FULL_MIX,
};
use crate::error::Result;
use crate::experts::{ExpertDims, ExpertSequence, Modality, SpanLayout, SynthExperts, Token, VideoFeatureSet};
use crate::model::{Model, ModelConfig};
use crate::retrieval::{aggregate_runs, AggregateReport, MetricReport};
use crate::rng;
use crate::trainer::{CropMode, StageConfig, StageId, TrainOptions, TrainState, Trainer, ValidationSet};

/// Sizes shared by the desk experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSetup {
    pub factor_dim: usize,
    pub dims: ExpertDims,
    pub d_model: usize,
    pub ff_width: usize,
    pub vocab_size: usize,
    pub max_seconds: u32,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            factor_dim: 8,
            dims: ExpertDims {
                rgb: 32,
                motion: 24,
                audio: 16,
            },
            d_model: 32,
            ff_width: 64,
            vocab_size: 1024,
            max_seconds: 16,
        }
    }
}

impl DeskSetup {
    pub fn world(&self, seed: u64, layout: SpanLayout) -> Result<ConceptWorld> {
        let experts = SynthExperts::new(
            rng::sub_seed(seed, "experts"),
            3 * self.factor_dim,
            self.dims,
            layout,
            self.max_seconds,
        );
        ConceptWorld::new(rng::sub_seed(seed, "world"), self.factor_dim, experts)
    }

    pub fn model_config(&self, layers: usize, heads: usize, modalities: &[Modality]) -> ModelConfig {
        let specs = modalities
            .iter()
            .map(|&m| ModalitySpec {
                modality: m,
                dim: self.dims.get(m),
            })
            .collect();
        let mut agg = AggregatorConfig::new(self.d_model, layers, heads, specs);
        agg.ff_width = self.ff_width;
        agg.max_seconds = self.max_seconds;
        let mut cfg = ModelConfig::new(agg);
        cfg.vocab_size = self.vocab_size;
        cfg
    }
}

/// One-stage schedule with a constant learning rate for the experiments
/// that need no staging.
pub fn flat_stage(id: StageId, mix: Vec<String>, steps_per_epoch: usize, epochs: usize, batch: usize, lr: f64) -> StageConfig {
    let mut s = StageConfig::desk(id, mix);
    s.batch_size = batch;
    s.examples_per_epoch = steps_per_epoch * batch;
    s.num_epochs = epochs;
    s.lr = lr;
    s.gamma = 1.0;
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub steps: u64,
    pub r1: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Trains every parameter on `n_pairs` fixed pairs until train-set R@1
/// reaches `target` or `max_steps` runs out; R@1 is checked every
/// `check_every` steps.
pub fn overfit(
    seed: u64,
    n_pairs: usize,
    layers: usize,
    heads: usize,
    max_steps: usize,
    check_every: usize,
    target: f64,
) -> Result<OverfitReport> {
    let setup = DeskSetup::default();
    let world = setup.world(seed, SpanLayout::default())?;
    let mut spec = SynthCorpusSpec::new("overfit", MediaKind::Video, n_pairs);
    spec.distinct = true;
    let corpus = synth_corpus(&world, rng::sub_seed(seed, "corpus"), &spec)?;
    let cfg = setup.model_config(layers, heads, &Modality::ALL);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg, seed)?;
    let val = ValidationSet::from_records(&corpus.records, &model, CropMode::Center)?;
    let mut reg = Registry::new();
    reg.add(corpus)?;
    let stage = flat_stage(
        StageId::S2,
        vec!["overfit".into()],
        check_every,
        max_steps.div_ceil(check_every),
        32,
        1e-3,
    );
    let opts = TrainOptions {
        stop_at_r1: Some(target),
        ..TrainOptions::default()
    };
    let trainer = Trainer::new(&model, &reg, Some(&val), opts)?;
    let mut state = TrainState::new(store, seed);
    let t0 = Instant::now();
    let report = trainer.run_stage(&mut state, &stage)?;
    let last = report.epochs.last().expect("at least one epoch");
    Ok(OverfitReport {
        steps: state.global_step,
        r1: last.r1.unwrap_or(0.0),
        final_loss: last.loss,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Per-seed differences `b - a` with their population mean and std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Gap {
    pub fn between(a: &[f64], b: &[f64]) -> Self {
        let per_seed: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        let (mean, std) = mean_std(&per_seed);
        Self { per_seed, mean, std }
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the stages in order on one model, returning validation metrics
/// after each stage.
fn run_chain(
    model_cfg: &ModelConfig,
    seed: u64,
    registry: &Registry,
    val_records: &[PairRecord],
    stages: &[StageConfig],
) -> Result<Vec<MetricReport>> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, model_cfg.clone(), seed)?;
    let val = ValidationSet::from_records(val_records, &model, CropMode::Center)?;
    let trainer = Trainer::new(&model, registry, Some(&val), TrainOptions::default())?;
    let mut state = TrainState::new(store, seed);
    let mut out = Vec::with_capacity(stages.len());
    for st in stages {
        trainer.run_stage(&mut state, st)?;
        out.push(crate::trainer::evaluate(&model, &state.store, &val)?);
    }
    Ok(out)
}

/// Sizes of the stage-ordering study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStudyConfig {
    pub layers: usize,
    pub heads: usize,
    pub noisy_items: usize,
    pub swap_rate: f64,
    pub clean_items: usize,
    pub val_items: usize,
    pub s0: StageConfig,
    pub s1: StageConfig,
    pub s2: StageConfig,
}

impl Default for StageStudyConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            noisy_items: 3000,
            swap_rate: 0.3,
            clean_items: 256,
            val_items: 200,
            s0: StageConfig::desk(StageId::S0, vec!["noisy".into()]),
            s1: StageConfig::desk(StageId::S1, vec!["clean".into()]),
            s2: StageConfig::desk(StageId::S2, vec!["clean".into()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStudy {
    pub seeds: Vec<u64>,
    pub s1: Vec<f64>,
    pub s0_s1: Vec<f64>,
    pub s0_s1_s2: Vec<f64>,
    pub gain_s0: Gap,
    pub gain_s2: Gap,
    pub reports: Vec<(String, AggregateReport)>,
}

/// S1 alone versus S0→S1 and S0→S1→S2: weakly supervised pre-training on a
/// large noisy corpus, fine-tuning on a small clean one, validation on
/// held-out clean items.
pub fn stage_study(seeds: &[u64], cfg: &StageStudyConfig) -> Result<StageStudy> {
    let setup = DeskSetup::default();
    let model_cfg = setup.model_config(cfg.layers, cfg.heads, &Modality::ALL);
    let (mut s1, mut s01, mut s012) = (Vec::new(), Vec::new(), Vec::new());
    let (mut r1s, mut r01s, mut r012s) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in seeds {
        let world = setup.world(seed, SpanLayout::default())?;
        let mut noisy = SynthCorpusSpec::new("noisy", MediaKind::Video, cfg.noisy_items);
        noisy.noisy = true;
        noisy.swap_rate = cfg.swap_rate;
        let clean = SynthCorpusSpec::new("clean", MediaKind::Video, cfg.clean_items);
        let mut val = SynthCorpusSpec::new("val", MediaKind::Video, cfg.val_items);
        val.distinct = true;
        let mut reg = Registry::new();
        reg.add(synth_corpus(&world, rng::sub_seed(seed, "noisy"), &noisy)?)?;
        reg.add(synth_corpus(&world, rng::sub_seed(seed, "clean"), &clean)?)?;
        let val = synth_corpus(&world, rng::sub_seed(seed, "val"), &val)?;

        let alone = run_chain(&model_cfg, seed, &reg, &val.records, std::slice::from_ref(&cfg.s1))?;
        let chain = run_chain(
            &model_cfg,
            seed,
            &reg,
            &val.records,
            &[cfg.s0.clone(), cfg.s1.clone(), cfg.s2.clone()],
        )?;
        log::info!(
            "seed {seed}: S1 {:.2}  S0+S1 {:.2}  S0+S1+S2 {:.2}",
            alone[0].r1,
            chain[1].r1,
            chain[2].r1
        );
        s1.push(alone[0].r1);
        s01.push(chain[1].r1);
        s012.push(chain[2].r1);
        r1s.push(alone[0].clone());
        r01s.push(chain[1].clone());
        r012s.push(chain[2].clone());
    }
    Ok(StageStudy {
        seeds: seeds.to_vec(),
        gain_s0: Gap::between(&s1, &s01),
        gain_s2: Gap::between(&s01, &s012),
        s1,
        s0_s1: s01,
        s0_s1_s2: s012,
        reports: vec![
            ("S1".into(), aggregate_runs(&r1s)?),
            ("S0+S1".into(), aggregate_runs(&r01s)?),
            ("S0+S1+S2".into(), aggregate_runs(&r012s)?),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixStudyConfig {
    pub layers: usize,
    pub heads: usize,
    /// Objects that appear in the video corpora; image corpora cover all.
    pub video_objects: usize,
    /// Items per unit of sampling weight.
    pub items_per_weight: f64,
    pub val_items: usize,
    pub stage: StageConfig,
}

impl Default for MixStudyConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            video_objects: 16,
            items_per_weight: 1.0,
            val_items: 200,
            stage: StageConfig::desk(StageId::S1, vec![]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixStudy {
    pub seeds: Vec<u64>,
    pub videos_only: Vec<f64>,
    pub videos_and_images: Vec<f64>,
    pub gain: Gap,
    pub reports: Vec<(String, AggregateReport)>,
}

/// R@5 after training on the ten video corpora alone versus the ten video
/// plus three image corpora, with the corpus weights of the full mix.
/// Video corpora show only part of the object vocabulary; the image corpora
/// and the validation videos cover all of it.
pub fn image_mix_study(seeds: &[u64], cfg: &MixStudyConfig) -> Result<MixStudy> {
    let setup = DeskSetup::default();
    let model_cfg = setup.model_config(cfg.layers, cfg.heads, &Modality::ALL);
    let (mut v, mut vi) = (Vec::new(), Vec::new());
    let (mut rv, mut rvi) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let world = setup.world(seed, SpanLayout::default())?;
        let mut reg = Registry::new();
        let mut video_names = Vec::new();
        let mut all_names = Vec::new();
        for (name, weight, kind) in FULL_MIX {
            let n = ((weight * cfg.items_per_weight).round() as usize).max(1);
            let mut spec = SynthCorpusSpec::new(name, kind, n);
            spec.weight = weight;
            if kind == MediaKind::Video {
                spec.objects = Some((0..cfg.video_objects).collect());
                video_names.push(name.to_string());
            }
            all_names.push(name.to_string());
            reg.add(synth_corpus(&world, rng::sub_seed(seed, name), &spec)?)?;
        }
        let mut val = SynthCorpusSpec::new("val", MediaKind::Video, cfg.val_items);
        val.distinct = true;
        let val = synth_corpus(&world, rng::sub_seed(seed, "val"), &val)?;

        let mut st = cfg.stage.clone();
        st.mix = video_names;
        let a = run_chain(&model_cfg, seed, &reg, &val.records, std::slice::from_ref(&st))?.remove(0);
        st.mix = all_names;
        let b = run_chain(&model_cfg, seed, &reg, &val.records, std::slice::from_ref(&st))?.remove(0);
        log::info!("seed {seed}: 10V R@5 {:.2}  10V+3I R@5 {:.2}", a.r5, b.r5);
        v.push(a.r5);
        vi.push(b.r5);
        rv.push(a);
        rvi.push(b);
    }
    Ok(MixStudy {
        seeds: seeds.to_vec(),
        gain: Gap::between(&v, &vi),
        videos_only: v,
        videos_and_images: vi,
        reports: vec![("10V".into(), aggregate_runs(&rv)?), ("10V+3I".into(), aggregate_runs(&rvi)?)],
    })
}

pub const TEMPO_WORDS: [&str; 2] = ["quickly", "slowly"];

/// Rgb and motion tokens start every two seconds; fast clips end each
/// token after one second, slow clips after two. Token order and content
/// are the same for both tempos.
pub fn tempo_features(world: &ConceptWorld, id: &str, seed: u64, concept: &[f32], nsec: u32, slow: bool) -> Result<VideoFeatureSet> {
    let layout = SpanLayout {
        rgb_span: 2,
        motion_window: 2,
        audio_window: 4,
        modalities: Modality::ALL.to_vec(),
    };
    let base = world.experts.with_layout(layout).synth_features(id, seed, concept, nsec, 0.5)?;
    if slow {
        return Ok(base);
    }
    let sequences = base
        .sequences()
        .iter()
        .map(|s| {
            let tokens = s
                .tokens()
                .iter()
                .map(|t| Token {
                    beg_sec: t.beg_sec,
                    end_sec: if s.modality() == Modality::Audio { t.end_sec } else { t.beg_sec + 1 },
                    vector: t.vector.clone(),
                })
                .collect();
            ExpertSequence::new(s.modality(), s.dim(), tokens)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VideoFeatureSet::new(id, nsec, sequences)?)
}

/// Corpus whose captions end with a tempo word. With `paired`, every
/// concept appears once at each tempo with identical token content.
pub fn tempo_corpus(world: &ConceptWorld, seed: u64, name: &str, n: usize, paired: bool) -> Result<DatasetSpec> {
    let mut r = rng::stream(seed, &format!("tempo/{name}"));
    let pool = ConceptWorld::num_objects() * ConceptWorld::num_actions() * ConceptWorld::num_colors();
    let mut records = Vec::with_capacity(n);
    let mut ids: Vec<usize> = (0..pool).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut r);
    for i in 0..n {
        let (cid, slow, item) = if paired {
            (ids[i / 2], i % 2 == 1, i / 2)
        } else {
            (rand::Rng::random_range(&mut r, 0..pool), rand::Rng::random_bool(&mut r, 0.5), i)
        };
        let c = ConceptWorld::concept_from_id(cid);
        let id = format!("{name}-{i:05}");
        let item_seed = rng::sub_seed(seed, &format!("{name}-{item}"));
        let nsec = 4 + 2 * (rng::sub_seed(item_seed, "nsec") % 3) as u32;
        let feats = tempo_features(world, &id, item_seed, &world.concept_vector(c), nsec, slow)?;
        records.push(PairRecord {
            media_id: id,
            caption: format!("{} {}", world.caption(c), TEMPO_WORDS[usize::from(slow)]),
            features: FeatureRef::Inline(Arc::new(feats)),
            crops: vec![],
            concept: Some(2 * cid + usize::from(slow)),
            caption_concept: Some(2 * cid + usize::from(slow)),
        });
    }
    Ok(DatasetSpec {
        name: name.into(),
        weight: 1.0,
        kind: MediaKind::Video,
        records,
        noisy: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TempoStudyConfig {
    pub layers: usize,
    pub heads: usize,
    pub train_items: usize,
    /// Validation pairs; each concept contributes a fast and a slow clip.
    pub val_items: usize,
    pub stage: StageConfig,
}

impl Default for TempoStudyConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            train_items: 1000,
            val_items: 200,
            stage: StageConfig::desk(StageId::S1, vec!["tempo".into()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TempoStudy {
    pub seeds: Vec<u64>,
    pub single: Vec<f64>,
    pub double: Vec<f64>,
    pub gain: Gap,
    pub reports: Vec<(String, AggregateReport)>,
}

/// Single (token order) versus double (start and end second) positional
/// encoding on captions that name the clip tempo.
pub fn tempo_study(seeds: &[u64], cfg: &TempoStudyConfig) -> Result<TempoStudy> {
    let setup = DeskSetup::default();
    let (mut single, mut double) = (Vec::new(), Vec::new());
    let (mut rs, mut rd) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let world = setup.world(seed, SpanLayout::default())?;
        let mut reg = Registry::new();
        reg.add(tempo_corpus(&world, rng::sub_seed(seed, "train"), "tempo", cfg.train_items, false)?)?;
        let val = tempo_corpus(&world, rng::sub_seed(seed, "val"), "tempo-val", cfg.val_items, true)?;
        let mut out = Vec::new();
        for mode in [PosMode::Single, PosMode::Double] {
            let mut mc = setup.model_config(cfg.layers, cfg.heads, &Modality::ALL);
            mc.aggregator.pos_mode = mode;
            out.push(run_chain(&mc, seed, &reg, &val.records, std::slice::from_ref(&cfg.stage))?.remove(0));
        }
        log::info!("seed {seed}: single R@5 {:.2}  double R@5 {:.2}", out[0].r5, out[1].r5);
        single.push(out[0].r5);
        double.push(out[1].r5);
        rd.push(out.pop().expect("double"));
        rs.push(out.pop().expect("single"));
    }
    Ok(TempoStudy {
        seeds: seeds.to_vec(),
        gain: Gap::between(&single, &double),
        single,
        double,
        reports: vec![("single".into(), aggregate_runs(&rs)?), ("double".into(), aggregate_runs(&rd)?)],
    })
}
