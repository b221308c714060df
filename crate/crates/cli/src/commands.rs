use std::io::Write;
use std::path::{Path, PathBuf};

use mmfuse::aggregator::PosMode;
use mmfuse::bench::DeskSetup;
use mmfuse::config::{DatasetEntry, ModelSection, RunConfig, StageEntry};
use mmfuse::datamix::{
    read_manifest, synth_corpus, write_manifest, DatasetSpec, FeatureRef, MediaKind, PairRecord,
    SynthCorpusSpec,
};
use mmfuse::experts::{save_expert_file, Modality, SpanLayout};
use mmfuse::model::Model;
use mmfuse::numcore::ParamStore;
use mmfuse::retrieval::{build_gallery, compute_metrics, search as rank, Gallery, Precision};
use mmfuse::scoring::similarity_matrix;
use mmfuse::trainer::{
    load_params, record_features, save_params, CropMode, StageId, TrainOptions, TrainState, Trainer, ValidationSet,
};
use mmfuse::{rng, Error, Result};

use crate::{EvalArgs, GalleryArgs, GenArgs, Overrides, Preset, SearchArgs, TrainArgs};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_corpus(dir: &Path, spec: &DatasetSpec) -> Result<PathBuf> {
    let feat_dir = dir.join("features").join(&spec.name);
    create_dir(&feat_dir)?;
    let mut rows = Vec::with_capacity(spec.records.len());
    for r in &spec.records {
        let FeatureRef::Inline(v) = &r.features else {
            return Err(Error::Invalid("synthetic records carry inline features".into()));
        };
        let rel = format!("features/{}/{}.mmfx", spec.name, r.media_id);
        save_expert_file(dir.join(&rel), v)?;
        rows.push((r.media_id.clone(), r.caption.clone(), rel));
    }
    let manifest = dir.join(format!("{}.tsv", spec.name));
    write_manifest(&manifest, spec.kind, &rows)?;
    Ok(manifest)
}

fn model_section(setup: &DeskSetup, layers: usize, heads: usize) -> ModelSection {
    ModelSection {
        d_model: setup.d_model,
        num_layers: layers,
        num_heads: heads,
        ff_width: Some(setup.ff_width),
        max_seconds: setup.max_seconds,
        vocab_size: setup.vocab_size,
        text_dim: None,
        table_init_std: 0.02,
        modalities: Modality::ALL.to_vec(),
        dims: setup.dims,
    }
}

fn dataset(name: &str, weight: f64, noisy: bool) -> DatasetEntry {
    DatasetEntry {
        name: name.into(),
        weight,
        manifest: format!("{name}.tsv").into(),
        noisy,
    }
}

fn stage(id: StageId, mix: &[&str]) -> StageEntry {
    StageEntry {
        id,
        preset: Some("desk".into()),
        mix: mix.iter().map(|s| s.to_string()).collect(),
        examples_per_epoch: None,
        num_epochs: None,
        lr: None,
        gamma: None,
        freeze: None,
        batch_size: None,
        margin: None,
    }
}

pub fn gen(a: &GenArgs) -> Result<()> {
    create_dir(&a.out)?;
    let setup = DeskSetup::default();
    let data_seed = rng::sub_seed(a.seed, "data");
    let world = setup.world(data_seed, SpanLayout::default())?;
    let corpus = |spec: &SynthCorpusSpec| -> Result<()> {
        let c = synth_corpus(&world, rng::sub_seed(data_seed, &spec.name), spec)?;
        let m = write_corpus(&a.out, &c)?;
        log::info!("wrote {} records to {}", c.records.len(), m.display());
        Ok(())
    };
    let cfg = match a.preset {
        Preset::Desk => {
            let mut noisy = SynthCorpusSpec::new("noisy", MediaKind::Video, a.noisy_items);
            noisy.noisy = true;
            corpus(&noisy)?;
            corpus(&SynthCorpusSpec::new("clean", MediaKind::Video, a.clean_items))?;
            corpus(&SynthCorpusSpec::new("images", MediaKind::Image, a.image_items))?;
            let mut val = SynthCorpusSpec::new("val", MediaKind::Video, a.val_items);
            val.distinct = true;
            corpus(&val)?;
            RunConfig {
                seed: a.seed,
                output_dir: "run".into(),
                precision: Precision::Double,
                pos_mode: PosMode::Double,
                crop: CropMode::Center,
                exclusion: None,
                validation: Some("val.tsv".into()),
                model: model_section(&setup, 2, 4),
                datasets: vec![
                    dataset("noisy", 1.0, true),
                    dataset("clean", 2.0, false),
                    dataset("images", 1.0, false),
                ],
                stages: vec![
                    stage(StageId::S0, &["noisy"]),
                    stage(StageId::S1, &["clean", "images"]),
                    stage(StageId::S2, &["clean", "images"]),
                ],
            }
        }
        Preset::Overfit => {
            let mut spec = SynthCorpusSpec::new("overfit", MediaKind::Video, 64);
            spec.distinct = true;
            corpus(&spec)?;
            let mut st = stage(StageId::S2, &["overfit"]);
            st.examples_per_epoch = Some(3200);
            st.num_epochs = Some(3);
            st.lr = Some(1e-3);
            st.gamma = Some(1.0);
            RunConfig {
                seed: a.seed,
                output_dir: "run".into(),
                precision: Precision::Double,
                pos_mode: PosMode::Double,
                crop: CropMode::Center,
                exclusion: None,
                validation: Some("overfit.tsv".into()),
                model: model_section(&setup, 4, 4),
                datasets: vec![dataset("overfit", 1.0, false)],
                stages: vec![st],
            }
        }
    };
    let path = a.out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    println!("{}", path.display());
    Ok(())
}

fn apply(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(p) = o.pos_mode {
        cfg.pos_mode = p;
    }
    if let Some(c) = o.crop {
        cfg.crop = c;
    }
    if let Some(p) = o.precision {
        cfg.precision = p;
    }
}

/// Effective config next to a checkpoint: same directory or its parent.
fn find_config(explicit: Option<&Path>, checkpoint: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let dir = checkpoint
        .and_then(Path::parent)
        .ok_or_else(|| Error::Config("--config is required without --checkpoint".into()))?;
    for d in [Some(dir), dir.parent()].into_iter().flatten() {
        let p = d.join(EFFECTIVE_CONFIG);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "no {EFFECTIVE_CONFIG} near {}; pass --config",
        dir.display()
    )))
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model_config(), cfg.seed)?;
    if let Some(p) = checkpoint {
        load_params(&mut store, p)?;
    }
    Ok((model, store))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    apply(&mut cfg, &a.overrides);
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let stages = cfg.stage_configs()?;
    let out = cfg.output_dir.clone();
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let eff = out.join(EFFECTIVE_CONFIG);
    std::fs::write(&eff, cfg.effective()?.to_toml()?).map_err(|e| Error::io(&eff, e))?;

    let (registry, excluded) = cfg.load_registry()?;
    if excluded > 0 {
        log::info!("excluded {excluded} records listed in the exclusion file");
    }
    let (model, store) = load_model(&cfg, None)?;
    let val_records: Option<Vec<PairRecord>> = match &cfg.validation {
        Some(p) => Some(read_manifest(p)?.into_iter().map(|r| r.1).collect()),
        None => None,
    };
    let val = match &val_records {
        Some(r) => Some(ValidationSet::from_records(r, &model, cfg.crop)?),
        None => None,
    };
    let mut state = match &a.checkpoint {
        Some(p) => TrainState::load(p, &store)?,
        None => TrainState::new(store, cfg.seed),
    };
    let metrics = out.join("metrics.jsonl");
    if a.checkpoint.is_none() && metrics.exists() {
        std::fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    let opts = TrainOptions {
        crop: cfg.crop,
        checkpoint_dir: Some(ckpt_dir),
        metrics_path: Some(metrics),
        ..TrainOptions::default()
    };
    let trainer = Trainer::new(&model, &registry, val.as_ref(), opts)?;
    for st in &stages {
        let skip = match state.stage {
            Some(done) if done > st.id => true,
            Some(done) if done == st.id => state.stage_done,
            _ => false,
        };
        if skip {
            log::info!("stage {} already complete, skipping", st.id);
            continue;
        }
        let report = trainer.run_stage(&mut state, st)?;
        for e in &report.epochs {
            println!(
                "{} epoch {:>3}  lr {:<10e} loss {:.5}  R@1 {}  R@5 {}  MdR {}",
                e.stage,
                e.epoch,
                e.lr,
                e.loss,
                fmt_opt(e.r1),
                fmt_opt(e.r5),
                fmt_opt(e.mdr)
            );
        }
    }
    state.save(&out.join("train_state.mmts"))?;
    save_params(&state.store, &out.join("final.mmck"))?;
    println!("{}", out.join("final.mmck").display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// Unique media of a manifest (first occurrence order) and, per caption,
/// the index of its media.
fn queries_and_truth(records: &[PairRecord]) -> (Vec<&PairRecord>, Vec<usize>) {
    let mut media: Vec<&PairRecord> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let truth = records
        .iter()
        .map(|r| {
            *index.entry(r.media_id.clone()).or_insert_with(|| {
                media.push(r);
                media.len() - 1
            })
        })
        .collect();
    (media, truth)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg_path = find_config(a.config.as_deref(), a.checkpoint.as_deref())?;
    let mut cfg = RunConfig::load(&cfg_path)?;
    apply(&mut cfg, &a.overrides);
    let manifest = a
        .manifest
        .clone()
        .or_else(|| cfg.validation.clone())
        .ok_or_else(|| Error::Config("no --manifest and no validation manifest in config".into()))?;
    let records: Vec<PairRecord> = read_manifest(&manifest)?.into_iter().map(|r| r.1).collect();
    let (model, store) = load_model(&cfg, a.checkpoint.as_deref())?;
    let (media, truth) = queries_and_truth(&records);
    let media: Vec<PairRecord> = media.into_iter().cloned().collect();
    let val = ValidationSet::from_records(&media, &model, cfg.crop)?;
    let texts: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    let t = model.embed_texts(&store, &texts)?;
    let v = model.embed_videos(&store, &val.videos)?;
    let report = compute_metrics(&similarity_matrix(&t, &v)?, &truth)?;
    println!("{}", report.table_row(&manifest.file_name().unwrap_or_default().to_string_lossy()));
    Ok(())
}

fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!(
        "{}:{:016x}",
        path.file_name().unwrap_or_default().to_string_lossy(),
        rng::fnv1a64(&bytes)
    ))
}

pub fn gallery(a: &GalleryArgs) -> Result<()> {
    let cfg_path = find_config(a.config.as_deref(), Some(&a.checkpoint))?;
    let mut cfg = RunConfig::load(&cfg_path)?;
    apply(&mut cfg, &a.overrides);
    let records: Vec<PairRecord> = read_manifest(&a.manifest)?.into_iter().map(|r| r.1).collect();
    let (media, _) = queries_and_truth(&records);
    let feats = media
        .iter()
        .map(|r| Ok(record_features(r, cfg.crop)?.with_id(r.media_id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let (model, store) = load_model(&cfg, Some(&a.checkpoint))?;
    let g = build_gallery(&model, &store, &feats, &checkpoint_id(&a.checkpoint)?, cfg.hash()?, cfg.precision)?;
    g.save(&a.out)?;
    println!("{} videos -> {}", g.len(), a.out.display());
    Ok(())
}

pub fn search(a: &SearchArgs) -> Result<()> {
    let cfg_path = find_config(a.config.as_deref(), Some(&a.checkpoint))?;
    let cfg = RunConfig::load(&cfg_path)?;
    let gallery = Gallery::load(&a.gallery)?;
    let id = checkpoint_id(&a.checkpoint)?;
    if gallery.checkpoint_id != id {
        return Err(Error::Checkpoint(format!(
            "gallery was built from {}, not {id}",
            gallery.checkpoint_id
        )));
    }
    if a.k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let text = std::fs::read_to_string(&a.queries).map_err(|e| Error::io(&a.queries, e))?;
    let queries: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let (model, store) = load_model(&cfg, Some(&a.checkpoint))?;
    let emb = model.embed_texts(&store, &queries)?;
    let stdout = std::io::stdout();
    let mut w = std::io::BufWriter::new(stdout.lock());
    let io = |e| Error::io("<stdout>", e);
    for (q, e) in queries.iter().zip(&emb) {
        writeln!(w, "query: {q}").map_err(io)?;
        for (i, (vid, score)) in rank(e, &gallery, a.k)?.into_iter().enumerate() {
            writeln!(w, "{:>4}  {vid}  {score:.6}", i + 1).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
