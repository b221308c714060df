use mmfuse::bench::DeskSetup;
use mmfuse::datamix::{synth_corpus, MediaKind, Registry, SynthCorpusSpec};
use mmfuse::experts::{Modality, SpanLayout};
use mmfuse::model::Model;
use mmfuse::numcore::ParamStore;
use mmfuse::trainer::{
    load_params, save_params, write_atomic, EpochRecord, StageConfig, StageId, TrainOptions, TrainState, Trainer,
    ValidationSet,
};
use mmfuse::{textpipe, Error};
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Fixture {
    model: Model,
    store: ParamStore,
    registry: Registry,
}

fn fixture(seed: u64, layers: usize) -> Fixture {
    let setup = DeskSetup::default();
    let world = setup.world(seed, SpanLayout::default()).unwrap();
    let mut registry = Registry::new();
    let mut noisy = SynthCorpusSpec::new("noisy", MediaKind::Video, 120);
    noisy.noisy = true;
    registry.add(synth_corpus(&world, seed, &noisy).unwrap()).unwrap();
    registry
        .add(synth_corpus(&world, seed + 1, &SynthCorpusSpec::new("clean", MediaKind::Video, 80)).unwrap())
        .unwrap();
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, setup.model_config(layers, 2, &Modality::ALL), seed).unwrap();
    Fixture { model, store, registry }
}

fn stage(id: StageId, mix: &str, batches: usize, epochs: usize) -> StageConfig {
    let mut s = StageConfig::desk(id, vec![mix.into()]);
    s.batch_size = 8;
    s.examples_per_epoch = batches * 8;
    s.num_epochs = epochs;
    s
}

#[test]
fn stage_chain_runs_exact_step_counts_and_fresh_backbone_moments() {
    let f = fixture(3, 1);
    let trainer = Trainer::new(&f.model, &f.registry, None, TrainOptions::default()).unwrap();
    let mut state = TrainState::new(f.store.clone(), 3);
    let stages = [
        stage(StageId::S0, "noisy", 3, 2),
        stage(StageId::S1, "clean", 2, 2),
        stage(StageId::S2, "clean", 5, 1),
    ];
    let mut expected = 0;
    for s in &stages[..2] {
        let r = trainer.run_stage(&mut state, s).unwrap();
        assert!(r.completed);
        assert_eq!(r.losses.len() as u64, s.total_steps());
        assert_eq!(r.epochs.len(), s.num_epochs);
        expected += s.total_steps();
        assert_eq!(state.global_step, expected);
    }
    let backbone: Vec<usize> = state
        .store
        .iter()
        .filter(|(_, p)| p.group == textpipe::BACKBONE_GROUP)
        .map(|(id, _)| id.index())
        .collect();
    assert!(!backbone.is_empty());
    assert!(backbone.iter().all(|&i| state.moments[i].is_none()));

    trainer.run_stage(&mut state, &stages[2]).unwrap();
    for &i in &backbone {
        assert_eq!(state.moments[i].as_ref().map(|m| m.t), Some(stages[2].total_steps()));
    }
    // tables unused by the configured positional mode never receive a gradient
    let agg_t: Vec<u64> = state
        .store
        .iter()
        .filter(|(_, p)| p.group == mmfuse::aggregator::GROUP)
        .filter_map(|(id, _)| state.moments[id.index()].as_ref().map(|m| m.t))
        .collect();
    assert!(agg_t.len() > 1);
    assert!(agg_t.iter().all(|&t| t == expected + stages[2].total_steps()));
}

#[test]
fn checkpoints_and_metrics_are_written_per_epoch() {
    let f = fixture(4, 1);
    let dir = tempfile::tempdir().unwrap();
    let clean = &f.registry.get("clean").unwrap().records;
    let val = ValidationSet::from_records(&clean[..20], &f.model, Default::default()).unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        metrics_path: Some(dir.path().join("metrics.jsonl")),
        ..TrainOptions::default()
    };
    let trainer = Trainer::new(&f.model, &f.registry, Some(&val), opts).unwrap();
    let mut state = TrainState::new(f.store.clone(), 4);
    let report = trainer.run_stage(&mut state, &stage(StageId::S2, "clean", 2, 3)).unwrap();
    for e in 0..3 {
        assert!(dir.path().join(format!("S2-epoch{e:03}.mmts")).exists());
    }
    let lines: Vec<EpochRecord> = std::fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.r1.is_some() && l.loss.is_finite()));
    assert_eq!(lines[2].steps, 6);

    let restored = TrainState::load(report.last_checkpoint.as_ref().unwrap(), &f.store).unwrap();
    let bits = |s: &ParamStore| s.iter().flat_map(|(_, p)| p.tensor.data().to_vec()).map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(&restored.store), bits(&state.store));
    assert_eq!(restored.global_step, state.global_step);
    assert_eq!(restored.moments, state.moments);
    assert!(std::fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn stop_at_r1_ends_stage_early() {
    let f = fixture(5, 1);
    let clean = &f.registry.get("clean").unwrap().records;
    let val = ValidationSet::from_records(&clean[..10], &f.model, Default::default()).unwrap();
    let opts = TrainOptions {
        stop_at_r1: Some(0.0),
        ..TrainOptions::default()
    };
    let trainer = Trainer::new(&f.model, &f.registry, Some(&val), opts).unwrap();
    let mut state = TrainState::new(f.store.clone(), 5);
    let r = trainer.run_stage(&mut state, &stage(StageId::S2, "clean", 2, 5)).unwrap();
    assert_eq!(r.epochs.len(), 1);
    assert!(r.completed);
}

#[test]
fn non_finite_parameters_stop_training_with_structured_error() {
    let f = fixture(6, 1);
    let trainer = Trainer::new(&f.model, &f.registry, None, TrainOptions::default()).unwrap();
    let mut store = f.store.clone();
    let id = store.iter().find(|(_, p)| p.group == mmfuse::aggregator::GROUP).unwrap().0;
    store.get_mut(id).tensor.data_mut()[0] = f64::NAN;
    let mut state = TrainState::new(store, 6);
    let e = trainer.run_stage(&mut state, &stage(StageId::S1, "clean", 2, 1)).unwrap_err();
    assert!(matches!(e, Error::NonFiniteLoss { step: 0, .. }), "{e}");
    assert_eq!(e.exit_code(), 7);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let small = fixture(7, 1);
    let large = fixture(7, 2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.mmck");
    save_params(&small.store, &p).unwrap();
    let mut target = large.store.clone();
    let e = load_params(&mut target, &p).unwrap_err();
    assert!(matches!(e, Error::Checkpoint(_)), "{e}");
    let state = TrainState::new(small.store.clone(), 7);
    state.save(&dir.path().join("s.mmts")).unwrap();
    assert!(matches!(
        TrainState::load(&dir.path().join("s.mmts"), &large.store),
        Err(Error::Checkpoint(_))
    ));

    let mut same = small.store.clone();
    load_params(&mut same, &p).unwrap();
    write_atomic(&p, b"garbage").unwrap();
    assert!(load_params(&mut same, &p).is_err());
}

#[test]
fn unknown_mix_and_bad_order_are_config_errors() {
    let f = fixture(8, 1);
    let trainer = Trainer::new(&f.model, &f.registry, None, TrainOptions::default()).unwrap();
    let mut state = TrainState::new(f.store.clone(), 8);
    assert!(trainer.run_stage(&mut state, &stage(StageId::S1, "missing", 1, 1)).is_err());
    let s2 = stage(StageId::S2, "clean", 1, 1);
    let s1 = stage(StageId::S1, "clean", 1, 1);
    assert!(mmfuse::trainer::validate_stage_order(&[s2, s1]).is_err());
}

#[test]
fn sampler_follows_weights_and_covers_records_uniformly() {
    let setup = DeskSetup::default();
    let world = setup.world(9, SpanLayout::default()).unwrap();
    let mut reg = Registry::new();
    for (i, w) in [1.0, 2.0, 5.0].into_iter().enumerate() {
        let mut d = synth_corpus(&world, i as u64, &SynthCorpusSpec::new(format!("d{i}"), MediaKind::Video, 10)).unwrap();
        d.weight = w;
        reg.add(d).unwrap();
    }
    let n = 40_000;
    let draws = reg.sampler().unwrap().draw(&mut mmfuse::rng::stream(1, "test"), n);
    let mut by_dataset = [0f64; 3];
    let mut by_record = [0f64; 10];
    for d in &draws {
        by_dataset[d.dataset] += 1.0;
        if d.dataset == 2 {
            by_record[d.record] += 1.0;
        }
    }
    let chi2 = |obs: &[f64], p: &[f64]| -> f64 {
        let t: f64 = obs.iter().sum();
        obs.iter().zip(p).map(|(o, p)| (o - p * t).powi(2) / (p * t)).sum()
    };
    let crit = |df: usize| ChiSquared::new(df as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2(&by_dataset, &[0.125, 0.25, 0.625]) < crit(2));
    assert!(chi2(&by_record, &[0.1; 10]) < crit(9));
}
