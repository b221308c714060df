//! Dataset registry, weighted sampling, exclusion lists, manifests and
//! synthetic corpora.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{self, ExpertSequence, Modality, SynthExperts, Token, VideoFeatureSet};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Video,
    Image,
}

impl MediaKind {
    pub fn name(self) -> &'static str {
        match self {
            MediaKind::Video => "video",
            MediaKind::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "video" => Some(MediaKind::Video),
            "image" => Some(MediaKind::Image),
            _ => None,
        }
    }
}

/// Sampling weights of the 13 training corpora (10 video, 3 image).
pub const FULL_MIX: [(&str, f64, MediaKind); 13] = [
    ("MSR-VTT", 140.0, MediaKind::Video),
    ("ActivityNet", 100.0, MediaKind::Video),
    ("LSMDC", 70.0, MediaKind::Video),
    ("TwitterVines", 60.0, MediaKind::Video),
    ("YouCook2", 20.0, MediaKind::Video),
    ("MSVD", 20.0, MediaKind::Video),
    ("TGIF", 102.0, MediaKind::Video),
    ("SomethingV2", 169.0, MediaKind::Video),
    ("VATEX", 260.0, MediaKind::Video),
    ("TVQA", 150.0, MediaKind::Video),
    ("COCO", 280.0, MediaKind::Image),
    ("Flicker30k", 200.0, MediaKind::Image),
    ("Conceptual Captions", 160.0, MediaKind::Image),
];

/// Where a record's expert features come from.
#[derive(Clone, Debug)]
pub enum FeatureRef {
    File(PathBuf),
    Inline(Arc<VideoFeatureSet>),
}

impl FeatureRef {
    pub fn load(&self) -> Result<Arc<VideoFeatureSet>> {
        match self {
            FeatureRef::Inline(v) => Ok(v.clone()),
            FeatureRef::File(p) => Ok(Arc::new(experts::load_expert_file(p).map_err(|e| match e {
                experts::ExpertError::Io(io) => Error::io(p, io),
                other => Error::Data(format!("{}: {other}", p.display())),
            })?)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairRecord {
    pub media_id: String,
    pub caption: String,
    pub features: FeatureRef,
    /// Extra crops of the same media, averaged in `mean` crop mode.
    pub crops: Vec<FeatureRef>,
    /// Synthetic ground truth: concept of the media and of the caption.
    pub concept: Option<usize>,
    pub caption_concept: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub name: String,
    pub weight: f64,
    pub kind: MediaKind,
    pub records: Vec<PairRecord>,
    pub noisy: bool,
}

impl DatasetSpec {
    /// Fraction of records whose caption does not describe the media.
    pub fn mismatch_rate(&self) -> Option<f64> {
        let known: Vec<bool> = self
            .records
            .iter()
            .filter_map(|r| Some(r.concept? != r.caption_concept?))
            .collect();
        (!known.is_empty()).then(|| known.iter().filter(|&&m| m).count() as f64 / known.len() as f64)
    }
}

/// One sampled example: dataset index and record index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Draw {
    pub dataset: usize,
    pub record: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    datasets: Vec<DatasetSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, spec: DatasetSpec) -> Result<usize> {
        if !(spec.weight > 0.0) || !spec.weight.is_finite() {
            return Err(Error::Data(format!("dataset `{}`: weight must be positive", spec.name)));
        }
        if self.datasets.iter().any(|d| d.name == spec.name) {
            return Err(Error::Data(format!("dataset `{}` registered twice", spec.name)));
        }
        for r in &spec.records {
            if r.caption.trim().is_empty() {
                return Err(Error::Data(format!(
                    "dataset `{}`: record `{}` has an empty caption",
                    spec.name, r.media_id
                )));
            }
        }
        self.datasets.push(spec);
        Ok(self.datasets.len() - 1)
    }

    pub fn datasets(&self) -> &[DatasetSpec] {
        &self.datasets
    }

    pub fn get(&self, name: &str) -> Option<&DatasetSpec> {
        self.datasets.iter().find(|d| d.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.datasets.iter().position(|d| d.name == name)
    }

    pub fn record(&self, d: Draw) -> (&PairRecord, &DatasetSpec) {
        let ds = &self.datasets[d.dataset];
        (&ds.records[d.record], ds)
    }

    /// Registry restricted to the named datasets, keeping their weights.
    pub fn subset(&self, names: &[String]) -> Result<Registry> {
        let mut out = Registry::new();
        for n in names {
            let d = self
                .get(n)
                .ok_or_else(|| Error::Data(format!("unknown dataset `{n}` in mix")))?;
            out.add(d.clone())?;
        }
        Ok(out)
    }

    pub fn sampler(&self) -> Result<Sampler> {
        Sampler::new(self)
    }

    /// `b` independent draws: dataset `d` with probability `w_d / Σw`, then
    /// a uniform record of `d`.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, b: usize) -> Result<Vec<Draw>> {
        Ok(self.sampler()?.draw(rng, b))
    }
}

/// Precomputed dataset distribution for repeated sampling.
#[derive(Clone, Debug)]
pub struct Sampler {
    index: WeightedIndex<f64>,
    sizes: Vec<usize>,
}

impl Sampler {
    pub fn new(reg: &Registry) -> Result<Self> {
        if reg.datasets.is_empty() {
            return Err(Error::Data("no datasets registered".into()));
        }
        if let Some(d) = reg.datasets.iter().find(|d| d.records.is_empty()) {
            return Err(Error::Data(format!("dataset `{}` has no records", d.name)));
        }
        let index = WeightedIndex::new(reg.datasets.iter().map(|d| d.weight))
            .map_err(|e| Error::Data(format!("invalid weights: {e}")))?;
        Ok(Self {
            index,
            sizes: reg.datasets.iter().map(|d| d.records.len()).collect(),
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng, b: usize) -> Vec<Draw> {
        (0..b)
            .map(|_| {
                let dataset = self.index.sample(rng);
                Draw {
                    dataset,
                    record: rng.random_range(0..self.sizes[dataset]),
                }
            })
            .collect()
    }
}

/// A single image as a one-second, rgb-only video.
pub fn image_as_video(id: impl Into<String>, vector: &[f32], rgb_dim: usize) -> Result<VideoFeatureSet> {
    if vector.len() != rgb_dim {
        return Err(Error::Dimension {
            what: "image rgb vector",
            expected: rgb_dim,
            actual: vector.len(),
        });
    }
    let seq = ExpertSequence::new(
        Modality::Rgb,
        rgb_dim,
        vec![Token {
            beg_sec: 0,
            end_sec: 1,
            vector: vector.to_vec(),
        }],
    )?;
    Ok(VideoFeatureSet::new(id, 1, vec![seq])?)
}

/// Drops records whose media id is excluded; returns the number removed.
pub fn apply_exclusion(records: Vec<PairRecord>, exclusion: &HashSet<String>) -> (Vec<PairRecord>, usize) {
    let before = records.len();
    let kept: Vec<PairRecord> = records
        .into_iter()
        .filter(|r| !exclusion.contains(&r.media_id))
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

// ---- manifests -----------------------------------------------------------

/// `media_id \t kind \t caption \t feature_path` per line. Relative paths
/// resolve against the manifest's directory. Extra tab-separated fields are
/// crop feature paths.
pub fn read_manifest(path: &Path) -> Result<Vec<(MediaKind, PairRecord)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::Data(format!("{}:{}: {msg}", path.display(), n + 1));
        if f.len() < 4 {
            return Err(bad("expected `id<TAB>kind<TAB>caption<TAB>path`"));
        }
        let kind = MediaKind::parse(f[1]).ok_or_else(|| bad("kind must be video or image"))?;
        if f[2].trim().is_empty() {
            return Err(bad("empty caption"));
        }
        let resolve = |p: &str| FeatureRef::File(base.join(p));
        out.push((
            kind,
            PairRecord {
                media_id: f[0].to_string(),
                caption: f[2].to_string(),
                features: resolve(f[3]),
                crops: f[4..].iter().map(|p| resolve(p)).collect(),
                concept: None,
                caption_concept: None,
            },
        ));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, kind: MediaKind, rows: &[(String, String, String)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (id, caption, feat) in rows {
        let caption = caption.replace(['\t', '\n'], " ");
        writeln!(w, "{id}\t{}\t{caption}\t{feat}", kind.name()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_exclusion_list(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

// ---- synthetic corpora ---------------------------------------------------

const OBJECTS: [&str; 24] = [
    "dog", "cat", "horse", "bird", "car", "bicycle", "boat", "train", "child", "woman", "man", "chef",
    "guitar", "piano", "ball", "kite", "robot", "dancer", "cow", "sheep", "truck", "plane", "fish", "monkey",
];
const ACTIONS: [&str; 12] = [
    "running", "jumping", "swimming", "sleeping", "eating", "spinning", "falling", "climbing", "sitting",
    "racing", "singing", "waving",
];
const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple"];

/// A concept is an (object, action, color) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Concept {
    pub object: usize,
    pub action: usize,
    pub color: usize,
}

/// Words, factor vectors and synthetic experts shared by all corpora of
/// one benchmark.
#[derive(Clone, Debug)]
pub struct ConceptWorld {
    pub factor_dim: usize,
    pub experts: SynthExperts,
    objects: Vec<Vec<f32>>,
    actions: Vec<Vec<f32>>,
    colors: Vec<Vec<f32>>,
}

impl ConceptWorld {
    /// `experts.concept_dim` must equal `3 · factor_dim`.
    pub fn new(seed: u64, factor_dim: usize, experts: SynthExperts) -> Result<Self> {
        if experts.concept_dim != 3 * factor_dim {
            return Err(Error::Config(format!(
                "expert concept dim {} must be 3 × factor dim {factor_dim}",
                experts.concept_dim
            )));
        }
        let mut r = rng::stream(seed, "world/factors");
        let mut table = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| {
                    (0..factor_dim)
                        .map(|_| r.sample::<f64, _>(StandardNormal) as f32)
                        .collect()
                })
                .collect()
        };
        let objects = table(OBJECTS.len());
        let actions = table(ACTIONS.len());
        let colors = table(COLORS.len());
        Ok(Self {
            factor_dim,
            experts,
            objects,
            actions,
            colors,
        })
    }

    pub const fn num_objects() -> usize {
        OBJECTS.len()
    }

    pub const fn num_actions() -> usize {
        ACTIONS.len()
    }

    pub const fn num_colors() -> usize {
        COLORS.len()
    }

    pub fn concept_id(c: Concept) -> usize {
        (c.object * ACTIONS.len() + c.action) * COLORS.len() + c.color
    }

    pub fn concept_from_id(id: usize) -> Concept {
        Concept {
            object: id / (ACTIONS.len() * COLORS.len()),
            action: (id / COLORS.len()) % ACTIONS.len(),
            color: id % COLORS.len(),
        }
    }

    pub fn concept_vector(&self, c: Concept) -> Vec<f32> {
        let mut v = self.objects[c.object].clone();
        v.extend_from_slice(&self.actions[c.action]);
        v.extend_from_slice(&self.colors[c.color]);
        v
    }

    pub fn caption(&self, c: Concept) -> String {
        format!("a {} {} {}", COLORS[c.color], OBJECTS[c.object], ACTIONS[c.action])
    }

    pub fn object_word(i: usize) -> &'static str {
        OBJECTS[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusSpec {
    pub name: String,
    pub kind: MediaKind,
    pub n_items: usize,
    pub weight: f64,
    pub noisy: bool,
    /// Fraction of captions swapped to another item's caption when noisy.
    pub swap_rate: f64,
    pub nsec_min: u32,
    pub nsec_max: u32,
    pub noise_level: f32,
    /// Restrict concepts to these objects (all objects when `None`).
    pub objects: Option<Vec<usize>>,
    /// Draw concepts without replacement (needs enough concepts).
    pub distinct: bool,
    /// Additional noisy crops per item.
    pub crops: usize,
}

impl SynthCorpusSpec {
    pub fn new(name: impl Into<String>, kind: MediaKind, n_items: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            n_items,
            weight: 1.0,
            noisy: false,
            swap_rate: 0.3,
            nsec_min: 3,
            nsec_max: 6,
            noise_level: 0.5,
            objects: None,
            distinct: false,
            crops: 0,
        }
    }
}

/// Deterministic corpus of concept-grounded caption/feature pairs.
pub fn synth_corpus(world: &ConceptWorld, seed: u64, spec: &SynthCorpusSpec) -> Result<DatasetSpec> {
    if spec.n_items == 0 {
        return Err(Error::Data(format!("corpus `{}` needs at least one item", spec.name)));
    }
    if spec.nsec_min == 0 || spec.nsec_min > spec.nsec_max {
        return Err(Error::Data(format!("corpus `{}`: bad duration range", spec.name)));
    }
    if !(0.0..=1.0).contains(&spec.swap_rate) {
        return Err(Error::Data(format!("corpus `{}`: swap rate must lie in [0, 1]", spec.name)));
    }
    let objects: Vec<usize> = spec.objects.clone().unwrap_or_else(|| (0..OBJECTS.len()).collect());
    if objects.is_empty() || objects.iter().any(|&o| o >= OBJECTS.len()) {
        return Err(Error::Data(format!("corpus `{}`: invalid object subset", spec.name)));
    }
    let mut r = rng::stream(seed, &format!("corpus/{}", spec.name));
    let pool: Vec<Concept> = objects
        .iter()
        .flat_map(|&object| {
            (0..ACTIONS.len()).flat_map(move |action| (0..COLORS.len()).map(move |color| Concept { object, action, color }))
        })
        .collect();
    let concepts: Vec<Concept> = if spec.distinct {
        if spec.n_items > pool.len() {
            return Err(Error::Data(format!(
                "corpus `{}`: {} distinct items requested, only {} concepts",
                spec.name,
                spec.n_items,
                pool.len()
            )));
        }
        let mut p = pool.clone();
        p.shuffle(&mut r);
        p.truncate(spec.n_items);
        p
    } else {
        (0..spec.n_items).map(|_| pool[r.random_range(0..pool.len())]).collect()
    };

    let mut records = Vec::with_capacity(spec.n_items);
    for (i, &c) in concepts.iter().enumerate() {
        let id = format!("{}-{i:05}", spec.name);
        let item_seed = rng::sub_seed(seed, &id);
        let cv = world.concept_vector(c);
        let make = |s: u64| -> Result<VideoFeatureSet> {
            match spec.kind {
                MediaKind::Video => {
                    let nsec = spec.nsec_min + (rng::sub_seed(item_seed, "nsec") % u64::from(spec.nsec_max - spec.nsec_min + 1)) as u32;
                    Ok(world.experts.synth_features(id.clone(), s, &cv, nsec, spec.noise_level)?)
                }
                MediaKind::Image => {
                    let v = world.experts.synth_image_vector(s, &cv, spec.noise_level);
                    image_as_video(id.clone(), &v, world.experts.dims.rgb)
                }
            }
        };
        let features = FeatureRef::Inline(Arc::new(make(item_seed)?));
        let crops = (0..spec.crops)
            .map(|k| Ok(FeatureRef::Inline(Arc::new(make(rng::sub_seed(item_seed, &format!("crop{k}")))?))))
            .collect::<Result<Vec<_>>>()?;
        records.push(PairRecord {
            media_id: id,
            caption: world.caption(c),
            features,
            crops,
            concept: Some(ConceptWorld::concept_id(c)),
            caption_concept: Some(ConceptWorld::concept_id(c)),
        });
    }
    if spec.noisy {
        swap_captions(&mut records, spec.swap_rate, &mut r);
    }
    Ok(DatasetSpec {
        name: spec.name.clone(),
        weight: spec.weight,
        kind: spec.kind,
        records,
        noisy: spec.noisy,
    })
}

/// Picks `round(rate · n)` records and rotates captions among them; each
/// picked record ends up with a caption of a different concept.
fn swap_captions(records: &mut [PairRecord], rate: f64, r: &mut ChaCha8Rng) {
    let k = (rate * records.len() as f64).round() as usize;
    if k < 2 {
        return;
    }
    let mut picked: Vec<usize> = (0..records.len()).collect();
    picked.shuffle(r);
    picked.truncate(k);
    // Sorting by concept and shifting by the largest concept group size
    // guarantees every moved caption lands on a different concept.
    picked.sort_by_key(|&i| (records[i].concept, i));
    let mut groups: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    for &i in &picked {
        *groups.entry(records[i].concept).or_default() += 1;
    }
    let largest = groups.values().copied().max().unwrap_or(1);
    let shift = if 2 * largest <= k { largest } else { k / 2 };
    let captions: Vec<(String, Option<usize>)> = picked
        .iter()
        .map(|&i| (records[i].caption.clone(), records[i].caption_concept))
        .collect();
    for (pos, &i) in picked.iter().enumerate() {
        let (c, cc) = &captions[(pos + shift) % k];
        records[i].caption = c.clone();
        records[i].caption_concept = *cc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{ExpertDims, SpanLayout};

    pub(crate) fn world() -> ConceptWorld {
        let ex = SynthExperts::new(
            2,
            12,
            ExpertDims {
                rgb: 6,
                motion: 4,
                audio: 3,
            },
            SpanLayout::default(),
            32,
        );
        ConceptWorld::new(2, 4, ex).unwrap()
    }

    fn tiny(name: &str, n: usize, w: f64) -> DatasetSpec {
        let mut s = SynthCorpusSpec::new(name, MediaKind::Image, n);
        s.weight = w;
        synth_corpus(&world(), 1, &s).unwrap()
    }

    #[test]
    fn full_mix_weights_sum() {
        let total: f64 = FULL_MIX.iter().map(|(_, w, _)| w).sum();
        assert_eq!(total, 1731.0);
        assert!((FULL_MIX[0].1 / total - 0.0809).abs() < 5e-5);
        assert_eq!(FULL_MIX.iter().filter(|(_, _, k)| *k == MediaKind::Image).count(), 3);
    }

    #[test]
    fn sampling_rules() {
        let mut reg = Registry::new();
        assert!(reg.sample_batch(&mut rng::stream(0, "s"), 4).is_err());
        reg.add(tiny("a", 5, 3.0)).unwrap();
        let draws = reg.sample_batch(&mut rng::stream(0, "s"), 100).unwrap();
        assert!(draws.iter().all(|d| d.dataset == 0 && d.record < 5));
        reg.add(tiny("b", 5, 1.0)).unwrap();
        assert!(reg.add(tiny("b", 5, 1.0)).is_err());
        let again = reg.sample_batch(&mut rng::stream(9, "s"), 64).unwrap();
        assert_eq!(again, reg.sample_batch(&mut rng::stream(9, "s"), 64).unwrap());
        let draws = reg.sample_batch(&mut rng::stream(4, "s"), 100_000).unwrap();
        let a = draws.iter().filter(|d| d.dataset == 0).count() as f64 / 1e5;
        assert!((a - 0.75).abs() < 0.01);
        let mut bad = tiny("c", 1, 1.0);
        bad.weight = 0.0;
        assert!(reg.add(bad).is_err());
    }

    #[test]
    fn image_video_shape() {
        let v = image_as_video("img", &[0.1; 6], 6).unwrap();
        assert_eq!(v.nsec(), 1);
        assert_eq!(v.get(Modality::Rgb).unwrap().len(), 1);
        assert!(v.get(Modality::Audio).is_none());
        assert!(image_as_video("img", &[0.1; 5], 6).is_err());
    }

    #[test]
    fn exclusion_counts() {
        let recs = tiny("a", 10, 1.0).records;
        let (same, n) = apply_exclusion(recs.clone(), &HashSet::new());
        assert_eq!((same.len(), n), (10, 0));
        let ex: HashSet<String> = recs[..3].iter().map(|r| r.media_id.clone()).chain(["nope".to_string()]).collect();
        let (kept, n) = apply_exclusion(recs.clone(), &ex);
        assert_eq!((kept.len(), n), (7, 3));
        let all: HashSet<String> = recs.iter().map(|r| r.media_id.clone()).collect();
        let (empty, _) = apply_exclusion(recs, &all);
        assert!(empty.is_empty());
    }

    #[test]
    fn noisy_captions() {
        let w = world();
        let mut spec = SynthCorpusSpec::new("n", MediaKind::Image, 2000);
        assert_eq!(synth_corpus(&w, 3, &spec).unwrap().mismatch_rate(), Some(0.0));
        spec.noisy = true;
        spec.swap_rate = 1.0;
        assert_eq!(synth_corpus(&w, 3, &spec).unwrap().mismatch_rate(), Some(1.0));
        spec.swap_rate = 0.3;
        let rate = synth_corpus(&w, 3, &spec).unwrap().mismatch_rate().unwrap();
        assert!((rate - 0.3).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write_manifest(
            &p,
            MediaKind::Video,
            &[("v1".into(), "a dog\trunning".into(), "f/v1.mmfx".into())],
        )
        .unwrap();
        let rows = read_manifest(&p).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].1.caption, "a dog running");
        assert!(matches!(&rows[0].1.features, FeatureRef::File(f) if f.ends_with("f/v1.mmfx")));
        std::fs::write(&p, "v1\tvideo\t\tx\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
