//! Fusion of expert sequences into one video embedding.
//!
//! Per video the encoder input is `[CLS_1 .. CLS_M, tokens...]`, where
//! `CLS_m = max_t FC_m(x_t) + bias_m` and each token is
//! `FC_m(x_t) + bias_m + positional(t)`. The `M` CLS outputs are
//! L2-normalized and concatenated, giving an `M·d_model` embedding whose
//! chunks each have unit norm.

use mmfuse_numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{Modality, VideoFeatureSet, DEFAULT_MAX_SECONDS};
use crate::nn::{normal_tensor, Linear};
use crate::transformer::Encoder;

pub const GROUP: &str = "aggregator";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PosMode {
    /// Learned table indexed by token order within its modality.
    Single,
    /// `P_beg[beg_sec] + P_end[end_sec]`.
    #[default]
    Double,
}

impl std::str::FromStr for PosMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(PosMode::Single),
            "double" => Ok(PosMode::Double),
            _ => Err(format!("unknown positional mode `{s}` (single|double)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_width: usize,
    pub max_seconds: u32,
    pub modalities: Vec<ModalitySpec>,
    pub pos_mode: PosMode,
    /// Std of the normal init for positional tables and modality biases.
    pub table_init_std: f64,
}

impl AggregatorConfig {
    /// 4 layers, 4 heads, 512-d: single-corpus setting.
    pub fn base(modalities: Vec<ModalitySpec>) -> Self {
        Self::new(512, 4, 4, modalities)
    }

    /// 9 layers, 8 heads, 512-d: mixed-corpus setting.
    pub fn large(modalities: Vec<ModalitySpec>) -> Self {
        Self::new(512, 9, 8, modalities)
    }

    /// Feed-forward width defaults to `4·d_model`.
    pub fn new(d_model: usize, num_layers: usize, num_heads: usize, modalities: Vec<ModalitySpec>) -> Self {
        Self {
            d_model,
            num_layers,
            num_heads,
            ff_width: 4 * d_model,
            max_seconds: DEFAULT_MAX_SECONDS,
            modalities,
            pos_mode: PosMode::Double,
            table_init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.max_seconds < 1 {
            return bad("max_seconds must be at least 1".into());
        }
        if self.modalities.is_empty() {
            return bad("at least one modality must be configured".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 {
                return bad(format!("{}: input dim must be positive", m.modality));
            }
            if self.modalities[..i].iter().any(|o| o.modality == m.modality) {
                return bad(format!("{} configured twice", m.modality));
            }
        }
        if self.ff_width == 0 {
            return bad("ff_width must be positive".into());
        }
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn output_dim(&self) -> usize {
        self.d_model * self.modalities.len()
    }

    pub fn slot(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|s| s.modality == m)
    }
}

/// One encoder input token, with its positional indices attached.
#[derive(Clone, Debug, PartialEq)]
pub struct InputToken {
    /// Index into the configured modality list.
    pub slot: usize,
    pub beg_sec: u32,
    pub end_sec: u32,
    /// Order within its modality, used by [`PosMode::Single`].
    pub order: usize,
    pub vector: Vec<f64>,
}

/// Encoder-ready view of a feature set. Token order here is the order of
/// the input sequence; index information travels with each token.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoInput {
    pub tokens: Vec<InputToken>,
}

impl VideoInput {
    pub fn from_features(v: &VideoFeatureSet, cfg: &AggregatorConfig) -> Result<Self> {
        let mut tokens = Vec::new();
        for seq in v.sequences() {
            if seq.is_empty() {
                continue;
            }
            let slot = cfg
                .slot(seq.modality())
                .ok_or(Error::UnconfiguredModality(seq.modality()))?;
            let expected = cfg.modalities[slot].dim;
            if seq.dim() != expected {
                return Err(Error::InputDim {
                    modality: seq.modality(),
                    expected,
                    actual: seq.dim(),
                });
            }
            for (order, t) in seq.tokens().iter().enumerate() {
                tokens.push(InputToken {
                    slot,
                    beg_sec: t.beg_sec,
                    end_sec: t.end_sec,
                    order,
                    vector: t.vector.iter().map(|&x| f64::from(x)).collect(),
                });
            }
        }
        let input = Self { tokens };
        input.check(cfg)?;
        Ok(input)
    }

    /// Reorders tokens: new position `i` holds old token `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            tokens: perm.iter().map(|&i| self.tokens[i].clone()).collect(),
        }
    }

    fn check(&self, cfg: &AggregatorConfig) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::AllModalitiesEmpty);
        }
        for t in &self.tokens {
            if t.slot >= cfg.modalities.len() {
                return Err(Error::Config(format!("token slot {} out of range", t.slot)));
            }
            if t.vector.len() != cfg.modalities[t.slot].dim {
                return Err(Error::InputDim {
                    modality: cfg.modalities[t.slot].modality,
                    expected: cfg.modalities[t.slot].dim,
                    actual: t.vector.len(),
                });
            }
            if t.beg_sec >= t.end_sec || t.end_sec > cfg.max_seconds || t.order >= cfg.max_seconds as usize {
                return Err(Error::SpanOutOfRange {
                    beg: t.beg_sec,
                    end: t.end_sec,
                    max: cfg.max_seconds,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Adapter {
    fc: Linear,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    adapters: Vec<Adapter>,
    pos_beg: ParamId,
    pos_end: ParamId,
    pos_order: ParamId,
    encoder: Encoder,
}

/// Positional index columns for a set of tokens.
pub struct Positions<'a> {
    pub beg: &'a [usize],
    pub end: &'a [usize],
    pub order: &'a [usize],
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: AggregatorConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = config.table_init_std;
        let mut adapters = Vec::new();
        for spec in &config.modalities {
            let name = format!("agg.{}", spec.modality);
            let fc = Linear::new(store, rng, &format!("{name}.fc"), GROUP, spec.dim, d)?;
            let bias = store.add(format!("{name}.bias"), GROUP, normal_tensor(rng, vec![d], std))?;
            adapters.push(Adapter { fc, bias });
        }
        let rows = config.max_seconds as usize;
        let pos_beg = store.add("agg.pos_beg", GROUP, normal_tensor(rng, vec![rows, d], std))?;
        let pos_end = store.add("agg.pos_end", GROUP, normal_tensor(rng, vec![rows + 1, d], std))?;
        let pos_order = store.add("agg.pos_order", GROUP, normal_tensor(rng, vec![rows, d], std))?;
        let encoder = Encoder::new(
            store,
            rng,
            "agg.encoder",
            GROUP,
            d,
            config.num_layers,
            config.num_heads,
            config.ff_width,
        )?;
        Ok(Self {
            config,
            adapters,
            pos_beg,
            pos_end,
            pos_order,
            encoder,
        })
    }

    pub fn pos_tables(&self) -> [ParamId; 3] {
        [self.pos_beg, self.pos_end, self.pos_order]
    }

    /// Adds the temporal encoding to `tokens` (`[n, d]`).
    pub fn add_temporal(&self, g: &mut Graph, tokens: Var, pos: &Positions, mode: PosMode) -> Result<Var> {
        let max = self.config.max_seconds as usize;
        for (&b, &e) in pos.beg.iter().zip(pos.end) {
            if b >= max || e > max || b >= e {
                return Err(Error::SpanOutOfRange {
                    beg: b as u32,
                    end: e as u32,
                    max: self.config.max_seconds,
                });
            }
        }
        match mode {
            PosMode::Double => {
                let tb = g.param(self.pos_beg);
                let te = g.param(self.pos_end);
                let pb = g.gather_rows(tb, pos.beg)?;
                let pe = g.gather_rows(te, pos.end)?;
                let x = g.add(tokens, pb)?;
                Ok(g.add(x, pe)?)
            }
            PosMode::Single => {
                if let Some(&o) = pos.order.iter().find(|&&o| o >= max) {
                    return Err(Error::SpanOutOfRange {
                        beg: o as u32,
                        end: o as u32 + 1,
                        max: self.config.max_seconds,
                    });
                }
                let t = g.param(self.pos_order);
                let p = g.gather_rows(t, pos.order)?;
                Ok(g.add(tokens, p)?)
            }
        }
    }

    /// `[B, M·d]` embeddings for a batch, using the configured mode.
    pub fn encode(&self, g: &mut Graph, videos: &[VideoInput]) -> Result<Var> {
        self.encode_padded(g, videos, 0, &[])
    }

    /// Like [`Aggregator::encode`], but appends `extra_slots` masked padding
    /// positions to every video, filled from `fill` (`extra_slots × d`
    /// values, or empty for zeros). The output must not depend on `fill`.
    pub fn encode_padded(&self, g: &mut Graph, videos: &[VideoInput], extra_slots: usize, fill: &[f64]) -> Result<Var> {
        let cfg = &self.config;
        let (d, m_count) = (cfg.d_model, cfg.modalities.len());
        if videos.is_empty() {
            return Err(Error::Invalid("empty video batch".into()));
        }
        if !fill.is_empty() && fill.len() != extra_slots * d {
            return Err(Error::Dimension {
                what: "padding fill",
                expected: extra_slots * d,
                actual: fill.len(),
            });
        }
        for v in videos {
            v.check(cfg)?;
        }
        let batch = videos.len();

        // Per modality: project all tokens of the batch at once. `rows[m]`
        // lists (video, position-in-video) for each projected row.
        let mut cls_rows = Vec::with_capacity(batch * m_count);
        let mut cls_slots = vec![usize::MAX; batch * m_count];
        let mut token_blocks = Vec::new();
        let mut token_offset = vec![vec![0usize; 0]; batch];
        for (b, v) in videos.iter().enumerate() {
            token_offset[b] = vec![usize::MAX; v.tokens.len()];
        }
        let mut pool_rows = 0;
        let mut pending_cls: Vec<(usize, usize, Var)> = Vec::new();
        for (slot, ad) in self.adapters.iter().enumerate() {
            let mut data = Vec::new();
            let mut owners = Vec::new();
            let (mut begs, mut ends, mut orders) = (Vec::new(), Vec::new(), Vec::new());
            for (b, v) in videos.iter().enumerate() {
                for (i, t) in v.tokens.iter().enumerate().filter(|(_, t)| t.slot == slot) {
                    data.extend_from_slice(&t.vector);
                    owners.push((b, i));
                    begs.push(t.beg_sec as usize);
                    ends.push(t.end_sec as usize);
                    orders.push(t.order);
                }
            }
            let bias = g.param(ad.bias);
            if owners.is_empty() {
                for b in 0..batch {
                    pending_cls.push((b, slot, bias));
                }
                continue;
            }
            let n = owners.len();
            let x = g.constant(Tensor::new(vec![n, cfg.modalities[slot].dim], data)?);
            let proj = ad.fc.forward(g, x)?;
            // CLS: max over each video's rows, which are contiguous here.
            let mut start = 0;
            for b in 0..batch {
                let len = owners[start..].iter().take_while(|(ob, _)| *ob == b).count();
                if len == 0 {
                    pending_cls.push((b, slot, bias));
                    continue;
                }
                let rows = g.slice(proj, 0, start, len)?;
                let mx = g.max_axis(rows, 0)?;
                let c = g.add(mx, bias)?;
                pending_cls.push((b, slot, c));
                start += len;
            }
            let with_bias = g.add(proj, bias)?;
            let pos = Positions {
                beg: &begs,
                end: &ends,
                order: &orders,
            };
            let tokens = self.add_temporal(g, with_bias, &pos, cfg.pos_mode)?;
            token_blocks.push(tokens);
            for (k, &(b, i)) in owners.iter().enumerate() {
                token_offset[b][i] = pool_rows + k;
            }
            pool_rows += n;
        }

        // CLS rows go after all token rows in the pool.
        pending_cls.sort_by_key(|&(b, slot, _)| (b, slot));
        for (b, slot, c) in pending_cls {
            let c = g.reshape(c, &[1, d])?;
            cls_slots[b * m_count + slot] = pool_rows + cls_rows.len();
            cls_rows.push(c);
        }
        let pad_base = pool_rows + cls_rows.len();
        let max_tokens = videos.iter().map(|v| v.tokens.len()).max().unwrap_or(0);
        let seq_len = m_count + max_tokens + extra_slots;
        // caller fill rows first, then one zero row for batch padding
        let mut pad_data = if fill.is_empty() { vec![0.0; extra_slots * d] } else { fill.to_vec() };
        pad_data.resize((extra_slots + 1) * d, 0.0);
        let pad = g.constant(Tensor::new(vec![extra_slots + 1, d], pad_data)?);

        let mut parts = token_blocks;
        parts.extend(cls_rows);
        parts.push(pad);
        let pool = g.concat(&parts, 0)?;

        let mut index = Vec::with_capacity(batch * seq_len);
        let mut mask = Vec::with_capacity(batch * seq_len);
        for (b, v) in videos.iter().enumerate() {
            for slot in 0..m_count {
                index.push(cls_slots[b * m_count + slot]);
                mask.push(true);
            }
            for i in 0..v.tokens.len() {
                index.push(token_offset[b][i]);
                mask.push(true);
            }
            let fill_rows = seq_len - m_count - v.tokens.len();
            let batch_pad = fill_rows - extra_slots;
            for p in 0..fill_rows {
                let row = if p < batch_pad { extra_slots } else { p - batch_pad };
                index.push(pad_base + row);
                mask.push(false);
            }
        }
        let x = g.gather_rows(pool, &index)?;
        let h = self.encoder.forward(g, x, batch, seq_len, &mask)?;

        let cls_index: Vec<usize> = (0..batch)
            .flat_map(|b| (0..m_count).map(move |m| b * seq_len + m))
            .collect();
        let cls = g.gather_rows(h, &cls_index)?;
        let cls = g.l2_normalize(cls)?;
        Ok(g.reshape(cls, &[batch, m_count * d])?)
    }

    /// Inference-mode embeddings, one row per video, in input order.
    /// Batches of `chunk` videos are encoded in parallel.
    pub fn embed(&self, store: &ParamStore, videos: &[VideoInput], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let chunk = chunk.max(1);
        let dim = self.config.output_dim();
        let parts: Vec<Result<Vec<Vec<f64>>>> = videos
            .par_chunks(chunk)
            .map(|c| {
                let mut g = Graph::inference(store);
                let out = self.encode(&mut g, c)?;
                Ok(g.value(out).chunks(dim).map(<[f64]>::to_vec).collect())
            })
            .collect();
        let mut rows = Vec::with_capacity(videos.len());
        for p in parts {
            rows.extend(p?);
        }
        Ok(rows)
    }
}

/// Encodes one feature set end to end.
pub fn encode_video(
    agg: &Aggregator,
    store: &ParamStore,
    features: &VideoFeatureSet,
    mode: PosMode,
) -> Result<Vec<f64>> {
    let input = VideoInput::from_features(features, &agg.config)?;
    let mut a = agg.clone();
    a.config.pos_mode = mode;
    let mut g = Graph::inference(store);
    let out = a.encode(&mut g, &[input])?;
    Ok(g.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::{ExpertDims, SpanLayout, SynthExperts};
    use crate::rng;

    fn setup(mode: PosMode) -> (ParamStore, Aggregator, SynthExperts) {
        let dims = ExpertDims {
            rgb: 6,
            motion: 5,
            audio: 4,
        };
        let modalities = Modality::ALL
            .iter()
            .map(|&m| ModalitySpec {
                modality: m,
                dim: dims.get(m),
            })
            .collect();
        let mut cfg = AggregatorConfig::new(8, 2, 2, modalities);
        cfg.ff_width = 16;
        cfg.pos_mode = mode;
        let mut store = ParamStore::new();
        let agg = Aggregator::new(&mut store, &mut rng::stream(3, "init"), cfg).unwrap();
        let ex = SynthExperts::new(5, 4, dims, SpanLayout::default(), 32);
        (store, agg, ex)
    }

    #[test]
    fn output_is_m_unit_chunks() {
        let (store, agg, ex) = setup(PosMode::Double);
        let v = ex.synth_features("v", 1, &[0.5, -0.2, 0.1, 0.9], 7, 0.3).unwrap();
        let e = encode_video(&agg, &store, &v, PosMode::Double).unwrap();
        assert_eq!(e.len(), 3 * 8);
        for c in e.chunks(8) {
            let n: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn temporal_indices_and_zero_tables() {
        let (mut store, agg, _) = setup(PosMode::Double);
        for id in agg.pos_tables() {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![2, 8], (0..16).map(f64::from).collect()).unwrap());
        let pos = Positions {
            beg: &[0, 1],
            end: &[1, 2],
            order: &[0, 1],
        };
        let y = agg.add_temporal(&mut g, x, &pos, PosMode::Double).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = Positions {
            beg: &[31],
            end: &[33],
            order: &[0],
        };
        let x1 = g.constant(Tensor::zeros(vec![1, 8]));
        assert!(matches!(
            agg.add_temporal(&mut g, x1, &bad, PosMode::Double),
            Err(Error::SpanOutOfRange { .. })
        ));
        // end == max_seconds is addressable
        let edge = Positions {
            beg: &[31],
            end: &[32],
            order: &[0],
        };
        assert!(agg.add_temporal(&mut g, x1, &edge, PosMode::Double).is_ok());
    }

    #[test]
    fn double_mode_reads_beg_and_end_rows() {
        let (mut store, agg, _) = setup(PosMode::Double);
        let [pb, pe, _] = agg.pos_tables();
        store.get_mut(pb).tensor.data_mut().fill(0.0);
        store.get_mut(pe).tensor.data_mut().fill(0.0);
        store.get_mut(pb).tensor.data_mut()[5 * 8] = 1.0;
        store.get_mut(pe).tensor.data_mut()[10 * 8 + 1] = 2.0;
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(vec![1, 8]));
        let pos = Positions {
            beg: &[5],
            end: &[10],
            order: &[0],
        };
        let y = agg.add_temporal(&mut g, x, &pos, PosMode::Double).unwrap();
        assert_eq!(&g.value(y)[..3], &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn rejects_unconfigured_or_empty() {
        let (_, agg, ex) = setup(PosMode::Double);
        let v = ex.synth_features("v", 1, &[0.5; 4], 6, 0.1).unwrap();
        let mut cfg = agg.config.clone();
        cfg.modalities.retain(|m| m.modality != Modality::Audio);
        assert!(matches!(
            VideoInput::from_features(&v, &cfg),
            Err(Error::UnconfiguredModality(Modality::Audio))
        ));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let empty = VideoInput { tokens: vec![] };
        assert!(matches!(
            agg.encode(&mut g, &[empty]),
            Err(Error::AllModalitiesEmpty)
        ));
    }

    #[test]
    fn batching_does_not_change_embeddings() {
        let (store, agg, ex) = setup(PosMode::Double);
        let vids: Vec<VideoInput> = (0..3)
            .map(|i| {
                let f = ex
                    .synth_features(format!("v{i}"), i, &[0.1 * i as f32, 0.3, -0.2, 0.5], 3 + 2 * i as u32, 0.2)
                    .unwrap();
                VideoInput::from_features(&f, &agg.config).unwrap()
            })
            .collect();
        let together = agg.embed(&store, &vids, 3).unwrap();
        let alone = agg.embed(&store, &vids, 1).unwrap();
        for (a, b) in together.iter().zip(&alone) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
