//! Text side: a pluggable sentence encoder and the gated mixture projection
//! that maps a sentence embedding onto the video embedding's chunk layout.

use mmfuse_numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Linear};
use crate::rng::fnv1a64;

pub const BACKBONE_GROUP: &str = "text_backbone";
pub const PROJECTION_GROUP: &str = "projection";
pub const DEFAULT_VOCAB: usize = 8192;

/// Anything that turns a batch of strings into `[B, dim]` embeddings inside
/// a graph. Parameters it owns must live in the `text_backbone` group so
/// stage freeze sets apply to them.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, g: &mut Graph, texts: &[&str]) -> Result<Var>;
}

/// Lowercased alphanumeric runs. Non-ASCII letters count as alphanumeric,
/// everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token ids in `[0, vocab)`, or `[vocab]` (the null token) for texts
/// without any token.
pub fn token_ids(text: &str, vocab: usize) -> Vec<usize> {
    let ids: Vec<usize> = tokenize(text)
        .iter()
        .map(|t| (fnv1a64(t.as_bytes()) % vocab as u64) as usize)
        .collect();
    if ids.is_empty() {
        vec![vocab]
    } else {
        ids
    }
}

/// Hashed bag of tokens: `W_out · normalize(Σ E[token]) + b_out`.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    pub vocab: usize,
    pub dim: usize,
    /// `vocab + 1` rows; the last one is the null token.
    pub table: ParamId,
    pub out: Linear,
}

impl ToyTextEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, vocab: usize, dim: usize) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(Error::Config("vocab and text dim must be positive".into()));
        }
        let table = store.add(
            "text.embed",
            BACKBONE_GROUP,
            normal_tensor(rng, vec![vocab + 1, dim], 1.0 / (dim as f64).sqrt()),
        )?;
        let out = Linear::new(store, rng, "text.out", BACKBONE_GROUP, dim, dim)?;
        Ok(Self {
            vocab,
            dim,
            table,
            out,
        })
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &mut Graph, texts: &[&str]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::Invalid("empty text batch".into()));
        }
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(texts.len());
        for t in texts {
            let mut tid = token_ids(t, self.vocab);
            // sorted ids make the bag sum independent of word order
            tid.sort_unstable();
            spans.push((ids.len(), tid.len()));
            ids.extend(tid);
        }
        let mut segment = vec![0.0; texts.len() * ids.len()];
        for (b, &(start, len)) in spans.iter().enumerate() {
            segment[b * ids.len() + start..b * ids.len() + start + len].fill(1.0);
        }
        let table = g.param(self.table);
        let rows = g.gather_rows(table, &ids)?;
        let seg = g.constant(Tensor::new(vec![texts.len(), ids.len()], segment)?);
        let bag = g.matmul(seg, rows)?;
        let bag = g.l2_normalize(bag)?;
        Ok(self.out.forward(g, bag)?)
    }
}

/// `y1 = W1 x + b1; y2 = y1 ∘ σ(W2 y1 + b2); y2 / ‖y2‖`.
#[derive(Clone, Debug)]
pub struct GatedEmbeddingUnit {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GatedEmbeddingUnit {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, d: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), PROJECTION_GROUP, input, d)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), PROJECTION_GROUP, d, d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y1 = self.fc1.forward(g, x)?;
        let gate = self.fc2.forward(g, y1)?;
        let gate = g.sigmoid(gate)?;
        let y2 = g.mul(y1, gate)?;
        Ok(g.l2_normalize(y2)?)
    }
}

/// Per-modality GEUs plus the softmax mixture head.
#[derive(Clone, Debug)]
pub struct TextProjection {
    pub geus: Vec<GatedEmbeddingUnit>,
    pub mixture: Linear,
    pub d: usize,
}

/// Graph handles for a projected batch.
pub struct Projected {
    /// `[B, M·d]`
    pub embedding: Var,
    /// `[B, M]`, rows on the simplex.
    pub weights: Var,
}

impl TextProjection {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        modality_names: &[&str],
        input: usize,
        d: usize,
    ) -> Result<Self> {
        let geus = modality_names
            .iter()
            .map(|m| GatedEmbeddingUnit::new(store, rng, &format!("proj.geu.{m}"), input, d))
            .collect::<Result<Vec<_>>>()?;
        let mixture = Linear::new(store, rng, "proj.mixture", PROJECTION_GROUP, input, modality_names.len())?;
        Ok(Self { geus, mixture, d })
    }

    pub fn forward(&self, g: &mut Graph, temb: Var) -> Result<Projected> {
        let logits = self.mixture.forward(g, temb)?;
        let weights = g.softmax(logits, 1)?;
        let mut chunks = Vec::with_capacity(self.geus.len());
        for (m, geu) in self.geus.iter().enumerate() {
            let unit = geu.forward(g, temb)?;
            let a = g.slice(weights, 1, m, 1)?;
            chunks.push(g.mul(unit, a)?);
        }
        let embedding = g.concat(&chunks, 1)?;
        Ok(Projected { embedding, weights })
    }

    /// Plain-value projection of one sentence embedding: `(embedding, weights)`.
    pub fn project(&self, store: &ParamStore, temb: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if temb.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("text embedding holds non-finite values".into()));
        }
        let mut g = Graph::inference(store);
        let x = g.constant(Tensor::new(vec![1, temb.len()], temb.to_vec())?);
        let p = self.forward(&mut g, x)?;
        Ok((g.value(p.embedding).to_vec(), g.value(p.weights).to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn encoder() -> (ParamStore, ToyTextEncoder, TextProjection) {
        let mut s = ParamStore::new();
        let mut r = rng::stream(1, "init");
        let e = ToyTextEncoder::new(&mut s, &mut r, 64, 8).unwrap();
        let p = TextProjection::new(&mut s, &mut r, &["rgb", "motion", "audio"], 8, 8).unwrap();
        (s, e, p)
    }

    fn embed(s: &ParamStore, e: &ToyTextEncoder, text: &str) -> Vec<u64> {
        let mut g = Graph::new(s);
        let v = e.encode(&mut g, &[text]).unwrap();
        g.value(v).iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("A dog, runs!"), vec!["a", "dog", "runs"]);
        assert!(tokenize("  ..  ").is_empty());
        assert_eq!(token_ids("", 64), vec![64]);
        assert!(token_ids("x y z", 5).iter().all(|&i| i < 5));
    }

    #[test]
    fn encoder_is_case_and_order_insensitive() {
        let (s, e, _) = encoder();
        assert_eq!(embed(&s, &e, "A dog"), embed(&s, &e, "a DOG"));
        assert_eq!(embed(&s, &e, "dog cat"), embed(&s, &e, "cat dog"));
        assert_eq!(embed(&s, &e, "red dog jumps high"), embed(&s, &e, "high jumps dog red"));
        assert_ne!(embed(&s, &e, "dog"), embed(&s, &e, "cat"));
        assert_eq!(embed(&s, &e, ""), embed(&s, &e, "!!"));
    }

    #[test]
    fn projection_chunks_scale_with_weights() {
        let (s, _, p) = encoder();
        let temb: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let (emb, w) = p.project(&s, &temb).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (chunk, a) in emb.chunks(8).zip(&w) {
            let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - a).abs() <= 1e-6);
        }
        let total = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expect = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((total - expect).abs() <= 1e-9 && total <= 1.0);
        assert!(p.project(&s, &[f64::NAN; 8]).is_err());
    }

    #[test]
    fn zero_gate_reduces_to_normalized_linear() {
        let (mut s, _, p) = encoder();
        let geu = &p.geus[0];
        s.get_mut(geu.fc2.w).tensor.data_mut().fill(0.0);
        s.get_mut(geu.fc2.b).tensor.data_mut().fill(0.0);
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let mut g = Graph::new(&s);
        let xv = g.constant(Tensor::new(vec![1, 8], x.clone()).unwrap());
        let out = geu.forward(&mut g, xv).unwrap();
        let w1 = s.value(geu.fc1.w).data();
        let b1 = s.value(geu.fc1.b).data();
        let y: Vec<f64> = (0..8)
            .map(|j| b1[j] + (0..8).map(|i| x[i] * w1[i * 8 + j]).sum::<f64>())
            .collect();
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in g.value(out).iter().zip(&y) {
            assert!((a - b / n).abs() <= 1e-12);
        }
    }
}
