//! The full retrieval model: text encoder, text projection and aggregator,
//! all registered in one [`ParamStore`].

use mmfuse_numcore::{Graph, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, AggregatorConfig, VideoInput};
use crate::error::{Error, Result};
use crate::rng;
use crate::scoring::{margin_rank_loss_graph, similarity_matrix_graph};
use crate::textpipe::{Projected, TextEncoder, TextProjection, ToyTextEncoder, DEFAULT_VOCAB};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub aggregator: AggregatorConfig,
    pub vocab_size: usize,
    /// Text encoder output width; defaults to `d_model`.
    pub text_dim: usize,
}

impl ModelConfig {
    pub fn new(aggregator: AggregatorConfig) -> Self {
        let text_dim = aggregator.d_model;
        Self {
            aggregator,
            vocab_size: DEFAULT_VOCAB,
            text_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.aggregator.validate()?;
        if self.vocab_size == 0 || self.text_dim == 0 {
            return Err(Error::Config("vocab_size and text_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub text: ToyTextEncoder,
    pub projection: TextProjection,
    pub aggregator: Aggregator,
}

impl Model {
    /// Builds the model and registers freshly initialized parameters.
    pub fn new(store: &mut ParamStore, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.aggregator.d_model;
        let text = ToyTextEncoder::new(store, &mut rng::stream(seed, "init/text"), config.vocab_size, config.text_dim)?;
        let names: Vec<&str> = config.aggregator.modalities.iter().map(|m| m.modality.name()).collect();
        let projection = TextProjection::new(store, &mut rng::stream(seed, "init/projection"), &names, config.text_dim, d)?;
        let aggregator = Aggregator::new(store, &mut rng::stream(seed, "init/aggregator"), config.aggregator.clone())?;
        Ok(Self {
            config,
            text,
            projection,
            aggregator,
        })
    }

    pub fn embed_text_graph(&self, g: &mut Graph, texts: &[&str]) -> Result<Projected> {
        let temb = self.text.encode(g, texts)?;
        self.projection.forward(g, temb)
    }

    /// Bi-directional margin loss for `B` aligned caption/video pairs.
    pub fn batch_loss(&self, g: &mut Graph, texts: &[&str], videos: &[VideoInput], margin: f64) -> Result<Var> {
        if texts.len() != videos.len() {
            return Err(Error::Dimension {
                what: "text/video batch",
                expected: videos.len(),
                actual: texts.len(),
            });
        }
        let t = self.embed_text_graph(g, texts)?;
        let v = self.aggregator.encode(g, videos)?;
        let s = similarity_matrix_graph(g, t.embedding, v)?;
        margin_rank_loss_graph(g, s, margin)
    }

    /// Projected text embeddings, one row per text.
    pub fn embed_texts(&self, store: &ParamStore, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let dim = self.config.aggregator.output_dim();
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(256) {
            let mut g = Graph::inference(store);
            let p = self.embed_text_graph(&mut g, chunk)?;
            out.extend(g.value(p.embedding).chunks(dim).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Mixture weights per text.
    pub fn mixture_weights(&self, store: &ParamStore, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let m = self.config.aggregator.num_modalities();
        let mut g = Graph::inference(store);
        let p = self.embed_text_graph(&mut g, texts)?;
        Ok(g.value(p.weights).chunks(m).map(<[f64]>::to_vec).collect())
    }

    pub fn embed_videos(&self, store: &ParamStore, videos: &[VideoInput]) -> Result<Vec<Vec<f64>>> {
        self.aggregator.embed(store, videos, 32)
    }
}
