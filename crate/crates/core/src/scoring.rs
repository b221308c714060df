//! Text–video similarity and the bi-directional max-margin ranking loss.

use mmfuse_numcore::{Graph, ParamStore, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.05;
pub const FULL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            batch_size: FULL_BATCH,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be ≥ 0, got {}", self.margin)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be ≥ 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

/// Dot product of chunk-aligned embeddings, i.e. `Σ_m a_m · cos_m`.
pub fn similarity(text: &[f64], video: &[f64]) -> Result<f64> {
    if text.len() != video.len() {
        return Err(Error::Dimension {
            what: "similarity operand",
            expected: video.len(),
            actual: text.len(),
        });
    }
    Ok(text.iter().zip(video).map(|(a, b)| a * b).sum())
}

/// `s[i][j] = similarity(texts[i], videos[j])`. Texts and videos may differ
/// in count (a query set against a gallery).
pub fn similarity_matrix(texts: &[Vec<f64>], videos: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    texts
        .par_iter()
        .map(|t| videos.iter().map(|v| similarity(t, v)).collect())
        .collect()
}

/// `(1/B) Σ_i Σ_{j≠i} [relu(s_ij − s_ii + m) + relu(s_ji − s_ii + m)]`
/// on a `[B, B]` graph node.
pub fn margin_rank_loss_graph(g: &mut Graph, s: Var, margin: f64) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    let b = match shape.as_slice() {
        [r, c] if r == c && *r > 0 => *r,
        _ => {
            return Err(Error::Invalid(format!(
                "margin loss needs a square similarity matrix, got {shape:?}"
            )))
        }
    };
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("margin must be ≥ 0, got {margin}")));
    }
    let diag = g.diag(s)?;
    let diag = g.reshape(diag, &[b, 1])?;
    let to_text = g.sub(s, diag)?;
    let to_text = g.add_scalar(to_text, margin)?;
    let to_text = g.relu(to_text)?;
    let st = g.transpose(s, 0, 1)?;
    let to_video = g.sub(st, diag)?;
    let to_video = g.add_scalar(to_video, margin)?;
    let to_video = g.relu(to_video)?;
    let both = g.add(to_text, to_video)?;
    let off_diag: Vec<f64> = (0..b * b).map(|k| if k / b == k % b { 0.0 } else { 1.0 }).collect();
    let mask = g.constant(Tensor::new(vec![b, b], off_diag)?);
    let both = g.mul(both, mask)?;
    let total = g.sum(both)?;
    Ok(g.scale(total, 1.0 / b as f64)?)
}

/// Plain-value form of [`margin_rank_loss_graph`].
pub fn margin_rank_loss(s: &[Vec<f64>], margin: f64) -> Result<f64> {
    let b = s.len();
    if b == 0 || s.iter().any(|r| r.len() != b) {
        return Err(Error::Invalid("margin loss needs a non-empty square matrix".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let v = g.constant(Tensor::new(vec![b, b], s.concat())?);
    let l = margin_rank_loss_graph(&mut g, v, margin)?;
    Ok(g.scalar(l))
}

/// `[B_t, D]·[B_v, D]ᵀ` on graph nodes.
pub fn similarity_matrix_graph(g: &mut Graph, texts: Var, videos: Var) -> Result<Var> {
    let vt = g.transpose(videos, 0, 1)?;
    Ok(g.matmul(texts, vt)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_reference_values() {
        assert_eq!(margin_rank_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.05).unwrap(), 0.0);
        assert_eq!(margin_rank_loss(&[vec![0.5; 2], vec![0.5; 2]], 0.05).unwrap(), 0.1);
        let dominant = vec![vec![0.9, 0.1, 0.3], vec![0.2, 0.8, 0.7], vec![-0.1, 0.0, 0.75]];
        assert_eq!(margin_rank_loss(&dominant, 0.0).unwrap(), 0.0);
        assert_eq!(margin_rank_loss(&[vec![0.3]], 0.05).unwrap(), 0.0);
        assert!(margin_rank_loss(&[vec![0.5; 2]], 0.05).is_err());
        assert!(margin_rank_loss(&[vec![0.5; 2], vec![0.5; 2]], -1.0).is_err());
    }

    #[test]
    fn similarity_cases() {
        assert!(similarity(&[1.0], &[1.0, 0.0]).is_err());
        // unit chunks pointing the same way, weights 0.2/0.8
        let t = [0.2, 0.0, 0.0, 0.8];
        let v = [1.0, 0.0, 0.0, 1.0];
        assert!((similarity(&t, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[0.5, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let m = similarity_matrix(&[t.to_vec()], &[v.to_vec()]).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].len(), 1);
    }

    #[test]
    fn loss_config_bounds() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            margin: 0.05,
            batch_size: 1
        }
        .validate()
        .is_err());
    }
}
