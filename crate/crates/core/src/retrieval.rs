//! Galleries, text-query search and retrieval metrics.
//!
//! Gallery file (little-endian): `MMGL`, version u32, count u32, dim u32,
//! checkpoint-id length u32 + bytes, config-hash u64, then `count` ids
//! (length u32 + bytes), then `count × dim` f32 values.

use std::io::{Read, Write};
use std::path::Path;

use mmfuse_numcore::ParamStore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::VideoInput;
use crate::error::{Error, Result};
use crate::experts::VideoFeatureSet;
use crate::model::Model;

pub const GALLERY_MAGIC: &[u8; 4] = b"MMGL";
pub const GALLERY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Embeddings and scores in f64.
    #[default]
    Double,
    /// Embeddings rounded to f32 and scored in f32.
    Single,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "double" => Ok(Precision::Double),
            "single" => Ok(Precision::Single),
            _ => Err(format!("unknown precision `{s}` (double|single)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub ids: Vec<String>,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub checkpoint_id: String,
    pub config_hash: u64,
    pub precision: Precision,
}

impl Gallery {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(GALLERY_MAGIC);
        buf.extend_from_slice(&GALLERY_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.checkpoint_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.checkpoint_id.as_bytes());
        buf.extend_from_slice(&self.config_hash.to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for row in &self.rows {
            for &v in row {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        crate::trainer::write_atomic(path, &buf)
    }

    /// Rows come back as f32 values; the gallery is marked single precision.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = bytes.as_slice();
        let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != GALLERY_MAGIC {
            return Err(bad("not a gallery file"));
        }
        let u32_ = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        if u32_(&mut r)? != GALLERY_VERSION {
            return Err(bad("unsupported gallery version"));
        }
        let count = u32_(&mut r)? as usize;
        let dim = u32_(&mut r)? as usize;
        let string = |r: &mut &[u8]| -> Result<String> {
            let n = u32_(r)? as usize;
            if n > r.len() {
                return Err(bad("truncated string"));
            }
            let (s, rest) = r.split_at(n);
            *r = rest;
            String::from_utf8(s.to_vec()).map_err(|_| bad("string is not UTF-8"))
        };
        let checkpoint_id = string(&mut r)?;
        let mut h = [0u8; 8];
        r.read_exact(&mut h).map_err(|_| bad("truncated"))?;
        let config_hash = u64::from_le_bytes(h);
        let ids = (0..count).map(|_| string(&mut r)).collect::<Result<Vec<_>>>()?;
        if r.len() != count * dim * 4 {
            return Err(bad("row data length does not match header"));
        }
        let rows = r
            .chunks_exact(dim.max(1) * 4)
            .take(count)
            .map(|row| {
                row.chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect()
            })
            .collect();
        Ok(Self {
            ids,
            dim,
            rows,
            checkpoint_id,
            config_hash,
            precision: Precision::Single,
        })
    }
}

/// Encodes every feature set; failures name the offending video.
pub fn build_gallery(
    model: &Model,
    store: &ParamStore,
    videos: &[VideoFeatureSet],
    checkpoint_id: &str,
    config_hash: u64,
    precision: Precision,
) -> Result<Gallery> {
    let inputs = videos
        .iter()
        .map(|v| {
            VideoInput::from_features(v, &model.config.aggregator)
                .map_err(|e| Error::Data(format!("video `{}`: {e}", v.id())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = model.embed_videos(store, &inputs)?;
    if precision == Precision::Single {
        for r in &mut rows {
            r.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
    Ok(Gallery {
        ids: videos.iter().map(|v| v.id().to_string()).collect(),
        dim: model.config.aggregator.output_dim(),
        rows,
        checkpoint_id: checkpoint_id.to_string(),
        config_hash,
        precision,
    })
}

/// Scores of one query against every gallery row.
pub fn score_all(query: &[f64], gallery: &Gallery) -> Result<Vec<f64>> {
    if query.len() != gallery.dim {
        return Err(Error::Dimension {
            what: "query embedding",
            expected: gallery.dim,
            actual: query.len(),
        });
    }
    Ok(match gallery.precision {
        Precision::Double => gallery
            .rows
            .iter()
            .map(|r| r.iter().zip(query).map(|(a, b)| a * b).sum())
            .collect(),
        Precision::Single => gallery
            .rows
            .iter()
            .map(|r| {
                f64::from(
                    r.iter()
                        .zip(query)
                        .map(|(&a, &b)| a as f32 * b as f32)
                        .sum::<f32>(),
                )
            })
            .collect(),
    })
}

/// Top-`k` `(id, score)` by descending score, ties by ascending index.
pub fn search(query: &[f64], gallery: &Gallery, k: usize) -> Result<Vec<(String, f64)>> {
    if gallery.is_empty() {
        return Err(Error::Data("gallery is empty".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let scores = score_all(query, gallery)?;
    Ok(ranking(&scores)
        .into_iter()
        .take(k)
        .map(|j| (gallery.ids[j].clone(), scores[j]))
        .collect())
}

/// Gallery indices sorted by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// `1 + |{j : s_j > s_g}| + |{j < g : s_j = s_g}|`
pub fn rank_of(scores: &[f64], g: usize) -> usize {
    let sg = scores[g];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > sg || (s == sg && j < g))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: f64,
    pub mnr: f64,
    pub queries: usize,
}

impl MetricReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Invalid("no queries".into()));
        }
        let n = ranks.len() as f64;
        let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        Ok(Self {
            r1: recall(1),
            r5: recall(5),
            r10: recall(10),
            mdr: sorted[(sorted.len() - 1) / 2] as f64,
            mnr: ranks.iter().sum::<usize>() as f64 / n,
            queries: ranks.len(),
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.r1, self.r5, self.r10, self.mdr, self.mnr]
    }

    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{label:<16} R@1 {:6.2}  R@5 {:6.2}  R@10 {:6.2}  MdR {:6.1}  MnR {:7.2}  (n={})",
            self.r1, self.r5, self.r10, self.mdr, self.mnr, self.queries
        )
    }
}

/// `sim[q][j]` scores query `q` against video `j`; `truth[q]` is the index
/// of the correct video.
pub fn compute_metrics(sim: &[Vec<f64>], truth: &[usize]) -> Result<MetricReport> {
    if sim.len() != truth.len() {
        return Err(Error::Dimension {
            what: "ground-truth entries",
            expected: sim.len(),
            actual: truth.len(),
        });
    }
    let ranks = sim
        .par_iter()
        .zip(truth)
        .map(|(row, &g)| {
            if g >= row.len() {
                Err(Error::Invalid(format!("ground-truth index {g} outside gallery of {}", row.len())))
            } else {
                Ok(rank_of(row, g))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_ranks(&ranks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean: MetricReport,
    /// Population standard deviation per metric.
    pub std: MetricReport,
    pub runs: usize,
}

impl AggregateReport {
    pub fn table_row(&self, label: &str) -> String {
        let [a, b, c, d, e] = self.mean.values();
        let [sa, sb, sc, sd, se] = self.std.values();
        format!(
            "{label:<16} R@1 {a:.2}±{sa:.2}  R@5 {b:.2}±{sb:.2}  R@10 {c:.2}±{sc:.2}  MdR {d:.1}±{sd:.1}  MnR {e:.2}±{se:.2}  ({} runs)",
            self.runs
        )
    }
}

pub fn aggregate_runs(reports: &[MetricReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or_else(|| Error::Invalid("no runs to aggregate".into()))?;
    if reports.iter().any(|r| r.queries != first.queries) {
        return Err(Error::Invalid("runs differ in query count".into()));
    }
    let n = reports.len() as f64;
    let stat = |f: fn(&MetricReport) -> f64| {
        // sorted summation keeps the result independent of run order
        let mut v: Vec<f64> = reports.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / n;
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        dev.sort_by(f64::total_cmp);
        (mean, (dev.iter().sum::<f64>() / n).sqrt())
    };
    let fields: [fn(&MetricReport) -> f64; 5] = [|r| r.r1, |r| r.r5, |r| r.r10, |r| r.mdr, |r| r.mnr];
    let s: Vec<(f64, f64)> = fields.iter().map(|&f| stat(f)).collect();
    let make = |pick: fn(&(f64, f64)) -> f64| MetricReport {
        r1: pick(&s[0]),
        r5: pick(&s[1]),
        r10: pick(&s[2]),
        mdr: pick(&s[3]),
        mnr: pick(&s[4]),
        queries: first.queries,
    };
    Ok(AggregateReport {
        mean: make(|p| p.0),
        std: make(|p| p.1),
        runs: reports.len(),
    })
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(w: &mut impl Write, items: &[T]) -> Result<()> {
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
    }
    Ok(())
}
