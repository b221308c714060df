//! Frozen per-modality expert features: types, file formats, synthesis and
//! crop averaging.
//!
//! A [`VideoFeatureSet`] carries one [`ExpertSequence`] per modality. Each
//! token is annotated with a whole-second span `[beg_sec, end_sec)`. All
//! invariants are checked at construction and the set is immutable after.
//!
//! Binary expert file (little-endian):
//!
//! ```text
//! "MMFX" | version u32 | id_len u32 | id bytes | nsec u32 | n_modalities u8
//! per modality: tag u8 (0=rgb, 1=motion, 2=audio) | dim u32 | n_tokens u32
//! per token:    beg u32 | end u32 | dim × f32
//! ```
//!
//! The text mirror holds the same content line by line, see [`write_text`].

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const MAGIC: &[u8; 4] = b"MMFX";
pub const FORMAT_VERSION: u32 = 1;
pub const TEXT_HEADER: &str = "MMFX-TEXT 1";
pub const DEFAULT_MAX_SECONDS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Motion,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Motion, Modality::Audio];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Rgb => 0,
            Modality::Motion => 1,
            Modality::Audio => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Rgb),
            1 => Some(Modality::Motion),
            2 => Some(Modality::Audio),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Motion => "motion",
            Modality::Audio => "audio",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("{modality}: token {token} has dim {actual}, expected {expected}")]
    DimMismatch {
        modality: Modality,
        token: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{modality}: token {token} span [{beg}, {end}) is invalid: {reason}")]
    SpanViolation {
        modality: Modality,
        token: usize,
        beg: u32,
        end: u32,
        reason: &'static str,
    },
    #[error("{modality}: token {token} holds a non-finite value")]
    NonFinite { modality: Modality, token: usize },
    #[error("modality {0} appears more than once")]
    DuplicateModality(Modality),
    #[error("no modality carries any token")]
    NoModality,
    #[error("nsec {nsec} exceeds max_seconds {max}")]
    TooLong { nsec: u32, max: u32 },
    #[error("crop structure mismatch: {0}")]
    CropMismatch(String),
    #[error("text format, line {line}: {msg}")]
    Text { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ExpertError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub beg_sec: u32,
    pub end_sec: u32,
    pub vector: Vec<f32>,
}

/// Time-stamped feature sequence from one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSequence {
    modality: Modality,
    dim: usize,
    tokens: Vec<Token>,
}

impl ExpertSequence {
    /// Validates dims, finiteness, `beg < end`, ordering and non-overlap.
    pub fn new(modality: Modality, dim: usize, tokens: Vec<Token>) -> Result<Self> {
        if dim == 0 {
            return Err(ExpertError::MalformedHeader(format!("{modality}: dim must be positive")));
        }
        let mut prev_end = 0;
        for (i, t) in tokens.iter().enumerate() {
            if t.vector.len() != dim {
                return Err(ExpertError::DimMismatch {
                    modality,
                    token: i,
                    expected: dim,
                    actual: t.vector.len(),
                });
            }
            if t.vector.iter().any(|v| !v.is_finite()) {
                return Err(ExpertError::NonFinite { modality, token: i });
            }
            let violation = |reason| ExpertError::SpanViolation {
                modality,
                token: i,
                beg: t.beg_sec,
                end: t.end_sec,
                reason,
            };
            if t.end_sec <= t.beg_sec {
                return Err(violation("end must exceed beg"));
            }
            if i > 0 && t.beg_sec < prev_end {
                return Err(violation("tokens must be sorted and non-overlapping"));
            }
            prev_end = t.end_sec;
        }
        Ok(Self {
            modality,
            dim,
            tokens,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_end(&self) -> u32 {
        self.tokens.last().map_or(0, |t| t.end_sec)
    }
}

/// All expert sequences of one video (or image).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatureSet {
    id: String,
    nsec: u32,
    sequences: Vec<ExpertSequence>,
}

impl VideoFeatureSet {
    pub fn new(id: impl Into<String>, nsec: u32, sequences: Vec<ExpertSequence>) -> Result<Self> {
        let mut sequences = sequences;
        sequences.sort_by_key(|s| s.modality);
        for w in sequences.windows(2) {
            if w[0].modality == w[1].modality {
                return Err(ExpertError::DuplicateModality(w[0].modality));
            }
        }
        if sequences.iter().all(ExpertSequence::is_empty) {
            return Err(ExpertError::NoModality);
        }
        for s in &sequences {
            if let Some((i, t)) = s.tokens.iter().enumerate().find(|(_, t)| t.end_sec > nsec) {
                return Err(ExpertError::SpanViolation {
                    modality: s.modality,
                    token: i,
                    beg: t.beg_sec,
                    end: t.end_sec,
                    reason: "span exceeds video duration",
                });
            }
        }
        Ok(Self {
            id: id.into(),
            nsec,
            sequences,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn nsec(&self) -> u32 {
        self.nsec
    }

    pub fn sequences(&self) -> &[ExpertSequence] {
        &self.sequences
    }

    /// The sequence for `m`, if present and non-empty.
    pub fn get(&self, m: Modality) -> Option<&ExpertSequence> {
        self.sequences
            .iter()
            .find(|s| s.modality == m && !s.is_empty())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Drops tokens ending after `max_seconds`. Returns the number dropped,
    /// which is also added to [`truncated_tokens`].
    pub fn truncate_to(&self, max_seconds: u32) -> Result<(Self, usize)> {
        if self.nsec <= max_seconds {
            return Ok((self.clone(), 0));
        }
        let mut dropped = 0;
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let tokens: Vec<Token> = s
                    .tokens
                    .iter()
                    .filter(|t| t.end_sec <= max_seconds)
                    .cloned()
                    .collect();
                dropped += s.tokens.len() - tokens.len();
                ExpertSequence {
                    modality: s.modality,
                    dim: s.dim,
                    tokens,
                }
            })
            .collect();
        if dropped > 0 {
            TRUNCATED.fetch_add(dropped, Ordering::Relaxed);
            log::warn!(
                "{}: dropped {dropped} tokens beyond {max_seconds}s (duration {}s)",
                self.id,
                self.nsec
            );
        }
        Ok((Self::new(self.id.clone(), max_seconds, sequences)?, dropped))
    }
}

static TRUNCATED: AtomicUsize = AtomicUsize::new(0);

/// Process-wide count of tokens dropped by [`VideoFeatureSet::truncate_to`].
pub fn truncated_tokens() -> usize {
    TRUNCATED.load(Ordering::Relaxed)
}

// ---- binary format -------------------------------------------------------

pub fn write_binary<W: Write>(w: &mut W, v: &VideoFeatureSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(v.id.len() as u32).to_le_bytes())?;
    w.write_all(v.id.as_bytes())?;
    w.write_all(&v.nsec.to_le_bytes())?;
    w.write_all(&[v.sequences.len() as u8])?;
    for s in &v.sequences {
        w.write_all(&[s.modality.tag()])?;
        w.write_all(&(s.dim as u32).to_le_bytes())?;
        w.write_all(&(s.tokens.len() as u32).to_le_bytes())?;
        for t in &s.tokens {
            w.write_all(&t.beg_sec.to_le_bytes())?;
            w.write_all(&t.end_sec.to_le_bytes())?;
            for x in &t.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| ExpertError::MalformedHeader(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_binary<R: Read>(r: &mut R) -> Result<VideoFeatureSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| ExpertError::MalformedHeader("file too short".into()))?;
    if &magic != MAGIC {
        return Err(ExpertError::MalformedHeader(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(ExpertError::MalformedHeader(format!("unsupported version {version}")));
    }
    let id_len = read_u32(r, "id length")? as usize;
    if id_len > 1 << 20 {
        return Err(ExpertError::MalformedHeader(format!("id length {id_len}")));
    }
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)
        .map_err(|_| ExpertError::MalformedHeader("truncated id".into()))?;
    let id = String::from_utf8(id).map_err(|_| ExpertError::MalformedHeader("id is not UTF-8".into()))?;
    let nsec = read_u32(r, "nsec")?;
    let mut count = [0u8; 1];
    r.read_exact(&mut count)
        .map_err(|_| ExpertError::MalformedHeader("missing modality count".into()))?;
    let mut sequences = Vec::with_capacity(count[0] as usize);
    for _ in 0..count[0] {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)
            .map_err(|_| ExpertError::MalformedHeader("missing modality tag".into()))?;
        let modality = Modality::from_tag(tag[0])
            .ok_or_else(|| ExpertError::MalformedHeader(format!("unknown modality tag {}", tag[0])))?;
        let dim = read_u32(r, "dim")? as usize;
        let n = read_u32(r, "token count")? as usize;
        if dim == 0 || dim > 1 << 20 || n > 1 << 24 {
            return Err(ExpertError::MalformedHeader(format!(
                "{modality}: implausible dim {dim} / token count {n}"
            )));
        }
        let mut tokens = Vec::with_capacity(n);
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..n {
            let beg_sec = read_u32(r, "token beg")?;
            let end_sec = read_u32(r, "token end")?;
            r.read_exact(&mut buf)
                .map_err(|_| ExpertError::MalformedHeader("truncated token vector".into()))?;
            let vector = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tokens.push(Token {
                beg_sec,
                end_sec,
                vector,
            });
        }
        sequences.push(ExpertSequence::new(modality, dim, tokens)?);
    }
    VideoFeatureSet::new(id, nsec, sequences)
}

/// Loads a binary expert file, or the text mirror when the file starts
/// with the text header.
pub fn load_expert_file(path: impl AsRef<Path>) -> Result<VideoFeatureSet> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(TEXT_HEADER.as_bytes()) {
        read_text(&mut bytes.as_slice())
    } else {
        read_binary(&mut bytes.as_slice())
    }
}

pub fn save_expert_file(path: impl AsRef<Path>, v: &VideoFeatureSet) -> Result<()> {
    let mut buf = Vec::new();
    write_binary(&mut buf, v)?;
    std::fs::write(path, buf)?;
    Ok(())
}

// ---- text mirror ---------------------------------------------------------

/// ```text
/// MMFX-TEXT 1
/// id <video id>
/// nsec <n>
/// modality <name> <dim> <n_tokens>
/// <beg> <end> <v_1> ... <v_dim>
/// ```
pub fn write_text<W: Write>(w: &mut W, v: &VideoFeatureSet) -> Result<()> {
    writeln!(w, "{TEXT_HEADER}")?;
    writeln!(w, "id {}", v.id)?;
    writeln!(w, "nsec {}", v.nsec)?;
    for s in &v.sequences {
        writeln!(w, "modality {} {} {}", s.modality, s.dim, s.tokens.len())?;
        for t in &s.tokens {
            write!(w, "{} {}", t.beg_sec, t.end_sec)?;
            for x in &t.vector {
                write!(w, " {x:?}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn read_text<R: BufRead>(r: &mut R) -> Result<VideoFeatureSet> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let err = |line: usize, msg: &str| ExpertError::Text {
        line: line + 1,
        msg: msg.to_string(),
    };
    let mut it = lines.iter().enumerate();
    match it.next() {
        Some((_, l)) if l == TEXT_HEADER => {}
        _ => return Err(ExpertError::MalformedHeader("missing text header".into())),
    }
    let (ln, l) = it.next().ok_or_else(|| err(1, "missing id line"))?;
    let id = l.strip_prefix("id ").ok_or_else(|| err(ln, "expected `id <id>`"))?.to_string();
    let (ln, l) = it.next().ok_or_else(|| err(2, "missing nsec line"))?;
    let nsec: u32 = l
        .strip_prefix("nsec ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err(ln, "expected `nsec <n>`"))?;
    let mut sequences = Vec::new();
    while let Some((ln, l)) = it.next() {
        if l.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        let (modality, dim, n) = match parts.as_slice() {
            ["modality", m, d, n] => (
                Modality::parse(m).ok_or_else(|| err(ln, "unknown modality"))?,
                d.parse::<usize>().map_err(|_| err(ln, "bad dim"))?,
                n.parse::<usize>().map_err(|_| err(ln, "bad token count"))?,
            ),
            _ => return Err(err(ln, "expected `modality <name> <dim> <count>`")),
        };
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, l) = it.next().ok_or_else(|| err(lines.len(), "missing token line"))?;
            let mut f = l.split_whitespace();
            let beg_sec = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| err(ln, "bad beg"))?;
            let end_sec = f.next().and_then(|s| s.parse().ok()).ok_or_else(|| err(ln, "bad end"))?;
            let vector = f
                .map(|s| s.parse::<f32>().map_err(|_| err(ln, "bad value")))
                .collect::<Result<Vec<_>>>()?;
            tokens.push(Token {
                beg_sec,
                end_sec,
                vector,
            });
        }
        sequences.push(ExpertSequence::new(modality, dim, tokens)?);
    }
    VideoFeatureSet::new(id, nsec, sequences)
}

// ---- synthesis -----------------------------------------------------------

/// Per-modality input dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertDims {
    pub rgb: usize,
    pub motion: usize,
    pub audio: usize,
}

impl ExpertDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Motion => self.motion,
            Modality::Audio => self.audio,
        }
    }
}

/// Token span layout used by the synthetic experts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanLayout {
    /// Seconds per rgb token (1 = one frame per second).
    pub rgb_span: u32,
    /// Motion window length; windows are laid back to back.
    pub motion_window: u32,
    /// Audio window; only whole windows are emitted (`nsec / audio_window` tokens).
    pub audio_window: u32,
    pub modalities: Vec<Modality>,
}

impl Default for SpanLayout {
    fn default() -> Self {
        Self {
            rgb_span: 1,
            motion_window: 2,
            audio_window: 5,
            modalities: Modality::ALL.to_vec(),
        }
    }
}

impl SpanLayout {
    pub fn spans(&self, m: Modality, nsec: u32) -> Vec<(u32, u32)> {
        if !self.modalities.contains(&m) {
            return Vec::new();
        }
        match m {
            Modality::Rgb => stepped(nsec, self.rgb_span),
            Modality::Motion => stepped(nsec, self.motion_window),
            Modality::Audio => {
                let w = self.audio_window.max(1);
                (0..nsec / w).map(|k| (k * w, k * w + w)).collect()
            }
        }
    }
}

fn stepped(nsec: u32, step: u32) -> Vec<(u32, u32)> {
    let step = step.max(1);
    (0..nsec)
        .step_by(step as usize)
        .map(|t| (t, (t + step).min(nsec)))
        .collect()
}

/// Stand-in experts: each modality is a fixed random linear map of a
/// concept vector, plus per-token Gaussian noise.
#[derive(Clone, Debug)]
pub struct SynthExperts {
    pub dims: ExpertDims,
    pub concept_dim: usize,
    pub layout: SpanLayout,
    pub max_seconds: u32,
    projections: [Vec<f32>; 3],
}

impl SynthExperts {
    pub fn new(seed: u64, concept_dim: usize, dims: ExpertDims, layout: SpanLayout, max_seconds: u32) -> Self {
        let projections = Modality::ALL.map(|m| {
            let mut r = rng::stream(seed, &format!("expert-projection/{m}"));
            let scale = 1.0 / (concept_dim as f64).sqrt();
            (0..dims.get(m) * concept_dim)
                .map(|_| (r.sample::<f64, _>(StandardNormal) * scale) as f32)
                .collect()
        });
        Self {
            dims,
            concept_dim,
            layout,
            max_seconds,
            projections,
        }
    }

    pub fn with_layout(&self, layout: SpanLayout) -> Self {
        Self {
            layout,
            ..self.clone()
        }
    }

    /// Noise-free expert output for a concept.
    pub fn project(&self, m: Modality, concept: &[f32]) -> Vec<f32> {
        let p = &self.projections[m.tag() as usize];
        (0..self.dims.get(m))
            .map(|i| {
                let row = &p[i * self.concept_dim..(i + 1) * self.concept_dim];
                row.iter().zip(concept).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>() as f32
            })
            .collect()
    }

    /// Deterministic feature set for `(seed, concept, nsec, noise_level)`.
    pub fn synth_features(
        &self,
        id: impl Into<String>,
        seed: u64,
        concept: &[f32],
        nsec: u32,
        noise_level: f32,
    ) -> Result<VideoFeatureSet> {
        if nsec == 0 {
            return Err(ExpertError::MalformedHeader("nsec must be at least 1".into()));
        }
        if nsec > self.max_seconds {
            return Err(ExpertError::TooLong {
                nsec,
                max: self.max_seconds,
            });
        }
        if concept.len() != self.concept_dim {
            return Err(ExpertError::DimMismatch {
                modality: Modality::Rgb,
                token: 0,
                expected: self.concept_dim,
                actual: concept.len(),
            });
        }
        let mut sequences = Vec::new();
        for m in Modality::ALL {
            let spans = self.layout.spans(m, nsec);
            if spans.is_empty() {
                continue;
            }
            let base = self.project(m, concept);
            let mut r = rng::stream(seed, &format!("expert-noise/{m}"));
            let tokens = spans
                .into_iter()
                .map(|(beg_sec, end_sec)| Token {
                    beg_sec,
                    end_sec,
                    vector: base
                        .iter()
                        .map(|&b| b + noise_level * r.sample::<f64, _>(StandardNormal) as f32)
                        .collect(),
                })
                .collect();
            sequences.push(ExpertSequence::new(m, self.dims.get(m), tokens)?);
        }
        VideoFeatureSet::new(id, nsec, sequences)
    }

    /// Single rgb vector for an image of the given concept.
    pub fn synth_image_vector(&self, seed: u64, concept: &[f32], noise_level: f32) -> Vec<f32> {
        let mut r = rng::stream(seed, "expert-noise/image");
        self.project(Modality::Rgb, concept)
            .into_iter()
            .map(|b| b + noise_level * r.sample::<f64, _>(StandardNormal) as f32)
            .collect()
    }
}

/// Token-wise mean of several crops of the same video.
pub fn average_crop_embeddings(crops: &[VideoFeatureSet]) -> Result<VideoFeatureSet> {
    let first = crops
        .first()
        .ok_or_else(|| ExpertError::CropMismatch("no crops given".into()))?;
    for c in &crops[1..] {
        let same = c.nsec == first.nsec
            && c.sequences.len() == first.sequences.len()
            && c.sequences.iter().zip(&first.sequences).all(|(a, b)| {
                a.modality == b.modality
                    && a.dim == b.dim
                    && a.tokens.len() == b.tokens.len()
                    && a.tokens
                        .iter()
                        .zip(&b.tokens)
                        .all(|(x, y)| x.beg_sec == y.beg_sec && x.end_sec == y.end_sec)
            });
        if !same {
            return Err(ExpertError::CropMismatch(format!(
                "crop `{}` differs in modality layout or spans from `{}`",
                c.id, first.id
            )));
        }
    }
    let n = crops.len() as f64;
    let mut column = Vec::with_capacity(crops.len());
    let sequences = first
        .sequences
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let tokens = s
                .tokens
                .iter()
                .enumerate()
                .map(|(ti, t)| Token {
                    beg_sec: t.beg_sec,
                    end_sec: t.end_sec,
                    vector: (0..s.dim)
                        .map(|d| {
                            column.clear();
                            column.extend(crops.iter().map(|c| c.sequences[si].tokens[ti].vector[d]));
                            // order-independent summation
                            column.sort_by(f32::total_cmp);
                            (column.iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32
                        })
                        .collect(),
                })
                .collect();
            ExpertSequence {
                modality: s.modality,
                dim: s.dim,
                tokens,
            }
        })
        .collect();
    VideoFeatureSet::new(first.id.clone(), first.nsec, sequences)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn experts() -> SynthExperts {
        SynthExperts::new(
            11,
            6,
            ExpertDims {
                rgb: 4,
                motion: 3,
                audio: 2,
            },
            SpanLayout::default(),
            DEFAULT_MAX_SECONDS,
        )
    }

    fn tok(beg: u32, end: u32, v: Vec<f32>) -> Token {
        Token {
            beg_sec: beg,
            end_sec: end,
            vector: v,
        }
    }

    #[test]
    fn minimal_file_loads() {
        let seq = ExpertSequence::new(
            Modality::Rgb,
            4,
            vec![tok(0, 1, vec![1.0, 2.0, 3.0, 4.0]), tok(1, 2, vec![0.5; 4])],
        )
        .unwrap();
        let v = VideoFeatureSet::new("v0", 2, vec![seq]).unwrap();
        let mut buf = Vec::new();
        write_binary(&mut buf, &v).unwrap();
        let back = read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back.nsec(), 2);
        assert_eq!(back.get(Modality::Rgb).unwrap().len(), 2);
        assert_eq!(back, v);
    }

    #[test]
    fn distinct_error_kinds() {
        assert!(matches!(
            ExpertSequence::new(Modality::Rgb, 2, vec![tok(1, 1, vec![0.0; 2])]),
            Err(ExpertError::SpanViolation { .. })
        ));
        assert!(matches!(
            ExpertSequence::new(Modality::Rgb, 2, vec![tok(0, 1, vec![0.0; 3])]),
            Err(ExpertError::DimMismatch { .. })
        ));
        assert!(matches!(
            ExpertSequence::new(Modality::Rgb, 2, vec![tok(0, 1, vec![f32::NAN, 0.0])]),
            Err(ExpertError::NonFinite { .. })
        ));
        assert!(matches!(
            ExpertSequence::new(Modality::Rgb, 1, vec![tok(0, 2, vec![0.0]), tok(1, 3, vec![0.0])]),
            Err(ExpertError::SpanViolation { .. })
        ));
        assert!(matches!(
            read_binary(&mut &b"MMFY\x01\0\0\0"[..]),
            Err(ExpertError::MalformedHeader(_))
        ));
        assert!(matches!(VideoFeatureSet::new("x", 3, vec![]), Err(ExpertError::NoModality)));
        let s = ExpertSequence::new(Modality::Rgb, 1, vec![tok(0, 4, vec![0.0])]).unwrap();
        assert!(matches!(
            VideoFeatureSet::new("x", 3, vec![s]),
            Err(ExpertError::SpanViolation { .. })
        ));
    }

    #[test]
    fn synth_layout_follows_strides() {
        let e = experts();
        let c = vec![0.1f32; 6];
        let v = e.synth_features("a", 1, &c, 7, 0.1).unwrap();
        let rgb = v.get(Modality::Rgb).unwrap();
        assert_eq!(rgb.len(), 7);
        assert_eq!((rgb.tokens()[3].beg_sec, rgb.tokens()[3].end_sec), (3, 4));
        let audio = v.get(Modality::Audio).unwrap();
        assert_eq!(audio.len(), 1);
        assert_eq!((audio.tokens()[0].beg_sec, audio.tokens()[0].end_sec), (0, 5));
        let motion = v.get(Modality::Motion).unwrap();
        assert_eq!(motion.tokens().last().map(|t| (t.beg_sec, t.end_sec)), Some((6, 7)));

        let short = e.synth_features("b", 1, &c, 4, 0.1).unwrap();
        assert!(short.get(Modality::Audio).is_none());

        let again = e.synth_features("a", 1, &c, 7, 0.1).unwrap();
        assert_eq!(v, again);
        assert!(matches!(
            e.synth_features("a", 1, &c, 33, 0.1),
            Err(ExpertError::TooLong { .. })
        ));
    }

    #[test]
    fn crop_mean_cases() {
        let e = experts();
        let c = vec![0.3f32; 6];
        let v = e.synth_features("a", 5, &c, 6, 0.5).unwrap();
        let avg = average_crop_embeddings(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert_eq!(avg, v);

        let neg = VideoFeatureSet::new(
            "a",
            v.nsec(),
            v.sequences()
                .iter()
                .map(|s| {
                    ExpertSequence::new(
                        s.modality(),
                        s.dim(),
                        s.tokens()
                            .iter()
                            .map(|t| tok(t.beg_sec, t.end_sec, t.vector.iter().map(|x| -x).collect()))
                            .collect(),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let zero = average_crop_embeddings(&[v.clone(), neg]).unwrap();
        assert!(zero
            .sequences()
            .iter()
            .flat_map(|s| s.tokens())
            .all(|t| t.vector.iter().all(|&x| x == 0.0)));

        let other = e.synth_features("b", 5, &c, 5, 0.5).unwrap();
        assert!(matches!(
            average_crop_embeddings(&[v, other]),
            Err(ExpertError::CropMismatch(_))
        ));
        assert!(average_crop_embeddings(&[]).is_err());
    }

    #[test]
    fn truncation_counts_dropped_tokens() {
        let e = SynthExperts::new(
            1,
            6,
            ExpertDims {
                rgb: 2,
                motion: 2,
                audio: 2,
            },
            SpanLayout::default(),
            64,
        );
        let v = e.synth_features("long", 3, &[0.2; 6], 40, 0.0).unwrap();
        let before = truncated_tokens();
        let (t, dropped) = v.truncate_to(32).unwrap();
        // rgb 8 + motion 4 + audio 2 (35..40 and 30..35 ends beyond 32)
        assert_eq!(dropped, 8 + 4 + 2);
        assert_eq!(t.nsec(), 32);
        assert!(truncated_tokens() >= before + dropped);
        assert!(t.sequences().iter().all(|s| s.max_end() <= 32));
    }
}
