//! Single-tower text encoder: token embedder, pre-layer-norm transformer
//! blocks, masked mean pooling over the sequence, and a final affine
//! projection to the retrieval embedding.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Number of reserved token ids (pad, unk).
pub const RESERVED_IDS: usize = 2;

/// Architecture hyperparameters of one encoder tower.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub d_embed: usize,
}

/// Desk-scale stand-ins for the small/base/large checkpoints of the encoder
/// family under study. All presets project to the same embedding width so
/// retrieval indexes stay comparable across sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizePreset {
    Small,
    Base,
    Large,
}

impl SizePreset {
    pub const ALL: [SizePreset; 3] = [SizePreset::Small, SizePreset::Base, SizePreset::Large];

    pub fn name(&self) -> &'static str {
        match self {
            SizePreset::Small => "small",
            SizePreset::Base => "base",
            SizePreset::Large => "large",
        }
    }
}

impl FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(SizePreset::Small),
            "base" => Ok(SizePreset::Base),
            "large" => Ok(SizePreset::Large),
            other => Err(Error::Config(format!(
                "unknown size preset `{other}`; valid presets: small, base, large"
            ))),
        }
    }
}

impl fmt::Display for SizePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl EncoderConfig {
    /// Desk-scale preset dimensions; vocabulary and sequence length come from
    /// the dataset.
    pub fn preset(size: SizePreset, vocab_size: usize, max_seq_len: usize) -> Self {
        let (n_layers, d_model, n_heads, d_ff) = match size {
            SizePreset::Small => (2, 64, 4, 256),
            SizePreset::Base => (4, 128, 8, 512),
            SizePreset::Large => (6, 256, 8, 1024),
        };
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq_len,
            d_embed: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("d_embed", self.d_embed),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size < RESERVED_IDS {
            return Err(Error::Config(format!(
                "vocab_size must cover the {RESERVED_IDS} reserved ids"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

// ── Tokenizer ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    /// Lowercased whitespace tokens looked up in a vocabulary.
    Whitespace,
    /// Raw bytes shifted past the reserved ids; vocabulary-free.
    Byte,
}

impl FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "whitespace" => Ok(TokenizerMode::Whitespace),
            "byte" => Ok(TokenizerMode::Byte),
            other => Err(Error::Config(format!(
                "unknown tokenizer mode `{other}`; valid modes: whitespace, byte"
            ))),
        }
    }
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerMode::Whitespace => "whitespace",
            TokenizerMode::Byte => "byte",
        })
    }
}

/// Token-to-id mapping with reserved ids pad=0 and unk=1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    vocab: BTreeMap<String, usize>,
}

impl TokenizerSpec {
    /// Whitespace tokenizer over tokens listed in id order (first token gets
    /// id 2).
    pub fn whitespace(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut vocab = BTreeMap::new();
        for (i, tok) in tokens.into_iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "invalid vocabulary token {tok:?} at position {i}"
                )));
            }
            if vocab.insert(tok.clone(), RESERVED_IDS + i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self {
            mode: TokenizerMode::Whitespace,
            vocab,
        })
    }

    pub fn byte() -> Self {
        Self {
            mode: TokenizerMode::Byte,
            vocab: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self.mode {
            TokenizerMode::Whitespace => RESERVED_IDS + self.vocab.len(),
            TokenizerMode::Byte => RESERVED_IDS + 256,
        }
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.vocab.get(token).copied()
    }

    /// Tokens ordered by id, i.e. the vocabulary file line order.
    pub fn tokens_in_id_order(&self) -> Vec<&str> {
        let mut by_id: Vec<(&usize, &String)> =
            self.vocab.iter().map(|(t, id)| (id, t)).collect();
        by_id.sort_by_key(|(id, _)| **id);
        by_id.into_iter().map(|(_, t)| t.as_str()).collect()
    }

    /// Writes the vocabulary file: one token per line, line index = id - 2.
    pub fn save_vocab(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for tok in self.tokens_in_id_order() {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }

    /// Reads a vocabulary file written by [`TokenizerSpec::save_vocab`].
    pub fn load_vocab(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let tok = line.trim();
            if tok.is_empty() {
                return Err(Error::Data(format!(
                    "{}: empty vocabulary line {}",
                    path.display(),
                    i + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        Self::whitespace(tokens)
    }
}

/// Token ids plus a 0/1 attention mask, both `max_len` long.
pub fn tokenize(text: &str, spec: &TokenizerSpec, max_len: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if max_len == 0 {
        return Err(Error::InvalidArgument {
            op: "tokenize",
            message: "max_len must be >= 1".to_string(),
        });
    }
    let raw: Vec<usize> = match spec.mode {
        TokenizerMode::Whitespace => {
            let lowered = text.to_lowercase();
            lowered
                .split_whitespace()
                .map(|tok| spec.id_of(tok).unwrap_or(UNK_ID))
                .collect()
        }
        TokenizerMode::Byte => text
            .trim()
            .bytes()
            .map(|b| b as usize + RESERVED_IDS)
            .collect(),
    };
    if raw.is_empty() {
        return Err(Error::InvalidArgument {
            op: "tokenize",
            message: "empty text after normalization".to_string(),
        });
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut mask = Vec::with_capacity(max_len);
    for &id in raw.iter().take(max_len) {
        ids.push(id);
        mask.push(1.0);
    }
    while ids.len() < max_len {
        ids.push(PAD_ID);
        mask.push(0.0);
    }
    Ok((ids, mask))
}

// ── Initialization ──────────────────────────────────────────────────────

// Truncated-normal correction so the post-truncation variance matches the
// requested scale/fan_in exactly.
const TRUNC_STD_CORRECTION: f64 = 0.879_625_661_034_239_8;

/// Variance-scaling init: truncated normal (|z| <= 2) with variance
/// `1.0 / fan_in` after the truncation correction.
pub fn variance_scaled(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt() / TRUNC_STD_CORRECTION;
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    while data.len() < count {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::new(shape, data).expect("shape/data constructed together")
}

/// All parameters of a single tower, keyed by logical name, drawn
/// deterministically from `seed`.
pub fn init_tower_template(config: &EncoderConfig, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let mut params = BTreeMap::new();
    let put = |params: &mut BTreeMap<String, Tensor>, name: String, t: Tensor| {
        params.insert(name, t);
    };

    put(
        &mut params,
        "embed/token".to_string(),
        variance_scaled(&mut rng, vec![config.vocab_size, d], d),
    );
    put(
        &mut params,
        "embed/pos".to_string(),
        variance_scaled(&mut rng, vec![config.max_seq_len, d], d),
    );
    for layer in 0..config.n_layers {
        for ln in ["ln1", "ln2"] {
            put(
                &mut params,
                format!("layer{layer}/{ln}/gain"),
                Tensor::vector(vec![1.0; d]),
            );
            put(
                &mut params,
                format!("layer{layer}/{ln}/bias"),
                Tensor::vector(vec![0.0; d]),
            );
        }
        for w in ["wq", "wk", "wv", "wo"] {
            put(
                &mut params,
                format!("layer{layer}/attn/{w}"),
                variance_scaled(&mut rng, vec![d, d], d),
            );
        }
        for b in ["bq", "bk", "bv", "bo"] {
            put(
                &mut params,
                format!("layer{layer}/attn/{b}"),
                Tensor::vector(vec![0.0; d]),
            );
        }
        put(
            &mut params,
            format!("layer{layer}/ffn/w1"),
            variance_scaled(&mut rng, vec![d, config.d_ff], d),
        );
        put(
            &mut params,
            format!("layer{layer}/ffn/b1"),
            Tensor::vector(vec![0.0; config.d_ff]),
        );
        put(
            &mut params,
            format!("layer{layer}/ffn/w2"),
            variance_scaled(&mut rng, vec![config.d_ff, d], config.d_ff),
        );
        put(
            &mut params,
            format!("layer{layer}/ffn/b2"),
            Tensor::vector(vec![0.0; d]),
        );
    }
    put(
        &mut params,
        "proj/w".to_string(),
        variance_scaled(&mut rng, vec![d, config.d_embed], d),
    );
    put(
        &mut params,
        "proj/b".to_string(),
        Tensor::vector(vec![0.0; config.d_embed]),
    );
    Ok(params)
}

// ── Forward pass ────────────────────────────────────────────────────────

/// Source of tower parameters for a forward pass. Implementations resolve a
/// logical layer name to stored weights and bind them onto the tape.
pub trait ParamSource {
    fn bind(&self, tape: &mut Tape, logical: &str) -> Result<TensorId>;
}

/// Tape handles for one encoded batch.
#[derive(Debug, Clone, Copy)]
pub struct EncodedBatch {
    /// [batch, d_embed] final retrieval embeddings.
    pub embedding: TensorId,
    /// [batch, d_model] pre-projection pooled states.
    pub pooled: TensorId,
}

/// Final embeddings of a single input, detached from any tape.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub embedding: Tensor,
    pub pooled: Tensor,
}

/// Runs the encoder over `batch` equal-length sequences stacked into flat
/// `ids`/`mask` slices. Output rows depend only on unmasked positions of the
/// same sequence, so padded and batched evaluation agree bitwise.
pub fn encode_batch(
    tape: &mut Tape,
    source: &impl ParamSource,
    config: &EncoderConfig,
    ids: &[usize],
    mask: &[f64],
    batch: usize,
) -> Result<EncodedBatch> {
    if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
        return Err(Error::InvalidArgument {
            op: "encode",
            message: format!("{} ids do not form {batch} equal sequences", ids.len()),
        });
    }
    if ids.len() != mask.len() {
        return Err(Error::InvalidArgument {
            op: "encode",
            message: format!("ids length {} != mask length {}", ids.len(), mask.len()),
        });
    }
    let len = ids.len() / batch;
    if len > config.max_seq_len {
        return Err(Error::InvalidArgument {
            op: "encode",
            message: format!(
                "sequence length {len} exceeds max_seq_len {}",
                config.max_seq_len
            ),
        });
    }
    for b in 0..batch {
        if mask[b * len..(b + 1) * len].iter().all(|&m| m == 0.0) {
            return Err(Error::InvalidArgument {
                op: "encode",
                message: format!("empty input: sequence {b} has an all-zero mask"),
            });
        }
    }

    let tok_table = source.bind(tape, "embed/token")?;
    let pos_table = source.bind(tape, "embed/pos")?;
    let tok = tape.gather_rows(tok_table, ids)?;
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
    let pos = tape.gather_rows(pos_table, &pos_ids)?;
    let mut x = tape.add(tok, pos)?;

    for layer in 0..config.n_layers {
        let ln1g = source.bind(tape, &format!("layer{layer}/ln1/gain"))?;
        let ln1b = source.bind(tape, &format!("layer{layer}/ln1/bias"))?;
        let h = tape.layer_norm(x, ln1g, ln1b)?;

        let wq = source.bind(tape, &format!("layer{layer}/attn/wq"))?;
        let bq = source.bind(tape, &format!("layer{layer}/attn/bq"))?;
        let wk = source.bind(tape, &format!("layer{layer}/attn/wk"))?;
        let bk = source.bind(tape, &format!("layer{layer}/attn/bk"))?;
        let wv = source.bind(tape, &format!("layer{layer}/attn/wv"))?;
        let bv = source.bind(tape, &format!("layer{layer}/attn/bv"))?;
        let q = tape.linear(h, wq, bq)?;
        let k = tape.linear(h, wk, bk)?;
        let v = tape.linear(h, wv, bv)?;
        let attn = tape.attention(q, k, v, mask, batch, config.n_heads)?;
        let wo = source.bind(tape, &format!("layer{layer}/attn/wo"))?;
        let bo = source.bind(tape, &format!("layer{layer}/attn/bo"))?;
        let attn_out = tape.linear(attn, wo, bo)?;
        x = tape.add(x, attn_out)?;

        let ln2g = source.bind(tape, &format!("layer{layer}/ln2/gain"))?;
        let ln2b = source.bind(tape, &format!("layer{layer}/ln2/bias"))?;
        let h2 = tape.layer_norm(x, ln2g, ln2b)?;
        let w1 = source.bind(tape, &format!("layer{layer}/ffn/w1"))?;
        let b1 = source.bind(tape, &format!("layer{layer}/ffn/b1"))?;
        let w2 = source.bind(tape, &format!("layer{layer}/ffn/w2"))?;
        let b2 = source.bind(tape, &format!("layer{layer}/ffn/b2"))?;
        let f1 = tape.linear(h2, w1, b1)?;
        let f1a = tape.gelu(f1)?;
        let f2 = tape.linear(f1a, w2, b2)?;
        x = tape.add(x, f2)?;
    }

    let pooled = tape.masked_mean(x, mask, batch)?;
    let pw = source.bind(tape, "proj/w")?;
    let pb = source.bind(tape, "proj/b")?;
    let embedding = tape.linear(pooled, pw, pb)?;
    Ok(EncodedBatch { embedding, pooled })
}
