//! Dataset ingestion (JSONL question/answer records), vocabulary
//! construction, and a synthetic key-value retrieval task for desk-scale
//! runs. The synthetic task draws its questions and answers from disjoint
//! vocabularies so the two towers see different input types.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{TokenizerMode, TokenizerSpec};
use crate::error::{Error, Result};

/// One question/answer pair. Ids are unique within a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Deserialize)]
struct RawRecord {
    question: String,
    answer: String,
    #[serde(default)]
    id: Option<String>,
}

/// Loads a JSONL dataset: one object per line with `question`/`answer`
/// fields and an optional `id` (generated sequentially when absent).
/// Malformed lines are rejected with their line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<QAPair>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    let mut seen_ids = HashSet::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line_no = line_no + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}: line {line_no}: {e}", path.display()))
        })?;
        if raw.question.is_empty() {
            return Err(Error::Data(format!(
                "{}: line {line_no}: empty question",
                path.display()
            )));
        }
        if raw.answer.is_empty() {
            return Err(Error::Data(format!(
                "{}: line {line_no}: empty answer",
                path.display()
            )));
        }
        let id = raw.id.unwrap_or_else(|| pairs.len().to_string());
        if !seen_ids.insert(id.clone()) {
            return Err(Error::Data(format!(
                "{}: line {line_no}: duplicate id {id:?}",
                path.display()
            )));
        }
        pairs.push(QAPair {
            id,
            question: raw.question,
            answer: raw.answer,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "empty dataset: {}",
            path.display()
        )));
    }
    Ok(pairs)
}

pub fn save_jsonl(pairs: &[QAPair], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for pair in pairs {
        let line = serde_json::to_string(pair)
            .map_err(|e| Error::Data(format!("serialize {}: {e}", pair.id)))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Synthetic key-value retrieval task settings.
///
/// Questions render a key of `key_len` tokens from the question vocabulary;
/// the answer is the same key mapped token-by-token through a seeded random
/// bijection into the answer vocabulary. Eval keys never appear in training,
/// so retrieval requires learning the token mapping, not memorizing pairs.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTaskConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub vocab_q: usize,
    pub vocab_a: usize,
    pub key_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_eval: 500,
            vocab_q: 64,
            vocab_a: 64,
            key_len: 3,
            seed: 1234,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be >= 1".to_string()));
        }
        if self.key_len == 0 {
            return Err(Error::Config("key_len must be >= 1".to_string()));
        }
        if self.vocab_a < self.vocab_q {
            return Err(Error::Config(format!(
                "vocab_a ({}) must be >= vocab_q ({}) for a token bijection",
                self.vocab_a, self.vocab_q
            )));
        }
        let total = self.n_train + self.n_eval;
        let capacity = (self.vocab_q as f64).powi(self.key_len as i32);
        // Rejection sampling needs headroom over the number of distinct keys.
        if capacity < 2.0 * total as f64 {
            return Err(Error::Config(format!(
                "vocabulary too small: {} distinct keys requested but vocab_q^key_len = {capacity}",
                total
            )));
        }
        Ok(())
    }

    /// Longest rendered text in tokens (the question carries a one-word
    /// template prefix).
    pub fn max_text_tokens(&self) -> usize {
        self.key_len + 1
    }
}

/// Generates (train, eval) splits. Deterministic per seed; eval questions are
/// disjoint from training questions and every eval answer is unique.
pub fn gen_synthetic(config: &SyntheticTaskConfig) -> Result<(Vec<QAPair>, Vec<QAPair>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Token bijection question-vocab -> answer-vocab.
    let mut mapping: Vec<usize> = (0..config.vocab_a).collect();
    mapping.shuffle(&mut rng);
    mapping.truncate(config.vocab_q);

    let total = config.n_train + config.n_eval;
    let mut keys: Vec<Vec<usize>> = Vec::with_capacity(total);
    let mut seen = HashSet::new();
    while keys.len() < total {
        let key: Vec<usize> = (0..config.key_len)
            .map(|_| rng.gen_range(0..config.vocab_q))
            .collect();
        if seen.insert(key.clone()) {
            keys.push(key);
        }
    }

    let render = |key: &[usize], split_index: usize| -> QAPair {
        let question = format!(
            "find {}",
            key.iter()
                .map(|t| format!("q{t}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        let answer = key
            .iter()
            .map(|&t| format!("a{}", mapping[t]))
            .collect::<Vec<_>>()
            .join(" ");
        QAPair {
            id: split_index.to_string(),
            question,
            answer,
        }
    };

    let train: Vec<QAPair> = keys[..config.n_train]
        .iter()
        .enumerate()
        .map(|(i, k)| render(k, i))
        .collect();
    let eval: Vec<QAPair> = keys[config.n_train..]
        .iter()
        .enumerate()
        .map(|(i, k)| render(k, i))
        .collect();
    Ok((train, eval))
}

/// Builds a tokenizer over a dataset. Whitespace mode collects all distinct
/// lowercased tokens sorted by descending frequency (ties alphabetical);
/// byte mode needs no vocabulary.
pub fn build_vocab(pairs: &[QAPair], mode: TokenizerMode) -> Result<TokenizerSpec> {
    if pairs.is_empty() {
        return Err(Error::Config("cannot build vocabulary from an empty dataset".to_string()));
    }
    match mode {
        TokenizerMode::Byte => Ok(TokenizerSpec::byte()),
        TokenizerMode::Whitespace => {
            let mut freq: BTreeMap<String, usize> = BTreeMap::new();
            for pair in pairs {
                for text in [&pair.question, &pair.answer] {
                    for tok in text.to_lowercase().split_whitespace() {
                        *freq.entry(tok.to_string()).or_insert(0) += 1;
                    }
                }
            }
            let mut tokens: Vec<(String, usize)> = freq.into_iter().collect();
            tokens.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            TokenizerSpec::whitespace(tokens.into_iter().map(|(t, _)| t))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn load_jsonl_generates_sequential_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"question": "q one", "answer": "a one"}}"#).unwrap();
        writeln!(f, r#"{{"question": "q two", "answer": "a two"}}"#).unwrap();
        writeln!(f, r#"{{"question": "q three", "answer": "a three"}}"#).unwrap();
        drop(f);
        let pairs = load_jsonl(&path).unwrap();
        assert_eq!(pairs.len(), 3);
        let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["0", "1", "2"]);
    }

    #[test]
    fn load_jsonl_rejects_missing_answer_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"question": "ok", "answer": "fine"}}"#).unwrap();
        writeln!(f, r#"{{"question": "broken"}}"#).unwrap();
        drop(f);
        let err = load_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn load_jsonl_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::File::create(&path).unwrap();
        let err = load_jsonl(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        let (train, _) = gen_synthetic(&SyntheticTaskConfig {
            n_train: 20,
            n_eval: 5,
            ..SyntheticTaskConfig::default()
        })
        .unwrap();
        save_jsonl(&train, &path).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(train, loaded);
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let cfg = SyntheticTaskConfig::default();
        let (t1, e1) = gen_synthetic(&cfg).unwrap();
        let (t2, e2) = gen_synthetic(&cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(e1, e2);
        let (t3, _) = gen_synthetic(&SyntheticTaskConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(t1, t3);
    }

    #[test]
    fn synthetic_splits_are_disjoint_with_unique_answers() {
        let (train, eval) = gen_synthetic(&SyntheticTaskConfig::default()).unwrap();
        assert_eq!(train.len(), 2000);
        assert_eq!(eval.len(), 500);
        let train_qs: HashSet<&str> = train.iter().map(|p| p.question.as_str()).collect();
        assert!(eval.iter().all(|p| !train_qs.contains(p.question.as_str())));
        let eval_answers: HashSet<&str> = eval.iter().map(|p| p.answer.as_str()).collect();
        assert_eq!(eval_answers.len(), eval.len(), "eval answers not unique");
    }

    #[test]
    fn synthetic_vocabularies_are_disjoint() {
        let (train, eval) = gen_synthetic(&SyntheticTaskConfig {
            n_train: 50,
            n_eval: 10,
            ..SyntheticTaskConfig::default()
        })
        .unwrap();
        for p in train.iter().chain(eval.iter()) {
            for tok in p.answer.split_whitespace() {
                assert!(tok.starts_with('a'), "answer token {tok} outside answer vocab");
            }
            for tok in p.question.split_whitespace().skip(1) {
                assert!(tok.starts_with('q'), "key token {tok} outside question vocab");
            }
        }
    }

    #[test]
    fn synthetic_mapping_is_token_consistent() {
        // The same key token always maps to the same answer token.
        let (train, eval) = gen_synthetic(&SyntheticTaskConfig::default()).unwrap();
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for p in train.iter().chain(eval.iter()) {
            let keys: Vec<&str> = p.question.split_whitespace().skip(1).collect();
            let vals: Vec<&str> = p.answer.split_whitespace().collect();
            assert_eq!(keys.len(), vals.len());
            for (k, v) in keys.iter().zip(vals.iter()) {
                let prev = seen.insert(k.to_string(), v.to_string());
                if let Some(prev) = prev {
                    assert_eq!(prev, *v, "token {k} mapped inconsistently");
                }
            }
        }
    }

    #[test]
    fn synthetic_rejects_too_small_vocabulary() {
        let err = gen_synthetic(&SyntheticTaskConfig {
            n_train: 2000,
            n_eval: 500,
            vocab_q: 4,
            vocab_a: 4,
            key_len: 2,
            seed: 0,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn build_vocab_orders_by_frequency_then_alphabet() {
        let pairs = vec![
            QAPair {
                id: "0".into(),
                question: "a b".into(),
                answer: "b".into(),
            },
        ];
        let spec = build_vocab(&pairs, TokenizerMode::Whitespace).unwrap();
        // b occurs twice, a once: b gets id 2, a gets id 3.
        assert_eq!(spec.id_of("b"), Some(2));
        assert_eq!(spec.id_of("a"), Some(3));
        assert_eq!(spec.tokens_in_id_order(), vec!["b", "a"]);
    }

    #[test]
    fn build_vocab_byte_mode_is_fixed_size() {
        let pairs = vec![QAPair {
            id: "0".into(),
            question: "anything".into(),
            answer: "at all".into(),
        }];
        let spec = build_vocab(&pairs, TokenizerMode::Byte).unwrap();
        assert_eq!(spec.vocab_size(), 258);
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let (train, _) = gen_synthetic(&SyntheticTaskConfig {
            n_train: 30,
            n_eval: 5,
            ..SyntheticTaskConfig::default()
        })
        .unwrap();
        let a = build_vocab(&train, TokenizerMode::Whitespace).unwrap();
        let b = build_vocab(&train, TokenizerMode::Whitespace).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_random_ranks_give_harmonic_mrr() {
        // E[1/rank] under uniform ranks over N candidates is H(N)/N.
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let n = 100usize;
        let analytic: f64 = (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64;
        assert!((analytic - 0.0519).abs() < 1e-4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let trials = 200_000;
        let sim: f64 = (0..trials)
            .map(|_| 1.0 / rng.gen_range(1..=n) as f64)
            .sum::<f64>()
            / trials as f64;
        assert!((sim - analytic).abs() < 2e-3, "simulated {sim} vs analytic {analytic}");
    }
}
