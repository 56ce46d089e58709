//! Corpus encoding, exact brute-force top-k retrieval, and the retrieval
//! metrics P@1, MRR, and relative-MRR. Ordering is total: descending cosine
//! score, ties broken by ascending answer id.

use std::path::Path;

use rayon::prelude::*;

use crate::data::QAPair;
use crate::encoder::{tokenize, TokenizerSpec};
use crate::error::{Error, Result};
use crate::sharing::{DualEncoderModel, Tower};
use crate::tensor::{Tape, Tensor};
use crate::training::csv_err;

/// Answers are encoded in fixed-size chunks; per-row results are identical
/// for any chunking, so shards concatenate bitwise.
const ENCODE_CHUNK: usize = 64;

/// Encoded answer corpus plus the fingerprint of the model that produced it.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    /// [n, d_embed] answer embeddings, corpus order preserved.
    pub embeddings: Tensor,
    pub ids: Vec<String>,
    pub fingerprint: String,
}

/// Outcome of one query: 1-based rank of the gold answer, absent when the
/// gold answer is not in the corpus (reciprocal 0, flagged in the report).
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub query_id: String,
    pub gold_rank: Option<usize>,
    pub reciprocal: f64,
}

#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub per_query: Vec<QueryOutcome>,
    pub p_at_1: f64,
    pub mrr: f64,
    pub n: usize,
    /// Candidate pool size ranks were computed over.
    pub k: usize,
    /// Queries whose gold answer was missing from the corpus.
    pub missing_gold: usize,
}

impl RetrievalReport {
    pub fn summary_line(&self) -> String {
        format!("p_at_1={} mrr={} n={}", self.p_at_1, self.mrr, self.n)
    }

    /// Per-query CSV: query_id, gold_rank (empty when missing), reciprocal.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["query_id", "gold_rank", "reciprocal"])
            .map_err(csv_err)?;
        for q in &self.per_query {
            w.write_record([
                q.query_id.clone(),
                q.gold_rank.map(|r| r.to_string()).unwrap_or_default(),
                q.reciprocal.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn encode_texts(
    model: &DualEncoderModel,
    tokenizer: &TokenizerSpec,
    tower: Tower,
    texts: &[&str],
) -> Result<Tensor> {
    let seq_len = model.config.max_seq_len;
    let d = model.config.d_embed;
    let mut rows = vec![0.0; texts.len() * d];
    for (chunk_idx, chunk) in texts.chunks(ENCODE_CHUNK).enumerate() {
        let mut ids = Vec::with_capacity(chunk.len() * seq_len);
        let mut mask = Vec::with_capacity(chunk.len() * seq_len);
        for text in chunk {
            let (t_ids, t_mask) = tokenize(text, tokenizer, seq_len)?;
            ids.extend(t_ids);
            mask.extend(t_mask);
        }
        let mut tape = Tape::new();
        let out = model.encode_tower_batch(&mut tape, tower, &ids, &mask, chunk.len())?;
        let emb = tape.value(out.embedding);
        let base = chunk_idx * ENCODE_CHUNK * d;
        rows[base..base + chunk.len() * d].copy_from_slice(emb.data());
    }
    Tensor::new(vec![texts.len(), d], rows)
}

/// Encodes an answer corpus of (id, text) entries through the answer tower.
pub fn build_index(
    model: &DualEncoderModel,
    tokenizer: &TokenizerSpec,
    answers: &[(String, String)],
) -> Result<RetrievalIndex> {
    build_index_sharded(model, tokenizer, answers, 1)
}

/// Shard-parallel index build. Results are merged in shard order, so any
/// shard count produces the same index as a single pass.
pub fn build_index_sharded(
    model: &DualEncoderModel,
    tokenizer: &TokenizerSpec,
    answers: &[(String, String)],
    shards: usize,
) -> Result<RetrievalIndex> {
    if answers.is_empty() {
        return Err(Error::Config("answer corpus is empty".to_string()));
    }
    let shards = shards.clamp(1, answers.len());
    let shard_size = answers.len().div_ceil(shards);
    let chunks: Vec<&[(String, String)]> = answers.chunks(shard_size).collect();
    let encoded: Vec<Tensor> = chunks
        .par_iter()
        .map(|chunk| {
            let texts: Vec<&str> = chunk.iter().map(|(_, t)| t.as_str()).collect();
            encode_texts(model, tokenizer, Tower::Answer, &texts)
        })
        .collect::<Result<_>>()?;
    let d = model.config.d_embed;
    let mut data = Vec::with_capacity(answers.len() * d);
    for shard in &encoded {
        data.extend_from_slice(shard.data());
    }
    Ok(RetrievalIndex {
        embeddings: Tensor::new(vec![answers.len(), d], data)?,
        ids: answers.iter().map(|(id, _)| id.clone()).collect(),
        fingerprint: model.fingerprint(),
    })
}

fn cosine_scores(index: &RetrievalIndex, query: &Tensor) -> Result<Vec<f64>> {
    let d = index.embeddings.cols();
    if query.rank() != 1 || query.numel() != d {
        return Err(Error::ShapeMismatch {
            op: "search",
            lhs: query.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let qnorm = query.l2_norm();
    if qnorm == 0.0 {
        return Err(Error::DegenerateVector("search: zero-norm query".to_string()));
    }
    let n = index.embeddings.rows();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let row = index.embeddings.row(i);
        let rnorm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm == 0.0 {
            return Err(Error::DegenerateVector(format!(
                "search: zero-norm index row for answer id {}",
                index.ids[i]
            )));
        }
        let dot: f64 = row.iter().zip(query.data()).map(|(a, b)| a * b).sum();
        scores.push((dot / (rnorm * qnorm)).clamp(-1.0, 1.0));
    }
    Ok(scores)
}

/// Exact brute-force top-k: descending cosine score, ties broken by
/// ascending answer id.
pub fn search(index: &RetrievalIndex, query: &Tensor, k: usize) -> Result<Vec<(String, f64)>> {
    let n = index.embeddings.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument {
            op: "search",
            message: format!("k = {k} out of range 1..={n}"),
        });
    }
    let scores = cosine_scores(index, query)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .expect("finite scores")
            .then_with(|| index.ids[i].cmp(&index.ids[j]))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| (index.ids[i].clone(), scores[i]))
        .collect())
}

/// Rank of the gold entry under the search ordering without materializing
/// the full sort: one plus the number of entries strictly ahead of it.
fn gold_rank(scores: &[f64], ids: &[String], gold_pos: usize) -> usize {
    let gs = scores[gold_pos];
    let gid = &ids[gold_pos];
    let mut ahead = 0;
    for i in 0..scores.len() {
        if i == gold_pos {
            continue;
        }
        if scores[i] > gs || (scores[i] == gs && ids[i] < *gid) {
            ahead += 1;
        }
    }
    ahead + 1
}

/// Evaluates QA retrieval: encodes each question, ranks the corpus, and
/// reports P@1 (fraction ranked first) and MRR (mean reciprocal rank). Gold
/// answers are matched by id; queries whose gold id is absent from the
/// corpus count reciprocal 0 and are flagged.
pub fn evaluate(
    model: &DualEncoderModel,
    tokenizer: &TokenizerSpec,
    eval_pairs: &[QAPair],
    corpus: &[(String, String)],
) -> Result<RetrievalReport> {
    if eval_pairs.is_empty() {
        return Err(Error::Config("evaluation set is empty".to_string()));
    }
    let index = build_index(model, tokenizer, corpus)?;
    let questions: Vec<&str> = eval_pairs.iter().map(|p| p.question.as_str()).collect();
    let q_embeds = encode_texts(model, tokenizer, Tower::Question, &questions)?;

    let mut per_query = Vec::with_capacity(eval_pairs.len());
    for (i, pair) in eval_pairs.iter().enumerate() {
        let query = Tensor::vector(q_embeds.row(i).to_vec());
        let gold_pos = index.ids.iter().position(|id| *id == pair.id);
        let outcome = match gold_pos {
            Some(pos) => {
                let scores = cosine_scores(&index, &query)?;
                let rank = gold_rank(&scores, &index.ids, pos);
                QueryOutcome {
                    query_id: pair.id.clone(),
                    gold_rank: Some(rank),
                    reciprocal: 1.0 / rank as f64,
                }
            }
            None => QueryOutcome {
                query_id: pair.id.clone(),
                gold_rank: None,
                reciprocal: 0.0,
            },
        };
        per_query.push(outcome);
    }
    Ok(aggregate_report(per_query, corpus.len()))
}

/// Folds per-query outcomes into the summary metrics: P@1 is the fraction of
/// queries ranked 1, MRR the mean reciprocal rank (0 for missing gold).
pub fn aggregate_report(per_query: Vec<QueryOutcome>, k: usize) -> RetrievalReport {
    let n = per_query.len();
    let hits = per_query
        .iter()
        .filter(|q| q.gold_rank == Some(1))
        .count();
    let rr_sum: f64 = per_query.iter().map(|q| q.reciprocal).sum();
    let missing = per_query.iter().filter(|q| q.gold_rank.is_none()).count();
    RetrievalReport {
        per_query,
        p_at_1: hits as f64 / n as f64,
        mrr: rr_sum / n as f64,
        n,
        k,
        missing_gold: missing,
    }
}

/// Percent MRR change relative to a baseline MRR.
pub fn delta_mrr(mrr: f64, mrr_baseline: f64) -> Result<f64> {
    if mrr_baseline == 0.0 {
        return Err(Error::DegenerateVector(
            "delta_mrr: baseline MRR is zero".to_string(),
        ));
    }
    Ok((mrr - mrr_baseline) / mrr_baseline * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;
    use crate::encoder::{EncoderConfig, TokenizerMode};
    use crate::sharing::{build, SharingSpec, Variant};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_index(n: usize, d: usize, seed: u64) -> RetrievalIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        RetrievalIndex {
            embeddings: Tensor::new(vec![n, d], data).unwrap(),
            ids: (0..n).map(|i| i.to_string()).collect(),
            fingerprint: "test".to_string(),
        }
    }

    /// Independent oracle: materialize every (score, id), full stable sort.
    fn naive_full_sort(index: &RetrievalIndex, query: &Tensor) -> Vec<(String, f64)> {
        let mut scored: Vec<(String, f64)> = index
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let row = Tensor::vector(index.embeddings.row(i).to_vec());
                (id.clone(), crate::tensor::cosine_sim(&row, query).unwrap())
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored
    }

    #[test]
    fn search_matches_naive_oracle_exactly() {
        let index = random_index(20, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let q = Tensor::vector((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let got = search(&index, &q, 5).unwrap();
            let want = naive_full_sort(&index, &q);
            for (g, w) in got.iter().zip(want.iter().take(5)) {
                assert_eq!(g.0, w.0);
                assert!((g.1 - w.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn search_with_k_equal_n_is_a_permutation() {
        let index = random_index(12, 4, 7);
        let q = Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]);
        let got = search(&index, &q, 12).unwrap();
        let mut ids: Vec<String> = got.iter().map(|(id, _)| id.clone()).collect();
        ids.sort();
        let mut want: Vec<String> = (0..12).map(|i| i.to_string()).collect();
        want.sort();
        assert_eq!(ids, want);
    }

    #[test]
    fn search_finds_exact_match_first_with_unit_score() {
        let index = random_index(10, 6, 5);
        let q = Tensor::vector(index.embeddings.row(4).to_vec());
        let got = search(&index, &q, 3).unwrap();
        assert_eq!(got[0].0, "4");
        assert!((got[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn search_breaks_ties_by_ascending_id() {
        // Three identical rows: scores tie exactly; ids order "0" < "1" < "2".
        let row = vec![0.6, -0.8];
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&row);
        }
        let index = RetrievalIndex {
            embeddings: Tensor::new(vec![3, 2], data).unwrap(),
            ids: vec!["2".into(), "0".into(), "1".into()],
            fingerprint: String::new(),
        };
        let got = search(&index, &Tensor::vector(vec![1.0, 0.0]), 3).unwrap();
        let ids: Vec<&str> = got.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["0", "1", "2"]);
    }

    #[test]
    fn search_rejects_out_of_range_k() {
        let index = random_index(5, 3, 1);
        let q = Tensor::vector(vec![1.0, 0.0, 0.0]);
        assert!(search(&index, &q, 0).is_err());
        assert!(search(&index, &q, 6).is_err());
    }

    #[test]
    fn report_hand_cases() {
        let outcomes = |ranks: &[usize]| -> Vec<QueryOutcome> {
            ranks
                .iter()
                .enumerate()
                .map(|(i, &r)| QueryOutcome {
                    query_id: i.to_string(),
                    gold_rank: Some(r),
                    reciprocal: 1.0 / r as f64,
                })
                .collect()
        };
        let perfect = aggregate_report(outcomes(&[1, 1, 1]), 10);
        assert_eq!(perfect.p_at_1, 1.0);
        assert_eq!(perfect.mrr, 1.0);

        let mixed = aggregate_report(outcomes(&[1, 2, 4]), 10);
        assert!((mixed.p_at_1 - 1.0 / 3.0).abs() < 1e-9);
        assert!((mixed.mrr - 0.5833333333333334).abs() < 1e-9);
        assert!(mixed.p_at_1 <= mixed.mrr && mixed.mrr <= 1.0);
    }

    #[test]
    fn delta_mrr_cases() {
        assert_eq!(delta_mrr(0.37, 0.37).unwrap(), 0.0);
        assert!((delta_mrr(28.20, 26.31).unwrap() - 7.18).abs() < 0.01);
        assert!((delta_mrr(26.31, 28.20).unwrap() - (-6.70)).abs() < 0.01);
        assert!(matches!(
            delta_mrr(1.0, 0.0),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn adding_an_answer_never_improves_a_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let index = random_index(15, 6, rng.gen());
            let q = Tensor::vector((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let scores = cosine_scores(&index, &q).unwrap();
            let gold = 7;
            let before = gold_rank(&scores, &index.ids, gold);
            // Extend the corpus by one arbitrary row.
            let mut data = index.embeddings.data().to_vec();
            data.extend((0..6).map(|_| rng.gen_range(-1.0..1.0)));
            let mut ids = index.ids.clone();
            ids.push("zz-extra".to_string());
            let bigger = RetrievalIndex {
                embeddings: Tensor::new(vec![16, 6], data).unwrap(),
                ids,
                fingerprint: String::new(),
            };
            let scores2 = cosine_scores(&bigger, &q).unwrap();
            let after = gold_rank(&scores2, &bigger.ids, gold);
            assert!(after >= before, "rank improved from {before} to {after}");
        }
    }

    #[test]
    fn scaling_answer_embeddings_leaves_ranking_unchanged() {
        let index = random_index(25, 8, 11);
        let q = Tensor::vector((0..8).map(|i| ((i * i) as f64 * 0.3).sin()).collect());
        let base: Vec<String> = search(&index, &q, 25)
            .unwrap()
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        for alpha in [0.25, 4.0] {
            let scaled = RetrievalIndex {
                embeddings: Tensor::new(
                    vec![25, 8],
                    index.embeddings.data().iter().map(|v| v * alpha).collect(),
                )
                .unwrap(),
                ids: index.ids.clone(),
                fingerprint: String::new(),
            };
            let got: Vec<String> = search(&scaled, &q, 25)
                .unwrap()
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            assert_eq!(got, base, "ranking changed under scale {alpha}");
        }
    }

    fn tiny_model_and_tok() -> (crate::sharing::DualEncoderModel, TokenizerSpec, Vec<QAPair>) {
        let pairs: Vec<QAPair> = (0..10)
            .map(|i| QAPair {
                id: i.to_string(),
                question: format!("find q{i}"),
                answer: format!("a{i} a{}", (i + 1) % 10),
            })
            .collect();
        let tok = build_vocab(&pairs, TokenizerMode::Whitespace).unwrap();
        let cfg = EncoderConfig {
            vocab_size: tok.vocab_size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 3,
            d_embed: 8,
        };
        let model = build(&cfg, SharingSpec::for_variant(Variant::Sde), 3).unwrap();
        (model, tok, pairs)
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        let (model, tok, _) = tiny_model_and_tok();
        assert!(matches!(
            build_index(&model, &tok, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_answer_index_has_one_row() {
        let (model, tok, _) = tiny_model_and_tok();
        let idx = build_index(&model, &tok, &[("0".to_string(), "a1 a2".to_string())]).unwrap();
        assert_eq!(idx.embeddings.shape(), &[1, 8]);
        assert_eq!(idx.fingerprint, model.fingerprint());
    }

    #[test]
    fn duplicate_answer_texts_embed_identically() {
        let (model, tok, _) = tiny_model_and_tok();
        let corpus = vec![
            ("x".to_string(), "a3 a4".to_string()),
            ("y".to_string(), "a3 a4".to_string()),
        ];
        let idx = build_index(&model, &tok, &corpus).unwrap();
        assert_eq!(
            idx.embeddings.row(0),
            idx.embeddings.row(1),
            "identical texts produced different rows"
        );
    }

    #[test]
    fn sharded_build_equals_single_pass_bitwise() {
        let (model, tok, pairs) = tiny_model_and_tok();
        let corpus: Vec<(String, String)> = pairs
            .iter()
            .map(|p| (p.id.clone(), p.answer.clone()))
            .collect();
        let one = build_index_sharded(&model, &tok, &corpus, 1).unwrap();
        for shards in [2, 3, 7] {
            let many = build_index_sharded(&model, &tok, &corpus, shards).unwrap();
            assert!(one.embeddings.bitwise_eq(&many.embeddings), "{shards} shards");
            assert_eq!(one.ids, many.ids);
        }
    }

    #[test]
    fn evaluate_flags_missing_gold_answers() {
        let (model, tok, pairs) = tiny_model_and_tok();
        // Corpus lacks the answer for pair "0".
        let corpus: Vec<(String, String)> = pairs
            .iter()
            .skip(1)
            .map(|p| (p.id.clone(), p.answer.clone()))
            .collect();
        let report = evaluate(&model, &tok, &pairs, &corpus).unwrap();
        assert_eq!(report.missing_gold, 1);
        assert_eq!(report.per_query[0].gold_rank, None);
        assert_eq!(report.per_query[0].reciprocal, 0.0);
        assert!(report.p_at_1 <= report.mrr && report.mrr <= 1.0);
        assert!(report.summary_line().starts_with("p_at_1="));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let (model, tok, pairs) = tiny_model_and_tok();
        let corpus: Vec<(String, String)> = pairs
            .iter()
            .map(|p| (p.id.clone(), p.answer.clone()))
            .collect();
        let a = evaluate(&model, &tok, &pairs, &corpus).unwrap();
        let b = evaluate(&model, &tok, &pairs, &corpus).unwrap();
        assert_eq!(a.mrr.to_bits(), b.mrr.to_bits());
        assert_eq!(a.p_at_1.to_bits(), b.p_at_1.to_bits());
    }
}
