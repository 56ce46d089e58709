//! Embedding-space analysis: sampled question/answer embeddings, 2-D t-SNE
//! projection for visualization, and quantitative separation metrics
//! (centroid cosine, 2-means label agreement) computed on the raw
//! high-dimensional embeddings.

pub mod kmeans;
pub mod tsne;

pub use kmeans::{agreement_with_split, kmeans, KmeansResult};
pub use tsne::{
    conditional_probabilities, pairwise_squared_distances, symmetrize, tsne, TsneConfig,
    TsneResult,
};

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::QAPair;
use crate::encoder::{tokenize, TokenizerSpec};
use crate::error::{Error, Result};
use crate::sharing::{DualEncoderModel, Tower};
use crate::tensor::{cosine_sim_slices, Tape, Tensor};

const KMEANS_RESTARTS: usize = 20;

/// How separable the question and answer embedding sets are.
#[derive(Debug, Clone)]
pub struct SeparationReport {
    /// Cosine between the question centroid and the answer centroid.
    pub centroid_cosine: f64,
    /// Best agreement of an unsupervised 2-means clustering with the Q/A
    /// side labels, in [0.5, 1.0]. Near 1.0 the sides form disjoint groups;
    /// near 0.5 they are not separable.
    pub kmeans2_agreement: f64,
    pub tsne_kl_initial: Option<f64>,
    pub tsne_kl_final: Option<f64>,
}

impl SeparationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("centroid_cosine={}\n", self.centroid_cosine));
        out.push_str(&format!("kmeans2_agreement={}\n", self.kmeans2_agreement));
        if let Some(kl) = self.tsne_kl_initial {
            out.push_str(&format!("tsne_kl_initial={kl}\n"));
        }
        if let Some(kl) = self.tsne_kl_final {
            out.push_str(&format!("tsne_kl_final={kl}\n"));
        }
        out
    }
}

fn centroid(points: &Tensor) -> Vec<f64> {
    let (n, d) = (points.rows(), points.cols());
    let mut c = vec![0.0; d];
    for i in 0..n {
        for (acc, &v) in c.iter_mut().zip(points.row(i).iter()) {
            *acc += v;
        }
    }
    for acc in c.iter_mut() {
        *acc /= n as f64;
    }
    c
}

/// Stacks q rows then a rows into one matrix.
fn stack(q: &Tensor, a: &Tensor) -> Result<Tensor> {
    if q.cols() != a.cols() {
        return Err(Error::ShapeMismatch {
            op: "separation_metrics",
            lhs: q.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity((q.rows() + a.rows()) * q.cols());
    data.extend_from_slice(q.data());
    data.extend_from_slice(a.data());
    Tensor::new(vec![q.rows() + a.rows(), q.cols()], data)
}

/// Separation metrics over raw high-dimensional embeddings: centroid cosine
/// and 2-means agreement with the held-out Q/A labels (20 seeded restarts).
pub fn separation_metrics(
    q_embeds: &Tensor,
    a_embeds: &Tensor,
    seed: u64,
) -> Result<SeparationReport> {
    if q_embeds.rows() == 0 || a_embeds.rows() == 0 {
        return Err(Error::Config("separation_metrics: empty embedding set".to_string()));
    }
    let qc = centroid(q_embeds);
    let ac = centroid(a_embeds);
    if qc.iter().all(|&v| v == 0.0) || ac.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateVector(
            "separation_metrics: zero-norm centroid".to_string(),
        ));
    }
    let centroid_cosine = cosine_sim_slices(&qc, &ac)?;
    let union = stack(q_embeds, a_embeds)?;
    let clustering = kmeans(&union, 2, KMEANS_RESTARTS, seed)?;
    let kmeans2_agreement = agreement_with_split(&clustering.labels, q_embeds.rows());
    Ok(SeparationReport {
        centroid_cosine,
        kmeans2_agreement,
        tsne_kl_initial: None,
        tsne_kl_final: None,
    })
}

/// Samples question and answer embeddings independently (without
/// replacement, deterministic per seed) and encodes them through their
/// towers.
pub fn sample_eval_embeddings(
    model: &DualEncoderModel,
    tokenizer: &TokenizerSpec,
    eval_pairs: &[QAPair],
    n_per_side: usize,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if n_per_side == 0 {
        return Err(Error::Config("n_per_side must be >= 1".to_string()));
    }
    if eval_pairs.len() < n_per_side {
        return Err(Error::Config(format!(
            "eval set of {} pairs is smaller than n_per_side {}",
            eval_pairs.len(),
            n_per_side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_idx = sample(&mut rng, eval_pairs.len(), n_per_side).into_vec();
    let a_idx = sample(&mut rng, eval_pairs.len(), n_per_side).into_vec();
    let q = encode_side(model, tokenizer, Tower::Question, eval_pairs, &q_idx, |p| {
        &p.question
    })?;
    let a = encode_side(model, tokenizer, Tower::Answer, eval_pairs, &a_idx, |p| {
        &p.answer
    })?;
    Ok((q, a))
}

fn encode_side(
    model: &DualEncoderModel,
    tokenizer: &TokenizerSpec,
    tower: Tower,
    pairs: &[QAPair],
    indices: &[usize],
    text_of: impl Fn(&QAPair) -> &str,
) -> Result<Tensor> {
    let seq_len = model.config.max_seq_len;
    let d = model.config.d_embed;
    let mut rows = Vec::with_capacity(indices.len() * d);
    for chunk in indices.chunks(64) {
        let mut ids = Vec::with_capacity(chunk.len() * seq_len);
        let mut mask = Vec::with_capacity(chunk.len() * seq_len);
        for &i in chunk {
            let (t_ids, t_mask) = tokenize(text_of(&pairs[i]), tokenizer, seq_len)?;
            ids.extend(t_ids);
            mask.extend(t_mask);
        }
        let mut tape = Tape::new();
        let out = model.encode_tower_batch(&mut tape, tower, &ids, &mask, chunk.len())?;
        rows.extend_from_slice(tape.value(out.embedding).data());
    }
    Tensor::new(vec![indices.len(), d], rows)
}

/// Full analysis pipeline output.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    /// [2 * n_per_side, 2] t-SNE layout, question rows first.
    pub tsne: TsneResult,
    pub separation: SeparationReport,
    pub n_per_side: usize,
}

/// Samples embeddings, computes separation metrics on the raw embeddings,
/// and projects the L2-normalized union with t-SNE (squared Euclidean on
/// unit vectors is monotone in cosine distance, matching the training
/// geometry).
pub fn analyze(
    model: &DualEncoderModel,
    tokenizer: &TokenizerSpec,
    eval_pairs: &[QAPair],
    config: &TsneConfig,
) -> Result<AnalysisResult> {
    let (q, a) = sample_eval_embeddings(
        model,
        tokenizer,
        eval_pairs,
        config.sample_per_side,
        config.seed,
    )?;
    let mut separation = separation_metrics(&q, &a, config.seed)?;
    let union = stack(&q, &a)?;
    let normalized = l2_normalize_copy(&union)?;
    let tsne_result = tsne(&normalized, config)?;
    separation.tsne_kl_initial = Some(tsne_result.kl_initial);
    separation.tsne_kl_final = Some(tsne_result.kl_final);
    Ok(AnalysisResult {
        tsne: tsne_result,
        separation,
        n_per_side: config.sample_per_side,
    })
}

fn l2_normalize_copy(points: &Tensor) -> Result<Tensor> {
    let (n, d) = (points.rows(), points.cols());
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = points.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateVector(format!(
                "analysis: embedding row {i} has zero norm"
            )));
        }
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, d], data)
}
