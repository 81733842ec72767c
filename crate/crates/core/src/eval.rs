//! Retrieval metrics, zero-shot classification and the token-reduction sweep.

use std::io::{Read, Write};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ClipsError, Result};
use crate::model::ClipsModel;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::text::{pad_to_length, Reduction, TokenSequence, Vocab, PAD_ID};
use crate::toy_data::CaptionRecord;
use crate::training::{resize_image, run_stage, ContrastiveMode, TrainConfig};

/// Ground-truth image/text matches; every image and every text has at least one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    image_texts: Vec<Vec<usize>>,
    text_images: Vec<Vec<usize>>,
}

impl Pairing {
    pub fn new(n_images: usize, n_texts: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut image_texts = vec![Vec::new(); n_images];
        let mut text_images = vec![Vec::new(); n_texts];
        for &(i, t) in pairs {
            if i >= n_images || t >= n_texts {
                return Err(ClipsError::invalid(format!("pair ({i}, {t}) out of range")));
            }
            image_texts[i].push(t);
            text_images[t].push(i);
        }
        if let Some(i) = image_texts.iter().position(Vec::is_empty) {
            return Err(ClipsError::invalid(format!("image {i} has no true text")));
        }
        if let Some(t) = text_images.iter().position(Vec::is_empty) {
            return Err(ClipsError::invalid(format!("text {t} has no true image")));
        }
        Ok(Self { image_texts, text_images })
    }

    /// Image `i` matches text `i`.
    pub fn identity(n: usize) -> Self {
        Self { image_texts: (0..n).map(|i| vec![i]).collect(), text_images: (0..n).map(|i| vec![i]).collect() }
    }

    /// `owners[t]` is the image text `t` describes.
    pub fn from_owners(n_images: usize, owners: &[usize]) -> Result<Self> {
        let pairs: Vec<_> = owners.iter().enumerate().map(|(t, &i)| (i, t)).collect();
        Self::new(n_images, owners.len(), &pairs)
    }

    pub fn n_images(&self) -> usize {
        self.image_texts.len()
    }

    pub fn n_texts(&self) -> usize {
        self.text_images.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub n_images: usize,
    pub n_texts: usize,
    pub checkpoint_id: String,
    /// How equal similarities are ordered.
    pub tie_break: String,
    pub report_version: u32,
}

impl RetrievalReport {
    /// Mean of the two R@1 values.
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.i2t_r1 + self.t2i_r1)
    }
}

/// Position of the best-ranked true candidate in a descending ordering with
/// ties going to the lower index.
fn best_rank<T: Scalar>(scores: impl Fn(usize) -> T, n: usize, truth: &[usize]) -> usize {
    truth
        .iter()
        .map(|&t| {
            let st = scores(t);
            (0..n).filter(|&c| c != t && (scores(c) > st || (scores(c) == st && c < t))).count()
        })
        .min()
        .expect("non-empty truth")
}

fn recall(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// R@{1,5,10} in both directions over an `n_images × n_texts` similarity matrix.
pub fn retrieval_metrics<T: Scalar>(sim: &Matrix<T>, truth: &Pairing) -> Result<RetrievalReport> {
    let (ni, nt) = sim.shape();
    if ni == 0 || nt == 0 {
        return Err(ClipsError::invalid("empty similarity matrix"));
    }
    if (ni, nt) != (truth.n_images(), truth.n_texts()) {
        return Err(ClipsError::invalid(format!(
            "similarity is {ni}x{nt}, pairing covers {}x{}",
            truth.n_images(),
            truth.n_texts()
        )));
    }
    if !sim.all_finite() {
        return Err(ClipsError::invalid("similarity matrix has non-finite entries"));
    }
    let i2t: Vec<usize> =
        (0..ni).into_par_iter().map(|i| best_rank(|c| sim.get(i, c), nt, &truth.image_texts[i])).collect();
    let t2i: Vec<usize> =
        (0..nt).into_par_iter().map(|t| best_rank(|c| sim.get(c, t), ni, &truth.text_images[t])).collect();
    Ok(RetrievalReport {
        i2t_r1: recall(&i2t, 1),
        i2t_r5: recall(&i2t, 5),
        i2t_r10: recall(&i2t, 10),
        t2i_r1: recall(&t2i, 1),
        t2i_r5: recall(&t2i, 5),
        t2i_r10: recall(&t2i, 10),
        n_images: ni,
        n_texts: nt,
        checkpoint_id: String::new(),
        tie_break: "lower_index".into(),
        report_version: 1,
    })
}

/// Top-1 accuracy of nearest class centroid; `class_prompts[c]` holds one embedding per prompt row.
pub fn zero_shot_classify<T: Scalar>(
    image_embeds: &Matrix<T>,
    class_prompts: &[Matrix<T>],
    labels: &[usize],
) -> Result<f64> {
    if class_prompts.is_empty() {
        return Err(ClipsError::invalid("no classes"));
    }
    if labels.len() != image_embeds.rows() || labels.is_empty() {
        return Err(ClipsError::invalid("one label per image required"));
    }
    let d = image_embeds.cols();
    let mut centroids = Matrix::zeros(class_prompts.len(), d);
    for (c, p) in class_prompts.iter().enumerate() {
        if p.rows() == 0 {
            return Err(ClipsError::invalid(format!("class {c} has no prompts")));
        }
        if p.cols() != d {
            return Err(ClipsError::invalid("prompt embedding width differs from image embeddings"));
        }
        let row = centroids.row_mut(c);
        for r in 0..p.rows() {
            for (o, &v) in row.iter_mut().zip(p.row(r)) {
                *o += v;
            }
        }
    }
    let centroids = centroids.l2_normalize_rows();
    let sim = image_embeds.matmul_t(&centroids);
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_prompts.len() {
            return Err(ClipsError::invalid(format!("label {y} has no class")));
        }
        let row = sim.row(i);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        correct += (best == y) as usize;
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Batch size for embedding passes during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Embeds every record image and every retrieval text and scores retrieval.
pub fn evaluate_retrieval<T: Scalar>(
    model: &ClipsModel<T>,
    records: &[CaptionRecord],
    vocab: &Vocab,
) -> Result<RetrievalReport> {
    if records.is_empty() {
        return Err(ClipsError::invalid("no evaluation records"));
    }
    let res = model.config().image_size;
    let lin = model.config().input_token_len;
    let mut images = Vec::with_capacity(records.len());
    let mut texts: Vec<TokenSequence> = Vec::new();
    let mut owners = Vec::new();
    for (i, r) in records.iter().enumerate() {
        images.push(resize_image(&r.image.load()?, res));
        for t in r.retrieval_texts() {
            let ids = vocab.tokenize(&t);
            if ids.is_empty() {
                continue;
            }
            texts.push(pad_to_length(&ids, lin, PAD_ID));
            owners.push(i);
        }
    }
    let pairing = Pairing::from_owners(records.len(), &owners)?;
    let ie = model.image_embeddings(&images, EVAL_CHUNK)?;
    let te = model.text_embeddings(&texts, EVAL_CHUNK)?;
    retrieval_metrics(&ie.matmul_t(&te), &pairing)
}

/// One cell of the token-length sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub length: usize,
    pub seed: u64,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
    pub mean_r1: f64,
}

impl SweepRow {
    /// Failed cells carry NaN metrics.
    pub fn failed(&self) -> bool {
        self.mean_r1.is_nan()
    }
}

/// Training configuration of a single sweep cell: contrastive only, web caption plus reduced synthetic caption.
pub fn sweep_cell_config(base: &TrainConfig, strategy: &str, length: usize, seed: u64) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.beta = 0.0;
    cfg.contrastive = ContrastiveMode::MultiPositive;
    cfg.sub_reduction = Reduction::from_parts(strategy, Some(length))?;
    cfg.seed = seed;
    Ok(cfg)
}

/// Trains and evaluates every (strategy, length, seed) cell; cell failures are recorded, not raised.
pub fn inverse_effect_sweep(
    base: &TrainConfig,
    train: &[CaptionRecord],
    eval: &[CaptionRecord],
    vocab: &Vocab,
    strategies: &[String],
    lengths: &[usize],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    for s in strategies {
        sweep_cell_config(base, s, 1, 0)?;
    }
    let cells: Vec<(String, usize, u64)> = strategies
        .iter()
        .flat_map(|s| lengths.iter().flat_map(move |&l| seeds.iter().map(move |&k| (s.clone(), l, k))))
        .collect();
    let run = |(strategy, length, seed): &(String, usize, u64)| -> SweepRow {
        let outcome = sweep_cell_config(base, strategy, *length, *seed).and_then(|cfg| {
            let out = run_stage::<f32>(&cfg, train, vocab, None, |_| Ok(()))?;
            evaluate_retrieval(&out.model, eval, vocab)
        });
        let (a, b) = match outcome {
            Ok(r) => (r.i2t_r1, r.t2i_r1),
            Err(e) => {
                warn!("sweep cell {strategy}:{length} seed {seed} failed: {e}");
                (f64::NAN, f64::NAN)
            }
        };
        info!("cell {strategy}:{length} seed {seed}: i2t {a:.2} t2i {b:.2}");
        SweepRow { strategy: strategy.clone(), length: *length, seed: *seed, r1_i2t: a, r1_t2i: b, mean_r1: 0.5 * (a + b) }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ClipsError::config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cells.par_iter().map(run).collect()))
}

pub const SWEEP_COLUMNS: [&str; 6] = ["strategy", "length", "seed", "r1_i2t", "r1_t2i", "mean_r1"];

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SWEEP_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(SWEEP_COLUMNS) {
        return Err(ClipsError::invalid(format!("unexpected sweep columns: {headers:?}")));
    }
    rd.deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> ClipsError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ClipsError::Io(io),
        other => ClipsError::invalid(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_perfect() {
        let r = retrieval_metrics(&Matrix::<f64>::identity(10), &Pairing::identity(10)).unwrap();
        for v in [r.i2t_r1, r.i2t_r5, r.i2t_r10, r.t2i_r1, r.t2i_r5, r.t2i_r10] {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn anti_diagonal_truth() {
        let owners: Vec<usize> = (0..10).map(|t| 9 - t).collect();
        let p = Pairing::from_owners(10, &owners).unwrap();
        let r = retrieval_metrics(&Matrix::<f64>::identity(10), &p).unwrap();
        assert_eq!(r.i2t_r1, 0.0);
        assert_eq!(r.i2t_r10, 100.0);
        assert_eq!(r.t2i_r1, 0.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let sim = Matrix::<f64>::filled(3, 3, 0.5);
        let r = retrieval_metrics(&sim, &Pairing::identity(3)).unwrap();
        assert!((r.i2t_r1 - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn multi_caption_truth_counts_any_match() {
        // image 0 owns texts 0 and 1; image 1 owns text 2
        let p = Pairing::from_owners(2, &[0, 0, 1]).unwrap();
        let sim = Matrix::from_vec(2, 3, vec![0.1, 0.9, 0.5, 0.0, 0.2, 0.8]);
        let r = retrieval_metrics(&sim, &p).unwrap();
        assert_eq!(r.i2t_r1, 100.0);
        assert!((r.t2i_r1 - 100.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(retrieval_metrics(&Matrix::<f64>::zeros(0, 0), &Pairing::identity(0)).is_err());
        assert!(Pairing::from_owners(3, &[0, 1]).is_err());
        assert!(zero_shot_classify(&Matrix::<f64>::identity(2), &[Matrix::identity(2), Matrix::zeros(0, 2)], &[0, 1])
            .is_err());
    }

    #[test]
    fn zero_shot_separable() {
        let imgs = Matrix::<f64>::identity(3);
        let classes: Vec<_> = (0..3).map(|c| imgs.slice_rows(c, c + 1)).collect();
        assert_eq!(zero_shot_classify(&imgs, &classes, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(zero_shot_classify(&imgs, &classes, &[1, 2, 0]).unwrap(), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            SweepRow { strategy: "truncate".into(), length: 8, seed: 0, r1_i2t: 10.0, r1_t2i: 20.0, mean_r1: 15.0 },
            SweepRow {
                strategy: "subcaption".into(),
                length: 16,
                seed: 1,
                r1_i2t: f64::NAN,
                r1_t2i: f64::NAN,
                mean_r1: f64::NAN,
            },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("strategy,length,seed,r1_i2t,r1_t2i,mean_r1\n"));
        let back = read_sweep_csv(&buf[..]).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].failed());
        assert!(read_sweep_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
