//! Image-side feature assembly, the multi-label sigmoid cross-entropy loss
//! on stand-in label heads, and the poem-side sentence encoder.
//!
//! CNN backbones are out of scope: per-aspect feature vectors arrive
//! precomputed through the features JSONL file (or synthesized for tests),
//! and the trainable heads expose the fine-tuning loss on top of them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{expect_schema, CheckpointReader, CheckpointWriter};
use crate::corpus::{tokenize_line, Poem, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::{rng_for, stream, uniform_matrix, uniform_vector};

/// Clip bound for probabilities inside the cross-entropy log.
pub const PROB_EPSILON: f64 = 1e-7;

/// Per-aspect feature vectors standing in for CNN outputs.
#[derive(Debug, Clone)]
pub struct ImageFeatures<F: Scalar> {
    pub image_id: String,
    pub object: Array1<F>,
    pub scene: Array1<F>,
    pub sentiment: Array1<F>,
}

impl<F: Scalar> ImageFeatures<F> {
    pub fn new(
        image_id: impl Into<String>,
        object: Array1<F>,
        scene: Array1<F>,
        sentiment: Array1<F>,
    ) -> Result<Self> {
        let d = object.len();
        if d == 0 {
            return Err(Error::EmptyInput("feature vectors must be nonempty"));
        }
        if scene.len() != d {
            return Err(Error::dim(d, scene.len(), "scene features"));
        }
        if sentiment.len() != d {
            return Err(Error::dim(d, sentiment.len(), "sentiment features"));
        }
        let all_finite = object
            .iter()
            .chain(scene.iter())
            .chain(sentiment.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidConfig("non-finite feature entry".into()));
        }
        Ok(ImageFeatures {
            image_id: image_id.into(),
            object,
            scene,
            sentiment,
        })
    }

    pub fn dim(&self) -> usize {
        self.object.len()
    }

    /// The concatenated (object, scene, sentiment) vector of length 3D.
    pub fn assembled(&self) -> Array1<F> {
        assemble(&self.object, &self.scene, &self.sentiment)
            .expect("per-aspect lengths checked at construction")
    }
}

/// Concatenates the three per-aspect vectors in (object, scene, sentiment)
/// order into a single N = 3D vector.
pub fn assemble<F: Scalar>(
    object: &Array1<F>,
    scene: &Array1<F>,
    sentiment: &Array1<F>,
) -> Result<Array1<F>> {
    let d = object.len();
    if scene.len() != d {
        return Err(Error::dim(d, scene.len(), "scene features"));
    }
    if sentiment.len() != d {
        return Err(Error::dim(d, sentiment.len(), "sentiment features"));
    }
    let mut out = Vec::with_capacity(3 * d);
    out.extend(object.iter().copied());
    out.extend(scene.iter().copied());
    out.extend(sentiment.iter().copied());
    Ok(Array1::from_vec(out))
}

// ---------------------------------------------------------------------------
// Features JSONL
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FeaturesHeader {
    #[serde(rename = "D")]
    d: usize,
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    image_id: String,
    object: Vec<f64>,
    scene: Vec<f64>,
    sentiment: Vec<f64>,
}

/// Reads a features JSONL file: a `{"D": n}` header record, then one record
/// per image. D must be consistent file-wide.
pub fn load_features<F: Scalar>(path: impl AsRef<Path>) -> Result<Vec<ImageFeatures<F>>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("features file is empty".into()))?;
    let header: FeaturesHeader =
        serde_json::from_str(&first?).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line: 1,
            msg: format!("expected {{\"D\": n}} header: {e}"),
        })?;
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        for (name, v) in [
            ("object", &rec.object),
            ("scene", &rec.scene),
            ("sentiment", &rec.sentiment),
        ] {
            if v.len() != header.d {
                return Err(Error::MalformedRecord {
                    path: path.display().to_string(),
                    line: idx + 1,
                    msg: format!("{name} has length {} but D = {}", v.len(), header.d),
                });
            }
        }
        let to_arr = |v: &[f64]| Array1::from_vec(v.iter().map(|&x| F::from_f64_lossy(x)).collect());
        out.push(ImageFeatures::new(
            rec.image_id,
            to_arr(&rec.object),
            to_arr(&rec.scene),
            to_arr(&rec.sentiment),
        )?);
    }
    Ok(out)
}

pub fn save_features<F: Scalar>(
    path: impl AsRef<Path>,
    features: &[ImageFeatures<F>],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = features.first().map(|f| f.dim()).unwrap_or(0);
    serde_json::to_writer(&mut w, &FeaturesHeader { d })?;
    w.write_all(b"\n")?;
    for f in features {
        if f.dim() != d {
            return Err(Error::dim(d, f.dim(), "features file D"));
        }
        let rec = FeatureRecord {
            image_id: f.image_id.clone(),
            object: f.object.iter().map(|v| v.to_f64_lossy()).collect(),
            scene: f.scene.iter().map(|v| v.to_f64_lossy()).collect(),
            sentiment: f.sentiment.iter().map(|v| v.to_f64_lossy()).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Index features by image id, rejecting duplicates.
pub fn index_features<F: Scalar>(
    features: &[ImageFeatures<F>],
) -> Result<BTreeMap<&str, &ImageFeatures<F>>> {
    let mut map = BTreeMap::new();
    for f in features {
        if map.insert(f.image_id.as_str(), f).is_some() {
            return Err(Error::DuplicateId {
                id: f.image_id.clone(),
            });
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Multi-label sigmoid cross-entropy and label heads
// ---------------------------------------------------------------------------

fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Mean sigmoid cross-entropy over the label dimension:
/// `-(1/L) sum_n [t_n log p_n + (1 - t_n) log(1 - p_n)]`, probabilities
/// clipped to [eps, 1 - eps].
pub fn sigmoid_ce_loss<F: Scalar>(logits: &Array1<F>, targets: &[u8]) -> Result<F> {
    if logits.len() != targets.len() {
        return Err(Error::dim(targets.len(), logits.len(), "labels"));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("no labels"));
    }
    let eps = F::from_f64_lossy(PROB_EPSILON);
    let one = F::one();
    let mut total = F::zero();
    for (&logit, &t) in logits.iter().zip(targets) {
        let p = sigmoid(logit).max(eps).min(one - eps);
        let t = F::from_f64_lossy(f64::from(t));
        total += t * p.ln() + (one - t) * (one - p).ln();
    }
    Ok(-total / F::from_f64_lossy(logits.len() as f64))
}

/// Gradient of the mean sigmoid cross-entropy with respect to the logits:
/// `(p - t) / L` per label.
pub fn sigmoid_ce_grad<F: Scalar>(logits: &Array1<F>, targets: &[u8]) -> Result<Array1<F>> {
    if logits.len() != targets.len() {
        return Err(Error::dim(targets.len(), logits.len(), "labels"));
    }
    let inv_l = F::one() / F::from_f64_lossy(logits.len() as f64);
    Ok(Array1::from_shape_fn(logits.len(), |i| {
        (sigmoid(logits[i]) - F::from_f64_lossy(f64::from(targets[i]))) * inv_l
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aspect {
    Object,
    Scene,
    Sentiment,
}

/// Trainable linear head producing per-label logits over one aspect's
/// feature vector.
#[derive(Debug, Clone)]
pub struct MultiLabelHead<F: Scalar> {
    pub aspect: Aspect,
    pub weight: Array2<F>, // labels x D
    pub bias: Array1<F>,   // labels
}

impl<F: Scalar> MultiLabelHead<F> {
    pub fn new(aspect: Aspect, labels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::HEAD_INIT);
        MultiLabelHead {
            aspect,
            weight: uniform_matrix(&mut rng, labels, dim, 0.08),
            bias: uniform_vector(&mut rng, labels, 0.08),
        }
    }

    pub fn labels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn logits(&self, features: &Array1<F>) -> Result<Array1<F>> {
        if features.len() != self.weight.ncols() {
            return Err(Error::dim(self.weight.ncols(), features.len(), "head input"));
        }
        Ok(self.weight.dot(features) + &self.bias)
    }

    /// Predicted per-label probabilities.
    pub fn probabilities(&self, features: &Array1<F>) -> Result<Array1<F>> {
        Ok(self.logits(features)?.mapv(sigmoid))
    }
}

#[derive(Debug, Clone)]
pub struct HeadTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Loss curve from a training run: entry 0 is the pre-training mean loss.
#[derive(Debug, Clone)]
pub struct TrainCurve {
    pub epoch_losses: Vec<f64>,
}

impl TrainCurve {
    pub fn initial(&self) -> f64 {
        *self.epoch_losses.first().expect("curve has epoch 0")
    }

    pub fn last(&self) -> f64 {
        *self.epoch_losses.last().expect("curve has epoch 0")
    }
}

/// Trains one aspect head by per-example SGD on the sigmoid cross-entropy.
/// Examples pair the aspect's feature vector with its binary target vector.
pub fn train_multilabel_head<F: Scalar>(
    head: &mut MultiLabelHead<F>,
    examples: &[(Array1<F>, Vec<u8>)],
    config: &HeadTrainConfig,
) -> Result<TrainCurve> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no examples for the label head"));
    }
    for (features, targets) in examples {
        if targets.len() != head.labels() {
            return Err(Error::dim(head.labels(), targets.len(), "head targets"));
        }
        if features.len() != head.weight.ncols() {
            return Err(Error::dim(head.weight.ncols(), features.len(), "head input"));
        }
    }
    let mean_loss = |head: &MultiLabelHead<F>| -> Result<f64> {
        let mut total = 0.0;
        for (features, targets) in examples {
            total += sigmoid_ce_loss(&head.logits(features)?, targets)?.to_f64_lossy();
        }
        Ok(total / examples.len() as f64)
    };

    let mut curve = vec![mean_loss(head)?];
    let lr = F::from_f64_lossy(config.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng_for(config.seed, stream::HEAD_INIT.wrapping_add(1));
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (features, targets) = &examples[i];
            let dlogits = sigmoid_ce_grad(&head.logits(features)?, targets)?;
            for (row, &g) in dlogits.iter().enumerate() {
                let update = features.mapv(|v| v * g * lr);
                let mut w_row = head.weight.row_mut(row);
                w_row -= &update;
                head.bias[row] -= g * lr;
            }
        }
        curve.push(mean_loss(head)?);
    }
    Ok(TrainCurve {
        epoch_losses: curve,
    })
}

// ---------------------------------------------------------------------------
// Sentence encoding
// ---------------------------------------------------------------------------

/// Pluggable fixed-length sentence encoder.
pub trait SentenceEncoder<F: Scalar> {
    fn dim(&self) -> usize;

    /// Deterministic M-vector for one nonempty line.
    fn encode_sentence(&self, line: &str) -> Result<Array1<F>>;
}

/// Elementwise mean of the per-line encodings.
pub fn encode_poem<F: Scalar, E: SentenceEncoder<F> + ?Sized>(
    poem: &Poem,
    encoder: &E,
) -> Result<Array1<F>> {
    if poem.lines.is_empty() {
        return Err(Error::EmptyPoem);
    }
    let mut acc = Array1::zeros(encoder.dim());
    for line in &poem.lines {
        acc = acc + encoder.encode_sentence(line)?;
    }
    Ok(acc / F::from_f64_lossy(poem.lines.len() as f64))
}

/// Default encoder: a trainable word-embedding table read out as the mean of
/// a line's token rows, UNK row for out-of-vocabulary words.
#[derive(Debug, Clone)]
pub struct WordMeanEncoder<F: Scalar> {
    vocab: Vocabulary,
    pub table: Array2<F>, // V x M
    pub seed: u64,
}

impl<F: Scalar> WordMeanEncoder<F> {
    pub fn new(vocab: Vocabulary, m: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::ENCODER_INIT);
        let table = uniform_matrix(&mut rng, vocab.len(), m, 0.08);
        WordMeanEncoder { vocab, table, seed }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn token_ids(&self, line: &str) -> Vec<u32> {
        tokenize_line(line)
            .iter()
            .map(|t| self.vocab.id_of(t).unwrap_or(UNK))
            .collect()
    }

    /// Per-token weights of a poem's encoding: the poem vector equals
    /// `sum_i w_i * table[token_i]`. Used to push gradients into the table.
    pub fn poem_token_weights(&self, poem: &Poem) -> Result<Vec<(u32, F)>> {
        if poem.lines.is_empty() {
            return Err(Error::EmptyPoem);
        }
        let line_w = F::one() / F::from_f64_lossy(poem.lines.len() as f64);
        let mut weights = Vec::new();
        for line in &poem.lines {
            let ids = self.token_ids(line);
            if ids.is_empty() {
                return Err(Error::EmptyInput("line with zero tokens"));
            }
            let w = line_w / F::from_f64_lossy(ids.len() as f64);
            for id in ids {
                weights.push((id, w));
            }
        }
        Ok(weights)
    }

    const SCHEMA: &'static str = "enc-v1";

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = EncoderHeader {
            schema: Self::SCHEMA.into(),
            v: self.vocab.len(),
            m: self.table.ncols(),
            seed: self.seed,
        };
        let mut w = CheckpointWriter::create(path, &header)?;
        w.write_matrix(&self.table)?;
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>, vocab: Vocabulary) -> Result<Self> {
        let (header, mut r) = CheckpointReader::open::<EncoderHeader>(path)?;
        expect_schema(&header.schema, Self::SCHEMA)?;
        if header.v != vocab.len() {
            return Err(Error::dim(header.v, vocab.len(), "encoder vocabulary"));
        }
        let table = r.read_matrix(header.v, header.m)?;
        r.finish()?;
        Ok(WordMeanEncoder {
            vocab,
            table,
            seed: header.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderHeader {
    schema: String,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "M")]
    m: usize,
    seed: u64,
}

impl<F: Scalar> SentenceEncoder<F> for WordMeanEncoder<F> {
    fn dim(&self) -> usize {
        self.table.ncols()
    }

    fn encode_sentence(&self, line: &str) -> Result<Array1<F>> {
        let ids = self.token_ids(line);
        if ids.is_empty() {
            return Err(Error::EmptyInput("line with zero tokens"));
        }
        let mut acc: Array1<F> = Array1::zeros(self.dim());
        for &id in &ids {
            acc = acc + self.table.row(id as usize);
        }
        Ok(acc / F::from_f64_lossy(ids.len() as f64))
    }
}
