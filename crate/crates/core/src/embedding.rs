//! Deep coupled visual-poetic embedding: two affine maps projecting images
//! and poems into a shared K-space, trained with a pairwise hinge ranking
//! loss over resampled contrastive negatives, plus cosine retrieval and
//! retrieval-based dataset expansion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{expect_schema, CheckpointReader, CheckpointWriter};
use crate::corpus::{Origin, PairedExample, Poem};
use crate::error::{Error, Result};
use crate::features::{encode_poem, ImageFeatures, SentenceEncoder, TrainCurve, WordMeanEncoder};
use crate::num::Scalar;
use crate::rng::{rng_for, stream, uniform_matrix, uniform_vector};

/// The two linear maps (W_v, b_v, W_t, b_t) into the shared K-space.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPoeticEmbedding<F: Scalar> {
    pub w_v: Array2<F>, // K x N
    pub b_v: Array1<F>, // K
    pub w_t: Array2<F>, // K x M
    pub b_t: Array1<F>, // K
    pub seed: u64,
}

impl<F: Scalar> VisualPoeticEmbedding<F> {
    pub fn new(k: usize, n: usize, m: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, stream::EMBEDDING_INIT);
        let scale_v = 1.0 / (n as f64).sqrt();
        let scale_t = 1.0 / (m as f64).sqrt();
        VisualPoeticEmbedding {
            w_v: uniform_matrix(&mut rng, k, n, scale_v),
            b_v: Array1::zeros(k),
            w_t: uniform_matrix(&mut rng, k, m, scale_t),
            b_t: Array1::zeros(k),
            seed,
        }
    }

    pub fn k(&self) -> usize {
        self.b_v.len()
    }

    pub fn n(&self) -> usize {
        self.w_v.ncols()
    }

    pub fn m(&self) -> usize {
        self.w_t.ncols()
    }

    /// x = W_v . v + b_v
    pub fn embed_image(&self, v: &Array1<F>) -> Result<Array1<F>> {
        if v.len() != self.n() {
            return Err(Error::dim(self.n(), v.len(), "image feature vector"));
        }
        Ok(self.w_v.dot(v) + &self.b_v)
    }

    /// m = W_t . t + b_t
    pub fn embed_poem(&self, t: &Array1<F>) -> Result<Array1<F>> {
        if t.len() != self.m() {
            return Err(Error::dim(self.m(), t.len(), "poem feature vector"));
        }
        Ok(self.w_t.dot(t) + &self.b_t)
    }

    pub fn all_finite(&self) -> bool {
        self.w_v.iter().all(|v| v.is_finite())
            && self.b_v.iter().all(|v| v.is_finite())
            && self.w_t.iter().all(|v| v.is_finite())
            && self.b_t.iter().all(|v| v.is_finite())
    }

    const SCHEMA: &'static str = "vpe-v1";

    /// Writes the vpe-v1 checkpoint: header, then W_v, b_v, W_t, b_t.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = VpeHeader {
            schema: Self::SCHEMA.into(),
            k: self.k(),
            n: self.n(),
            m: self.m(),
            seed: self.seed,
        };
        let mut w = CheckpointWriter::create(path, &header)?;
        w.write_matrix(&self.w_v)?;
        w.write_vector(&self.b_v)?;
        w.write_matrix(&self.w_t)?;
        w.write_vector(&self.b_t)?;
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, mut r) = CheckpointReader::open::<VpeHeader>(path)?;
        expect_schema(&header.schema, Self::SCHEMA)?;
        let model = VisualPoeticEmbedding {
            w_v: r.read_matrix(header.k, header.n)?,
            b_v: r.read_vector(header.k)?,
            w_t: r.read_matrix(header.k, header.m)?,
            b_t: r.read_vector(header.k)?,
            seed: header.seed,
        };
        r.finish()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct VpeHeader {
    schema: String,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "M")]
    m: usize,
    seed: u64,
}

/// Cosine similarity in the shared space.
pub fn relevance<F: Scalar>(x: &Array1<F>, m: &Array1<F>) -> Result<F> {
    if x.len() != m.len() {
        return Err(Error::dim(x.len(), m.len(), "relevance operands"));
    }
    let nx = x.dot(x).sqrt();
    let nm = m.dot(m).sqrt();
    if nx == F::zero() || nm == F::zero() {
        return Err(Error::ZeroVector);
    }
    Ok(x.dot(m) / (nx * nm))
}

// ---------------------------------------------------------------------------
// Ranking loss
// ---------------------------------------------------------------------------

/// One positive pair in the shared space with its contrastive negatives.
#[derive(Debug, Clone)]
pub struct RankingPair<F: Scalar> {
    pub x: Array1<F>,
    pub m: Array1<F>,
    pub neg_m: Vec<Array1<F>>,
    pub neg_x: Vec<Array1<F>>,
}

/// Pairwise hinge ranking loss with dot-product similarity:
/// `L = sum_x sum_k max(0, a - x.m + x.m_k) + sum_m sum_k max(0, a - m.x + m.x_k)`.
pub fn ranking_loss<F: Scalar>(pairs: &[RankingPair<F>], alpha: F) -> Result<F> {
    let mut total = F::zero();
    for pair in pairs {
        if pair.neg_m.is_empty() || pair.neg_x.is_empty() {
            return Err(Error::NoNegatives);
        }
        let pos = pair.x.dot(&pair.m);
        for mk in &pair.neg_m {
            total += (alpha - pos + pair.x.dot(mk)).max(F::zero());
        }
        for xk in &pair.neg_x {
            total += (alpha - pos + pair.m.dot(xk)).max(F::zero());
        }
    }
    Ok(total)
}

/// Gradients of the ranking loss with respect to the four parameter blocks.
#[derive(Debug, Clone)]
pub struct EmbeddingGrads<F: Scalar> {
    pub w_v: Array2<F>,
    pub b_v: Array1<F>,
    pub w_t: Array2<F>,
    pub b_t: Array1<F>,
}

impl<F: Scalar> EmbeddingGrads<F> {
    pub fn zeros_like(model: &VisualPoeticEmbedding<F>) -> Self {
        EmbeddingGrads {
            w_v: Array2::zeros(model.w_v.dim()),
            b_v: Array1::zeros(model.b_v.len()),
            w_t: Array2::zeros(model.w_t.dim()),
            b_t: Array1::zeros(model.b_t.len()),
        }
    }
}

impl<F: Scalar> VisualPoeticEmbedding<F> {
    /// One SGD descent step.
    pub fn apply_descent(&mut self, grads: &EmbeddingGrads<F>, lr: F) {
        self.w_v.scaled_add(-lr, &grads.w_v);
        self.b_v.scaled_add(-lr, &grads.b_v);
        self.w_t.scaled_add(-lr, &grads.w_t);
        self.b_t.scaled_add(-lr, &grads.b_t);
    }
}

/// A raw-input training example: image features, poem features and raw
/// negatives, all in input space (the model embeds them internally).
#[derive(Debug, Clone)]
pub struct RawRankingExample<F: Scalar> {
    pub v: Array1<F>,
    pub t: Array1<F>,
    pub neg_t: Vec<Array1<F>>,
    pub neg_v: Vec<Array1<F>>,
}

/// Loss plus gradients of one raw example. `d_t` and `d_neg_t` carry the
/// gradient with respect to the poem input vectors so a trainable sentence
/// encoder can continue the chain.
pub struct RankingGradOutput<F: Scalar> {
    pub loss: F,
    pub grads: EmbeddingGrads<F>,
    pub d_t: Array1<F>,
    pub d_neg_t: Vec<Array1<F>>,
}

pub fn ranking_loss_grads<F: Scalar>(
    model: &VisualPoeticEmbedding<F>,
    example: &RawRankingExample<F>,
    alpha: F,
) -> Result<RankingGradOutput<F>> {
    if example.neg_t.is_empty() || example.neg_v.is_empty() {
        return Err(Error::NoNegatives);
    }
    let x = model.embed_image(&example.v)?;
    let m = model.embed_poem(&example.t)?;
    let neg_m: Vec<Array1<F>> = example
        .neg_t
        .iter()
        .map(|t| model.embed_poem(t))
        .collect::<Result<_>>()?;
    let neg_x: Vec<Array1<F>> = example
        .neg_v
        .iter()
        .map(|v| model.embed_image(v))
        .collect::<Result<_>>()?;

    let pos = x.dot(&m);
    let mut loss = F::zero();
    let mut dx: Array1<F> = Array1::zeros(x.len());
    let mut dm: Array1<F> = Array1::zeros(m.len());
    let mut d_neg_m: Vec<Array1<F>> = vec![Array1::zeros(m.len()); neg_m.len()];
    let mut d_neg_x: Vec<Array1<F>> = vec![Array1::zeros(x.len()); neg_x.len()];

    for (k, mk) in neg_m.iter().enumerate() {
        let hinge = alpha - pos + x.dot(mk);
        if hinge > F::zero() {
            loss += hinge;
            dx = dx + mk - &m;
            dm.scaled_add(-F::one(), &x);
            d_neg_m[k] = &d_neg_m[k] + &x;
        }
    }
    for (k, xk) in neg_x.iter().enumerate() {
        let hinge = alpha - pos + m.dot(xk);
        if hinge > F::zero() {
            loss += hinge;
            dm = dm + xk - &x;
            dx.scaled_add(-F::one(), &m);
            d_neg_x[k] = &d_neg_x[k] + &m;
        }
    }

    // x = W_v v + b_v and m = W_t t + b_t, so dW = d_out (x) input.
    let mut grads = EmbeddingGrads::zeros_like(model);
    outer_add(&mut grads.w_v, &dx, &example.v);
    grads.b_v = grads.b_v + &dx;
    outer_add(&mut grads.w_t, &dm, &example.t);
    grads.b_t = grads.b_t + &dm;
    for (dxk, vk) in d_neg_x.iter().zip(&example.neg_v) {
        outer_add(&mut grads.w_v, dxk, vk);
        grads.b_v = grads.b_v + dxk;
    }
    for (dmk, tk) in d_neg_m.iter().zip(&example.neg_t) {
        outer_add(&mut grads.w_t, dmk, tk);
        grads.b_t = grads.b_t + dmk;
    }

    let d_t = model.w_t.t().dot(&dm);
    let d_neg_t = d_neg_m.iter().map(|dmk| model.w_t.t().dot(dmk)).collect();

    Ok(RankingGradOutput {
        loss,
        grads,
        d_t,
        d_neg_t,
    })
}

fn outer_add<F: Scalar>(acc: &mut Array2<F>, a: &Array1<F>, b: &Array1<F>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != F::zero() {
            let mut row = acc.row_mut(i);
            row.scaled_add(ai, b);
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Hinge margin, negative count and optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingConfig {
    pub margin: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            margin: 0.2,
            negatives: 127,
            epochs: 30,
            lr: 0.01,
            seed: 0,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::InvalidConfig("margin must be > 0".into()));
        }
        if self.negatives == 0 {
            return Err(Error::InvalidConfig("negatives must be >= 1".into()));
        }
        Ok(())
    }
}

struct PairView<F: Scalar> {
    image_idx: usize,
    poem_idx: usize,
    v: Array1<F>,
    /// poem indices that may serve as contrastive poems for this image
    neg_poem_pool: Vec<usize>,
    /// image indices that may serve as contrastive images for this poem
    neg_image_pool: Vec<usize>,
}

/// Trains the embedding (and the sentence-encoder table jointly) by
/// per-pair SGD on the hinge ranking loss, redrawing the contrastive
/// negatives uniformly each epoch. Negatives exclude the true partner and
/// anything else paired with the same image or poem.
pub fn train_embedding<F: Scalar>(
    model: &mut VisualPoeticEmbedding<F>,
    encoder: &mut WordMeanEncoder<F>,
    pairs: &[PairedExample],
    poems: &[Poem],
    images: &[ImageFeatures<F>],
    config: &RankingConfig,
) -> Result<TrainCurve> {
    config.validate()?;
    if pairs.len() < 2 {
        return Err(Error::EmptyInput("need at least 2 pairs to form negatives"));
    }
    let distinct_poems: BTreeSet<&str> = pairs.iter().map(|p| p.poem_id.as_str()).collect();
    if distinct_poems.len() < 2 {
        return Err(Error::EmptyInput("need at least 2 distinct poems"));
    }

    let poem_index: HashMap<&str, usize> =
        poems.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let image_index: HashMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(i, f)| (f.image_id.as_str(), i))
        .collect();

    // ids paired together, in both directions
    let mut poems_of_image: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    let mut images_of_poem: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    let mut views: Vec<PairView<F>> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let &image_idx = image_index.get(pair.image_id.as_str()).ok_or(Error::UnknownId {
            id: pair.image_id.clone(),
            referrer: "pairs dataset (images)",
        })?;
        let &poem_idx = poem_index.get(pair.poem_id.as_str()).ok_or(Error::UnknownId {
            id: pair.poem_id.clone(),
            referrer: "pairs dataset (poems)",
        })?;
        poems_of_image.entry(image_idx).or_default().insert(poem_idx);
        images_of_poem.entry(poem_idx).or_default().insert(image_idx);
        views.push(PairView {
            image_idx,
            poem_idx,
            v: images[image_idx].assembled(),
            neg_poem_pool: Vec::new(),
            neg_image_pool: Vec::new(),
        });
    }
    for view in &mut views {
        let own_poems = &poems_of_image[&view.image_idx];
        view.neg_poem_pool = (0..poems.len()).filter(|i| !own_poems.contains(i)).collect();
        let own_images = &images_of_poem[&view.poem_idx];
        view.neg_image_pool = (0..images.len()).filter(|i| !own_images.contains(i)).collect();
        if view.neg_poem_pool.is_empty() || view.neg_image_pool.is_empty() {
            return Err(Error::NoNegatives);
        }
    }

    let alpha = F::from_f64_lossy(config.margin);
    let lr = F::from_f64_lossy(config.lr);
    let mut rng = rng_for(config.seed, stream::EMBEDDING_NEGATIVES);

    let draw = |rng: &mut rand_chacha::ChaCha8Rng, views: &[PairView<F>]| {
        views
            .iter()
            .map(|view| {
                let neg_poems: Vec<usize> = (0..config.negatives)
                    .map(|_| view.neg_poem_pool[rng.gen_range(0..view.neg_poem_pool.len())])
                    .collect();
                let neg_images: Vec<usize> = (0..config.negatives)
                    .map(|_| view.neg_image_pool[rng.gen_range(0..view.neg_image_pool.len())])
                    .collect();
                (neg_poems, neg_images)
            })
            .collect::<Vec<_>>()
    };

    let build_example = |view: &PairView<F>,
                         negs: &(Vec<usize>, Vec<usize>),
                         encoder: &WordMeanEncoder<F>|
     -> Result<RawRankingExample<F>> {
        Ok(RawRankingExample {
            v: view.v.clone(),
            t: encode_poem(&poems[view.poem_idx], encoder)?,
            neg_t: negs
                .0
                .iter()
                .map(|&i| encode_poem(&poems[i], encoder))
                .collect::<Result<_>>()?,
            neg_v: negs.1.iter().map(|&i| images[i].assembled()).collect(),
        })
    };

    let mean_loss = |model: &VisualPoeticEmbedding<F>,
                     encoder: &WordMeanEncoder<F>,
                     negatives: &[(Vec<usize>, Vec<usize>)]|
     -> Result<f64> {
        let mut total = 0.0;
        for (view, negs) in views.iter().zip(negatives) {
            let ex = build_example(view, negs, encoder)?;
            let out = ranking_loss_grads(model, &ex, alpha)?;
            total += out.loss.to_f64_lossy();
        }
        Ok(total / views.len() as f64)
    };

    let mut curve = Vec::with_capacity(config.epochs + 1);
    let mut order: Vec<usize> = (0..views.len()).collect();
    for epoch in 0..config.epochs {
        let negatives = draw(&mut rng, &views);
        curve.push(mean_loss(model, encoder, &negatives)?);
        let _ = epoch;
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = build_example(&views[i], &negatives[i], encoder)?;
            let out = ranking_loss_grads(model, &ex, alpha)?;
            model.apply_descent(&out.grads, lr);
            // continue the chain into the encoder table rows
            let weights = encoder.poem_token_weights(&poems[views[i].poem_idx])?;
            for (token, w) in weights {
                let mut row = encoder.table.row_mut(token as usize);
                row.scaled_add(-lr * w, &out.d_t);
            }
            for (dtk, &poem_i) in out.d_neg_t.iter().zip(&negatives[i].0) {
                let weights = encoder.poem_token_weights(&poems[poem_i])?;
                for (token, w) in weights {
                    let mut row = encoder.table.row_mut(token as usize);
                    row.scaled_add(-lr * w, dtk);
                }
            }
        }
        if !model.all_finite() || !encoder.table.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence("embedding training"));
        }
    }
    let negatives = draw(&mut rng, &views);
    curve.push(mean_loss(model, encoder, &negatives)?);
    Ok(TrainCurve {
        epoch_losses: curve,
    })
}

// ---------------------------------------------------------------------------
// Retrieval and dataset expansion
// ---------------------------------------------------------------------------

/// Embeds every corpus poem; entries align with `poems` by index.
pub fn poem_embeddings<F: Scalar, E: SentenceEncoder<F> + ?Sized>(
    model: &VisualPoeticEmbedding<F>,
    encoder: &E,
    poems: &[Poem],
) -> Result<Vec<Array1<F>>> {
    poems
        .iter()
        .map(|p| model.embed_poem(&encode_poem(p, encoder)?))
        .collect()
}

/// Full ranking of corpus indices by cosine against `x`, descending, ties
/// broken by ascending poem id.
fn rank_by_relevance<F: Scalar>(
    x: &Array1<F>,
    poems: &[Poem],
    embeddings: &[Array1<F>],
) -> Result<Vec<(usize, F)>> {
    let mut scored: Vec<(usize, F)> = embeddings
        .iter()
        .enumerate()
        .map(|(i, m)| Ok((i, relevance(x, m)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("cosines are finite")
            .then_with(|| poems[a.0].id.cmp(&poems[b.0].id))
    });
    Ok(scored)
}

/// The k most relevant corpus poems for an image, best first.
pub fn retrieve_topk<'a, F: Scalar, E: SentenceEncoder<F> + ?Sized>(
    features: &ImageFeatures<F>,
    poems: &'a [Poem],
    model: &VisualPoeticEmbedding<F>,
    encoder: &E,
    k: usize,
) -> Result<Vec<(&'a Poem, F)>> {
    if poems.len() < k {
        return Err(Error::CorpusTooSmall {
            corpus: poems.len(),
            k,
        });
    }
    let x = model.embed_image(&features.assembled())?;
    let embeddings = poem_embeddings(model, encoder, poems)?;
    let ranked = rank_by_relevance(&x, poems, &embeddings)?;
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(i, score)| (&poems[i], score))
        .collect())
}

/// Expands a human-annotated pairs dataset: each image keeps its human
/// pair(s) and gains up to `k` retrieved poems, skipping anything already
/// paired to it (by id or duplicate normalized text).
pub fn expand_dataset<F: Scalar, E: SentenceEncoder<F> + ?Sized>(
    human_pairs: &[PairedExample],
    poems: &[Poem],
    images: &[ImageFeatures<F>],
    model: &VisualPoeticEmbedding<F>,
    encoder: &E,
    k: usize,
) -> Result<Vec<PairedExample>> {
    let poem_by_id: BTreeMap<&str, &Poem> = poems.iter().map(|p| (p.id.as_str(), p)).collect();
    let image_by_id: BTreeMap<&str, &ImageFeatures<F>> =
        images.iter().map(|f| (f.image_id.as_str(), f)).collect();

    // per image: ids and normalized texts already taken
    let mut taken_ids: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut taken_texts: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut image_order: Vec<&str> = Vec::new();
    for pair in human_pairs {
        let image_id = pair.image_id.as_str();
        if !taken_ids.contains_key(image_id) {
            image_order.push(image_id);
        }
        taken_ids.entry(image_id).or_default().insert(&pair.poem_id);
        if let Some(poem) = poem_by_id.get(pair.poem_id.as_str()) {
            taken_texts
                .entry(image_id)
                .or_default()
                .insert(poem.normalized_text());
        }
    }

    let embeddings = poem_embeddings(model, encoder, poems)?;
    let mut expanded: Vec<PairedExample> = human_pairs.to_vec();
    for image_id in image_order {
        let features = image_by_id.get(image_id).ok_or(Error::UnknownId {
            id: image_id.to_string(),
            referrer: "expansion (images)",
        })?;
        let x = model.embed_image(&features.assembled())?;
        let ranked = rank_by_relevance(&x, poems, &embeddings)?;
        let ids = taken_ids.get_mut(image_id).expect("seeded from human pairs");
        let texts = taken_texts.entry(image_id).or_default();
        let mut added = 0;
        for (idx, _) in ranked {
            if added == k {
                break;
            }
            let poem = &poems[idx];
            let text = poem.normalized_text();
            if ids.contains(poem.id.as_str()) || texts.contains(&text) {
                continue;
            }
            ids.insert(poem.id.as_str());
            texts.insert(text);
            expanded.push(PairedExample {
                image_id: image_id.to_string(),
                poem_id: poem.id.clone(),
                origin: Origin::Retrieved,
            });
            added += 1;
        }
    }
    Ok(expanded)
}
