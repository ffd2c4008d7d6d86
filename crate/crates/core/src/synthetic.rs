//! Seeded synthetic data with planted image/poem correspondence.
//!
//! Every image i and poem i are generated from a shared latent vector: the
//! image features are noisy linear mixes of the latent, and the poem spells
//! the latent out as content words keyed to per-dimension quantile buckets.
//! Pair (i, i) is therefore the unique best match, which gives retrieval and
//! adversarial training something real to learn at desk scale. A disjoint
//! long-lined prose corpus provides paragraphic style negatives.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PairedExample, Origin, Poem, Source};
use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::num::Scalar;
use crate::rng::{normal_vector, rng_for, stream};

/// Latent dimensions shared by an image and its poem.
pub const LATENT_DIM: usize = 12;
/// Quantile buckets per latent dimension (standard-normal quartiles).
pub const BUCKETS: usize = 4;

const BUCKET_EDGES: [f64; 3] = [-0.6745, 0.0, 0.6745];
const BUCKET_LETTERS: [char; BUCKETS] = ['a', 'b', 'c', 'd'];
const POEM_FILLERS: [&str; 6] = ["the", "and", "of", "in", "soft", "still"];
const PROSE_WORDS: [&str; 20] = [
    "report", "section", "detail", "process", "result", "factor", "method", "value", "table",
    "figure", "system", "record", "number", "sample", "output", "input", "case", "note", "item",
    "step",
];
const PROSE_FILLERS: [&str; 4] = ["which", "therefore", "however", "moreover"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub corpus_size: usize,
    /// per-aspect feature dimension D
    pub d: usize,
    /// sentence-encoder width recorded for downstream stages
    pub m: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.corpus_size == 0 || self.d == 0 || self.m == 0 {
            return Err(Error::InvalidConfig("synthetic sizes must be >= 1".into()));
        }
        if self.corpus_size < self.n_images {
            return Err(Error::InvalidConfig(
                "corpus_size must be >= n_images (the paired poems live in the corpus)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData<F: Scalar> {
    pub features: Vec<ImageFeatures<F>>,
    /// corpus poems; the first `n_images` are the human-paired ones
    pub poems: Vec<Poem>,
    pub pairs: Vec<PairedExample>,
    pub paragraphs: Vec<Poem>,
}

fn bucket_of(z: f64) -> usize {
    BUCKET_EDGES.iter().position(|&edge| z < edge).unwrap_or(BUCKETS - 1)
}

/// The content word encoding (dimension, bucket).
pub fn bucket_word(dim: usize, bucket: usize) -> String {
    format!("w{}{}", dim, BUCKET_LETTERS[bucket])
}

fn poem_lines_for(latent: &[f64], rng: &mut ChaCha8Rng) -> Vec<String> {
    // 4 lines, each a filler plus three consecutive latent dimensions
    let mut lines = Vec::with_capacity(LATENT_DIM / 3);
    for chunk in 0..LATENT_DIM / 3 {
        let filler = POEM_FILLERS[rng.gen_range(0..POEM_FILLERS.len())];
        let mut words = vec![filler.to_string()];
        for slot in 0..3 {
            let dim = chunk * 3 + slot;
            words.push(bucket_word(dim, bucket_of(latent[dim])));
        }
        lines.push(words.join(" "));
    }
    lines
}

fn paragraph_lines(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n_lines = rng.gen_range(3..=4);
    (0..n_lines)
        .map(|_| {
            let n_words = rng.gen_range(10..=13);
            let words: Vec<&str> = (0..n_words)
                .map(|w| {
                    if w % 5 == 4 {
                        PROSE_FILLERS[rng.gen_range(0..PROSE_FILLERS.len())]
                    } else {
                        PROSE_WORDS[rng.gen_range(0..PROSE_WORDS.len())]
                    }
                })
                .collect();
            words.join(" ")
        })
        .collect()
}

/// Builds the planted-correspondence dataset: one feature record per image,
/// a poem corpus whose first `n_images` entries are the paired poems, the
/// human pairs, and a paragraph corpus.
pub fn make_synthetic<F: Scalar>(config: &SyntheticConfig) -> Result<SyntheticData<F>> {
    config.validate()?;
    let mut rng = rng_for(config.seed, stream::SYNTHETIC);

    // fixed per-aspect mixing matrices
    let mix: Vec<Array2<f64>> = (0..3)
        .map(|_| {
            let data = normal_vector(&mut rng, config.d * LATENT_DIM);
            Array2::from_shape_vec((config.d, LATENT_DIM), data).expect("shape matches")
                / (LATENT_DIM as f64).sqrt()
        })
        .collect();

    let latents: Vec<Array1<f64>> = (0..config.corpus_size)
        .map(|_| Array1::from_vec(normal_vector(&mut rng, LATENT_DIM)))
        .collect();

    let mut features = Vec::with_capacity(config.n_images);
    for (i, latent) in latents.iter().take(config.n_images).enumerate() {
        let mut aspects = Vec::with_capacity(3);
        for m in &mix {
            let noise = Array1::from_vec(normal_vector(&mut rng, config.d)) * 0.05;
            let v = m.dot(latent) + noise;
            // unit-normalized, as pooled CNN features would be
            let norm = v.dot(&v).sqrt().max(1e-12);
            let v = v / norm;
            aspects.push(Array1::from_vec(
                v.iter().map(|&x| F::from_f64_lossy(x)).collect(),
            ));
        }
        let sentiment = aspects.pop().expect("three aspects");
        let scene = aspects.pop().expect("three aspects");
        let object = aspects.pop().expect("three aspects");
        features.push(ImageFeatures::new(
            format!("img-{i:04}"),
            object,
            scene,
            sentiment,
        )?);
    }

    let poems: Vec<Poem> = latents
        .iter()
        .enumerate()
        .map(|(j, latent)| {
            let source = if j < config.n_images {
                Source::Multim
            } else {
                Source::Unim
            };
            Poem::new(
                format!("poem-{j:04}"),
                poem_lines_for(latent.as_slice().expect("contiguous"), &mut rng),
                source,
            )
        })
        .collect();

    let pairs: Vec<PairedExample> = (0..config.n_images)
        .map(|i| PairedExample {
            image_id: format!("img-{i:04}"),
            poem_id: format!("poem-{i:04}"),
            origin: Origin::Human,
        })
        .collect();

    let n_paragraphs = config.n_images.max(8);
    let paragraphs: Vec<Poem> = (0..n_paragraphs)
        .map(|j| Poem::new(format!("para-{j:04}"), paragraph_lines(&mut rng), Source::Paragraph))
        .collect();

    Ok(SyntheticData {
        features,
        poems,
        pairs,
        paragraphs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::filter_poems;

    fn config() -> SyntheticConfig {
        SyntheticConfig {
            n_images: 50,
            corpus_size: 60,
            d: 16,
            m: 24,
            seed: 7,
        }
    }

    #[test]
    fn counts_match_the_contract() {
        let data = make_synthetic::<f64>(&config()).unwrap();
        assert_eq!(data.features.len(), 50);
        assert!(data.poems.len() >= 50);
        assert_eq!(data.pairs.len(), 50);
        assert!(!data.paragraphs.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_data() {
        let a = make_synthetic::<f64>(&config()).unwrap();
        let b = make_synthetic::<f64>(&config()).unwrap();
        assert_eq!(a.poems, b.poems);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.paragraphs, b.paragraphs);
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert_eq!(fa.object, fb.object);
            assert_eq!(fa.scene, fb.scene);
            assert_eq!(fa.sentiment, fb.sentiment);
        }
        let other = make_synthetic::<f64>(&SyntheticConfig {
            seed: 8,
            ..config()
        })
        .unwrap();
        assert_ne!(a.poems, other.poems);
    }

    #[test]
    fn poems_survive_the_corpus_filter() {
        let data = make_synthetic::<f64>(&config()).unwrap();
        let kept = filter_poems(&data.poems, 3, 10);
        assert_eq!(kept.len(), data.poems.len());
    }

    #[test]
    fn paired_ids_resolve() {
        let data = make_synthetic::<f64>(&config()).unwrap();
        for pair in &data.pairs {
            assert!(data.features.iter().any(|f| f.image_id == pair.image_id));
            assert!(data.poems.iter().any(|p| p.id == pair.poem_id));
        }
    }

    #[test]
    fn paragraphs_are_long_lined_prose() {
        let data = make_synthetic::<f64>(&config()).unwrap();
        for para in &data.paragraphs {
            assert_eq!(para.source, Source::Paragraph);
            for line in &para.lines {
                assert!(line.split_whitespace().count() >= 10);
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let bad = SyntheticConfig {
            n_images: 10,
            corpus_size: 5,
            d: 4,
            m: 4,
            seed: 0,
        };
        assert!(make_synthetic::<f64>(&bad).is_err());
    }
}
