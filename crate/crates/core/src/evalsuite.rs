//! Automatic evaluation: BLEU-1/2/3 against a single human reference poem,
//! Novelty-2/3 against the training n-gram statistics, embedding relevance,
//! and the min-normalized Overall aggregate across systems.
//!
//! All n-gram work happens on the flattened token stream of a poem (line
//! breaks removed), so metrics are invariant to line-break placement.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize_line, Poem};
use crate::embedding::{relevance, VisualPoeticEmbedding};
use crate::error::{Error, Result};
use crate::features::{encode_poem, ImageFeatures, SentenceEncoder};
use crate::num::Scalar;

/// A poem as a flat lowercase token stream.
pub fn flatten_tokens(poem: &Poem) -> Vec<String> {
    poem.lines.iter().flat_map(|l| tokenize_line(l)).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

/// BLEU-n with a single reference: geometric mean of the clipped modified
/// k-gram precisions for k = 1..n, times the brevity penalty
/// `min(1, exp(1 - r/c))`. A zero precision at any k gives 0; an empty
/// candidate scores 0.
pub fn bleu_n(candidate: &Poem, reference: &Poem, n: usize) -> f64 {
    assert!((1..=3).contains(&n), "n must be in 1..=3");
    let cand = flatten_tokens(candidate);
    let reff = flatten_tokens(reference);
    bleu_n_tokens(&cand, &reff, n)
}

pub fn bleu_n_tokens(cand: &[String], reff: &[String], n: usize) -> f64 {
    if cand.is_empty() || reff.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        if cand.len() < k {
            return 0.0;
        }
        let cand_counts = ngram_counts(cand, k);
        let ref_counts = ngram_counts(reff, k);
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (gram, &count) in &cand_counts {
            total += count;
            clipped += count.min(ref_counts.get(gram).copied().unwrap_or(0));
        }
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision_gm = (log_sum / n as f64).exp();
    let c = cand.len() as f64;
    let r = reff.len() as f64;
    let bp = (1.0 - r / c).exp().min(1.0);
    bp * precision_gm
}

// ---------------------------------------------------------------------------
// Novelty
// ---------------------------------------------------------------------------

/// Bigram/trigram statistics over a training corpus: full occurrence counts
/// plus the top-K "frequent" set (count descending, then lexicographic).
#[derive(Debug, Clone)]
pub struct NgramStats {
    counts: [HashMap<Vec<String>, usize>; 2], // n = 2, 3
    frequent: [HashSet<Vec<String>>; 2],
    pub top_k: usize,
}

impl NgramStats {
    pub fn build(training_poems: &[Poem], top_k: usize) -> Self {
        let mut counts = [HashMap::new(), HashMap::new()];
        for poem in training_poems {
            let tokens = flatten_tokens(poem);
            for (slot, n) in [(0usize, 2usize), (1, 3)] {
                if tokens.len() >= n {
                    for window in tokens.windows(n) {
                        *counts[slot].entry(window.to_vec()).or_insert(0) += 1;
                    }
                }
            }
        }
        let frequent = [
            Self::top(&counts[0], top_k),
            Self::top(&counts[1], top_k),
        ];
        NgramStats {
            counts,
            frequent,
            top_k,
        }
    }

    fn top(counts: &HashMap<Vec<String>, usize>, k: usize) -> HashSet<Vec<String>> {
        let mut entries: Vec<(&Vec<String>, usize)> =
            counts.iter().map(|(g, &c)| (g, c)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        entries.into_iter().take(k).map(|(g, _)| g.clone()).collect()
    }

    fn slot(n: usize) -> usize {
        match n {
            2 => 0,
            3 => 1,
            _ => panic!("novelty is defined for n in {{2, 3}}"),
        }
    }

    pub fn count_of(&self, gram: &[String], n: usize) -> usize {
        self.counts[Self::slot(n)].get(gram).copied().unwrap_or(0)
    }

    pub fn is_frequent(&self, gram: &[String], n: usize) -> bool {
        self.frequent[Self::slot(n)].contains(gram)
    }

    pub fn frequent_len(&self, n: usize) -> usize {
        self.frequent[Self::slot(n)].len()
    }
}

/// Which n-gram occurrences count toward novelty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoveltyMode {
    /// occurrences present in the training corpus but not frequent
    #[default]
    Strict,
    /// every occurrence outside the frequent set
    Inclusive,
}

/// Fraction of a poem's n-gram occurrences that are novel under `mode`.
/// Poems with fewer than n tokens score 0.
pub fn novelty_n(poem: &Poem, stats: &NgramStats, n: usize, mode: NoveltyMode) -> f64 {
    let tokens = flatten_tokens(poem);
    if tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let mut novel = 0usize;
    for window in tokens.windows(n) {
        let in_frequent = stats.is_frequent(window, n);
        let counted = match mode {
            NoveltyMode::Strict => !in_frequent && stats.count_of(window, n) > 0,
            NoveltyMode::Inclusive => !in_frequent,
        };
        if counted {
            novel += 1;
        }
    }
    novel as f64 / total as f64
}

// ---------------------------------------------------------------------------
// Relevance
// ---------------------------------------------------------------------------

/// Cosine between the embedded image and the embedded poem.
pub fn relevance_metric<F: Scalar, E: SentenceEncoder<F> + ?Sized>(
    features: &ImageFeatures<F>,
    poem: &Poem,
    model: &VisualPoeticEmbedding<F>,
    encoder: &E,
) -> Result<F> {
    let x = model.embed_image(&features.assembled())?;
    let m = model.embed_poem(&encode_poem(poem, encoder)?)?;
    relevance(&x, &m)
}

// ---------------------------------------------------------------------------
// Overall (cross-system normalization)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizationMode {
    /// `(a - min(a)) / min(a)`, exactly as defined; fails on min = 0
    #[default]
    RelativeToMin,
    /// `(a - min(a)) / (max(a) - min(a))`, the explicit fallback
    Range,
}

/// `(a - min(a)) / min(a)` across one metric column. Errors when the minimum
/// is zero (undefined) or negative (the column must be positive).
pub fn normalize_column(column: &[f64], name: &str) -> Result<Vec<f64>> {
    if column.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "column {name:?} needs at least 2 systems"
        )));
    }
    let min = column.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        return Err(Error::MinZero {
            column: name.to_string(),
        });
    }
    if min < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "column {name:?} has negative minimum {min}; min-relative normalization needs positive values"
        )));
    }
    Ok(column.iter().map(|a| (a - min) / min).collect())
}

/// `(a - min) / (max - min)`; an all-equal column normalizes to zeros.
pub fn range_normalize_column(column: &[f64], name: &str) -> Result<Vec<f64>> {
    if column.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "column {name:?} needs at least 2 systems"
        )));
    }
    let min = column.iter().copied().fold(f64::INFINITY, f64::min);
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; column.len()]);
    }
    Ok(column.iter().map(|a| (a - min) / (max - min)).collect())
}

/// One system's corpus-level metric values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemMetrics {
    pub name: String,
    pub relevance: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub novelty2: f64,
    pub novelty3: f64,
}

/// Overall score per system: every metric column is normalized across
/// systems, the normalized BLEU sub-scores and the normalized Novelty
/// sub-scores are averaged, and the final score is the mean of the
/// normalized relevance, novelty and BLEU values.
pub fn overall(systems: &[SystemMetrics], mode: NormalizationMode) -> Result<Vec<f64>> {
    let norm = |col: &[f64], name: &str| match mode {
        NormalizationMode::RelativeToMin => normalize_column(col, name),
        NormalizationMode::Range => range_normalize_column(col, name),
    };
    let col = |f: fn(&SystemMetrics) -> f64| systems.iter().map(f).collect::<Vec<_>>();
    let relevance = norm(&col(|s| s.relevance), "relevance")?;
    let bleu1 = norm(&col(|s| s.bleu1), "bleu1")?;
    let bleu2 = norm(&col(|s| s.bleu2), "bleu2")?;
    let bleu3 = norm(&col(|s| s.bleu3), "bleu3")?;
    let novelty2 = norm(&col(|s| s.novelty2), "novelty2")?;
    let novelty3 = norm(&col(|s| s.novelty3), "novelty3")?;
    Ok((0..systems.len())
        .map(|i| {
            let bleu = (bleu1[i] + bleu2[i] + bleu3[i]) / 3.0;
            let novelty = (novelty2[i] + novelty3[i]) / 2.0;
            (relevance[i] + novelty + bleu) / 3.0
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Per-run evaluation report
// ---------------------------------------------------------------------------

/// A generated poem attributed to the image that conditioned it.
#[derive(Debug, Clone)]
pub struct GeneratedPoem {
    pub image_id: String,
    pub poem: Poem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub bleu3: Option<f64>,
    pub novelty2: f64,
    pub novelty3: f64,
    pub relevance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub rows: usize,
    /// rows that had a ground-truth reference
    pub bleu_rows: usize,
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub bleu3: Option<f64>,
    pub novelty2: f64,
    pub novelty3: f64,
    pub relevance: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregate: EvalAggregate,
}

/// Scores every generated poem: BLEU against the image's human poem when a
/// ground truth is supplied (null otherwise), novelty against the training
/// stats, and embedding relevance to the conditioning image.
pub fn evaluate_run<F: Scalar, E: SentenceEncoder<F> + ?Sized>(
    generated: &[GeneratedPoem],
    ground_truth: Option<&BTreeMap<String, &Poem>>,
    features: &BTreeMap<&str, &ImageFeatures<F>>,
    model: &VisualPoeticEmbedding<F>,
    encoder: &E,
    stats: &NgramStats,
    novelty_mode: NoveltyMode,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(generated.len());
    for gen in generated {
        let image = features
            .get(gen.image_id.as_str())
            .ok_or(Error::UnknownId {
                id: gen.image_id.clone(),
                referrer: "evaluation (features)",
            })?;
        let reference = ground_truth.and_then(|gt| gt.get(&gen.image_id));
        let (bleu1, bleu2, bleu3) = match reference {
            Some(reference) => (
                Some(bleu_n(&gen.poem, reference, 1)),
                Some(bleu_n(&gen.poem, reference, 2)),
                Some(bleu_n(&gen.poem, reference, 3)),
            ),
            None => (None, None, None),
        };
        rows.push(EvalRow {
            image_id: gen.image_id.clone(),
            bleu1,
            bleu2,
            bleu3,
            novelty2: novelty_n(&gen.poem, stats, 2, novelty_mode),
            novelty3: novelty_n(&gen.poem, stats, 3, novelty_mode),
            relevance: relevance_metric(image, &gen.poem, model, encoder)?.to_f64_lossy(),
        });
    }
    let aggregate = aggregate_rows(&rows);
    Ok(EvalReport { rows, aggregate })
}

fn aggregate_rows(rows: &[EvalRow]) -> EvalAggregate {
    let n = rows.len();
    let mean = |f: &dyn Fn(&EvalRow) -> f64| -> f64 {
        if n == 0 {
            0.0
        } else {
            rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    let bleu_rows = rows.iter().filter(|r| r.bleu1.is_some()).count();
    let bleu_mean = |f: &dyn Fn(&EvalRow) -> Option<f64>| -> Option<f64> {
        let present: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    };
    EvalAggregate {
        rows: n,
        bleu_rows,
        bleu1: bleu_mean(&|r| r.bleu1),
        bleu2: bleu_mean(&|r| r.bleu2),
        bleu3: bleu_mean(&|r| r.bleu3),
        novelty2: mean(&|r| r.novelty2),
        novelty3: mean(&|r| r.novelty3),
        relevance: mean(&|r| r.relevance),
    }
}

impl EvalReport {
    /// JSONL: one row object per image plus a final aggregate record.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for row in &self.rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        #[derive(Serialize)]
        struct AggregateRecord<'a> {
            aggregate: &'a EvalAggregate,
        }
        serde_json::to_writer(
            &mut w,
            &AggregateRecord {
                aggregate: &self.aggregate,
            },
        )?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Aligned-column text table.
    pub fn render_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "-".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}\n",
            "image", "bleu1", "bleu2", "bleu3", "novelty2", "novelty3", "relevance"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>8} {:>8} {:>8} {:>9.4} {:>9.4} {:>9.4}\n",
                r.image_id,
                fmt_opt(r.bleu1),
                fmt_opt(r.bleu2),
                fmt_opt(r.bleu3),
                r.novelty2,
                r.novelty3,
                r.relevance
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>9.4} {:>9.4} {:>9.4}\n",
            format!("mean({})", a.rows),
            fmt_opt(a.bleu1),
            fmt_opt(a.bleu2),
            fmt_opt(a.bleu3),
            a.novelty2,
            a.novelty3,
            a.relevance
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Source, Vocabulary};
    use crate::features::WordMeanEncoder;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn poem(id: &str, lines: &[&str]) -> Poem {
        Poem::new(id, lines.iter().map(|s| s.to_string()).collect(), Source::Unim)
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        let p = poem("p", &["the quick fox", "jumps over"]);
        for n in 1..=3 {
            assert_relative_eq!(bleu_n(&p, &p, n), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bleu_clipping_example() {
        // candidate "the the the" vs reference "the cat": clipped unigram
        // precision 1/3, c = 3 > r = 2 so BP = 1
        let cand = poem("c", &["the the the"]);
        let reff = poem("r", &["the cat"]);
        assert_relative_eq!(bleu_n(&cand, &reff, 1), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_example() {
        // candidate "cat" vs reference "the cat": precision 1, BP = e^-1
        let cand = poem("c", &["cat"]);
        let reff = poem("r", &["the cat"]);
        assert_relative_eq!(bleu_n(&cand, &reff, 1), (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn bleu_zero_when_any_precision_is_zero() {
        let cand = poem("c", &["sun moon"]);
        let reff = poem("r", &["moon sun"]); // unigram overlap, no shared bigram
        assert!(bleu_n(&cand, &reff, 1) > 0.0);
        assert_eq!(bleu_n(&cand, &reff, 2), 0.0);
    }

    #[test]
    fn bleu_ignores_line_breaks() {
        let one = poem("a", &["sun and moon rise"]);
        let two = poem("b", &["sun and", "moon rise"]);
        let reff = poem("r", &["moon rise sun and"]);
        for n in 1..=3 {
            assert_relative_eq!(bleu_n(&one, &reff, n), bleu_n(&two, &reff, n), epsilon = 1e-15);
        }
    }

    /// Independent brute-force recount used to cross-check the fast path.
    fn bleu_brute(cand: &Poem, reff: &Poem, n: usize) -> f64 {
        let c: Vec<String> = flatten_tokens(cand);
        let r: Vec<String> = flatten_tokens(reff);
        if c.is_empty() || r.is_empty() {
            return 0.0;
        }
        let mut product = 1.0f64;
        for k in 1..=n {
            if c.len() < k {
                return 0.0;
            }
            let c_grams: Vec<&[String]> = c.windows(k).collect();
            let mut clipped = 0usize;
            let mut used: Vec<&[String]> = Vec::new();
            for gram in &c_grams {
                let in_cand_so_far = used.iter().filter(|g| *g == gram).count();
                let in_ref = r.windows(k).filter(|w| w == gram).count();
                if in_cand_so_far < in_ref {
                    clipped += 1;
                }
                used.push(gram);
            }
            if clipped == 0 {
                return 0.0;
            }
            product *= clipped as f64 / c_grams.len() as f64;
        }
        let bp = (1.0 - r.len() as f64 / c.len() as f64).exp().min(1.0);
        bp * product.powf(1.0 / n as f64)
    }

    #[test]
    fn bleu_matches_brute_force_on_random_pairs() {
        use rand::Rng;
        let words = ["sun", "moon", "rain", "sea", "tree", "the", "a", "cold"];
        let mut rng = crate::rng::rng_for(77, crate::rng::stream::SYNTHETIC);
        for _ in 0..20 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let len = rng.gen_range(1..10);
                let text: Vec<&str> =
                    (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
                poem("x", &[text.join(" ").as_str()])
            };
            let cand = mk(&mut rng);
            let reff = mk(&mut rng);
            for n in 1..=3 {
                let fast = bleu_n(&cand, &reff, n);
                let brute = bleu_brute(&cand, &reff, n);
                assert!(
                    (fast - brute).abs() < 1e-12,
                    "n = {n}: fast {fast} vs brute {brute}"
                );
            }
        }
    }

    fn toy_stats() -> NgramStats {
        // 10-poem toy corpus; top-2 frequent bigrams are ("the","sea") x5
        // and ("a","tree") x4
        let mut poems = Vec::new();
        for i in 0..5 {
            poems.push(poem(&format!("s{i}"), &["the sea"]));
        }
        for i in 0..4 {
            poems.push(poem(&format!("t{i}"), &["a tree"]));
        }
        poems.push(poem("u", &["cold rain falls"]));
        NgramStats::build(&poems, 2)
    }

    #[test]
    fn novelty_zero_when_all_bigrams_frequent() {
        let stats = toy_stats();
        let p = poem("p", &["the sea", "a tree"]);
        // bigrams: (the,sea) (sea,a) (a,tree); (sea,a) never occurs in
        // training so under Strict it also contributes 0
        assert_relative_eq!(
            novelty_n(&poem("q", &["the sea"]), &stats, 2, NoveltyMode::Strict),
            0.0
        );
        assert_relative_eq!(novelty_n(&p, &stats, 2, NoveltyMode::Strict), 0.0);
    }

    #[test]
    fn novelty_hand_counted_half() {
        let stats = toy_stats();
        // tokens: cold rain falls the sea -> 4 bigram occurrences:
        // (cold,rain) in-training & infrequent, (rain,falls) in-training &
        // infrequent, (falls,the) absent, (the,sea) frequent -> 2/4
        let p = poem("p", &["cold rain falls the sea"]);
        assert_relative_eq!(novelty_n(&p, &stats, 2, NoveltyMode::Strict), 0.5);
        // inclusive mode also counts the absent bigram -> 3/4
        assert_relative_eq!(novelty_n(&p, &stats, 2, NoveltyMode::Inclusive), 0.75);
    }

    #[test]
    fn novelty_degenerate_lengths_score_zero() {
        let stats = toy_stats();
        assert_eq!(novelty_n(&poem("p", &["sea"]), &stats, 2, NoveltyMode::Strict), 0.0);
        assert_eq!(
            novelty_n(&poem("p", &["the sea"]), &stats, 3, NoveltyMode::Strict),
            0.0
        );
    }

    #[test]
    fn novelty_is_invariant_to_line_breaks() {
        let stats = toy_stats();
        let one = poem("a", &["cold rain falls the sea"]);
        let two = poem("b", &["cold rain", "falls the sea"]);
        for mode in [NoveltyMode::Strict, NoveltyMode::Inclusive] {
            assert_relative_eq!(
                novelty_n(&one, &stats, 2, mode),
                novelty_n(&two, &stats, 2, mode),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn eq14_normalization_examples() {
        assert_eq!(normalize_column(&[2.0, 4.0], "m").unwrap(), vec![0.0, 1.0]);
        assert_eq!(normalize_column(&[5.0, 5.0], "m").unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            normalize_column(&[0.0, 1.0], "m"),
            Err(Error::MinZero { .. })
        ));
    }

    #[test]
    fn eq14_is_scale_invariant() {
        let base = normalize_column(&[2.0, 3.0, 7.0], "m").unwrap();
        let scaled = normalize_column(&[2.0e3, 3.0e3, 7.0e3], "m").unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn range_mode_handles_zero_and_equal_columns() {
        assert_eq!(
            range_normalize_column(&[0.0, 1.0], "m").unwrap(),
            vec![0.0, 1.0]
        );
        assert_eq!(
            range_normalize_column(&[5.0, 5.0], "m").unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn overall_averages_normalized_groups() {
        let systems = vec![
            SystemMetrics {
                name: "a".into(),
                relevance: 1.0,
                bleu1: 10.0,
                bleu2: 4.0,
                bleu3: 1.0,
                novelty2: 40.0,
                novelty3: 70.0,
            },
            SystemMetrics {
                name: "b".into(),
                relevance: 2.0,
                bleu1: 20.0,
                bleu2: 8.0,
                bleu3: 2.0,
                novelty2: 80.0,
                novelty3: 140.0,
            },
        ];
        let scores = overall(&systems, NormalizationMode::RelativeToMin).unwrap();
        // system a is the minimum in every column -> all normalized 0
        assert_relative_eq!(scores[0], 0.0, epsilon = 1e-12);
        // system b: every column normalizes to 1 -> mean of (1, 1, 1)
        assert_relative_eq!(scores[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_run_rows_and_aggregates() {
        let poems: Vec<Poem> = vec![
            poem("poem-0", &["the sea", "a tree"]),
            poem("poem-1", &["cold rain falls"]),
        ];
        let vocab = Vocabulary::build(&poems, 1).unwrap();
        let encoder = WordMeanEncoder::<f64>::new(vocab, 4, 3);
        let model = VisualPoeticEmbedding::<f64>::new(3, 6, 4, 9);
        let stats = toy_stats();
        let features = vec![
            ImageFeatures::<f64>::new("img-0", array![0.1, 0.2], array![0.3, 0.4], array![0.5, 0.6])
                .unwrap(),
            ImageFeatures::<f64>::new("img-1", array![0.9, 0.1], array![0.2, 0.8], array![0.4, 0.3])
                .unwrap(),
        ];
        let feature_map: BTreeMap<&str, &ImageFeatures<f64>> =
            features.iter().map(|f| (f.image_id.as_str(), f)).collect();
        let generated = vec![
            GeneratedPoem {
                image_id: "img-0".into(),
                poem: poems[0].clone(),
            },
            GeneratedPoem {
                image_id: "img-1".into(),
                poem: poems[1].clone(),
            },
        ];
        // ground truth equals the generated poems -> BLEU all 1
        let gt: BTreeMap<String, &Poem> = vec![
            ("img-0".to_string(), &poems[0]),
            ("img-1".to_string(), &poems[1]),
        ]
        .into_iter()
        .collect();

        let report = evaluate_run(
            &generated,
            Some(&gt),
            &feature_map,
            &model,
            &encoder,
            &stats,
            NoveltyMode::Strict,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_relative_eq!(report.aggregate.bleu1.unwrap(), 1.0, epsilon = 1e-12);
        // aggregates equal hand-averaged rows
        let mean_rel =
            report.rows.iter().map(|r| r.relevance).sum::<f64>() / report.rows.len() as f64;
        assert_relative_eq!(report.aggregate.relevance, mean_rel, epsilon = 1e-12);
        let mean_nov2 =
            report.rows.iter().map(|r| r.novelty2).sum::<f64>() / report.rows.len() as f64;
        assert_relative_eq!(report.aggregate.novelty2, mean_nov2, epsilon = 1e-12);

        // relevance composes the two encoders exactly
        let direct = relevance_metric(&features[0], &poems[0], &model, &encoder).unwrap();
        assert_relative_eq!(report.rows[0].relevance, direct, epsilon = 1e-12);

        // without ground truth the BLEU columns are null and excluded
        let report = evaluate_run(
            &generated,
            None,
            &feature_map,
            &model,
            &encoder,
            &stats,
            NoveltyMode::Strict,
        )
        .unwrap();
        assert!(report.rows.iter().all(|r| r.bleu1.is_none()));
        assert_eq!(report.aggregate.bleu_rows, 0);
        assert!(report.aggregate.bleu1.is_none());
    }

    #[test]
    fn report_jsonl_has_rows_plus_aggregate() {
        let rows = vec![EvalRow {
            image_id: "img-0".into(),
            bleu1: Some(0.5),
            bleu2: None,
            bleu3: None,
            novelty2: 0.25,
            novelty3: 0.0,
            relevance: 0.9,
        }];
        let aggregate = aggregate_rows(&rows);
        let report = EvalReport { rows, aggregate };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        report.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"image_id\":\"img-0\""));
        assert!(lines[1].contains("\"aggregate\""));
        assert!(!report.render_table().is_empty());
    }
}
