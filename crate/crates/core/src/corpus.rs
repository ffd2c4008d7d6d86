//! Poem data model, ingestion, tokenization, filtering and negative-example
//! construction.
//!
//! File formats:
//! - poems JSONL: one `{"id":…, "lines":[…], "source":…}` object per line
//! - pairs JSONL: `{"image_id":…, "poem_id":…, "origin":"human"|"retrieved"}`
//! - lexicons: plain text, one lowercase word per line

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a poem came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Unim,
    Multim,
    Paragraph,
    Generated,
    Disordered,
}

/// A multi-line poem; the unit of both corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Poem {
    pub id: String,
    pub lines: Vec<String>,
    pub source: Source,
}

impl Poem {
    pub fn new(id: impl Into<String>, lines: Vec<String>, source: Source) -> Self {
        Poem {
            id: id.into(),
            lines,
            source,
        }
    }

    /// Full text lowercased with whitespace collapsed; the duplicate key.
    pub fn normalized_text(&self) -> String {
        self.lines
            .iter()
            .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n")
            .to_lowercase()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.lines.is_empty() {
            return Err("missing or empty \"lines\"".into());
        }
        if self.lines.iter().any(|l| l.trim().is_empty()) {
            return Err("blank line".into());
        }
        Ok(())
    }
}

/// An image/poem pairing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedExample {
    pub image_id: String,
    pub poem_id: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Human,
    Retrieved,
}

// ---------------------------------------------------------------------------
// JSONL ingestion
// ---------------------------------------------------------------------------

/// Parse a poems JSONL file. Rejects malformed records (naming the line) and
/// duplicate ids.
pub fn load_poems(path: impl AsRef<Path>) -> Result<Vec<Poem>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut poems = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let poem: Poem = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        poem.validate().map_err(|msg| Error::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            msg,
        })?;
        if !seen.insert(poem.id.clone()) {
            return Err(Error::DuplicateId { id: poem.id });
        }
        poems.push(poem);
    }
    Ok(poems)
}

pub fn save_poems(path: impl AsRef<Path>, poems: &[Poem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for poem in poems {
        serde_json::to_writer(&mut w, poem)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PairedExample>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PairedExample =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        if pair.image_id.is_empty() || pair.poem_id.is_empty() {
            return Err(Error::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "empty id".into(),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[PairedExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for pair in pairs {
        serde_json::to_writer(&mut w, pair)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Index poems by id, rejecting duplicates.
pub fn index_poems(poems: &[Poem]) -> Result<BTreeMap<&str, &Poem>> {
    let mut map = BTreeMap::new();
    for poem in poems {
        if map.insert(poem.id.as_str(), poem).is_some() {
            return Err(Error::DuplicateId {
                id: poem.id.clone(),
            });
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Corpus cleanup: keeps poems with a line count in `[min_lines, max_lines]`,
/// mostly-ASCII text (>= 95% letters/digits/common punctuation/whitespace)
/// and removes duplicates by normalized full text (first occurrence wins).
pub fn filter_poems(poems: &[Poem], min_lines: usize, max_lines: usize) -> Vec<Poem> {
    assert!(min_lines <= max_lines, "min_lines must be <= max_lines");
    let mut seen = HashSet::new();
    poems
        .iter()
        .filter(|p| {
            let n = p.lines.len();
            n >= min_lines && n <= max_lines && is_clean_text(p) && seen.insert(p.normalized_text())
        })
        .cloned()
        .collect()
}

fn is_clean_text(poem: &Poem) -> bool {
    let mut total = 0usize;
    let mut ok = 0usize;
    for line in &poem.lines {
        for c in line.chars() {
            total += 1;
            if c.is_ascii_alphanumeric() || c.is_ascii_punctuation() || c.is_whitespace() {
                ok += 1;
            }
        }
    }
    total == 0 || (ok as f64) / (total as f64) >= 0.95
}

// ---------------------------------------------------------------------------
// Tokenization and vocabulary
// ---------------------------------------------------------------------------

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const BR: u32 = 2;
pub const UNK: u32 = 3;
pub const PAD: u32 = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<bos>", "<eos>", "<br>", "<unk>", "<pad>"];

/// Lowercase, split on whitespace, and peel leading/trailing ASCII
/// punctuation into separate tokens ("end." -> ["end", "."]). Interior
/// punctuation ("it's") stays attached.
pub fn tokenize_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.to_lowercase().split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            start += 1;
        }
        while end > start && chars[end - 1].is_ascii_punctuation() {
            end -= 1;
        }
        for &c in &chars[..start] {
            out.push(c.to_string());
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        for &c in &chars[end..] {
            out.push(c.to_string());
        }
    }
    out
}

/// Token-to-id bijection with the five reserved tokens at ids 0..4.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    pub min_freq: usize,
}

impl Vocabulary {
    /// Builds the vocabulary over the tokenized lines of `poems`: reserved
    /// tokens first, then every token with frequency >= `min_freq`, ids in
    /// descending-frequency then lexicographic order.
    pub fn build(poems: &[Poem], min_freq: usize) -> Result<Self> {
        if poems.is_empty() {
            return Err(Error::EmptyInput("no poems to build a vocabulary from"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for poem in poems {
            for line in &poem.lines {
                for tok in tokenize_line(line) {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        if kept.is_empty() {
            return Err(Error::NoVocabulary { min_freq });
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens, min_freq))
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Token id, falling back to UNK for out-of-vocabulary words.
    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id_of(token).unwrap_or(UNK)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let raw: Vocabulary = serde_json::from_reader(reader)?;
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            if raw.tokens.get(i).map(|s| s.as_str()) != Some(*expected) {
                return Err(Error::Checkpoint(format!(
                    "vocabulary is missing reserved token {expected:?} at id {i}"
                )));
            }
        }
        Ok(Self::from_tokens(raw.tokens, raw.min_freq))
    }
}

/// `[BOS] line1 [BR] line2 ... [EOS]`, OOV words mapped to UNK.
pub fn tokenize(poem: &Poem, vocab: &Vocabulary) -> Result<Vec<u32>> {
    if poem.lines.is_empty() {
        return Err(Error::EmptyPoem);
    }
    let mut ids = vec![BOS];
    for (i, line) in poem.lines.iter().enumerate() {
        if i > 0 {
            ids.push(BR);
        }
        for tok in tokenize_line(line) {
            ids.push(vocab.id_or_unk(&tok));
        }
    }
    ids.push(EOS);
    Ok(ids)
}

/// Inverse of `tokenize` on normalized poems: BOS/PAD ignored, everything
/// after the first EOS dropped, lines split at BR, empty lines skipped.
/// Errors when no real token survives.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary, id: &str, source: Source) -> Result<Poem> {
    let mut lines: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for &tok in ids {
        match tok {
            EOS => break,
            BOS | PAD => continue,
            BR => {
                if !current.is_empty() {
                    lines.push(current.join(" "));
                    current.clear();
                }
            }
            other => {
                let token = vocab
                    .token_of(other)
                    .ok_or(Error::BadTokenId {
                        id: other,
                        size: vocab.len(),
                    })?;
                current.push(token);
            }
        }
    }
    if !current.is_empty() {
        lines.push(current.join(" "));
    }
    if lines.is_empty() {
        return Err(Error::EmptyPoem);
    }
    Ok(Poem::new(id, lines, source))
}

/// The poem re-expressed in tokenizer form (lowercased, punctuation split,
/// single spaces). `detokenize(tokenize(p))` equals `normalize_poem(p)` for
/// UNK-free poems.
pub fn normalize_poem(poem: &Poem) -> Poem {
    let lines = poem
        .lines
        .iter()
        .map(|l| tokenize_line(l).join(" "))
        .filter(|l| !l.is_empty())
        .collect();
    Poem::new(poem.id.clone(), lines, poem.source)
}

// ---------------------------------------------------------------------------
// Sentence pool and disordered poems
// ---------------------------------------------------------------------------

/// Flat list of (line text, origin poem id) built by splitting a corpus.
#[derive(Debug, Clone, Default)]
pub struct SentencePool {
    pub entries: Vec<(String, String)>,
}

pub fn build_sentence_pool(poems: &[Poem]) -> SentencePool {
    let entries = poems
        .iter()
        .flat_map(|p| p.lines.iter().map(move |l| (l.clone(), p.id.clone())))
        .collect();
    SentencePool { entries }
}

impl SentencePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub const DISORDERED_MIN_LINES: usize = 3;
pub const DISORDERED_MAX_LINES: usize = 10;

/// Fake poem from randomly drawn pool lines. Line count uniform in [3, 10];
/// draws without replacement when the pool is large enough.
pub fn make_disordered(pool: &SentencePool, rng: &mut ChaCha8Rng) -> Poem {
    assert!(!pool.is_empty(), "sentence pool must be nonempty");
    let id = format!("disordered-{:016x}", rng.gen::<u64>());
    let count = rng.gen_range(DISORDERED_MIN_LINES..=DISORDERED_MAX_LINES);
    let lines: Vec<String> = if pool.len() >= count {
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        indices.shuffle(rng);
        indices[..count]
            .iter()
            .map(|&i| pool.entries[i].0.clone())
            .collect()
    } else {
        (0..count)
            .map(|_| pool.entries[rng.gen_range(0..pool.len())].0.clone())
            .collect()
    };
    Poem::new(id, lines, Source::Disordered)
}

// ---------------------------------------------------------------------------
// Lexicons and multi-label targets
// ---------------------------------------------------------------------------

pub const ASPECTS: [&str; 3] = ["object", "scene", "sentiment"];

/// Word lists for the three aspects, each with a fixed index order.
#[derive(Debug, Clone)]
pub struct LexiconSet {
    pub object: Vec<String>,
    pub scene: Vec<String>,
    pub sentiment: Vec<String>,
}

impl LexiconSet {
    /// Reads object.txt, scene.txt and sentiment.txt from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(LexiconSet {
            object: load_lexicon(dir.join("object.txt"))?,
            scene: load_lexicon(dir.join("scene.txt"))?,
            sentiment: load_lexicon(dir.join("sentiment.txt"))?,
        })
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.object.len(), self.scene.len(), self.sentiment.len())
    }
}

/// One lowercase word per line; duplicates keep their first position.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut words = Vec::new();
    let mut seen = HashSet::new();
    for line in reader.lines() {
        let word = line?.trim().to_lowercase();
        if !word.is_empty() && seen.insert(word.clone()) {
            words.push(word);
        }
    }
    Ok(words)
}

/// Binary multi-label targets for one poem: bit i of an aspect vector is 1
/// iff the aspect's word i occurs as a token of the poem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoemLabels {
    pub object: Vec<u8>,
    pub scene: Vec<u8>,
    pub sentiment: Vec<u8>,
}

pub fn extract_labels(poem: &Poem, lexicons: &LexiconSet) -> PoemLabels {
    let tokens: HashSet<String> = poem
        .lines
        .iter()
        .flat_map(|l| tokenize_line(l))
        .collect();
    let hits = |words: &[String]| -> Vec<u8> {
        words
            .iter()
            .map(|w| u8::from(tokens.contains(w)))
            .collect()
    };
    PoemLabels {
        object: hits(&lexicons.object),
        scene: hits(&lexicons.scene),
        sentiment: hits(&lexicons.sentiment),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, stream};

    fn poem(id: &str, lines: &[&str]) -> Poem {
        Poem::new(id, lines.iter().map(|s| s.to_string()).collect(), Source::Unim)
    }

    #[test]
    fn load_poems_parses_wellformed_records() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","lines":["one line","two"],"source":"unim"}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","lines":["x"],"source":"multim"}}"#).unwrap();
        let poems = load_poems(f.path()).unwrap();
        assert_eq!(poems.len(), 2);
        assert_eq!(poems[0].id, "a");
        assert_eq!(poems[1].source, Source::Multim);
    }

    #[test]
    fn load_poems_empty_file_is_empty_list() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_poems(f.path()).unwrap().is_empty());
    }

    #[test]
    fn load_poems_reports_line_of_malformed_record() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","lines":["ok"],"source":"unim"}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","source":"unim"}}"#).unwrap();
        let err = load_poems(f.path()).unwrap_err();
        match err {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_poems_rejects_duplicate_id() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","lines":["x"],"source":"unim"}}"#).unwrap();
        writeln!(f, r#"{{"id":"a","lines":["y"],"source":"unim"}}"#).unwrap();
        match load_poems(f.path()).unwrap_err() {
            Error::DuplicateId { id } => assert_eq!(id, "a"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn filter_drops_short_and_long_poems() {
        let poems = vec![
            poem("two", &["a", "b"]),
            poem(
                "eleven",
                &["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"],
            ),
            poem("five", &["a", "b", "c", "d", "e"]),
        ];
        let kept = filter_poems(&poems, 3, 10);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "five");
    }

    #[test]
    fn filter_drops_mostly_non_ascii_and_duplicates() {
        let noisy = poem("noisy", &["тихо над рекою", "ночь и звёзды", "спит земля"]);
        let a = poem("a", &["the quiet river", "sleeps at night", "under stars"]);
        let b = poem("b", &["The  quiet river", "sleeps at night", "under stars"]);
        let kept = filter_poems(&[noisy, a, b], 3, 10);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "a");
    }

    #[test]
    fn filter_is_idempotent() {
        let poems = vec![
            poem("x", &["one", "two", "three"]),
            poem("y", &["one", "two"]),
            poem("z", &["one", "two", "three"]),
        ];
        let once = filter_poems(&poems, 3, 10);
        let twice = filter_poems(&once, 3, 10);
        assert_eq!(once, twice);
    }

    #[test]
    fn tokenize_line_splits_edge_punctuation() {
        assert_eq!(tokenize_line("Hello, world!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize_line("\"quoted\""), vec!["\"", "quoted", "\""]);
        assert_eq!(tokenize_line("it's fine"), vec!["it's", "fine"]);
        assert_eq!(tokenize_line("..."), vec![".", ".", "."]);
    }

    #[test]
    fn vocabulary_reserved_ids_are_fixed() {
        let vocab = Vocabulary::build(&[poem("p", &["a a b"])], 1).unwrap();
        for (i, tok) in RESERVED_TOKENS.iter().enumerate() {
            assert_eq!(vocab.token_of(i as u32), Some(*tok));
        }
        assert_eq!((BOS, EOS, BR, UNK, PAD), (0, 1, 2, 3, 4));
    }

    #[test]
    fn vocabulary_min_freq_threshold() {
        let poems = [poem("p", &["a a b"])];
        let v2 = Vocabulary::build(&poems, 2).unwrap();
        assert_eq!(v2.len(), 6); // reserved + "a"
        assert!(v2.id_of("a").is_some());
        assert!(v2.id_of("b").is_none());
        let v1 = Vocabulary::build(&poems, 1).unwrap();
        assert_eq!(v1.len(), 7);
    }

    #[test]
    fn vocabulary_tie_break_is_lexicographic() {
        let poems = [poem("p", &["pear apple", "apple pear"])];
        let vocab = Vocabulary::build(&poems, 1).unwrap();
        // equal frequency -> lexicographic order after the reserved block
        assert_eq!(vocab.id_of("apple"), Some(5));
        assert_eq!(vocab.id_of("pear"), Some(6));
    }

    #[test]
    fn vocabulary_errors_when_nothing_meets_min_freq() {
        match Vocabulary::build(&[poem("p", &["a b"])], 5).unwrap_err() {
            Error::NoVocabulary { min_freq } => assert_eq!(min_freq, 5),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn tokenize_inserts_specials() {
        let vocab = Vocabulary::build(&[poem("p", &["a b", "c"])], 1).unwrap();
        let ids = tokenize(&poem("q", &["a b", "c"]), &vocab).unwrap();
        let a = vocab.id_of("a").unwrap();
        let b = vocab.id_of("b").unwrap();
        let c = vocab.id_of("c").unwrap();
        assert_eq!(ids, vec![BOS, a, b, BR, c, EOS]);
    }

    #[test]
    fn tokenize_maps_oov_to_unk() {
        let vocab = Vocabulary::build(&[poem("p", &["a"])], 1).unwrap();
        let ids = tokenize(&poem("q", &["zzz"]), &vocab).unwrap();
        assert_eq!(ids, vec![BOS, UNK, EOS]);
    }

    #[test]
    fn detokenize_splits_lines_and_drops_tail() {
        let vocab = Vocabulary::build(&[poem("p", &["a b", "c"])], 1).unwrap();
        let a = vocab.id_of("a").unwrap();
        let b = vocab.id_of("b").unwrap();
        let got = detokenize(&[BOS, a, BR, b, EOS], &vocab, "d", Source::Generated).unwrap();
        assert_eq!(got.lines, vec!["a", "b"]);
        let got = detokenize(&[a, EOS, b], &vocab, "d", Source::Generated).unwrap();
        assert_eq!(got.lines, vec!["a"]);
    }

    #[test]
    fn detokenize_rejects_specials_only() {
        let vocab = Vocabulary::build(&[poem("p", &["a"])], 1).unwrap();
        match detokenize(&[BOS, BR, EOS], &vocab, "d", Source::Generated) {
            Err(Error::EmptyPoem) => {}
            other => panic!("expected EmptyPoem, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_on_normalized_poems() {
        let corpus = [
            poem("p1", &["The rain, falls softly.", "over EMPTY streets"]),
            poem("p2", &["a \"bright\" morning", "walks; alone", "we wait"]),
        ];
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        for p in &corpus {
            let normalized = normalize_poem(p);
            let ids = tokenize(p, &vocab).unwrap();
            let back = detokenize(&ids, &vocab, &p.id, p.source).unwrap();
            assert_eq!(back.lines, normalized.lines);
        }
    }

    #[test]
    fn sentence_pool_counts_lines() {
        let poems = vec![poem("p", &["a", "b", "c"]), poem("q", &["d", "e", "f", "g"])];
        let pool = build_sentence_pool(&poems);
        assert_eq!(pool.len(), 7);
        assert!(build_sentence_pool(&[]).is_empty());
    }

    #[test]
    fn disordered_poems_are_deterministic_and_well_formed() {
        let poems = vec![poem("p", &["a", "b", "c"]), poem("q", &["d", "e", "f", "g"])];
        let pool = build_sentence_pool(&poems);
        let a = make_disordered(&pool, &mut rng_for(9, stream::DISORDERED));
        let b = make_disordered(&pool, &mut rng_for(9, stream::DISORDERED));
        assert_eq!(a, b);

        let all_lines: HashSet<&str> = pool.entries.iter().map(|(l, _)| l.as_str()).collect();
        let mut rng = rng_for(11, stream::DISORDERED);
        for _ in 0..1000 {
            let p = make_disordered(&pool, &mut rng);
            assert!(p.lines.len() >= DISORDERED_MIN_LINES && p.lines.len() <= DISORDERED_MAX_LINES);
            assert!(p.lines.iter().all(|l| all_lines.contains(l.as_str())));
            assert_eq!(p.source, Source::Disordered);
        }
    }

    #[test]
    fn extract_labels_marks_membership() {
        let lex = LexiconSet {
            object: vec!["tree".into(), "sea".into()],
            scene: vec!["forest".into()],
            sentiment: vec!["calm".into(), "bright".into()],
        };
        let p = poem("p", &["a tall Tree stands", "so calm"]);
        let labels = extract_labels(&p, &lex);
        assert_eq!(labels.object, vec![1, 0]);
        assert_eq!(labels.scene, vec![0]);
        assert_eq!(labels.sentiment, vec![1, 0]);

        let q = poem("q", &["nothing here"]);
        let labels = extract_labels(&q, &lex);
        assert_eq!(labels.object, vec![0, 0]);
        assert_eq!(labels.scene, vec![0]);
        assert_eq!(labels.sentiment, vec![0, 0]);
    }

    #[test]
    fn lexicon_loader_dedups_and_lowercases() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "Tree\nsea\ntree\n\n  sky  ").unwrap();
        let words = load_lexicon(f.path()).unwrap();
        assert_eq!(words, vec!["tree", "sea", "sky"]);
    }
}
