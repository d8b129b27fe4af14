//! Tokenization, vocabularies, response frequency statistics and JSONL
//! ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Punctuation marks split off as standalone tokens.
pub const PUNCTUATION: [char; 8] = ['.', ',', '!', '?', ';', ':', '\'', '"'];

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

pub fn is_punctuation(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCTUATION.contains(&c))
}

/// Lowercases, splits on whitespace and splits punctuation marks off as
/// their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if PUNCTUATION.contains(&c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Token/id bijection with reserved ids PAD=0, UNK=1, BOS=2, EOS=3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        let mut v = Vocab {
            tokens: f.tokens,
            counts: f.counts,
            ids: HashMap::new(),
        };
        v.reindex();
        v
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            tokens: v.tokens,
            counts: v.counts,
        }
    }
}

impl Vocab {
    /// Builds from already-ranked `(token, count)` entries.
    pub fn from_ranked(entries: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; RESERVED.len()];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let mut v = Self {
            tokens,
            counts,
            ids: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Keeps the `max_size` most frequent tokens; ties go to the token seen
    /// first.
    pub fn build<'a, I, S>(sentences: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let ranked = rank_tokens(sentences);
        Self::from_ranked(ranked.into_iter().take(max_size))
    }

    pub(crate) fn reindex(&mut self) {
        self.ids = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    /// Total entries including the four reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Number of non-reserved tokens.
    pub fn size(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, token: &str) -> u64 {
        self.id(token).map_or(0, |i| self.counts[i])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Regular tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string).ok_or(Error::UnknownId(i)))
            .collect()
    }
}

/// Tokens ranked by frequency, ties broken by first occurrence.
fn rank_tokens<'a, I, S>(sentences: I) -> Vec<(String, u64)>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
    let mut order = 0usize;
    let sentences: Vec<&'a [S]> = sentences.into_iter().collect();
    for s in &sentences {
        for t in s.iter() {
            let e = counts.entry(t.as_ref()).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
    }
    let mut ranked: Vec<(&str, u64, usize)> = counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.into_iter().map(|(t, c, _)| (t.to_string(), c)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stopwords(BTreeSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }
}

impl Stopwords {
    pub fn empty() -> Self {
        Self(BTreeSet::new())
    }

    /// One token per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FreqConfig {
    /// Size of the frequent-word exclusion list for copy ratio.
    pub top_k: usize,
    pub stopwords: Stopwords,
}

impl Default for FreqConfig {
    fn default() -> Self {
        Self {
            top_k: 1000,
            stopwords: Stopwords::default(),
        }
    }
}

/// Response-side statistics used by the copy-ratio and specificity
/// extractors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FreqStats {
    /// Number of responses |C|.
    pub total: u64,
    /// Number of responses containing each token.
    pub doc_counts: BTreeMap<String, u64>,
    pub stopwords: Stopwords,
    pub top_k: BTreeSet<String>,
    iwf_min: f64,
    iwf_max: f64,
}

impl FreqStats {
    pub fn from_responses<S: AsRef<str>>(responses: &[Vec<S>], config: &FreqConfig) -> Self {
        let mut doc_counts: BTreeMap<String, u64> = BTreeMap::new();
        for r in responses {
            let distinct: HashSet<&str> = r.iter().map(|t| t.as_ref()).collect();
            for t in distinct {
                *doc_counts.entry(t.to_string()).or_default() += 1;
            }
        }
        let ranked = rank_tokens(responses.iter().map(|r| r.as_slice()));
        let top_k = ranked.into_iter().take(config.top_k).map(|(t, _)| t).collect();
        let mut stats = Self {
            total: responses.len() as u64,
            doc_counts,
            stopwords: config.stopwords.clone(),
            top_k,
            iwf_min: 0.0,
            iwf_max: 0.0,
        };
        stats.refresh_iwf_range();
        stats
    }

    fn refresh_iwf_range(&mut self) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for (t, &c) in &self.doc_counts {
            if is_punctuation(t) {
                continue;
            }
            let v = self.iwf_of_count(c);
            min = min.min(v);
            max = max.max(v);
        }
        if min.is_finite() {
            self.iwf_min = min;
            self.iwf_max = max;
        }
    }

    fn iwf_of_count(&self, count: u64) -> f64 {
        (1.0 + self.total as f64).ln() / (1.0 + count as f64)
    }

    /// `log(1 + |C|) / (1 + count(w))`
    pub fn iwf(&self, token: &str) -> f64 {
        self.iwf_of_count(self.doc_counts.get(token).copied().unwrap_or(0))
    }

    /// IWF min-max normalized over the vocabulary, clamped to [0, 1];
    /// 0 when every word has the same IWF.
    pub fn niwf(&self, token: &str) -> f64 {
        let span = self.iwf_max - self.iwf_min;
        if !(span > 0.0) {
            return 0.0;
        }
        ((self.iwf(token) - self.iwf_min) / span).clamp(0.0, 1.0)
    }

    /// Excluded from copy ratio: stopwords, top-K frequent words and
    /// punctuation.
    pub fn is_excluded(&self, token: &str) -> bool {
        is_punctuation(token) || self.stopwords.contains(token) || self.top_k.contains(token)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPair {
    pub message: String,
    pub response: String,
}

#[derive(Clone, Debug)]
pub struct IngestConfig {
    /// Pairs whose message or response exceeds this many tokens are dropped.
    pub max_tokens: usize,
    /// Keep at most this many responses per distinct message.
    pub max_responses_per_message: Option<usize>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            max_tokens: 30,
            max_responses_per_message: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub pairs: Vec<RawPair>,
    pub dropped: usize,
}

#[derive(Deserialize)]
struct PairLine {
    message: String,
    response: String,
}

/// Reads `{"message": ..., "response": ...}` lines.
pub fn load_dataset(path: &Path, config: &IngestConfig) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PairLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        raw.push(RawPair {
            message: p.message,
            response: p.response,
        });
    }
    Ok(filter_pairs(raw, config))
}

pub fn filter_pairs(raw: Vec<RawPair>, config: &IngestConfig) -> Dataset {
    let mut out = Dataset::default();
    let mut per_message: HashMap<String, usize> = HashMap::new();
    for p in raw {
        let (m, r) = (tokenize(&p.message), tokenize(&p.response));
        if m.is_empty() || r.is_empty() || m.len() > config.max_tokens || r.len() > config.max_tokens {
            out.dropped += 1;
            continue;
        }
        if let Some(cap) = config.max_responses_per_message {
            let seen = per_message.entry(p.message.trim().to_string()).or_default();
            if *seen >= cap {
                out.dropped += 1;
                continue;
            }
            *seen += 1;
        }
        out.pairs.push(p);
    }
    out
}

/// Message vocabulary, response vocabulary and response statistics.
pub fn build_vocab(pairs: &[RawPair], max_size: usize) -> Result<(Vocab, Vocab, FreqStats)> {
    build_vocab_with(pairs, max_size, &FreqConfig::default())
}

pub fn build_vocab_with(pairs: &[RawPair], max_size: usize, freq: &FreqConfig) -> Result<(Vocab, Vocab, FreqStats)> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if max_size < 5 {
        return Err(Error::Config(format!("max vocabulary size {max_size} < 5")));
    }
    let messages: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.message)).collect();
    let responses: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.response)).collect();
    let mv = Vocab::build(messages.iter().map(Vec::as_slice), max_size);
    let rv = Vocab::build(responses.iter().map(Vec::as_slice), max_size);
    let stats = FreqStats::from_responses(&responses, freq);
    Ok((mv, rv, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn pair(m: &str, r: &str) -> RawPair {
        RawPair {
            message: m.into(),
            response: r.into(),
        }
    }

    #[test]
    fn tokenize_splits_punctuation() {
        let t = tokenize("Is New York more expensive than California?");
        assert_eq!(t, ["is", "new", "york", "more", "expensive", "than", "california", "?"]);
        assert_eq!(t.len(), 8);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a  b"), ["a", "b"]);
        assert_eq!(tokenize("don't"), ["don", "'", "t"]);
    }

    #[test]
    fn vocab_counts_and_reserved_ids() {
        let pairs = vec![pair("x", "a b"), pair("y", "a c")];
        let (_, rv, _) = build_vocab(&pairs, 100).unwrap();
        assert_eq!(rv.tokens(), ["a", "b", "c"]);
        assert_eq!(rv.count("a"), 2);
        assert_eq!(rv.token(PAD), Some("<pad>"));
        assert_eq!(rv.token(UNK), Some("<unk>"));
        assert_eq!(rv.token(BOS), Some("<s>"));
        assert_eq!(rv.token(EOS), Some("</s>"));
    }

    #[test]
    fn vocab_truncates_to_most_frequent() {
        let text = "j j j j j j i i i i i h h h h g g g f f e d c b a";
        let pairs = vec![pair("m", text)];
        let (_, rv, _) = build_vocab(&pairs, 5).unwrap();
        assert_eq!(rv.size(), 5);
        assert_eq!(rv.tokens(), ["j", "i", "h", "g", "f"]);
        assert_eq!(rv.encode(&["a", "j"]), vec![UNK, rv.id("j").unwrap()]);
        // e, d, c, b, a tie at 1: the earliest seen wins, deterministically
        let (_, rv2, _) = build_vocab(&pairs, 6).unwrap();
        assert_eq!(rv2.tokens()[5], "e");
        assert_eq!(build_vocab(&pairs, 6).unwrap().1, rv2);
    }

    #[test]
    fn encode_decode() {
        let pairs = vec![pair("m", "hello there friend")];
        let (_, rv, _) = build_vocab(&pairs, 50).unwrap();
        let toks = ["hello", "friend"];
        assert_eq!(rv.decode(&rv.encode(&toks)).unwrap(), toks);
        assert_eq!(rv.encode(&["zebra"]), vec![UNK]);
        assert_eq!(UNK, 1);
        assert!(rv.encode::<&str>(&[]).is_empty());
        assert!(matches!(rv.decode(&[999]), Err(Error::UnknownId(999))));
    }

    #[test]
    fn build_vocab_rejects_bad_input() {
        assert!(build_vocab(&[], 10).is_err());
        assert!(build_vocab(&[pair("a", "b")], 4).is_err());
    }

    #[test]
    fn freq_stats_top_k_and_counts() {
        let responses: Vec<Vec<String>> = ["a a b", "a c", "d"].iter().map(|s| tokenize(s)).collect();
        let cfg = FreqConfig {
            top_k: 2,
            stopwords: Stopwords::empty(),
        };
        let s = FreqStats::from_responses(&responses, &cfg);
        assert_eq!(s.total, 3);
        assert_eq!(s.doc_counts["a"], 2);
        assert_eq!(s.top_k.len(), 2);
        assert!(s.top_k.contains("a") && s.top_k.contains("b"));
        let big = FreqStats::from_responses(
            &responses,
            &FreqConfig {
                top_k: 100,
                stopwords: Stopwords::empty(),
            },
        );
        assert_eq!(big.top_k.len(), 4);
    }

    #[test]
    fn default_stopwords_load() {
        let s = Stopwords::default();
        assert!(s.len() > 140 && s.len() < 200);
        assert!(s.contains("the") && s.contains("what"));
        assert!(!s.contains("california"));
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_dataset_valid_and_length_cap() {
        let f = write_lines(&[
            r#"{"message": "hi", "response": "hello there"}"#,
            r#"{"message": "how are you", "response": "fine ."}"#,
            r#"{"message": "ok", "response": "sure"}"#,
        ]);
        let d = load_dataset(f.path(), &IngestConfig::default()).unwrap();
        assert_eq!(d.pairs.len(), 3);
        assert_eq!(d.dropped, 0);

        let long = vec!["w"; 31].join(" ");
        let exact = vec!["w"; 30].join(" ");
        let l1 = format!(r#"{{"message": "hi", "response": "{long}"}}"#);
        let l2 = format!(r#"{{"message": "hi", "response": "{exact}"}}"#);
        let f = write_lines(&[&l1, &l2]);
        let d = load_dataset(f.path(), &IngestConfig::default()).unwrap();
        assert_eq!(d.pairs.len(), 1);
        assert_eq!(d.dropped, 1);
    }

    #[test]
    fn load_dataset_reports_line_numbers() {
        let f = write_lines(&[r#"{"message": "hi", "response": "x"}"#, r#"{"message": "hi", "resp"#]);
        match load_dataset(f.path(), &IngestConfig::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let f = write_lines(&[r#"{"message": "hi"}"#]);
        let err = load_dataset(f.path(), &IngestConfig::default()).unwrap_err();
        assert!(err.to_string().contains("line 1") && err.to_string().contains("response"));
    }

    #[test]
    fn per_message_cap() {
        let raw = vec![pair("m", "a"), pair("m", "b"), pair("m", "c"), pair("n", "d")];
        let d = filter_pairs(
            raw,
            &IngestConfig {
                max_tokens: 30,
                max_responses_per_message: Some(2),
            },
        );
        assert_eq!(d.pairs.len(), 3);
        assert_eq!(d.dropped, 1);
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(s in "[a-zA-Z .,!?;:'\"]{0,60}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn in_vocab_roundtrip(words in proptest::collection::vec("[a-e]{1,3}", 1..30)) {
            let text = words.join(" ");
            let (_, rv, _) = build_vocab(&[pair("m", &text)], 1000).unwrap();
            let toks = tokenize(&text);
            prop_assert_eq!(rv.decode(&rv.encode(&toks)).unwrap(), toks);
        }
    }
}
