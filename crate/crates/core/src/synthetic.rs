//! Synthetic message/response corpus whose responses are a deterministic
//! function of a sampled response plan and the message.
//!
//! A response is `[mu prefix] opener copies [specific word] fillers terminal`:
//! - the act picks the opener and terminal,
//! - multi-utterance responses start with `i am with you .`,
//! - `copies` repeats the first 0 to 2 message nouns,
//! - the specificity tier adds a word keyed by the first message noun; the
//!   high tier has one word per noun and the middle tier one per noun pair,
//!   so their response frequencies (and hence specificity) differ,
//! - stopword fillers pad to the sampled length.
//!
//! Every token outside copies and specific words is a stopword, so copy
//! ratio is `copies / (copies + tier word)`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::corpus::{FreqConfig, RawPair, Stopwords};
use crate::metaword::{ACT_STATEMENT, ACT_WH, ACT_YES_NO};
use crate::rng;

pub const NOUNS: [&str; 16] = [
    "apple", "river", "stone", "cloud", "tiger", "piano", "garden", "rocket", "candle", "forest", "mirror", "violin",
    "castle", "ocean", "pepper", "wizard",
];

const HIGH: [&str; 16] = [
    "saffron",
    "tributary",
    "obsidian",
    "cumulus",
    "bengal",
    "sonata",
    "trellis",
    "booster",
    "wick",
    "canopy",
    "reflection",
    "stradivarius",
    "turret",
    "abyss",
    "paprika",
    "sorcery",
];

const MIDDLE: [&str; 8] = ["fresh", "flowing", "heavy", "grey", "wild", "musical", "green", "fast"];

const FILLERS: [&str; 6] = ["so", "very", "and", "then", "too", "the"];

const MU_PREFIX: [&str; 5] = ["i", "am", "with", "you", "."];

const MESSAGE_OPENERS: [&[&str]; 4] = [
    &["tell", "me", "about"],
    &["what", "do", "you", "think", "of"],
    &["have", "you", "seen"],
    &["i", "like"],
];

pub const MAX_FILLERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    None,
    Middle,
    High,
}

/// The sampled choices behind one response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub act: &'static str,
    pub multi: bool,
    pub copies: usize,
    pub tier: Tier,
    pub fillers: usize,
}

impl Plan {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            act: *[ACT_YES_NO, ACT_WH, ACT_STATEMENT].choose(rng).unwrap(),
            multi: rng.random_bool(0.5),
            copies: rng.random_range(0..=2),
            tier: *[Tier::None, Tier::Middle, Tier::High].choose(rng).unwrap(),
            fillers: rng.random_range(0..=MAX_FILLERS),
        }
    }

    /// Builds the response for a message whose nouns are `nouns`
    /// (indices into `NOUNS`, at least two).
    pub fn realize(&self, nouns: &[usize]) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.multi {
            out.extend(MU_PREFIX);
        }
        out.extend(match self.act {
            ACT_YES_NO => ["do", "you", "have"],
            ACT_WH => ["what", "is", "it"],
            _ => ["i", "did", "this"],
        });
        out.extend(nouns.iter().take(self.copies).map(|&i| NOUNS[i]));
        match self.tier {
            Tier::None => {}
            Tier::Middle => out.push(MIDDLE[nouns[0] % MIDDLE.len()]),
            Tier::High => out.push(HIGH[nouns[0]]),
        }
        out.extend(FILLERS.iter().cycle().take(self.fillers));
        out.push(if self.act == ACT_STATEMENT { "." } else { "?" });
        out
    }
}

fn message<R: Rng>(rng: &mut R) -> (Vec<usize>, String) {
    let k = rng.random_range(2..=3);
    let mut idx: Vec<usize> = (0..NOUNS.len()).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    let mut words: Vec<&str> = MESSAGE_OPENERS.choose(rng).unwrap().to_vec();
    for (j, &i) in idx.iter().enumerate() {
        if j > 0 {
            words.push("and");
        }
        words.push(NOUNS[i]);
    }
    words.push(if rng.random_bool(0.5) { "?" } else { "." });
    (idx, words.join(" "))
}

/// `n` pairs drawn from the seed's sampling stream.
pub fn generate(n: usize, seed: u64) -> Vec<RawPair> {
    let mut rng = rng::stream(seed, rng::SAMPLING);
    (0..n)
        .map(|_| {
            let (nouns, message) = message(&mut rng);
            let plan = Plan::sample(&mut rng);
            RawPair {
                message,
                response: plan.realize(&nouns).join(" "),
            }
        })
        .collect()
}

/// Frequency settings for this corpus: default stopwords, no frequent-word
/// exclusion (the whole vocabulary is far below the usual cutoff).
pub fn freq_config() -> FreqConfig {
    FreqConfig {
        top_k: 0,
        stopwords: Stopwords::default(),
    }
}
