//! Synthetic topic-templated documents for pretraining and matching runs.
//!
//! Each topic owns a small word pool and a fixed script of sentences built
//! from that pool and a shared pool of filler words. A document of a topic
//! is a run of consecutive script sentences starting at a random offset,
//! with each topic word swapped for another word of the same topic at a
//! small rate. Topic definitions are fixed; the seed only drives sampling,
//! so fixtures drawn with different seeds share their topics.
//!
//! An optional preamble of pure filler sentences can be put in front of
//! every document, pushing all topical content past a given token offset.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{PairRecord, RawDocument};
use crate::error::{Result, SmithError};

const SCRIPT_SEED: u64 = 0x5eed_7091c;

pub const FILLER: [&str; 24] = [
    "the", "a", "of", "and", "to", "in", "is", "was", "for", "on", "with", "as", "by", "at",
    "from", "that", "this", "it", "be", "are", "or", "an", "which", "also",
];

const SYLLABLES: [&str; 16] = [
    "ba", "de", "fi", "go", "ku", "la", "me", "ni", "po", "ru", "sa", "te", "vi", "wo", "xe", "zu",
];

/// Shape of the topic scripts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopicStyle {
    pub words_per_topic: usize,
    pub script_sentences: usize,
    /// Share of script slots holding a topic word rather than filler.
    pub topic_word_rate: f64,
    /// Chance that a topic word is swapped for a random one of its topic.
    pub swap_rate: f64,
}

impl Default for TopicStyle {
    fn default() -> Self {
        Self {
            words_per_topic: 12,
            script_sentences: 10,
            topic_word_rate: 0.6,
            swap_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub n_pairs: usize,
    pub topics: usize,
    /// Approximate topical tokens per document.
    pub doc_len: usize,
    pub seed: u64,
    /// Minimum filler tokens placed before the topical content.
    pub preamble_tokens: usize,
    pub style: TopicStyle,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            topics: 4,
            doc_len: 96,
            seed: 0,
            preamble_tokens: 0,
            style: TopicStyle::default(),
        }
    }
}

/// The `i`-th word of `topic`'s pool. Distinct for all `i < 64`.
pub fn topic_word(topic: usize, i: usize) -> String {
    let mut g = topic * 64 + i + 291;
    let mut word = String::new();
    for _ in 0..3 {
        word.push_str(SYLLABLES[g % 16]);
        g /= 16;
    }
    word
}

#[derive(Debug, Clone)]
struct Slot {
    /// `Some(i)` for topic word `i`, `None` for a filler word.
    topic_word: Option<usize>,
    filler: usize,
}

fn script(topic: usize, style: &TopicStyle) -> Vec<Vec<Slot>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SCRIPT_SEED + topic as u64);
    (0..style.script_sentences)
        .map(|_| {
            let len = rng.gen_range(4..=9);
            (0..len)
                .map(|_| Slot {
                    topic_word: rng
                        .gen_bool(style.topic_word_rate)
                        .then(|| rng.gen_range(0..style.words_per_topic)),
                    filler: rng.gen_range(0..FILLER.len()),
                })
                .collect()
        })
        .collect()
}

fn sentence_text(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        let upper = first.to_uppercase();
        s.replace_range(..1, &upper);
    }
    s.push('.');
    s
}

fn preamble<R: Rng>(tokens: usize, rng: &mut R) -> Vec<String> {
    let mut out = Vec::new();
    let mut count = 0;
    while count < tokens {
        let len = rng.gen_range(5..=9);
        let words: Vec<String> = (0..len)
            .map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string())
            .collect();
        count += len;
        out.push(sentence_text(&words));
    }
    out
}

struct Generator {
    style: TopicStyle,
    scripts: Vec<Vec<Vec<Slot>>>,
}

impl Generator {
    fn new(topics: usize, style: TopicStyle) -> Result<Self> {
        if style.words_per_topic == 0 || style.words_per_topic > 64 || style.script_sentences == 0 {
            return Err(SmithError::Config(format!(
                "topic style needs 1..=64 words and at least one sentence, got {style:?}"
            )));
        }
        Ok(Self {
            style,
            scripts: (0..topics).map(|t| script(t, &style)).collect(),
        })
    }

    fn document<R: Rng>(
        &self,
        topic: usize,
        doc_len: usize,
        preamble_tokens: usize,
        rng: &mut R,
    ) -> String {
        let mut sentences = preamble(preamble_tokens, rng);
        let script = &self.scripts[topic];
        let mut at = rng.gen_range(0..script.len());
        let mut count = 0;
        while count < doc_len.max(1) {
            let words: Vec<String> = script[at]
                .iter()
                .map(|slot| match slot.topic_word {
                    Some(i) => {
                        let i = if rng.gen_bool(self.style.swap_rate) {
                            rng.gen_range(0..self.style.words_per_topic)
                        } else {
                            i
                        };
                        topic_word(topic, i)
                    }
                    None => FILLER[slot.filler].to_string(),
                })
                .collect();
            count += words.len();
            sentences.push(sentence_text(&words));
            at = (at + 1) % script.len();
        }
        sentences.join(" ")
    }
}

/// Labelled pairs: half share a topic (label 1), half are drawn from two
/// distinct topics (label 0), in shuffled order.
pub fn generate_fixture(cfg: &FixtureConfig) -> Result<Vec<PairRecord>> {
    if cfg.topics < 2 {
        return Err(SmithError::Config(format!(
            "a fixture needs at least 2 topics, got {}",
            cfg.topics
        )));
    }
    let gen = Generator::new(cfg.topics, cfg.style)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<u8> = (0..cfg.n_pairs).map(|i| u8::from(i % 2 == 0)).collect();
    labels.shuffle(&mut rng);
    let pairs = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let t1 = rng.gen_range(0..cfg.topics);
            let t2 = if label == 1 {
                t1
            } else {
                (t1 + rng.gen_range(1..cfg.topics)) % cfg.topics
            };
            let mut doc = |suffix: &str, topic| RawDocument {
                id: format!("p{i}-{suffix}"),
                text: gen.document(topic, cfg.doc_len, cfg.preamble_tokens, &mut rng),
            };
            let source = doc("s", t1);
            let target = doc("t", t2);
            PairRecord {
                source,
                target,
                label,
            }
        })
        .collect();
    Ok(pairs)
}

/// Unlabelled documents cycling through the topics, for pretraining.
pub fn generate_corpus(
    n_docs: usize,
    topics: usize,
    doc_len: usize,
    style: TopicStyle,
    seed: u64,
) -> Result<Vec<RawDocument>> {
    if topics == 0 {
        return Err(SmithError::Config("a corpus needs at least 1 topic".into()));
    }
    let gen = Generator::new(topics, style)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_docs)
        .map(|i| RawDocument {
            id: format!("doc{i}"),
            text: gen.document(i % topics, doc_len, 0, &mut rng),
        })
        .collect())
}
