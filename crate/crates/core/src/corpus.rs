//! Text ingestion: sentence splitting, word vocabulary construction and
//! tokenization, plus the line-delimited JSON dataset formats.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmithError};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const NUM_SPECIAL: usize = 4;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

/// Bijection between token strings and ids. Ids 0..4 are always the
/// special tokens, in the order of [`SPECIAL_TOKENS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        Self::from_words(std::iter::empty::<String>()).expect("special tokens are unique")
    }

    /// Builds a vocabulary from regular words; the special tokens are
    /// prepended automatically.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(SmithError::InvalidInput(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(SmithError::InvalidInput(format!(
                    "duplicate vocabulary token `{tok}`"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Out-of-vocabulary strings map to [`UNK_ID`].
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        crate::io::write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SmithError::io(format!("reading vocabulary {}", path.display()), e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens).map_err(|e| SmithError::Parse {
            path: path.to_path_buf(),
            line: 0,
            detail: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub source: RawDocument,
    pub target: RawDocument,
    pub label: u8,
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    source_id: String,
    source_text: String,
    target_id: String,
    target_text: String,
    label: u8,
}

impl From<&PairRecord> for PairLine {
    fn from(p: &PairRecord) -> Self {
        PairLine {
            source_id: p.source.id.clone(),
            source_text: p.source.text.clone(),
            target_id: p.target.id.clone(),
            target_text: p.target.text.clone(),
            label: p.label,
        }
    }
}

/// Splits after every '.', '!' or '?' that is followed by whitespace.
/// No abbreviation handling is attempted.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    push_trimmed(&mut sentences, &text[start..end]);
                    start = end;
                }
            }
        }
    }
    push_trimmed(&mut sentences, &text[start..]);
    sentences
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
}

/// Lowercased words; any non-alphanumeric character separates tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

pub fn tokenize(sentence: &str, vocab: &Vocabulary) -> Vec<usize> {
    words(sentence).map(|w| vocab.lookup(&w)).collect()
}

/// Order-independent word counter; partial counters built over shards of a
/// corpus can be merged before [`VocabCounter::finish`].
#[derive(Debug, Default, Clone)]
pub struct VocabCounter {
    counts: HashMap<String, u64>,
}

impl VocabCounter {
    pub fn add_text(&mut self, text: &str) {
        for w in words(text) {
            *self.counts.entry(w).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: VocabCounter) {
        for (w, c) in other.counts {
            *self.counts.entry(w).or_insert(0) += c;
        }
    }

    pub fn finish(self, max_size: usize, min_count: u64) -> Result<Vocabulary> {
        if max_size < NUM_SPECIAL + 1 {
            return Err(SmithError::InvalidInput(format!(
                "max_size must be at least {}, got {max_size}",
                NUM_SPECIAL + 1
            )));
        }
        let min_count = min_count.max(1);
        let mut ranked: Vec<(String, u64)> = self
            .counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIAL);
        Vocabulary::from_words(ranked.into_iter().map(|(w, _)| w))
    }
}

pub fn build_vocab<'a, I>(docs: I, max_size: usize, min_count: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a RawDocument>,
{
    let mut counter = VocabCounter::default();
    for doc in docs {
        counter.add_text(&doc.text);
    }
    counter.finish(max_size, min_count)
}

fn read_json_lines<T, F>(path: &Path, mut f: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<()>,
{
    let file =
        File::open(path).map_err(|e| SmithError::io(format!("opening {}", path.display()), e))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SmithError::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| SmithError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            detail: e.to_string(),
        })?;
        f(n + 1, rec)?;
    }
    Ok(())
}

/// Reads a `{"id", "text"}` line-delimited corpus. Ids must be non-empty and
/// unique within the file.
pub fn read_documents(path: &Path) -> Result<Vec<RawDocument>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    read_json_lines(path, |line, doc: RawDocument| {
        let err = |detail: String| SmithError::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        if doc.id.is_empty() {
            return Err(err("empty document id".into()));
        }
        if !seen.insert(doc.id.clone()) {
            return Err(err(format!("duplicate document id `{}`", doc.id)));
        }
        docs.push(doc);
        Ok(())
    })?;
    Ok(docs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let mut pairs = Vec::new();
    read_json_lines(path, |line, rec: PairLine| {
        if rec.label > 1 {
            return Err(SmithError::Parse {
                path: path.to_path_buf(),
                line,
                detail: format!("label must be 0 or 1, got {}", rec.label),
            });
        }
        if rec.source_id.is_empty() || rec.target_id.is_empty() {
            return Err(SmithError::Parse {
                path: path.to_path_buf(),
                line,
                detail: "empty document id".into(),
            });
        }
        pairs.push(PairRecord {
            source: RawDocument {
                id: rec.source_id,
                text: rec.source_text,
            },
            target: RawDocument {
                id: rec.target_id,
                text: rec.target_text,
            },
            label: rec.label,
        });
        Ok(())
    })?;
    Ok(pairs)
}

pub fn pairs_to_jsonl(pairs: &[PairRecord]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(&PairLine::from(p)).expect("pair serializes"));
        out.push('\n');
    }
    out
}

pub fn documents_to_jsonl(docs: &[RawDocument]) -> String {
    let mut out = Vec::new();
    for d in docs {
        serde_json::to_writer(&mut out, d).expect("document serializes");
        out.write_all(b"\n").expect("vec write");
    }
    String::from_utf8(out).expect("json is utf-8")
}

/// Distinct documents referenced by a pair dataset, in first-seen order.
pub fn pair_documents(pairs: &[PairRecord]) -> Vec<RawDocument> {
    let mut seen = BTreeMap::new();
    let mut docs = Vec::new();
    for p in pairs {
        for d in [&p.source, &p.target] {
            if seen.insert(d.id.clone(), ()).is_none() {
                docs.push(d.clone());
            }
        }
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(text: &str) -> RawDocument {
        RawDocument {
            id: "d".into(),
            text: text.into(),
        }
    }

    #[test]
    fn splits_on_terminators() {
        assert_eq!(split_sentences("A b. C d!"), vec!["A b.", "C d!"]);
        assert_eq!(
            split_sentences("no terminator here"),
            vec!["no terminator here"]
        );
        assert_eq!(
            split_sentences("Dr. Smith arrived. He left."),
            vec!["Dr.", "Smith arrived.", "He left."]
        );
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n ").is_empty());
        // terminator not followed by whitespace does not split
        assert_eq!(split_sentences("3.14 is pi"), vec!["3.14 is pi"]);
    }

    #[test]
    fn vocab_by_frequency() {
        let v = build_vocab(&[doc("a a b")], 10, 1).unwrap();
        assert_eq!(v.tokens(), ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "a", "b"]);
        let v = build_vocab(&[doc("a a b")], 5, 1).unwrap();
        assert_eq!(v.tokens(), ["[PAD]", "[UNK]", "[CLS]", "[MASK]", "a"]);
        let v = build_vocab(&[], 10, 1).unwrap();
        assert_eq!(v.len(), NUM_SPECIAL);
        assert!(build_vocab(&[doc("a")], 4, 1).is_err());
    }

    #[test]
    fn vocab_ties_and_min_count() {
        let v = build_vocab(&[doc("z y x x")], 10, 1).unwrap();
        assert_eq!(&v.tokens()[4..], ["x", "y", "z"]);
        let v = build_vocab(&[doc("z y x x")], 10, 2).unwrap();
        assert_eq!(&v.tokens()[4..], ["x"]);
    }

    #[test]
    fn tokenize_maps_oov_to_unk() {
        let v = build_vocab(&[doc("a a b")], 10, 1).unwrap();
        assert_eq!(tokenize("a b", &v), vec![4, 5]);
        assert_eq!(tokenize("", &v), Vec::<usize>::new());
        assert_eq!(tokenize("a zzz", &v), vec![4, 1]);
        assert_eq!(tokenize("A, B!", &v), vec![4, 5]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&[doc("the cat saw the dog")], 100, 1).unwrap();
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[CLS]\n[MASK]\nthe\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);

        std::fs::write(&path, "the\ncat\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    #[test]
    fn counter_merge_is_order_independent() {
        let texts = ["b a c", "c c d", "a e"];
        let mut fwd = VocabCounter::default();
        for t in texts {
            let mut shard = VocabCounter::default();
            shard.add_text(t);
            fwd.merge(shard);
        }
        let mut rev = VocabCounter::default();
        for t in texts.iter().rev() {
            rev.add_text(t);
        }
        assert_eq!(fwd.finish(20, 1).unwrap(), rev.finish(20, 1).unwrap());
    }

    #[test]
    fn reads_dataset_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"x y\"}\n\n{\"id\":\"b\",\"text\":\"z\"}\n",
        )
        .unwrap();
        assert_eq!(read_documents(&path).unwrap().len(), 2);

        std::fs::write(
            &path,
            "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n",
        )
        .unwrap();
        let err = read_documents(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");

        let pairs = dir.path().join("pairs.jsonl");
        std::fs::write(
            &pairs,
            "{\"source_id\":\"s\",\"source_text\":\"a\",\"target_id\":\"t\",\"target_text\":\"b\",\"label\":2}\n",
        )
        .unwrap();
        assert!(read_pairs(&pairs).is_err());
    }

    proptest! {
        #[test]
        fn sentence_split_preserves_tokens(text in "[a-c .!?\n]{0,60}") {
            let v = build_vocab(&[doc(&text)], 50, 1).unwrap();
            let per_sentence: usize = split_sentences(&text).iter().map(|s| tokenize(s, &v).len()).sum();
            prop_assert_eq!(per_sentence, tokenize(&text, &v).len());

            let joined: String = split_sentences(&text).concat();
            let stripped: String = text.chars().filter(|c| !c.is_whitespace()).collect();
            let joined_stripped: String = joined.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(joined_stripped, stripped);
        }

        #[test]
        fn tokenize_never_emits_reserved(text in "\\PC{0,40}") {
            let v = build_vocab(&[doc(&text)], 30, 1).unwrap();
            for id in tokenize(&text, &v) {
                prop_assert!(id == UNK_ID || id >= NUM_SPECIAL);
            }
        }
    }
}
