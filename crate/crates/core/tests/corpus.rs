use proptest::prelude::*;
use smith_core::corpus::{
    build_vocab, pairs_to_jsonl, read_documents, read_pairs, split_sentences, tokenize, words,
    PairRecord, RawDocument, Vocabulary, SPECIAL_TOKENS, UNK_ID,
};

fn doc(id: &str, text: &str) -> RawDocument {
    RawDocument {
        id: id.into(),
        text: text.into(),
    }
}

#[test]
fn sentence_examples() {
    assert_eq!(split_sentences("A b. C d!"), ["A b.", "C d!"]);
    assert_eq!(
        split_sentences("no terminator here"),
        ["no terminator here"]
    );
    assert_eq!(
        split_sentences("Dr. Smith arrived. He left."),
        ["Dr.", "Smith arrived.", "He left."]
    );
    assert!(split_sentences("").is_empty());
    assert!(split_sentences("   ").is_empty());
}

#[test]
fn vocabulary_examples() {
    let docs = [doc("a", "a a b")];
    let v = build_vocab(docs.iter(), 10, 1).unwrap();
    let mut want: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    want.extend(["a".to_string(), "b".to_string()]);
    assert_eq!(v.tokens(), want.as_slice());

    let v = build_vocab(docs.iter(), 5, 1).unwrap();
    assert_eq!(v.tokens().len(), 5);
    assert_eq!(v.token(4), Some("a"));

    let v = build_vocab(std::iter::empty(), 10, 1).unwrap();
    assert_eq!(v, Vocabulary::specials_only());
    assert!(build_vocab(docs.iter(), 4, 1).is_err());
}

#[test]
fn ties_break_lexicographically_and_min_count_filters() {
    let docs = [doc("a", "zeta alpha beta beta gamma")];
    let v = build_vocab(docs.iter(), 100, 1).unwrap();
    assert_eq!(&v.tokens()[4..], ["beta", "alpha", "gamma", "zeta"]);
    let v = build_vocab(docs.iter(), 100, 2).unwrap();
    assert_eq!(&v.tokens()[4..], ["beta"]);
}

#[test]
fn tokenize_lowercases_and_maps_unknowns() {
    let v = Vocabulary::from_words(["hello", "world"]).unwrap();
    assert_eq!(tokenize("Hello, WORLD! again", &v), [4, 5, UNK_ID]);
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let v = Vocabulary::from_words(["x", "y"]).unwrap();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), v);

    let pairs = vec![PairRecord {
        source: doc("s", "One. Two."),
        target: doc("t", "Three."),
        label: 1,
    }];
    let path = dir.path().join("pairs.jsonl");
    std::fs::write(&path, pairs_to_jsonl(&pairs)).unwrap();
    assert_eq!(read_pairs(&path).unwrap(), pairs);

    let path = dir.path().join("docs.jsonl");
    std::fs::write(
        &path,
        "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n",
    )
    .unwrap();
    let err = read_documents(&path).unwrap_err().to_string();
    assert!(err.contains("duplicate"), "{err}");
    std::fs::write(&path, "{\"id\":\"a\",\"text\":\"x\"}\nnot json\n").unwrap();
    assert!(read_documents(&path)
        .unwrap_err()
        .to_string()
        .contains(":2"));
}

proptest! {
    #[test]
    fn sentences_reassemble_the_text(text in "[a-zA-Z .!?\n]{0,80}") {
        let joined: String = split_sentences(&text).concat();
        let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
        prop_assert_eq!(strip(&joined), strip(text.trim()));
        for s in split_sentences(&text) {
            prop_assert!(!s.is_empty());
            prop_assert_eq!(s.trim(), s.as_str());
        }
    }

    #[test]
    fn vocabulary_is_deterministic_and_bounded(
        texts in proptest::collection::vec("[a-d ]{0,30}", 0..6),
        max_size in 5usize..12,
    ) {
        let docs: Vec<RawDocument> = texts.iter().enumerate().map(|(i, t)| doc(&i.to_string(), t)).collect();
        let a = build_vocab(docs.iter(), max_size, 1).unwrap();
        let mut rev = docs.clone();
        rev.reverse();
        let b = build_vocab(rev.iter(), max_size, 1).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.len() <= max_size);
        for w in docs.iter().flat_map(|d| words(&d.text)) {
            let id = a.lookup(&w);
            prop_assert!(id == UNK_ID || a.token(id) == Some(w.as_str()));
        }
    }
}
