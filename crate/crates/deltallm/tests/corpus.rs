use deltallm::corpus::{detokenize, load_corpus, split_bounds, tokenize, tokenize_bytes, Corpus, CorpusError, Split, BOS, EOS, VOCAB_SIZE};
use proptest::prelude::*;

fn fixture() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus.txt")
}

#[test]
fn tokenizer_basics() {
    assert!(tokenize("").is_empty());
    assert!(detokenize(&[]).is_empty());
    assert_eq!(tokenize("abc"), vec![97, 98, 99]);
    assert_eq!(tokenize("é"), vec![0xc3, 0xa9]);
    assert_eq!(detokenize(&[BOS, 104, 105, EOS]), b"hi");
    assert_eq!(VOCAB_SIZE, 258);
}

#[test]
fn thousand_token_split() {
    let c = Corpus::from_bytes("k", vec![b'x'; 1000], 0).unwrap();
    assert_eq!((c.train().len(), c.val().len(), c.test().len()), (800, 100, 100));
    assert_eq!(split_bounds(1000), [800, 900]);
    let d = Corpus::from_bytes("k", vec![b'x'; 1000], 0).unwrap();
    assert_eq!(c, d);
    assert_eq!(c.split(Split::Val).len(), 100);
}

#[test]
fn empty_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.txt");
    std::fs::write(&p, "").unwrap();
    assert!(matches!(load_corpus(&p, 0), Err(CorpusError::Empty(_))));
    assert!(matches!(load_corpus(dir.path().join("nope"), 0), Err(CorpusError::Io { .. })));
}

#[test]
fn fixture_round_trips_and_splits() {
    let raw = std::fs::read(fixture()).unwrap();
    let c = load_corpus(fixture(), 7).unwrap();
    assert_eq!(c.id, "corpus.txt");
    assert_eq!(detokenize(&c.ids), raw);
    assert_eq!(c.ids.len(), 1_000_000);
    assert_eq!(c.bounds, [800_000, 900_000]);
    assert_eq!(c.train().len() + c.val().len() + c.test().len(), c.ids.len());
    assert_eq!(c, load_corpus(fixture(), 7).unwrap());
}

#[test]
fn split_names_parse() {
    assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
    assert_eq!("test".parse::<Split>().unwrap().to_string(), "test");
    assert!("dev".parse::<Split>().is_err());
}

proptest! {
    #[test]
    fn prop_bytes_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        prop_assert_eq!(detokenize(&tokenize_bytes(&bytes)), bytes);
    }

    #[test]
    fn prop_splits_partition(n in 1usize..5000) {
        let [a, b] = split_bounds(n);
        prop_assert!(a <= b && b <= n);
        prop_assert_eq!(a, n * 8 / 10);
    }
}
