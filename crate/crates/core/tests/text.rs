use proptest::prelude::*;
use xmm_core::text::{
    embed_batch, embed_sequence, split_words, tokenize_and_pad, EmbeddingTable, TokenSequence, Vocabulary, CLS, PAD,
    SEP, UNK,
};
use xmm_core::Error;

fn vocab() -> Vocabulary {
    Vocabulary::new(["a", "man", "woman", "in", "red", "shirt", "blue", "pants", ",", "."]).unwrap()
}

#[test]
fn vocabulary_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = vocab();
    v.save(&path).unwrap();
    let back = Vocabulary::load(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.id("man"), 5);
    assert_eq!(back.token(0), Some("[PAD]"));
}

#[test]
fn example_sentence_layout() {
    let seq = tokenize_and_pad("A man in RED shirt.", &vocab(), 10).unwrap();
    let v = vocab();
    let expected = [CLS, v.id("a"), v.id("man"), v.id("in"), v.id("red"), v.id("shirt"), v.id("."), SEP, PAD, PAD];
    assert_eq!(seq.ids(), expected);
    assert_eq!(seq.true_length(), 8);
    assert_eq!(seq.decode(&v), "a man in red shirt .");
}

#[test]
fn from_ids_rejects_malformed_layouts() {
    assert!(TokenSequence::from_ids(vec![CLS, 5, SEP, PAD], 3).is_ok());
    for (ids, len) in [
        (vec![5, CLS, SEP, PAD], 3),
        (vec![CLS, 5, PAD, SEP], 4),
        (vec![CLS, 5, SEP, 7], 3),
        (vec![CLS, PAD, SEP, PAD], 3),
        (vec![CLS, SEP], 1),
        (vec![CLS, SEP], 3),
    ] {
        assert!(TokenSequence::from_ids(ids, len).is_err());
    }
}

#[test]
fn embedding_table_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.xmeb");
    let table = EmbeddingTable::random(14, 6, 3);
    table.save(&path).unwrap();
    assert_eq!(EmbeddingTable::load(&path).unwrap(), table);
    assert!(table.row(PAD).unwrap().iter().all(|&x| x == 0.0));
    assert!(table.is_frozen());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 8;
    bytes[last] ^= 0x40;
    assert!(matches!(EmbeddingTable::from_bytes(&bytes), Err(Error::Corrupt(_))));
    bytes.truncate(10);
    assert!(matches!(EmbeddingTable::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn random_table_depends_only_on_seed() {
    assert_eq!(EmbeddingTable::random(9, 4, 1), EmbeddingTable::random(9, 4, 1));
    assert_ne!(EmbeddingTable::random(9, 4, 1), EmbeddingTable::random(9, 4, 2));
}

#[test]
fn batch_embedding_shape_and_rows() {
    let v = vocab();
    let table = EmbeddingTable::random(v.len(), 5, 0);
    let a = tokenize_and_pad("a man", &v, 7).unwrap();
    let b = tokenize_and_pad("woman in blue pants", &v, 7).unwrap();
    let batch = embed_batch(&[&a, &b], &table).unwrap();
    assert_eq!(batch.shape(), [2, 1, 7, 5]);
    let single = embed_sequence(&b, &table).unwrap();
    assert_eq!(single.shape(), [1, 7, 5]);
    assert_eq!(&batch.data()[35..], single.data());
    let short = tokenize_and_pad("a man", &v, 5).unwrap();
    assert!(embed_batch(&[&a, &short], &table).is_err());
    assert!(embed_batch(&[], &table).is_err());
}

proptest! {
    /// Re-splitting the joined words of any sentence gives the same words.
    #[test]
    fn splitting_is_idempotent(s in "\\PC{0,60}") {
        let words = split_words(&s);
        prop_assert_eq!(split_words(&words.join(" ")), words);
    }

    /// For in-vocabulary sentences, decoding and re-tokenizing reproduces
    /// the sequence exactly.
    #[test]
    fn retokenizing_a_decoded_sequence_is_identity(
        picks in prop::collection::vec(0usize..10, 1..20),
        len in 3usize..30,
    ) {
        let v = vocab();
        let words: Vec<&str> = picks.iter().map(|&i| v.token(i as u32 + 4).unwrap()).collect();
        let seq = tokenize_and_pad(&words.join(" "), &v, len).unwrap();
        let again = tokenize_and_pad(&seq.decode(&v), &v, len).unwrap();
        prop_assert_eq!(&again, &seq);
    }

    /// Layout invariants hold for every sentence and length, and truncation
    /// keeps the leading words.
    #[test]
    fn sequence_layout_invariants(s in "[a-z ,.!?]{0,80}", len in 2usize..40) {
        let v = vocab();
        let words = split_words(&s);
        match tokenize_and_pad(&s, &v, len) {
            Err(_) => prop_assert!(words.is_empty()),
            Ok(seq) => {
                prop_assert_eq!(seq.len(), len);
                let kept = words.len().min(len - 2);
                prop_assert_eq!(seq.true_length(), kept + 2);
                prop_assert!(TokenSequence::from_ids(seq.ids().to_vec(), seq.true_length()).is_ok());
                for (k, w) in words.iter().take(kept).enumerate() {
                    prop_assert_eq!(seq.ids()[k + 1], v.id(w));
                }
                prop_assert!(seq.ids()[1..kept + 1].iter().all(|&i| i == UNK || i >= 4));
            }
        }
    }

    /// Table bytes round-trip for any shape and seed.
    #[test]
    fn table_bytes_round_trip(vs in 1usize..30, d in 1usize..12, seed in any::<u64>()) {
        let t = EmbeddingTable::random(vs, d, seed);
        prop_assert_eq!(EmbeddingTable::from_bytes(&t.to_bytes()).unwrap(), t);
    }
}
