//! Sentence tokenization, fixed-length padding and frozen embedding lookup.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const DEFAULT_SEQ_LEN: usize = 120;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Injective token → id map with fixed reserved ids for the special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary; ordinary tokens get ids 4, 5, ... in order.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            ids: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i as u32))
                .collect(),
        };
        for tok in tokens {
            let tok = tok.into();
            if vocab.ids.contains_key(&tok) {
                return Err(Error::Input(format!("duplicate vocabulary token `{tok}`")));
            }
            vocab.ids.insert(tok.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    /// Reads one token per line; line `i` (0-based) gets id `i + 4`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().filter(|l| !l.is_empty()).map(str::to_owned))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens[RESERVED.len()..] {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Lowercases and splits on whitespace; punctuation characters become
/// tokens of their own.
pub fn split_words(sentence: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in sentence.split_whitespace() {
        let mut cur = String::new();
        // Classify after lowercasing: some capitals lowercase to a letter
        // plus a combining mark, which must split the same way on re-reading.
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

/// Fixed-length id sequence: `[CLS] w1 .. wk [SEP] [PAD]...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    true_length: usize,
}

impl TokenSequence {
    /// Validates the layout invariants of a raw id list.
    pub fn from_ids(ids: Vec<u32>, true_length: usize) -> Result<Self> {
        let ok = true_length >= 2
            && true_length <= ids.len()
            && ids[0] == CLS
            && ids[true_length - 1] == SEP
            && ids[1..true_length - 1]
                .iter()
                .all(|&i| i != PAD && i != CLS && i != SEP)
            && ids[true_length..].iter().all(|&i| i == PAD);
        if !ok {
            return Err(Error::Input(format!(
                "malformed token sequence (true length {true_length})"
            )));
        }
        Ok(Self { ids, true_length })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Content tokens joined by single spaces (special tokens dropped).
    pub fn decode(&self, vocab: &Vocabulary) -> String {
        self.ids[1..self.true_length - 1]
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Tokenizes, wraps with `[CLS]`/`[SEP]`, truncates to `len` keeping `[SEP]`
/// last, and pads with `[PAD]`.
pub fn tokenize_and_pad(sentence: &str, vocab: &Vocabulary, len: usize) -> Result<TokenSequence> {
    if len < 2 {
        return Err(Error::Input(format!("sequence length {len} cannot hold [CLS] and [SEP]")));
    }
    let words = split_words(sentence);
    if words.is_empty() {
        return Err(Error::Input("empty sentence".into()));
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    ids.extend(words.iter().take(len - 2).map(|w| vocab.id(w)));
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(len, PAD);
    Ok(TokenSequence { ids, true_length })
}

/// Frozen `V×D` lookup table standing in for contextual word vectors.
///
/// There is no API to obtain a gradient for or mutate the table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab_size: usize,
    dim: usize,
    data: Vec<f32>,
}

const TABLE_MAGIC: &[u8; 4] = b"XMEB";
const TABLE_VERSION: u32 = 1;

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if vocab_size == 0 || dim == 0 || data.len() != vocab_size * dim {
            return Err(Error::Dimension(format!(
                "embedding table {vocab_size}×{dim} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            vocab_size,
            dim,
            data,
        })
    }

    /// Standard-normal rows from a seeded stream; the `[PAD]` row is zero.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f32> = (0..vocab_size * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        data[..dim].fill(0.0);
        Self {
            vocab_size,
            dim,
            data,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, id: u32) -> Result<&[f32]> {
        let i = id as usize;
        if i >= self.vocab_size {
            return Err(Error::Index(format!(
                "token id {id} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = Vec::with_capacity(payload.len() + 20);
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != TABLE_MAGIC {
            return Err(Error::Format("not an embedding table (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("unsupported embedding table version {version}")));
        }
        let (v, d) = (word(8) as usize, word(12) as usize);
        let payload_len = v
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("embedding table extents overflow".into()))?;
        if bytes.len() != 16 + payload_len + 4 {
            return Err(Error::Corrupt(format!(
                "embedding table should be {} bytes, found {}",
                16 + payload_len + 4,
                bytes.len()
            )));
        }
        let payload = &bytes[16..16 + payload_len];
        if crc32fast::hash(payload) != word(16 + payload_len) {
            return Err(Error::Corrupt("embedding table checksum mismatch".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(v, d, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Looks up every id; padded positions embed to zero. Output `1×L×D`.
pub fn embed_sequence(seq: &TokenSequence, table: &EmbeddingTable) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(seq.len() * table.dim);
    write_embedding(seq, table, &mut data)?;
    Tensor::new(vec![1, seq.len(), table.dim], data)
}

/// Stacks sequences of equal length into an `N×1×L×D` batch.
pub fn embed_batch(seqs: &[&TokenSequence], table: &EmbeddingTable) -> Result<Tensor<f32>> {
    let Some(first) = seqs.first() else {
        return Err(Error::Input("empty text batch".into()));
    };
    let len = first.len();
    let mut data = Vec::with_capacity(seqs.len() * len * table.dim);
    for seq in seqs {
        if seq.len() != len {
            return Err(Error::Dimension("sequences in a batch must share a length".into()));
        }
        write_embedding(seq, table, &mut data)?;
    }
    Tensor::new(vec![seqs.len(), 1, len, table.dim], data)
}

fn write_embedding(seq: &TokenSequence, table: &EmbeddingTable, out: &mut Vec<f32>) -> Result<()> {
    for &id in &seq.ids {
        if id == PAD {
            out.extend(std::iter::repeat_n(0.0, table.dim));
        } else {
            out.extend_from_slice(table.row(id)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["the", "man", "wears", "shoes"]).unwrap()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = vocab();
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id("[CLS]"), CLS);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("[UNK]"), UNK);
        assert_eq!(v.id("the"), 4);
    }

    #[test]
    fn duplicate_tokens_are_rejected() {
        assert!(Vocabulary::new(["a", "a"]).is_err());
    }

    #[test]
    fn the_man_wears_shoes() {
        let v = vocab();
        let seq = tokenize_and_pad("The man wears shoes", &v, 120).unwrap();
        assert_eq!(seq.true_length(), 6);
        assert_eq!(&seq.ids()[..6], &[CLS, 4, 5, 6, 7, SEP]);
        assert!(seq.ids()[6..].iter().all(|&i| i == PAD));
        assert_eq!(seq.len(), 120);
    }

    #[test]
    fn exactly_full_sentence_has_no_padding() {
        let v = vocab();
        let sentence = vec!["man"; 118].join(" ");
        let seq = tokenize_and_pad(&sentence, &v, 120).unwrap();
        assert_eq!(seq.true_length(), 120);
        assert_eq!(seq.ids()[119], SEP);
    }

    #[test]
    fn long_sentence_keeps_head_and_sep() {
        let v = vocab();
        let sentence = format!("the {}", vec!["man"; 200].join(" "));
        let seq = tokenize_and_pad(&sentence, &v, 40).unwrap();
        assert_eq!(seq.true_length(), 40);
        assert_eq!(seq.ids()[1], 4);
        assert_eq!(seq.ids()[39], SEP);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let seq = tokenize_and_pad("the zebra", &vocab(), 8).unwrap();
        assert_eq!(seq.ids()[2], UNK);
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(split_words("Shoes, bag."), vec!["shoes", ",", "bag", "."]);
    }

    #[test]
    fn empty_sentence_is_an_error() {
        assert!(matches!(
            tokenize_and_pad("   ", &vocab(), 10),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn padded_rows_embed_to_zero_and_lookup_is_exact() {
        let v = vocab();
        let mut data = vec![0.0f32; v.len() * 4];
        data[4 * 4..5 * 4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        data[CLS as usize * 4] = 9.0;
        let table = EmbeddingTable::new(v.len(), 4, data).unwrap();
        let seq = tokenize_and_pad("the", &v, 6).unwrap();
        let e = embed_sequence(&seq, &table).unwrap();
        assert_eq!(e.shape(), &[1, 6, 4]);
        assert_eq!(&e.data()[4..8], &[1.0, 2.0, 3.0, 4.0]);
        assert!(e.data()[12..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_range_id_is_an_index_error() {
        let table = EmbeddingTable::random(4, 2, 0);
        let seq = TokenSequence::from_ids(vec![CLS, 10, SEP], 3).unwrap();
        assert!(matches!(embed_sequence(&seq, &table), Err(Error::Index(_))));
    }

    #[test]
    fn table_bytes_round_trip_and_detect_damage() {
        let table = EmbeddingTable::random(10, 4, 7);
        let bytes = table.to_bytes();
        assert_eq!(bytes.len(), 16 + 40 * 4 + 4);
        let back = EmbeddingTable::from_bytes(&bytes).unwrap();
        assert_eq!(back.vocab_size(), 10);
        assert_eq!(back.dim(), 4);
        let bits = |t: &EmbeddingTable| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&table));

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(EmbeddingTable::from_bytes(truncated), Err(Error::Corrupt(_))));

        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(EmbeddingTable::from_bytes(&flipped), Err(Error::Corrupt(_))));

        let mut bad_magic = bytes;
        bad_magic[0] = b'Y';
        assert!(matches!(EmbeddingTable::from_bytes(&bad_magic), Err(Error::Format(_))));
    }
}
