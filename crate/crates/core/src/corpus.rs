//! Documents, character tokenization, the token-binary format and the
//! synthetic topic-marker corpus.
//!
//! Raw text is read as UTF-8. A path may be a single file or a directory
//! (every regular file inside it, sorted by name, not recursive). Within a
//! file, documents are separated by one or more blank lines unless
//! [`RawSplit::PerFile`] is chosen.
//!
//! Token-binary layout: magic `b"RWTK"`, version byte `1`, then a stream
//! of little-endian `u32` token ids. Every document ends with the
//! sentinel `u32::MAX`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{Purpose, Rng};
use crate::windowing::word_end_weights;

pub const BINARY_MAGIC: &[u8; 4] = b"RWTK";
pub const BINARY_VERSION: u8 = 1;
pub const SENTINEL: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub tokens: Vec<u32>,
    /// Whitespace-delimited words; equals the token count for sources
    /// without text.
    pub word_count: usize,
    pub source_id: String,
    /// Per token, the number of words whose last byte it holds.
    pub word_ends: Option<Vec<u32>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RawSplit {
    #[default]
    BlankLine,
    PerFile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    RawText(RawSplit),
    TokenBinary,
}

/// A raw-text document before tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct TextDoc {
    pub source_id: String,
    pub text: String,
}

fn list_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("{} contains no files; corpus is empty", path.display());
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Reads UTF-8 documents from a file or directory.
pub fn read_texts(path: &Path, split: RawSplit) -> Result<Vec<TextDoc>> {
    let mut out = Vec::new();
    for file in list_files(path)? {
        let bytes = fs::read(&file)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Format {
            path: file.clone(),
            offset: e.utf8_error().valid_up_to() as u64,
            detail: "invalid UTF-8".into(),
        })?;
        let name = file.display().to_string();
        match split {
            RawSplit::PerFile => {
                if !text.trim().is_empty() {
                    out.push(TextDoc {
                        source_id: name,
                        text,
                    });
                }
            }
            RawSplit::BlankLine => {
                let mut current: Vec<&str> = Vec::new();
                let flush = |current: &mut Vec<&str>, out: &mut Vec<TextDoc>| {
                    if !current.is_empty() {
                        out.push(TextDoc {
                            source_id: format!("{name}#{}", out.len()),
                            text: current.join("\n"),
                        });
                        current.clear();
                    }
                };
                for line in text.lines() {
                    if line.trim().is_empty() {
                        flush(&mut current, &mut out);
                    } else {
                        current.push(line);
                    }
                }
                flush(&mut current, &mut out);
            }
        }
    }
    Ok(out)
}

/// Character vocabulary. Id 0 is reserved for characters not seen when
/// the vocabulary was built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
}

impl CharVocab {
    pub const OOV: u32 = 0;
    pub const RESERVED: usize = 1;

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        CharVocab {
            chars: set.into_iter().collect(),
        }
    }

    pub fn from_chars(chars: &str) -> Self {
        Self::build([chars])
    }

    pub fn len(&self) -> usize {
        self.chars.len() + Self::RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The in-vocabulary characters, in id order.
    pub fn chars(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn id(&self, c: char) -> u32 {
        match self.chars.binary_search(&c) {
            Ok(i) => (i + Self::RESERVED) as u32,
            Err(_) => Self::OOV,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Out-of-vocabulary and out-of-range ids decode to U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| {
                (i as usize)
                    .checked_sub(Self::RESERVED)
                    .and_then(|j| self.chars.get(j))
                    .copied()
                    .unwrap_or('\u{FFFD}')
            })
            .collect()
    }

    /// Character-level tokenization with word alignment.
    pub fn tokenize(&self, doc: &TextDoc) -> Result<Document> {
        let tokens = self.encode(&doc.text);
        let spans: Vec<_> = doc
            .text
            .char_indices()
            .map(|(i, c)| i..i + c.len_utf8())
            .collect();
        let word_ends = word_end_weights(&doc.text, &spans)?;
        Ok(Document {
            word_count: doc.text.split_whitespace().count(),
            tokens,
            source_id: doc.source_id.clone(),
            word_ends: Some(word_ends),
        })
    }
}

/// Loads documents. Raw text needs a vocabulary; token ids are checked
/// against `vocab_size` when given.
pub fn load_corpus(
    path: &Path,
    format: Format,
    vocab: Option<&CharVocab>,
    vocab_size: Option<usize>,
) -> Result<Vec<Document>> {
    let docs = match format {
        Format::RawText(split) => {
            let vocab = vocab.ok_or_else(|| Error::Input("raw text needs a character vocabulary".into()))?;
            read_texts(path, split)?
                .iter()
                .map(|d| vocab.tokenize(d))
                .collect::<Result<Vec<_>>>()?
        }
        Format::TokenBinary => {
            let mut docs = Vec::new();
            for file in list_files(path)? {
                docs.extend(read_token_binary(&file)?);
            }
            docs
        }
    };
    if let Some(v) = vocab_size {
        for d in &docs {
            if let Some(&id) = d.tokens.iter().find(|&&t| t as usize >= v) {
                return Err(Error::Vocabulary { id, vocab: v });
            }
        }
    }
    Ok(docs)
}

pub fn encode_token_binary(docs: &[Document]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * docs.iter().map(|d| d.tokens.len() + 1).sum::<usize>());
    out.extend_from_slice(BINARY_MAGIC);
    out.push(BINARY_VERSION);
    for d in docs {
        for &t in &d.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&SENTINEL.to_le_bytes());
    }
    out
}

pub fn write_token_binary(path: &Path, docs: &[Document]) -> Result<()> {
    if let Some(d) = docs.iter().find(|d| d.tokens.contains(&SENTINEL)) {
        return Err(Error::Input(format!("document {} contains the sentinel id", d.source_id)));
    }
    fs::write(path, encode_token_binary(docs))?;
    Ok(())
}

pub fn decode_token_binary(bytes: &[u8], path: &Path) -> Result<Vec<Document>> {
    let fmt = |offset: usize, detail: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    };
    if bytes.len() < 5 || &bytes[..4] != BINARY_MAGIC {
        return Err(fmt(0, "missing RWTK magic"));
    }
    if bytes[4] != BINARY_VERSION {
        return Err(fmt(4, &format!("unsupported version {}", bytes[4])));
    }
    let body = &bytes[5..];
    if body.len() % 4 != 0 {
        return Err(fmt(5 + body.len() / 4 * 4, "truncated token id"));
    }
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for chunk in body.chunks_exact(4) {
        let id = u32::from_le_bytes(chunk.try_into().unwrap());
        if id == SENTINEL {
            let n = current.len();
            docs.push(Document {
                tokens: std::mem::take(&mut current),
                word_count: n,
                source_id: format!("{}#{}", path.display(), docs.len()),
                word_ends: None,
            });
        } else {
            current.push(id);
        }
    }
    if !current.is_empty() {
        return Err(fmt(bytes.len(), "last document is missing its sentinel"));
    }
    Ok(docs)
}

pub fn read_token_binary(path: &Path) -> Result<Vec<Document>> {
    decode_token_binary(&fs::read(path)?, path)
}

/// Topic-marker corpus: each document starts with the marker of a topic
/// drawn uniformly, followed by `doc_length` tokens drawn i.i.d. from that
/// topic's unigram distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    /// Per topic, a distribution over the whole vocabulary. Marker ids
    /// `0..n_topics` must have zero mass.
    pub topic_dists: Vec<Vec<f64>>,
    pub doc_length: usize,
    pub n_docs: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Vocabulary: `n_topics` markers, `n_shared` tokens every topic uses
    /// uniformly, then one private token per topic carrying mass `eps`.
    pub fn private_tokens(
        n_topics: usize,
        n_shared: usize,
        eps: f64,
        doc_length: usize,
        n_docs: usize,
        seed: u64,
    ) -> Self {
        let v = 2 * n_topics + n_shared;
        let topic_dists = (0..n_topics)
            .map(|j| {
                let mut p = vec![0.0; v];
                for s in 0..n_shared {
                    p[n_topics + s] = (1.0 - eps) / n_shared as f64;
                }
                p[n_topics + n_shared + j] = eps;
                p
            })
            .collect();
        SyntheticSpec {
            n_topics,
            topic_dists,
            doc_length,
            n_docs,
            seed,
        }
    }

    /// Defaults used throughout the test suite.
    pub fn standard(doc_length: usize, n_docs: usize, seed: u64) -> Self {
        Self::private_tokens(4, 48, 1.0 / 32.0, doc_length, n_docs, seed)
    }

    pub fn vocab_size(&self) -> usize {
        self.topic_dists.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_topics == 0 || self.topic_dists.len() != self.n_topics {
            return fail(format!(
                "need one distribution per topic ({} for {} topics)",
                self.topic_dists.len(),
                self.n_topics
            ));
        }
        let v = self.vocab_size();
        if v <= self.n_topics {
            return fail("vocabulary must extend past the marker ids".into());
        }
        for (j, p) in self.topic_dists.iter().enumerate() {
            if p.len() != v || p.iter().any(|&x| !(x >= 0.0)) {
                return fail(format!("topic {j}: distribution has wrong length or negative mass"));
            }
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail(format!("topic {j}: distribution does not sum to 1"));
            }
            if p[..self.n_topics].iter().any(|&x| x > 0.0) {
                return fail(format!("topic {j}: marker ids must have zero mass"));
            }
        }
        if self.doc_length == 0 {
            return fail("doc_length must be >= 1".into());
        }
        Ok(())
    }

    /// Mixture over topics with equal weights.
    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.vocab_size()];
        for p in &self.topic_dists {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b / self.n_topics as f64;
            }
        }
        m
    }

    /// Mean over topics of the per-token entropy given the topic (nats).
    pub fn conditional_entropy(&self) -> f64 {
        self.topic_dists.iter().map(|p| entropy(p)).sum::<f64>() / self.n_topics as f64
    }

    /// Per-token entropy of the topic mixture (nats).
    pub fn marginal_entropy(&self) -> f64 {
        entropy(&self.marginal())
    }

    /// `exp(H(marginal)) − exp(H(conditional))`.
    pub fn analytic_gap(&self) -> f64 {
        self.marginal_entropy().exp() - self.conditional_entropy().exp()
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Generates the corpus. Document `i` draws from its own derived stream,
/// so any prefix of a larger corpus with the same seed is identical.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let cdfs: Vec<Vec<f64>> = spec
        .topic_dists
        .iter()
        .map(|p| {
            let mut acc = 0.0;
            let mut c: Vec<f64> = p
                .iter()
                .map(|x| {
                    acc += x;
                    acc
                })
                .collect();
            *c.last_mut().unwrap() = 1.0;
            c
        })
        .collect();
    Ok((0..spec.n_docs)
        .map(|i| {
            let mut rng = Rng::derived(spec.seed, Purpose::Data, i as u64);
            let topic = rng.below(spec.n_topics);
            let mut tokens = Vec::with_capacity(spec.doc_length + 1);
            tokens.push(topic as u32);
            tokens.extend((0..spec.doc_length).map(|_| rng.categorical(&cdfs[topic]) as u32));
            Document {
                word_count: tokens.len(),
                tokens,
                source_id: format!("synthetic:{}:{i}", spec.seed),
                word_ends: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_vocab() {
        let v = CharVocab::build(["hello world", "wide"]);
        assert_eq!(v.len(), "helo wrdi".chars().count() + 1);
        let ids = v.encode("hello world");
        assert!(ids.iter().all(|&i| i != CharVocab::OOV));
        assert_eq!(v.decode(&ids), "hello world");
        assert_eq!(v.encode("z"), vec![CharVocab::OOV]);
    }

    #[test]
    fn word_count_of_text() {
        let v = CharVocab::build(["the cat sat"]);
        let d = v
            .tokenize(&TextDoc {
                source_id: "x".into(),
                text: "the cat sat".into(),
            })
            .unwrap();
        assert_eq!(d.word_count, 3);
        assert_eq!(d.word_ends.unwrap().iter().sum::<u32>(), 3);
    }

    #[test]
    fn binary_errors_carry_offsets() {
        let p = Path::new("x.bin");
        assert!(matches!(decode_token_binary(b"RWTX\x01", p), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_token_binary(b"RWTK\x02", p), Err(Error::Format { offset: 4, .. })));
        let mut b = b"RWTK\x01".to_vec();
        b.extend_from_slice(&5u32.to_le_bytes());
        b.extend_from_slice(&[1, 2]);
        assert!(matches!(decode_token_binary(&b, p), Err(Error::Format { offset: 9, .. })));
        b.truncate(9);
        assert!(matches!(decode_token_binary(&b, p), Err(Error::Format { offset: 9, .. })));
        b.extend_from_slice(&SENTINEL.to_le_bytes());
        assert_eq!(decode_token_binary(&b, p).unwrap()[0].tokens, vec![5]);
    }

    #[test]
    fn synthetic_entropies() {
        let s = SyntheticSpec::standard(10, 1, 0);
        assert_eq!(s.vocab_size(), 56);
        let eps: f64 = 1.0 / 32.0;
        let hc = -eps * eps.ln() - (1.0 - eps) * ((1.0 - eps) / 48.0).ln();
        assert!((s.conditional_entropy() - hc).abs() < 1e-12);
        let hm = -eps * (eps / 4.0).ln() - (1.0 - eps) * ((1.0 - eps) / 48.0).ln();
        assert!((s.marginal_entropy() - hm).abs() < 1e-12);
        assert!(s.analytic_gap() > 2.0);

        let one = SyntheticSpec::private_tokens(1, 8, 0.1, 10, 1, 0);
        assert!((one.analytic_gap()).abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_deterministic_and_prefix_stable() {
        let a = gen_synthetic(&SyntheticSpec::standard(50, 5, 3)).unwrap();
        let b = gen_synthetic(&SyntheticSpec::standard(50, 8, 3)).unwrap();
        assert_eq!(a[..], b[..5]);
        let c = gen_synthetic(&SyntheticSpec::standard(50, 5, 4)).unwrap();
        assert_ne!(a, c);
        for d in &a {
            assert_eq!(d.tokens.len(), 51);
            assert!(d.tokens[0] < 4);
            assert!(d.tokens[1..].iter().all(|&t| t >= 4 && t < 56));
        }
    }
}
