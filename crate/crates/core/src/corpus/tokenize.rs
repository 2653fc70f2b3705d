use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Document};

pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "<sep>";

/// Text to token-id mapping with a closed vocabulary.
///
/// Token ids plus the byte span each one covers in the input.
pub type Encoding = (Vec<u32>, Vec<(usize, usize)>);

/// Implementations must be deterministic and immutable once built.
pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Encoding, CorpusError>;

    /// Id reserved for joining contexts, if the vocabulary has one.
    fn separator(&self) -> Option<u32>;
}

/// A document in token-id form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    /// Byte offsets `(start, end)` into the source text, one per token.
    pub char_offsets: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize_document(
    doc: &Document,
    tokenizer: &dyn Tokenizer,
) -> Result<TokenSequence, CorpusError> {
    let (tokens, char_offsets) = tokenizer.encode(&doc.text)?;
    if tokens.is_empty() {
        return Err(CorpusError::EmptyDocument(doc.id.clone()));
    }
    Ok(TokenSequence {
        doc_id: doc.id.clone(),
        tokens,
        char_offsets,
    })
}

/// Splits text into runs of word characters and single punctuation marks,
/// dropping whitespace. Yields byte spans.
pub fn segment(text: &str) -> impl Iterator<Item = (usize, usize)> + '_ {
    let mut chars = text.char_indices().peekable();
    std::iter::from_fn(move || {
        while let Some(&(_, c)) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
            } else {
                break;
            }
        }
        let (start, c) = chars.next()?;
        let mut end = start + c.len_utf8();
        if is_word_char(c) {
            while let Some(&(i, c)) = chars.peek() {
                if !is_word_char(c) {
                    break;
                }
                end = i + c.len_utf8();
                chars.next();
            }
        }
        Some((start, end))
    })
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk: Option<u32>,
    sep: Option<u32>,
}

impl Vocabulary {
    /// Vocabulary with ids assigned in iteration order and no reserved
    /// entries. Out-of-vocabulary input is an error under this vocabulary.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            unk: None,
            sep: None,
        };
        for t in tokens {
            vocab.push(t.into());
        }
        vocab.unk = vocab.index.get(UNK_TOKEN).copied();
        vocab.sep = vocab.index.get(SEP_TOKEN).copied();
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len() as u32);
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk
    }

    pub fn sep_id(&self) -> Option<u32> {
        self.sep
    }
}

/// First-pass frequency counter used to freeze a [`Vocabulary`].
#[derive(Debug, Default)]
pub struct VocabularyBuilder {
    counts: HashMap<String, u64>,
}

impl VocabularyBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_text(&mut self, text: &str) {
        for (s, e) in segment(text) {
            *self.counts.entry(text[s..e].to_string()).or_default() += 1;
        }
    }

    /// `<unk>` gets id 0 and `<sep>` id 1; the rest follow in descending
    /// frequency, ties broken lexicographically.
    pub fn build(self, min_count: u64) -> Vocabulary {
        let mut entries: Vec<_> = self
            .counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && t != UNK_TOKEN && t != SEP_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_tokens(
            [UNK_TOKEN.to_string(), SEP_TOKEN.to_string()]
                .into_iter()
                .chain(entries.into_iter().map(|(t, _)| t)),
        )
    }
}

/// Word-and-punctuation tokenizer over a frozen vocabulary.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab: Vocabulary,
}

impl WordTokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        WordTokenizer { vocab }
    }

    /// Builds the vocabulary from `texts` in one pass and freezes it.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut builder = VocabularyBuilder::new();
        for t in texts {
            builder.add_text(t);
        }
        WordTokenizer::new(builder.build(1))
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Space-joined token strings.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.vocab.token(t).unwrap_or(UNK_TOKEN));
        }
        out
    }
}

impl Tokenizer for WordTokenizer {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn encode(&self, text: &str) -> Result<(Vec<u32>, Vec<(usize, usize)>), CorpusError> {
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        for (s, e) in segment(text) {
            let piece = &text[s..e];
            let id = match self.vocab.id(piece).or(self.vocab.unk_id()) {
                Some(id) => id,
                None => {
                    return Err(CorpusError::UnknownToken {
                        token: piece.to_string(),
                    })
                }
            };
            ids.push(id);
            offsets.push((s, e));
        }
        Ok((ids, offsets))
    }

    fn separator(&self) -> Option<u32> {
        self.vocab.sep_id()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document {
            id: "d".into(),
            text: text.into(),
            source_tag: String::new(),
        }
    }

    #[test]
    fn whitespace_split_with_explicit_vocab() {
        let tok = WordTokenizer::new(Vocabulary::from_tokens(["a", "b"]));
        let seq = tokenize_document(&doc("a b a b"), &tok).unwrap();
        assert_eq!(seq.tokens, vec![0, 1, 0, 1]);
        assert_eq!(seq.char_offsets, vec![(0, 1), (2, 3), (4, 5), (6, 7)]);
    }

    #[test]
    fn deterministic() {
        let tok = WordTokenizer::fit(["the cat, the hat."]);
        let a = tokenize_document(&doc("the cat, the hat."), &tok).unwrap();
        let b = tokenize_document(&doc("the cat, the hat."), &tok).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn empty_text_is_rejected() {
        let tok = WordTokenizer::fit(["x"]);
        assert!(matches!(
            tokenize_document(&doc(""), &tok),
            Err(CorpusError::EmptyDocument(_))
        ));
    }

    #[test]
    fn oov_maps_to_unk_or_errors() {
        let tok = WordTokenizer::fit(["known words"]);
        let (ids, _) = tok.encode("known unknown").unwrap();
        assert_eq!(ids[1], 0);
        assert_eq!(tok.separator(), Some(1));

        let closed = WordTokenizer::new(Vocabulary::from_tokens(["a"]));
        assert!(matches!(
            closed.encode("a z"),
            Err(CorpusError::UnknownToken { .. })
        ));
    }

    #[test]
    fn builder_orders_by_frequency() {
        let tok = WordTokenizer::fit(["b a b c b a"]);
        let v = tok.vocabulary();
        assert_eq!(v.token(0), Some(UNK_TOKEN));
        assert_eq!(v.token(1), Some(SEP_TOKEN));
        assert_eq!(v.token(2), Some("b"));
        assert_eq!(v.token(3), Some("a"));
        assert_eq!(v.token(4), Some("c"));
    }

    proptest! {
        #[test]
        fn offsets_reconstruct_non_whitespace(text in "[a-z .,!\\t\\n\u{e9}\u{4e2d}]{0,60}") {
            let tok = WordTokenizer::fit([text.as_str()]);
            let (ids, offsets) = tok.encode(&text).unwrap();
            prop_assert_eq!(ids.len(), offsets.len());
            prop_assert!(offsets.windows(2).all(|w| w[0].1 <= w[1].0));
            prop_assert!(ids.iter().all(|&t| (t as usize) < tok.vocab_size()));
            let joined: String = offsets.iter().map(|&(s, e)| &text[s..e]).collect();
            let expected: String = text.split_whitespace().collect();
            prop_assert_eq!(joined, expected);
        }
    }
}
