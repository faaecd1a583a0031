//! The two token streams.
//!
//! The language stream uses `[CLS]`/`[SEP]`/`[MASK]`/`[PAD]` and splits
//! unknown words into a head piece plus `##` continuation pieces. The clip
//! stream wraps each sentence in `<|startoftext|>`/`<|endoftext|>` and marks
//! the last piece of every word with `</w>`. Both vocabularies are ranked by
//! corpus frequency and always contain every corpus character as a piece, so
//! encoding never fails.

mod grounded;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub use grounded::{
    classify_grounded, default_stopwords, load_frequencies, load_stopwords, GroundedClass,
    DEFAULT_GROUNDED_THRESHOLD,
};

pub type TokenId = u32;

const CONTINUATION: &str = "##";
const END_OF_WORD: &str = "</w>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Language,
    Clip,
}

impl Stream {
    fn specials(self) -> &'static [&'static str] {
        match self {
            Stream::Language => &["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"],
            Stream::Clip => &["<|pad|>", "<|unk|>", "<|startoftext|>", "<|endoftext|>"],
        }
    }
}

/// Ids of the reserved tokens. `start`/`end` are `[CLS]`/`[SEP]` on the
/// language stream and `<|startoftext|>`/`<|endoftext|>` on the clip stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub start: TokenId,
    pub end: TokenId,
    pub mask: Option<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    stream: Stream,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: SpecialIds,
}

/// Token ids plus masks for one input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub attention_mask: Vec<u8>,
    /// Sentence index (0 or 1) of every position; 0 on padding.
    pub segment_ids: Vec<u8>,
    pub stream: Stream,
}

/// Lowercases and splits into words; punctuation characters become words of
/// their own.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                current.push(c);
            } else {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

fn rank<K: Ord + Clone>(counts: &BTreeMap<K, u64>) -> Vec<(K, u64)> {
    let mut v: Vec<(K, u64)> = counts.iter().map(|(k, c)| (k.clone(), *c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Share of the free budget given to whole words before subword pieces.
const WHOLE_WORD_SHARE: f64 = 0.8;

/// Builds a frequency-ranked vocabulary of at most `max_size` entries.
pub fn build_vocab(corpus: &Corpus, stream: Stream, max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty corpus".into()));
    }
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut char_counts: BTreeMap<char, u64> = BTreeMap::new();
    for sentence in corpus.sentences() {
        for w in pre_tokenize(sentence) {
            for c in w.chars() {
                *char_counts.entry(c).or_default() += 1;
            }
            *word_counts.entry(w).or_default() += 1;
        }
    }

    let mut tokens: Vec<String> = stream.specials().iter().map(|s| s.to_string()).collect();
    let mut seen: HashMap<String, TokenId> = HashMap::new();
    let push = |tok: String, tokens: &mut Vec<String>, seen: &mut HashMap<String, TokenId>| {
        if !seen.contains_key(&tok) {
            seen.insert(tok.clone(), tokens.len() as TokenId);
            tokens.push(tok);
        }
    };
    for t in tokens.clone() {
        seen.insert(t.clone(), seen.len() as TokenId);
    }

    // Character pieces make encoding total over the corpus alphabet.
    for (c, _) in rank(&char_counts) {
        let (initial, final_piece) = match stream {
            Stream::Language => (c.to_string(), format!("{CONTINUATION}{c}")),
            Stream::Clip => (c.to_string(), format!("{c}{END_OF_WORD}")),
        };
        push(initial, &mut tokens, &mut seen);
        push(final_piece, &mut tokens, &mut seen);
    }
    if tokens.len() > max_size {
        return Err(Error::Config(format!(
            "max_size {max_size} below the {} mandatory entries",
            tokens.len()
        )));
    }

    let ranked_words: Vec<String> = rank(&word_counts)
        .into_iter()
        .map(|(w, _)| w)
        .filter(|w| w.chars().count() > 1)
        .collect();
    let whole = |w: &str| match stream {
        Stream::Language => w.to_string(),
        Stream::Clip => format!("{w}{END_OF_WORD}"),
    };

    let budget = max_size - tokens.len();
    let word_quota = ((budget as f64) * WHOLE_WORD_SHARE).ceil() as usize;
    let mut words_iter = ranked_words.iter();
    for w in words_iter.by_ref().take(word_quota) {
        push(whole(w), &mut tokens, &mut seen);
    }

    let mut piece_counts: BTreeMap<String, u64> = BTreeMap::new();
    for w in &ranked_words {
        let chars: Vec<char> = w.chars().collect();
        let count = word_counts[w];
        for k in 1..chars.len().saturating_sub(1) {
            let head: String = chars[..=k].iter().collect();
            let tail: String = chars[k..].iter().collect();
            // the stream-typical piece shape gets double weight
            let (first, second) = match stream {
                Stream::Language => (format!("{CONTINUATION}{tail}"), head),
                Stream::Clip => (head, format!("{tail}{END_OF_WORD}")),
            };
            *piece_counts.entry(first).or_default() += 2 * count;
            *piece_counts.entry(second).or_default() += count;
        }
    }
    let mut pieces = rank(&piece_counts).into_iter().map(|(p, _)| p);
    while tokens.len() < max_size {
        if let Some(p) = pieces.next() {
            push(p, &mut tokens, &mut seen);
        } else if let Some(w) = words_iter.next() {
            push(whole(w), &mut tokens, &mut seen);
        } else {
            break;
        }
    }
    Vocab::from_tokens(tokens)
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list; the stream is
    /// inferred from the special tokens present.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Contract(format!("duplicate vocab entry {t:?}")));
            }
        }
        let stream = if index.contains_key("[CLS]") {
            Stream::Language
        } else if index.contains_key("<|startoftext|>") {
            Stream::Clip
        } else {
            return Err(Error::Contract("vocab lacks special tokens".into()));
        };
        let id = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Contract(format!("vocab lacks special token {s}")))
        };
        let sp = stream.specials();
        let specials = SpecialIds {
            pad: id(sp[0])?,
            unk: id(sp[1])?,
            start: id(sp[2])?,
            end: id(sp[3])?,
            mask: if stream == Stream::Language { Some(id(sp[4])?) } else { None },
        };
        Ok(Vocab {
            stream,
            tokens,
            index,
            specials,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.stream.specials().len()
    }

    /// Number of leading special ids.
    pub fn n_specials(&self) -> usize {
        self.stream.specials().len()
    }

    /// Vocabulary entry naming the whole word `w`, if present.
    pub fn whole_word_id(&self, w: &str) -> Option<TokenId> {
        match self.stream {
            Stream::Language => self.id(w),
            Stream::Clip => self.id(&format!("{w}{END_OF_WORD}")),
        }
    }

    /// Greedy longest-match segmentation of one pre-tokenized word.
    pub fn segment_word(&self, word: &str) -> Vec<TokenId> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut matched = None;
            for end in (start + 1..=chars.len()).rev() {
                let body: String = chars[start..end].iter().collect();
                let piece = match self.stream {
                    Stream::Language if start > 0 => format!("{CONTINUATION}{body}"),
                    Stream::Language => body,
                    Stream::Clip if end == chars.len() => format!("{body}{END_OF_WORD}"),
                    Stream::Clip => body,
                };
                if let Some(id) = self.id(&piece) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.push(self.specials.unk);
                    start += 1;
                }
            }
        }
        out
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        pre_tokenize(text)
            .iter()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }

    /// Encodes one or two sentences with the stream's layout:
    /// `[CLS] a [SEP] (b [SEP])` or `<|startoftext|> a <|endoftext|> (<|startoftext|> b <|endoftext|>)`.
    pub fn encode(&self, sentences: &[&str]) -> Result<TokenSequence> {
        if sentences.is_empty() || sentences.len() > 2 {
            return Err(Error::Contract(format!(
                "encode takes 1 or 2 sentences, got {}",
                sentences.len()
            )));
        }
        Ok(self.lay_out(sentences, true))
    }

    /// Any number of consecutive sentences in the same layout, all in
    /// segment 0.
    pub fn encode_document(&self, sentences: &[&str]) -> TokenSequence {
        self.lay_out(sentences, false)
    }

    fn lay_out(&self, sentences: &[&str], segments: bool) -> TokenSequence {
        let sp = self.specials;
        let mut ids = Vec::new();
        let mut segment_ids = Vec::new();
        for (k, s) in sentences.iter().enumerate() {
            let body = self.tokenize(s);
            let opens = self.stream == Stream::Clip || k == 0;
            let n = body.len() + 1 + usize::from(opens);
            if opens {
                ids.push(sp.start);
            }
            ids.extend(body);
            ids.push(sp.end);
            let seg = if segments { k as u8 } else { 0 };
            segment_ids.extend(std::iter::repeat_n(seg, n));
        }
        if ids.is_empty() {
            ids.push(sp.start);
            ids.push(sp.end);
            segment_ids.extend([0, 0]);
        }
        let attention_mask = vec![1; ids.len()];
        TokenSequence {
            ids,
            attention_mask,
            segment_ids,
            stream: self.stream,
        }
    }

    /// Space-joined words, specials dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut open = false;
        for &id in ids {
            if self.is_special(id) && id != self.specials.unk {
                open = false;
                continue;
            }
            let tok = self.token(id).unwrap_or("");
            match self.stream {
                Stream::Language => match tok.strip_prefix(CONTINUATION) {
                    Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
                    _ => words.push(tok.to_string()),
                },
                Stream::Clip => {
                    let (body, ends) = match tok.strip_suffix(END_OF_WORD) {
                        Some(b) => (b, true),
                        None => (tok, false),
                    };
                    if open {
                        words.last_mut().unwrap().push_str(body);
                    } else {
                        words.push(body.to_string());
                    }
                    open = !ends;
                }
            }
        }
        words.join(" ")
    }
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn n_real(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }

    pub fn key_valid(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }

    /// Appends padding up to `len`.
    pub fn pad_to(&mut self, len: usize, pad: TokenId) {
        while self.ids.len() < len {
            self.ids.push(pad);
            self.attention_mask.push(0);
            self.segment_ids.push(0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(text: &str) -> Corpus {
        Corpus::parse(text)
    }

    #[test]
    fn frequency_order() {
        let v = build_vocab(&corpus("a a b"), Stream::Language, 50).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert!(a < b);
        assert!(v.id("[CLS]").is_some() && v.id("[MASK]").is_some());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(build_vocab(&corpus("\n\n"), Stream::Clip, 50).is_err());
    }

    #[test]
    fn unknown_words_fall_back_to_pieces() {
        let c = corpus("the cat sat on the mat");
        let v = build_vocab(&c, Stream::Language, 40).unwrap();
        let ids = v.tokenize("catmat");
        assert!(ids.len() > 1);
        assert!(!ids.contains(&v.specials().unk));
        let unk = v.tokenize("zebra");
        assert!(unk.contains(&v.specials().unk));
        let clip = build_vocab(&c, Stream::Clip, 40).unwrap();
        assert_eq!(clip.decode(&clip.tokenize("catmat")), "catmat");
    }

    #[test]
    fn layouts() {
        let c = corpus("hi there");
        let lang = build_vocab(&c, Stream::Language, 40).unwrap();
        let seq = lang.encode(&["hi"]).unwrap();
        let sp = lang.specials();
        assert_eq!(seq.ids, vec![sp.start, lang.id("hi").unwrap(), sp.end]);

        let clip = build_vocab(&c, Stream::Clip, 40).unwrap();
        let seq = clip.encode(&["hi"]).unwrap();
        let sp = clip.specials();
        assert_eq!(seq.ids, vec![sp.start, clip.id("hi</w>").unwrap(), sp.end]);

        let pair = lang.encode(&["hi", "there"]).unwrap();
        assert_eq!(pair.segment_ids, vec![0, 0, 0, 1, 1]);
        let pair = clip.encode(&["hi", "there"]).unwrap();
        assert_eq!(pair.segment_ids, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(&corpus("one two two three"), Stream::Clip, 60).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn fills_to_max_size() {
        let c = crate::corpus::synthetic_corpus(1000, 7);
        for stream in [Stream::Language, Stream::Clip] {
            let v = build_vocab(&c, stream, 500).unwrap();
            assert_eq!(v.len(), 500);
        }
    }

    #[test]
    fn pre_tokenize_splits_punctuation() {
        assert_eq!(pre_tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
    }
}
