use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_ID: usize = 3;
pub const NUM_RESERVED: usize = 4;

const PUNCTUATION: &[char] = &['.', ',', '!', '?', '\'', '"', '(', ')'];

/// Lowercases, splits on whitespace and separates punctuation marks into
/// their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if PUNCTUATION.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

pub fn is_marker(token: &str) -> bool {
    matches!(token, BOS | EOS | PAD)
}

/// One explanation kept from a raw review.
#[derive(Clone, Debug, PartialEq)]
pub struct Extracted {
    pub review: usize,
    pub tokens: Vec<String>,
}

/// Keeps the sentences of each review that mention at least one lexicon
/// token. Sentences end at `.`, `!` or `?`. Reviews with nothing kept are
/// dropped from the output.
pub fn extract_explanations<S: AsRef<str>>(
    raw_reviews: &[S],
    lexicon: &BTreeSet<String>,
) -> Vec<Extracted> {
    let mut out = Vec::new();
    for (idx, review) in raw_reviews.iter().enumerate() {
        let tokens = tokenize(review.as_ref());
        let mut kept = Vec::new();
        let mut sentence = Vec::new();
        let flush = |sentence: &mut Vec<String>, kept: &mut Vec<String>| {
            if sentence.iter().any(|t| lexicon.contains(t)) {
                kept.append(sentence);
            } else {
                sentence.clear();
            }
        };
        for tok in tokens {
            let end = matches!(tok.as_str(), "." | "!" | "?");
            sentence.push(tok);
            if end {
                flush(&mut sentence, &mut kept);
            }
        }
        flush(&mut sentence, &mut kept);
        if !kept.is_empty() {
            out.push(Extracted {
                review: idx,
                tokens: kept,
            });
        }
    }
    out
}

/// Token ↔ id table with four reserved markers at ids 0..=3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    feature_lexicon: BTreeSet<String>,
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent tokens; ties go to the
    /// lexicographically smaller token.
    pub fn build<'a, I, S>(streams: I, max_size: usize) -> crate::Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if max_size <= NUM_RESERVED {
            return Err(crate::Error::Config(format!(
                "vocabulary size must exceed {NUM_RESERVED}, got {max_size}"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for stream in streams {
            for tok in stream {
                let t = tok.as_ref();
                if matches!(t, BOS | EOS | UNK | PAD) {
                    continue;
                }
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> =
            [BOS, EOS, UNK, PAD].iter().map(|s| s.to_string()).collect();
        id_to_token.extend(
            ranked
                .into_iter()
                .take(max_size - NUM_RESERVED)
                .map(|(t, _)| t.to_string()),
        );
        Ok(Self::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_to_token,
            token_to_id,
            feature_lexicon: BTreeSet::new(),
        }
    }

    /// Attaches the feature lexicon, keeping only tokens in the vocabulary.
    pub fn with_feature_lexicon(mut self, lexicon: &BTreeSet<String>) -> Self {
        self.feature_lexicon = lexicon
            .iter()
            .filter(|t| self.token_to_id.contains_key(*t))
            .cloned()
            .collect();
        self
    }

    pub fn feature_lexicon(&self) -> &BTreeSet<String> {
        &self.feature_lexicon
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// SHA-256 over the id-ordered token list and the feature lexicon.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.update(b"--lexicon--\n");
        for t in &self.feature_lexicon {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Great game!"), vec!["great", "game", "!"]);
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("It's \"fine\" (mostly), ok?"),
            vec!["it", "'", "s", "\"", "fine", "\"", "(", "mostly", ")", ",", "ok", "?"]
        );
    }

    #[test]
    fn tokenize_is_a_fixpoint_on_joined_output() {
        let once = tokenize("Wow!! The Price, is (very) RIGHT.");
        let twice = tokenize(&once.join(" "));
        assert_eq!(once, twice);
    }

    #[test]
    fn extraction_keeps_feature_sentences() {
        let out = extract_explanations(&["Great! The graphics are sharp."], &lex(&["graphics"]));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tokens.join(" "), "the graphics are sharp .");
    }

    #[test]
    fn extraction_drops_featureless_reviews() {
        let out = extract_explanations(&["Nice.", "Sound is loud."], &lex(&["sound"]));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].review, 1);
    }

    #[test]
    fn extraction_keeps_everything_when_all_match() {
        let text = "The sound is great. The sound is loud!";
        let out = extract_explanations(&[text], &lex(&["sound"]));
        assert_eq!(out[0].tokens, tokenize(text));
    }

    #[test]
    fn vocab_frequency_and_unknowns() {
        let stream: Vec<String> = ["a", "a", "a", "b"].iter().map(|s| s.to_string()).collect();
        let v = Vocabulary::build([stream.as_slice()], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id(BOS), 0);
        assert_eq!(v.id(EOS), 1);
        assert_eq!(v.id(UNK), 2);
        assert_eq!(v.id(PAD), 3);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let stream: Vec<String> = ["z", "y", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let v = Vocabulary::build([stream.as_slice()], 6).unwrap();
        assert_eq!(v.token(4), "y");
        assert_eq!(v.token(5), "z");
    }

    #[test]
    fn vocab_empty_stream() {
        let v = Vocabulary::build(std::iter::empty::<&[String]>(), 20_000).unwrap();
        assert_eq!(v.len(), NUM_RESERVED);
        assert!(Vocabulary::build(std::iter::empty::<&[String]>(), 4).is_err());
    }

    #[test]
    fn lexicon_restricted_to_vocab() {
        let stream: Vec<String> = ["sound", "is", "ok"].iter().map(|s| s.to_string()).collect();
        let v = Vocabulary::build([stream.as_slice()], 100)
            .unwrap()
            .with_feature_lexicon(&lex(&["sound", "price"]));
        assert_eq!(v.feature_lexicon(), &lex(&["sound"]));
    }
}
