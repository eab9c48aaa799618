use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::DataError;

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Lowercased, whitespace-collapsed form of a caption.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token ↔ id bijection. Ids `0..4` are the reserved tokens; content tokens
/// follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DataError::Vocab(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(DataError::Vocab(format!(
                    "reserved token {r:?} must have id {i}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Every distinct normalized token in the corpus, sorted, after the reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut content: Vec<String> = corpus
            .iter()
            .flat_map(|c| {
                normalize(c.as_ref())
                    .split(' ')
                    .map(str::to_owned)
                    .collect::<Vec<_>>()
            })
            .filter(|t| !t.is_empty() && !RESERVED.contains(&t.as_str()))
            .collect();
        content.sort();
        content.dedup();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(content)
            .collect();
        Self::from_tokens(tokens).expect("built tokens are unique and well-formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[start, ids…, end]`; unseen tokens map to the unknown id.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let norm = normalize(text);
        let mut ids = vec![START_ID];
        ids.extend(
            norm.split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| self.id(t).unwrap_or(UNK_ID)),
        );
        ids.push(END_ID);
        ids
    }

    /// Joins content tokens with single spaces. Pad, start and end are
    /// dropped; decoding stops at the first end token.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                END_ID => break,
                PAD_ID | START_ID => {}
                _ => words.push(self.token(id).unwrap_or(RESERVED[UNK_ID])),
            }
        }
        words.join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_caption_is_start_end() {
        let v = Vocabulary::build(&["a b"]);
        assert_eq!(v.tokenize(""), vec![START_ID, END_ID]);
    }

    #[test]
    fn corpus_counts() {
        let v = Vocabulary::build(&["a b", "b c"]);
        assert_eq!(v.len(), 3 + 4);
        assert_eq!(v.token(4), Some("a"));
    }

    #[test]
    fn round_trip_and_unknowns() {
        let v = Vocabulary::build(&["The area around (4, 12) should"]);
        let s = "the  AREA around (4, 12)";
        assert_eq!(v.detokenize(&v.tokenize(s)), normalize(s));
        let ids = v.tokenize("the zebra");
        assert_eq!(ids[2], UNK_ID);
        assert_eq!(v.detokenize(&ids), "the <unk>");
    }

    #[test]
    fn text_round_trip_keeps_ids() {
        let v = Vocabulary::build(&["x y z", "w"]);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_text("<s>\n<pad>\n</s>\n<unk>\n").is_err());
        assert!(Vocabulary::from_text("<pad>\n<s>\n</s>\n<unk>\na\na\n").is_err());
    }
}
