//! Word-level tokenizer and a coarse lexicon + suffix part-of-speech tagger
//! used to pick information-rich query and output words.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{GiftError, Result};

const BUILTIN_VOCAB: &str = include_str!("../data/vocab.txt");
const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.tsv");

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Word list where the line number is the token id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
    eos: u32,
}

impl Vocabulary {
    /// Parse a vocabulary file. The file must contain `<unk>` and `<eos>`.
    pub fn from_lines(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(GiftError::InvalidInput(format!("vocabulary line {} is empty", i + 1)));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(GiftError::InvalidInput(format!("duplicate vocabulary word {w:?}")));
            }
        }
        let unk = *index
            .get(UNK)
            .ok_or_else(|| GiftError::InvalidInput(format!("vocabulary lacks {UNK}")))?;
        let eos = *index
            .get(EOS)
            .ok_or_else(|| GiftError::InvalidInput(format!("vocabulary lacks {EOS}")))?;
        Ok(Self { words, index, unk, eos })
    }

    pub fn builtin() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| Vocabulary::from_lines(BUILTIN_VOCAB).expect("built-in vocabulary parses"))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.id(word).unwrap_or(self.unk)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn eos_id(&self) -> u32 {
        self.eos
    }

    /// Join ids back into text, attaching punctuation to the preceding word.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id).unwrap_or(UNK);
            let is_punct = w.chars().all(|c| c.is_ascii_punctuation());
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }
}

/// Coarse part-of-speech tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Propn,
    Verb,
    Adj,
    Adv,
    Num,
    Other,
}

impl PosTag {
    /// Tags whose words count as information-rich.
    pub fn is_info_rich(self) -> bool {
        !matches!(self, PosTag::Other)
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PosTag::Noun => "NOUN",
            PosTag::Propn => "PROPN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Num => "NUM",
            PosTag::Other => "OTHER",
        };
        f.write_str(s)
    }
}

impl FromStr for PosTag {
    type Err = GiftError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "NOUN" => PosTag::Noun,
            "PROPN" => PosTag::Propn,
            "VERB" => PosTag::Verb,
            "ADJ" => PosTag::Adj,
            "ADV" => PosTag::Adv,
            "NUM" => PosTag::Num,
            "OTHER" => PosTag::Other,
            other => return Err(GiftError::InvalidInput(format!("unknown POS tag {other:?}"))),
        })
    }
}

/// Word -> tag table, immutable after load.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, PosTag>,
}

impl Lexicon {
    /// Parse `word<TAB>TAG` lines. Blank lines and `#` comments are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or_else(|| {
                GiftError::InvalidInput(format!("lexicon line {} lacks a tab", n + 1))
            })?;
            entries.insert(word.to_lowercase(), tag.trim().parse()?);
        }
        Ok(Self { entries })
    }

    pub fn builtin() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| Lexicon::from_tsv(BUILTIN_LEXICON).expect("built-in lexicon parses"))
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, PosTag)>) -> Self {
        Self {
            entries: pairs.into_iter().map(|(w, t)| (w.to_lowercase(), t)).collect(),
        }
    }

    pub fn get(&self, word: &str) -> Option<PosTag> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tokens, their vocabulary ids and (after [`tag`]) their POS tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    pub tags: Vec<PosTag>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One flag per token marking information-rich words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InfoRichMask {
    pub flags: Vec<bool>,
}

impl InfoRichMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Lowercase, split on whitespace, and split every ASCII punctuation mark
/// into its own token. Unknown words map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenizedText> {
    if text.trim().is_empty() {
        return Err(GiftError::EmptyInput("text"));
    }
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_ascii_punctuation() {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    let ids = tokens.iter().map(|t| vocab.id_or_unk(t)).collect();
    let tags = vec![PosTag::Other; tokens.len()];
    Ok(TokenizedText { tokens, ids, tags })
}

const SUFFIX_RULES: &[(&str, PosTag)] = &[
    ("ly", PosTag::Adv),
    ("ing", PosTag::Verb),
    ("ed", PosTag::Verb),
    ("tion", PosTag::Noun),
    ("ness", PosTag::Noun),
    ("ment", PosTag::Noun),
    ("ous", PosTag::Adj),
    ("ful", PosTag::Adj),
    ("ive", PosTag::Adj),
    ("able", PosTag::Adj),
];

/// Shortest stem a suffix rule may leave behind ("bed" is not a verb).
const MIN_STEM: usize = 3;

pub fn tag_word(word: &str, lexicon: &Lexicon) -> PosTag {
    if let Some(t) = lexicon.get(word) {
        return t;
    }
    if !word.is_empty() && word.chars().all(|c| c.is_ascii_digit()) {
        return PosTag::Num;
    }
    if word.chars().all(|c| c.is_alphabetic()) {
        for (suffix, t) in SUFFIX_RULES {
            if word.len() >= suffix.len() + MIN_STEM && word.ends_with(suffix) {
                return *t;
            }
        }
    }
    PosTag::Other
}

pub fn tag(mut text: TokenizedText, lexicon: &Lexicon) -> TokenizedText {
    text.tags = text.tokens.iter().map(|w| tag_word(w, lexicon)).collect();
    text
}

pub fn select_info_rich(tagged: &TokenizedText) -> InfoRichMask {
    InfoRichMask::new(tagged.tags.iter().map(|t| t.is_info_rich()).collect())
}

/// Tokenize and tag with the built-in vocabulary and lexicon.
pub fn analyze(text: &str) -> Result<TokenizedText> {
    Ok(tag(tokenize(text, Vocabulary::builtin())?, Lexicon::builtin()))
}
