//! Text frontend: graphemes, UTF-8 bytes, or phonemes with tone/stress marks,
//! mapped to token ids shared across languages.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const OOV: usize = 2;
pub const BYTE_PAD: usize = 256;
pub const BYTE_EOS: usize = 257;
pub const BYTE_VOCAB_SIZE: usize = 258;

const PAD_SYMBOL: &str = "<pad>";
const EOS_SYMBOL: &str = "<eos>";
const OOV_SYMBOL: &str = "<oov>";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid byte stream")]
    InvalidByteStream,
    #[error("no pronunciation: {0}")]
    NoPronunciation(String),
    #[error("expected a {expected} vocabulary, got {actual}")]
    KindMismatch {
        expected: RepresentationKind,
        actual: RepresentationKind,
    },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("tone/stress id {0} out of range")]
    BadTone(usize),
    #[error("syllable without phonemes")]
    EmptySyllable,
    #[error("vocabulary file line {line}: {msg}")]
    VocabFormat { line: usize, msg: String },
    #[error("lexicon line {line}: {msg}")]
    LexiconFormat { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, TextError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RepresentationKind {
    Grapheme,
    Byte,
    Phoneme,
}

impl fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Grapheme => "GRAPHEME",
            Self::Byte => "BYTE",
            Self::Phoneme => "PHONEME",
        })
    }
}

impl FromStr for RepresentationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GRAPHEME" => Ok(Self::Grapheme),
            "BYTE" => Ok(Self::Byte),
            "PHONEME" => Ok(Self::Phoneme),
            other => Err(format!("unknown representation {other:?}")),
        }
    }
}

/// Syllable-level tone (Mandarin-style, 1..=4) or lexical stress mark.
/// `None` is used when neither applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum ToneStress {
    #[default]
    None = 0,
    Tone1 = 1,
    Tone2 = 2,
    Tone3 = 3,
    Tone4 = 4,
    StressPrimary = 5,
    StressSecondary = 6,
}

impl ToneStress {
    pub const COUNT: usize = 7;
    pub const ALL: [ToneStress; 7] = [
        Self::None,
        Self::Tone1,
        Self::Tone2,
        Self::Tone3,
        Self::Tone4,
        Self::StressPrimary,
        Self::StressSecondary,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    /// Pitch steps of a lexical tone; zero for stress marks and `None`.
    pub fn pitch_steps(self) -> i32 {
        match self {
            Self::Tone1 | Self::Tone2 | Self::Tone3 | Self::Tone4 => self as i32,
            _ => 0,
        }
    }
}

impl TryFrom<usize> for ToneStress {
    type Error = TextError;

    fn try_from(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(TextError::BadTone(id))
    }
}

impl From<ToneStress> for usize {
    fn from(t: ToneStress) -> usize {
        t.id()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Syllable {
    pub phonemes: Vec<String>,
    pub tone: ToneStress,
}

impl Syllable {
    pub fn new<S: Into<String>>(phonemes: impl IntoIterator<Item = S>, tone: ToneStress) -> Self {
        Self {
            phonemes: phonemes.into_iter().map(Into::into).collect(),
            tone,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhonemeString {
    pub syllables: Vec<Syllable>,
}

impl PhonemeString {
    pub fn new(syllables: Vec<Syllable>) -> Result<Self> {
        if syllables.iter().any(|s| s.phonemes.is_empty()) {
            return Err(TextError::EmptySyllable);
        }
        Ok(Self { syllables })
    }

    pub fn phoneme_count(&self) -> usize {
        self.syllables.iter().map(|s| s.phonemes.len()).sum()
    }

    pub fn extend(&mut self, other: &PhonemeString) {
        self.syllables.extend(other.syllables.iter().cloned());
    }
}

impl fmt::Display for PhonemeString {
    /// Lexicon notation: `p1 p2;tone|p3;tone`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.syllables.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{};{}", s.phonemes.join(" "), s.tone.id())?;
        }
        Ok(())
    }
}

impl FromStr for PhonemeString {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.trim().is_empty() {
            return Ok(Self::default());
        }
        let syllables = s
            .split('|')
            .map(|syl| {
                let (phones, tone) = syl
                    .rsplit_once(';')
                    .ok_or_else(|| format!("syllable {syl:?} lacks ';tone'"))?;
                let tone: usize = tone
                    .trim()
                    .parse()
                    .map_err(|_| format!("bad tone {tone:?}"))?;
                let tone = ToneStress::try_from(tone).map_err(|e| e.to_string())?;
                let phonemes: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
                if phonemes.is_empty() {
                    return Err(format!("syllable {syl:?} has no phonemes"));
                }
                Ok(Syllable { phonemes, tone })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(Self { syllables })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub kind: RepresentationKind,
    pub ids: Vec<usize>,
    pub tone_ids: Vec<usize>,
    pub language_id: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_language(mut self, language_id: usize) -> Self {
        self.language_id = language_id;
        self
    }
}

/// Symbol table for one representation kind.
///
/// Grapheme and phoneme vocabularies reserve `PAD=0, EOS=1, OOV=2` and place
/// learned symbols after them in sorted order. The byte vocabulary maps byte
/// values to themselves and appends `PAD=256, EOS=257`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    kind: RepresentationKind,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_symbols(kind: RepresentationKind, symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            kind,
            symbols,
            index,
        }
    }

    fn reserved() -> Vec<String> {
        vec![PAD_SYMBOL.into(), EOS_SYMBOL.into(), OOV_SYMBOL.into()]
    }

    pub fn bytes() -> Self {
        let mut symbols: Vec<String> = (0..=255u8).map(|b| format!("0x{b:02x}")).collect();
        symbols.push(PAD_SYMBOL.into());
        symbols.push(EOS_SYMBOL.into());
        Self::from_symbols(RepresentationKind::Byte, symbols)
    }

    pub fn kind(&self) -> RepresentationKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        match self.kind {
            RepresentationKind::Byte => BYTE_PAD,
            _ => PAD,
        }
    }

    pub fn eos_id(&self) -> usize {
        match self.kind {
            RepresentationKind::Byte => BYTE_EOS,
            _ => EOS,
        }
    }

    fn expect(&self, kind: RepresentationKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(TextError::KindMismatch {
                expected: kind,
                actual: self.kind,
            })
        }
    }

    /// Checks a sequence against this vocabulary's id range and kind.
    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        self.expect(seq.kind)?;
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.size()) {
            return Err(TextError::IdOutOfRange {
                id,
                size: self.size(),
            });
        }
        if let Some(&t) = seq.tone_ids.iter().find(|&&t| t >= ToneStress::COUNT) {
            return Err(TextError::BadTone(t));
        }
        Ok(())
    }

    /// `#kind=<KIND>` header followed by one `<id>\t<symbol>` line per entry.
    /// Tabs, newlines and backslashes inside symbols are backslash-escaped.
    pub fn to_text(&self) -> String {
        let mut out = format!("#kind={}\n", self.kind);
        for (i, s) in self.symbols.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\n", escape(s)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| TextError::VocabFormat { line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let kind = header
            .strip_prefix("#kind=")
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?
            .parse::<RepresentationKind>()
            .map_err(|e| err(1, e))?;
        let mut symbols = Vec::new();
        for (n, line) in lines {
            let (id, sym) = line
                .split_once('\t')
                .ok_or_else(|| err(n + 1, "missing tab".into()))?;
            let id: usize = id.parse().map_err(|_| err(n + 1, format!("bad id {id:?}")))?;
            if id != symbols.len() {
                return Err(err(n + 1, format!("id {id} out of order")));
            }
            symbols.push(unescape(sym));
        }
        let vocab = Self::from_symbols(kind, symbols);
        if vocab.index.len() != vocab.symbols.len() {
            return Err(err(0, "duplicate symbol".into()));
        }
        Ok(vocab)
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('\t', "\\t")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Every distinct Unicode scalar value in `texts`, reserved ids first and the
/// rest sorted by codepoint.
pub fn build_grapheme_vocab<S: AsRef<str>>(texts: &[S]) -> Result<Vocabulary> {
    if texts.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let chars: BTreeSet<char> = texts.iter().flat_map(|t| t.as_ref().chars()).collect();
    let mut symbols = Vocabulary::reserved();
    symbols.extend(chars.into_iter().map(String::from));
    Ok(Vocabulary::from_symbols(RepresentationKind::Grapheme, symbols))
}

/// Every distinct phoneme symbol in `strings`, reserved ids first and the rest
/// in lexical order.
pub fn build_phoneme_vocab(strings: &[PhonemeString]) -> Result<Vocabulary> {
    if strings.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let phones: BTreeSet<&str> = strings
        .iter()
        .flat_map(|p| p.syllables.iter())
        .flat_map(|s| s.phonemes.iter().map(String::as_str))
        .collect();
    let mut symbols = Vocabulary::reserved();
    symbols.extend(phones.into_iter().map(str::to_string));
    Ok(Vocabulary::from_symbols(RepresentationKind::Phoneme, symbols))
}

pub fn encode_graphemes(text: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    vocab.expect(RepresentationKind::Grapheme)?;
    let mut buf = [0u8; 4];
    let mut ids: Vec<usize> = text
        .chars()
        .map(|c| vocab.id(c.encode_utf8(&mut buf)).unwrap_or(OOV))
        .collect();
    ids.push(EOS);
    Ok(TokenSequence {
        kind: RepresentationKind::Grapheme,
        tone_ids: vec![ToneStress::None.id(); ids.len()],
        ids,
        language_id: 0,
    })
}

pub fn encode_bytes(text: &str) -> TokenSequence {
    let mut ids: Vec<usize> = text.bytes().map(usize::from).collect();
    ids.push(BYTE_EOS);
    TokenSequence {
        kind: RepresentationKind::Byte,
        tone_ids: vec![ToneStress::None.id(); ids.len()],
        ids,
        language_id: 0,
    }
}

pub fn decode_bytes(seq: &TokenSequence) -> Result<String> {
    if seq.kind != RepresentationKind::Byte {
        return Err(TextError::KindMismatch {
            expected: RepresentationKind::Byte,
            actual: seq.kind,
        });
    }
    let bytes = seq
        .ids
        .iter()
        .filter(|&&id| id != BYTE_PAD && id != BYTE_EOS)
        .map(|&id| u8::try_from(id).map_err(|_| TextError::InvalidByteStream))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| TextError::InvalidByteStream)
}

/// Phoneme ids with each syllable's tone/stress id copied onto every phoneme
/// in that syllable. EOS carries `None`.
pub fn encode_phonemes(p: &PhonemeString, vocab: &Vocabulary) -> Result<TokenSequence> {
    vocab.expect(RepresentationKind::Phoneme)?;
    let mut ids = Vec::with_capacity(p.phoneme_count() + 1);
    let mut tone_ids = Vec::with_capacity(p.phoneme_count() + 1);
    for syl in &p.syllables {
        for ph in &syl.phonemes {
            ids.push(vocab.id(ph).unwrap_or(OOV));
            tone_ids.push(syl.tone.id());
        }
    }
    ids.push(EOS);
    tone_ids.push(ToneStress::None.id());
    Ok(TokenSequence {
        kind: RepresentationKind::Phoneme,
        ids,
        tone_ids,
        language_id: 0,
    })
}

/// Word-to-pronunciation table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: HashMap<String, PhonemeString>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, pron: PhonemeString) {
        self.entries.insert(word.into(), pron);
    }

    pub fn get(&self, word: &str) -> Option<&PhonemeString> {
        self.entries.get(word)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge(&mut self, other: &Lexicon) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// One `word\tp1 p2;tone|p3;tone` line per entry, sorted by word.
    pub fn to_text(&self) -> String {
        let mut words: Vec<&String> = self.entries.keys().collect();
        words.sort();
        words
            .into_iter()
            .map(|w| format!("{w}\t{}\n", self.entries[w]))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lex = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| TextError::LexiconFormat { line: n + 1, msg };
            let (word, pron) = line.split_once('\t').ok_or_else(|| err("missing tab".into()))?;
            let pron: PhonemeString = pron.parse().map_err(err)?;
            lex.insert(word, pron);
        }
        Ok(lex)
    }
}

/// Concatenated pronunciations of the whitespace-separated words of `text`.
pub fn lexicon_lookup(text: &str, lexicon: &Lexicon) -> Result<PhonemeString> {
    let mut out = PhonemeString::default();
    for word in text.split_whitespace() {
        let pron = lexicon
            .get(word)
            .ok_or_else(|| TextError::NoPronunciation(word.to_string()))?;
        out.extend(pron);
    }
    Ok(out)
}

/// Vocabulary plus, for phoneme models, the lexicon used to pronounce text.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontend {
    pub vocab: Vocabulary,
    pub lexicon: Option<Lexicon>,
}

impl Frontend {
    pub fn kind(&self) -> RepresentationKind {
        self.vocab.kind()
    }

    /// Encodes `text` as written in language `language_id`. Phoneme models
    /// use `phonemes` when given and the lexicon otherwise.
    pub fn encode(&self, text: &str, phonemes: Option<&PhonemeString>, language_id: usize) -> Result<TokenSequence> {
        let seq = match self.kind() {
            RepresentationKind::Grapheme => encode_graphemes(text, &self.vocab)?,
            RepresentationKind::Byte => encode_bytes(text),
            RepresentationKind::Phoneme => match phonemes {
                Some(p) => encode_phonemes(p, &self.vocab)?,
                None => {
                    let lex = self
                        .lexicon
                        .as_ref()
                        .ok_or_else(|| TextError::NoPronunciation(text.to_string()))?;
                    encode_phonemes(&lexicon_lookup(text, lex)?, &self.vocab)?
                }
            },
        };
        Ok(seq.with_language(language_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab_vocab() -> Vocabulary {
        build_grapheme_vocab(&["ab", "ba"]).unwrap()
    }

    #[test]
    fn grapheme_vocab_layout() {
        let v = ab_vocab();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<oov>"), Some(OOV));
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert_eq!(build_grapheme_vocab(&empty).unwrap_err().to_string(), "empty corpus");
        assert!(build_phoneme_vocab(&[]).is_err());
    }

    #[test]
    fn graphemes_shared_across_languages() {
        let v = build_grapheme_vocab(&["a cat", "una casa"]).unwrap();
        let en = encode_graphemes("a", &v).unwrap().with_language(0);
        let es = encode_graphemes("a", &v).unwrap().with_language(1);
        assert_eq!(en.ids, es.ids);
    }

    #[test]
    fn grapheme_encoding() {
        let v = ab_vocab();
        assert_eq!(encode_graphemes("ab", &v).unwrap().ids, vec![3, 4, EOS]);
        assert_eq!(encode_graphemes("aü", &v).unwrap().ids, vec![3, OOV, EOS]);
        let empty = encode_graphemes("", &v).unwrap();
        assert_eq!(empty.ids, vec![EOS]);
        assert_eq!(empty.tone_ids, vec![0]);
    }

    #[test]
    fn grapheme_encoding_rejects_other_kinds() {
        assert!(matches!(
            encode_graphemes("a", &Vocabulary::bytes()),
            Err(TextError::KindMismatch { .. })
        ));
    }

    #[test]
    fn byte_encoding() {
        assert_eq!(encode_bytes("abc").ids, vec![97, 98, 99, 257]);
        assert_eq!(encode_bytes("中").ids, vec![228, 184, 173, 257]);
        assert_eq!(Vocabulary::bytes().size(), BYTE_VOCAB_SIZE);
    }

    #[test]
    fn byte_decoding() {
        let seq = |ids: Vec<usize>| TokenSequence {
            kind: RepresentationKind::Byte,
            tone_ids: vec![0; ids.len()],
            ids,
            language_id: 0,
        };
        assert_eq!(decode_bytes(&seq(vec![97, 98, 99, 257])).unwrap(), "abc");
        assert_eq!(decode_bytes(&seq(vec![228, 184, 173, 257])).unwrap(), "中");
        assert_eq!(
            decode_bytes(&seq(vec![228, 257])).unwrap_err().to_string(),
            "invalid byte stream"
        );
    }

    fn phones(spec: &[(&[&str], ToneStress)]) -> PhonemeString {
        PhonemeString::new(spec.iter().map(|(p, t)| Syllable::new(p.iter().copied(), *t)).collect()).unwrap()
    }

    #[test]
    fn tone_broadcast() {
        let p = phones(&[(&["m", "a"], ToneStress::Tone3)]);
        let v = build_phoneme_vocab(&[p.clone()]).unwrap();
        let seq = encode_phonemes(&p, &v).unwrap();
        assert_eq!(seq.ids, vec![v.id("m").unwrap(), v.id("a").unwrap(), EOS]);
        assert_eq!(seq.tone_ids, vec![3, 3, 0]);
    }

    #[test]
    fn stress_broadcast() {
        let p = phones(&[(&["h", "ɛ"], ToneStress::StressPrimary), (&["l", "oʊ"], ToneStress::None)]);
        let v = build_phoneme_vocab(&[p.clone()]).unwrap();
        assert_eq!(encode_phonemes(&p, &v).unwrap().tone_ids, vec![5, 5, 0, 0, 0]);
        let empty = encode_phonemes(&PhonemeString::default(), &v).unwrap();
        assert_eq!(empty.ids, vec![EOS]);
        assert_eq!(empty.tone_ids, vec![0]);
    }

    #[test]
    fn unknown_phonemes_map_to_oov() {
        let v = build_phoneme_vocab(&[phones(&[(&["a"], ToneStress::None)])]).unwrap();
        let seq = encode_phonemes(&phones(&[(&["q"], ToneStress::Tone1)]), &v).unwrap();
        assert_eq!(seq.ids, vec![OOV, EOS]);
    }

    #[test]
    fn lexicon_lookup_concatenates_words() {
        let mut lex = Lexicon::new();
        lex.insert("ma", phones(&[(&["m", "a"], ToneStress::Tone3)]));
        assert_eq!(lexicon_lookup("ma", &lex).unwrap(), *lex.get("ma").unwrap());
        let two = lexicon_lookup("ma ma", &lex).unwrap();
        assert_eq!(two.syllables.len(), 2);
        assert_eq!(
            lexicon_lookup("xyz", &lex).unwrap_err().to_string(),
            "no pronunciation: xyz"
        );
    }

    #[test]
    fn lexicon_file_round_trip() {
        let mut lex = Lexicon::new();
        lex.insert("hello", phones(&[(&["h", "ɛ"], ToneStress::StressPrimary), (&["l", "oʊ"], ToneStress::None)]));
        let text = lex.to_text();
        assert_eq!(text, "hello\th ɛ;5|l oʊ;0\n");
        assert_eq!(Lexicon::from_text(&text).unwrap(), lex);
        assert!(Lexicon::from_text("word\tp;9\n").is_err());
    }

    #[test]
    fn vocab_file_round_trip_and_determinism() {
        let texts = ["tab\there", "new\nline", "back\\slash", "中文"];
        let v = build_grapheme_vocab(&texts).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("#kind=GRAPHEME\n0\t<pad>\n1\t<eos>\n2\t<oov>\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert_eq!(build_grapheme_vocab(&texts).unwrap().to_text(), text);
        let b = Vocabulary::bytes();
        assert_eq!(Vocabulary::from_text(&b.to_text()).unwrap(), b);
    }

    #[test]
    fn validate_catches_out_of_range_ids() {
        let v = ab_vocab();
        let mut seq = encode_graphemes("ab", &v).unwrap();
        assert!(v.validate(&seq).is_ok());
        seq.ids[0] = 99;
        assert!(matches!(v.validate(&seq), Err(TextError::IdOutOfRange { id: 99, size: 5 })));
    }

    proptest! {
        #[test]
        fn utf8_round_trip(s in "\\PC*") {
            let seq = encode_bytes(&s);
            prop_assert_eq!(seq.ids.len(), s.len() + 1);
            prop_assert_eq!(decode_bytes(&seq).unwrap(), s);
        }

        #[test]
        fn grapheme_length_law(s in "\\PC{0,40}") {
            let v = build_grapheme_vocab(&[s.as_str(), "x"]).unwrap();
            let seq = encode_graphemes(&s, &v).unwrap();
            prop_assert_eq!(seq.ids.len(), s.chars().count() + 1);
            prop_assert!(!seq.ids.contains(&OOV));
        }
    }
}
