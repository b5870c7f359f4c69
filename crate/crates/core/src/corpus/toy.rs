//! Synthetic languages and speakers with an analytic spectrogram oracle.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::melf::{MelSpectrogram, LOG_FLOOR, N_MELS};
use super::CorpusError;
use crate::textfront::{Lexicon, PhonemeString, Syllable, ToneStress};

pub const DEFAULT_TONE_SHIFT: f64 = 6.0;
pub const TEMPLATE_WIDTH: f64 = 2.0;
pub const TILT_PIVOT: f64 = 64.0;
pub const MIN_CENTER_SEPARATION: f64 = 4.0;
pub const MIN_TOKENS: usize = 3;
pub const MAX_TOKENS: usize = 10;

/// One written form of a token: the text that spells it with a given tone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenForm {
    pub text: String,
    #[serde(default)]
    pub tone: ToneStress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyToken {
    /// Phoneme symbol used by the phoneme representation.
    pub symbol: String,
    /// Mel bin of the template peak before tone and speaker shifts.
    pub center: f64,
    /// Template duration in frames.
    pub length: usize,
    pub forms: Vec<TokenForm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub language_id: usize,
    #[serde(default)]
    pub name: String,
    pub tonal: bool,
    #[serde(default = "default_tone_shift")]
    pub tone_shift: f64,
    pub tokens: Vec<ToyToken>,
}

fn default_tone_shift() -> f64 {
    DEFAULT_TONE_SHIFT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: usize,
    pub band_shift: i32,
    pub tilt: f64,
    pub gain: f64,
    pub native_language_id: usize,
}

/// Everything `gen-data` needs besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub languages: Vec<ToyLanguageSpec>,
    pub speakers: Vec<SpeakerSpec>,
    pub n_per_speaker: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_noise() -> f64 {
    0.1
}

/// A token of an utterance: index into the language inventory plus tone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyUnit {
    pub token: usize,
    pub tone: ToneStress,
}

impl ToyLanguageSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::Spec(format!("language {}: {msg}", self.language_id)));
        if self.tokens.is_empty() {
            return bad("empty token inventory".into());
        }
        if !(self.tone_shift > 0.0) {
            return bad(format!("tone_shift {} must be positive", self.tone_shift));
        }
        let mut texts = HashMap::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.symbol.is_empty() || tok.symbol.chars().any(char::is_whitespace) {
                return bad(format!("token {i} has an invalid symbol {:?}", tok.symbol));
            }
            if !(8.0..=120.0).contains(&tok.center) {
                return bad(format!("center {} of {:?} outside [8, 120]", tok.center, tok.symbol));
            }
            if !(4..=8).contains(&tok.length) {
                return bad(format!("length {} of {:?} outside [4, 8]", tok.length, tok.symbol));
            }
            if tok.forms.is_empty() {
                return bad(format!("token {:?} has no written forms", tok.symbol));
            }
            for form in &tok.forms {
                if form.text.is_empty() || form.text.chars().any(char::is_whitespace) {
                    return bad(format!("form {:?} of {:?} is not a single word", form.text, tok.symbol));
                }
                if (form.tone.pitch_steps() > 0) != self.tonal {
                    return bad(format!("form {:?} tone {:?} does not fit tonal={}", form.text, form.tone, self.tonal));
                }
                if texts.insert(form.text.as_str(), i).is_some() {
                    return bad(format!("written form {:?} used twice", form.text));
                }
            }
            for other in &self.tokens[..i] {
                if other.symbol == tok.symbol {
                    return bad(format!("duplicate symbol {:?}", tok.symbol));
                }
                if (other.center - tok.center).abs() < MIN_CENTER_SEPARATION {
                    return bad(format!(
                        "centers of {:?} and {:?} closer than {MIN_CENTER_SEPARATION} bins",
                        other.symbol, tok.symbol
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn token_index(&self, symbol: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t.symbol == symbol)
    }

    /// Every (token, form) pair, in inventory order.
    pub fn units(&self) -> Vec<ToyUnit> {
        self.tokens
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.forms.iter().map(move |f| ToyUnit { token: i, tone: f.tone }))
            .collect()
    }

    pub fn form(&self, unit: ToyUnit) -> Option<&TokenForm> {
        self.tokens.get(unit.token)?.forms.iter().find(|f| f.tone == unit.tone)
    }

    /// Space-separated written forms.
    pub fn text(&self, units: &[ToyUnit]) -> Result<String, CorpusError> {
        let words = units
            .iter()
            .map(|&u| {
                self.form(u).map(|f| f.text.as_str()).ok_or_else(|| {
                    CorpusError::Spec(format!("no written form for token {} tone {:?}", u.token, u.tone))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    /// Inverse of [`ToyLanguageSpec::text`].
    pub fn parse_text(&self, text: &str) -> Result<Vec<ToyUnit>, CorpusError> {
        text.split_whitespace()
            .map(|word| {
                self.tokens
                    .iter()
                    .enumerate()
                    .find_map(|(i, t)| {
                        t.forms
                            .iter()
                            .find(|f| f.text == word)
                            .map(|f| ToyUnit { token: i, tone: f.tone })
                    })
                    .ok_or_else(|| CorpusError::UnknownToken(word.to_string()))
            })
            .collect()
    }

    pub fn phonemes(&self, units: &[ToyUnit]) -> PhonemeString {
        PhonemeString {
            syllables: units
                .iter()
                .map(|u| Syllable::new([self.tokens[u.token].symbol.clone()], u.tone))
                .collect(),
        }
    }

    /// One entry per written form: a single one-phoneme syllable.
    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        for tok in &self.tokens {
            for form in &tok.forms {
                lex.insert(form.text.clone(), PhonemeString {
                    syllables: vec![Syllable::new([tok.symbol.clone()], form.tone)],
                });
            }
        }
        lex
    }
}

impl SpeakerSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::Spec(format!("speaker {}: {msg}", self.speaker_id)));
        if !(-10..=10).contains(&self.band_shift) {
            return bad(format!("band_shift {} outside [-10, 10]", self.band_shift));
        }
        if !(-0.02..=0.02).contains(&self.tilt) {
            return bad(format!("tilt {} outside [-0.02, 0.02]", self.tilt));
        }
        if !(0.5..=2.0).contains(&self.gain) {
            return bad(format!("gain {} outside [0.5, 2.0]", self.gain));
        }
        Ok(())
    }

    fn same_transform(&self, other: &SpeakerSpec) -> bool {
        self.band_shift == other.band_shift && self.tilt == other.tilt && self.gain == other.gain
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.languages.is_empty() || self.speakers.is_empty() {
            return Err(CorpusError::Spec("need at least one language and one speaker".into()));
        }
        for (i, lang) in self.languages.iter().enumerate() {
            lang.validate()?;
            if self.languages[..i].iter().any(|l| l.language_id == lang.language_id) {
                return Err(CorpusError::Spec(format!("duplicate language id {}", lang.language_id)));
            }
        }
        // A written form shared by two languages must be pronounced the same way
        // in both, so a merged lexicon stays unambiguous.
        let mut merged: HashMap<String, PhonemeString> = HashMap::new();
        for lang in &self.languages {
            let lex = lang.lexicon();
            for unit in lang.units() {
                let text = &lang.form(unit).unwrap().text;
                let pron = lex.get(text).unwrap();
                if let Some(prev) = merged.insert(text.clone(), pron.clone()) {
                    if &prev != pron {
                        return Err(CorpusError::Spec(format!(
                            "written form {text:?} is pronounced differently across languages"
                        )));
                    }
                }
            }
        }
        for (i, spk) in self.speakers.iter().enumerate() {
            spk.validate()?;
            if self.language(spk.native_language_id).is_none() {
                return Err(CorpusError::Spec(format!(
                    "speaker {} has unknown native language {}",
                    spk.speaker_id, spk.native_language_id
                )));
            }
            for other in &self.speakers[..i] {
                if other.speaker_id == spk.speaker_id {
                    return Err(CorpusError::Spec(format!("duplicate speaker id {}", spk.speaker_id)));
                }
                if other.same_transform(spk) {
                    return Err(CorpusError::Spec(format!(
                        "speakers {} and {} share one transform",
                        other.speaker_id, spk.speaker_id
                    )));
                }
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CorpusError::Spec(format!("noise_sigma {} is negative", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn language(&self, id: usize) -> Option<&ToyLanguageSpec> {
        self.languages.iter().find(|l| l.language_id == id)
    }

    pub fn speaker(&self, id: usize) -> Option<&SpeakerSpec> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        for lang in &self.languages {
            lex.merge(&lang.lexicon());
        }
        lex
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers.iter().map(|s| s.speaker_id + 1).max().unwrap_or(0)
    }

    pub fn language_count(&self) -> usize {
        self.languages.iter().map(|l| l.language_id + 1).max().unwrap_or(0)
    }

    /// Two languages with one native speaker each.
    ///
    /// Language 0 is written in Latin letters and has twelve toneless tokens
    /// on a six-bin grid. Language 1 is written in CJK characters and has
    /// three tonal tokens whose four tones land on the same grid, so both
    /// languages cover one shared set of acoustic units.
    pub fn two_language_default(n_per_speaker: usize) -> Self {
        let latin = ["p", "t", "k", "b", "d", "g", "m", "n", "s", "f", "l", "r"];
        let group_length = |j: usize| 5 + (j - 1) / 4;
        let lang0 = ToyLanguageSpec {
            language_id: 0,
            name: "latin".into(),
            tonal: false,
            tone_shift: DEFAULT_TONE_SHIFT,
            tokens: latin
                .iter()
                .enumerate()
                .map(|(i, s)| ToyToken {
                    symbol: (*s).into(),
                    center: 14.0 + 6.0 * (i + 1) as f64,
                    length: group_length(i + 1),
                    forms: vec![TokenForm {
                        text: (*s).into(),
                        tone: ToneStress::None,
                    }],
                })
                .collect(),
        };
        let syllables = [("ma", ["妈", "麻", "马", "骂"]), ("ba", ["八", "拔", "把", "爸"]), ("da", ["搭", "达", "打", "大"])];
        let lang1 = ToyLanguageSpec {
            language_id: 1,
            name: "cjk".into(),
            tonal: true,
            tone_shift: DEFAULT_TONE_SHIFT,
            tokens: syllables
                .iter()
                .enumerate()
                .map(|(g, (sym, chars))| ToyToken {
                    symbol: (*sym).into(),
                    center: 14.0 + 24.0 * g as f64,
                    length: group_length(4 * g + 1),
                    forms: chars
                        .iter()
                        .zip(&ToneStress::ALL[1..5])
                        .map(|(c, t)| TokenForm {
                            text: (*c).into(),
                            tone: *t,
                        })
                        .collect(),
                })
                .collect(),
        };
        Self {
            languages: vec![lang0, lang1],
            speakers: vec![
                SpeakerSpec {
                    speaker_id: 0,
                    band_shift: 4,
                    tilt: 0.002,
                    gain: 1.0,
                    native_language_id: 0,
                },
                SpeakerSpec {
                    speaker_id: 1,
                    band_shift: -4,
                    tilt: -0.002,
                    gain: 1.3,
                    native_language_id: 1,
                },
            ],
            n_per_speaker,
            noise_sigma: 0.1,
        }
    }
}

/// Value of the template for a token with peak at `center` at mel `bin`.
pub fn template_value(center: f64, bin: usize, spk: &SpeakerSpec) -> f64 {
    let d = (bin as f64 - center) / TEMPLATE_WIDTH;
    spk.gain * (-0.5 * d * d).exp() + spk.tilt * (bin as f64 - TILT_PIVOT)
}

/// Noise-free spectrogram of `units` spoken by `spk`.
pub fn oracle_mel(units: &[ToyUnit], lang: &ToyLanguageSpec, spk: &SpeakerSpec) -> Result<MelSpectrogram, CorpusError> {
    if units.is_empty() {
        return Err(CorpusError::Invalid("oracle of an empty utterance".into()));
    }
    let floor = LOG_FLOOR.ln();
    let mut data = Vec::new();
    for u in units {
        let tok = lang
            .tokens
            .get(u.token)
            .ok_or_else(|| CorpusError::UnknownToken(format!("#{}", u.token)))?;
        let center = tok.center + f64::from(u.tone.pitch_steps()) * lang.tone_shift + f64::from(spk.band_shift);
        let frame: Vec<f64> = (0..N_MELS).map(|b| template_value(center, b, spk).max(floor)).collect();
        for _ in 0..tok.length {
            data.extend_from_slice(&frame);
        }
    }
    MelSpectrogram::from_f64(N_MELS, &data)
}

/// Oracle lookup by phoneme symbol, for callers holding symbols rather than indices.
pub fn oracle_mel_symbols(tokens: &[(&str, ToneStress)], lang: &ToyLanguageSpec, spk: &SpeakerSpec) -> Result<MelSpectrogram, CorpusError> {
    let units = tokens
        .iter()
        .map(|(s, tone)| {
            lang.token_index(s)
                .map(|token| ToyUnit { token, tone: *tone })
                .ok_or_else(|| CorpusError::UnknownToken((*s).to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    oracle_mel(&units, lang, spk)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the RNG stream for one utterance.
pub fn hash64(global_seed: u64, speaker_id: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(global_seed) ^ speaker_id) ^ index)
}

/// Token units of utterance `index` of a speaker: 3 to 10 draws, uniform
/// over every (token, written form) pair of the language.
pub fn sample_units(rng: &mut impl Rng, lang: &ToyLanguageSpec) -> Vec<ToyUnit> {
    let units = lang.units();
    let n = rng.gen_range(MIN_TOKENS..=MAX_TOKENS);
    (0..n).map(|_| units[rng.gen_range(0..units.len())]).collect()
}

/// One generated utterance before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyUtterance {
    pub speaker_id: usize,
    pub language_id: usize,
    pub index: usize,
    pub units: Vec<ToyUnit>,
    pub text: String,
    pub phonemes: PhonemeString,
    pub mel: MelSpectrogram,
}

pub fn generate_utterance(spec: &CorpusSpec, spk: &SpeakerSpec, index: usize, global_seed: u64) -> Result<ToyUtterance, CorpusError> {
    let lang = spec
        .language(spk.native_language_id)
        .ok_or_else(|| CorpusError::Spec(format!("unknown language {}", spk.native_language_id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(global_seed, spk.speaker_id as u64, index as u64));
    let units = sample_units(&mut rng, lang);
    let clean = oracle_mel(&units, lang, spk)?;
    let mel = if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| CorpusError::Spec(e.to_string()))?;
        let noisy: Vec<f64> = clean
            .data()
            .iter()
            .map(|&v| (f64::from(v) + noise.sample(&mut rng)).max(LOG_FLOOR.ln()))
            .collect();
        MelSpectrogram::from_f64(N_MELS, &noisy)?
    } else {
        clean
    };
    Ok(ToyUtterance {
        speaker_id: spk.speaker_id,
        language_id: lang.language_id,
        index,
        text: lang.text(&units)?,
        phonemes: lang.phonemes(&units),
        units,
        mel,
    })
}

/// Number of trailing utterance indices per speaker held out from training.
pub fn heldout_count(n_per_speaker: usize) -> usize {
    n_per_speaker / 10
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_speaker() -> SpeakerSpec {
        SpeakerSpec {
            speaker_id: 0,
            band_shift: 0,
            tilt: 0.0,
            gain: 1.0,
            native_language_id: 0,
        }
    }

    fn argmax(frame: &[f32]) -> usize {
        (0..frame.len()).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap()
    }

    #[test]
    fn default_spec_is_valid() {
        CorpusSpec::two_language_default(200).validate().unwrap();
    }

    #[test]
    fn oracle_peak_and_length() {
        let spec = CorpusSpec::two_language_default(1);
        let lang = &spec.languages[0];
        let mel = oracle_mel(&[ToyUnit { token: 0, tone: ToneStress::None }], lang, &flat_speaker()).unwrap();
        assert_eq!(mel.frames(), lang.tokens[0].length);
        for t in 0..mel.frames() {
            assert_eq!(argmax(mel.frame(t)), 20);
            assert_eq!(mel.frame(t)[20], 1.0);
        }
    }

    #[test]
    fn tone_moves_peak_by_tone_shift() {
        let spec = CorpusSpec::two_language_default(1);
        let lang = &spec.languages[1];
        let mel = oracle_mel_symbols(&[("ma", ToneStress::Tone2)], lang, &flat_speaker()).unwrap();
        assert_eq!(argmax(mel.frame(0)), 14 + 12);
        let stressed = oracle_mel_symbols(&[("ma", ToneStress::StressPrimary)], lang, &flat_speaker()).unwrap();
        assert_eq!(argmax(stressed.frame(0)), 14);
    }

    #[test]
    fn unknown_token_is_an_error() {
        let spec = CorpusSpec::two_language_default(1);
        assert!(matches!(
            oracle_mel_symbols(&[("zz", ToneStress::None)], &spec.languages[0], &flat_speaker()),
            Err(CorpusError::UnknownToken(_))
        ));
    }

    #[test]
    fn text_round_trip() {
        let spec = CorpusSpec::two_language_default(1);
        let lang = &spec.languages[1];
        let units = vec![ToyUnit { token: 2, tone: ToneStress::Tone3 }, ToyUnit { token: 0, tone: ToneStress::Tone1 }];
        let text = lang.text(&units).unwrap();
        assert_eq!(text, "打 妈");
        assert_eq!(lang.parse_text(&text).unwrap(), units);
    }

    #[test]
    fn validation_catches_bad_specs() {
        let mut spec = CorpusSpec::two_language_default(1);
        spec.languages[0].tokens[1].center = spec.languages[0].tokens[0].center + 1.0;
        assert!(spec.validate().is_err());

        let mut spec = CorpusSpec::two_language_default(1);
        spec.speakers[1].band_shift = 4;
        spec.speakers[1].tilt = 0.002;
        spec.speakers[1].gain = 1.0;
        assert!(spec.validate().is_err());

        let mut spec = CorpusSpec::two_language_default(1);
        spec.speakers[0].native_language_id = 7;
        assert!(spec.validate().is_err());

        let mut spec = CorpusSpec::two_language_default(1);
        spec.languages[0].tokens[0].length = 9;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let spec = CorpusSpec::two_language_default(4);
        let a = generate_utterance(&spec, &spec.speakers[1], 3, 11).unwrap();
        let b = generate_utterance(&spec, &spec.speakers[1], 3, 11).unwrap();
        let c = generate_utterance(&spec, &spec.speakers[1], 3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mel, c.mel);
        assert!((MIN_TOKENS..=MAX_TOKENS).contains(&a.units.len()));
    }

    #[test]
    fn json_schema_round_trip() {
        let spec = CorpusSpec::two_language_default(3);
        let json = serde_json::to_string_pretty(&spec).unwrap();
        assert!(json.contains("\"tone\": 2"));
        let back: CorpusSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
