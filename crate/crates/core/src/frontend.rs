//! Letter front end: initial-final syllables become letter tokens tagged
//! with the language they belong to.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus_prep::Utterance;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Mand,
    Shdia,
}

impl Lang {
    pub fn as_str(self) -> &'static str {
        match self {
            Lang::Mand => "mand",
            Lang::Shdia => "shdia",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mand" => Ok(Lang::Mand),
            "shdia" => Ok(Lang::Shdia),
            _ => Err(Error::InvalidArgument(format!("unknown language {s:?}"))),
        }
    }
}

/// How transcripts are mapped onto the token inventory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagMode {
    /// Every letter carries the language of its utterance.
    #[default]
    Tagged,
    /// All languages spelled with the Mandarin letter inventory.
    Shared,
}

impl TagMode {
    pub fn effective_lang(self, lang: Lang) -> Lang {
        match self {
            TagMode::Tagged => lang,
            TagMode::Shared => Lang::Mand,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenLang {
    Mand,
    Shdia,
    Shared,
}

impl From<Lang> for TokenLang {
    fn from(l: Lang) -> Self {
        match l {
            Lang::Mand => TokenLang::Mand,
            Lang::Shdia => TokenLang::Shdia,
        }
    }
}

impl TokenLang {
    fn as_str(self) -> &'static str {
        match self {
            TokenLang::Mand => "mand",
            TokenLang::Shdia => "shdia",
            TokenLang::Shared => "shared",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LetterToken {
    pub lang: TokenLang,
    pub symbol: String,
}

pub const PAD: &str = "PAD";
pub const BOS: &str = "BOS";
pub const EOS: &str = "EOS";
pub const SP: &str = "SP";
/// Id of `PAD` in every vocabulary.
pub const PAD_ID: usize = 0;

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, SP];

impl LetterToken {
    pub fn special(symbol: &str) -> Self {
        LetterToken {
            lang: TokenLang::Shared,
            symbol: symbol.to_string(),
        }
    }

    pub fn is_special(&self) -> bool {
        self.lang == TokenLang::Shared
    }

    pub fn is_tone(&self) -> bool {
        self.symbol.starts_with("<t")
    }
}

impl fmt::Display for LetterToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lang.as_str(), self.symbol)
    }
}

impl FromStr for LetterToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lang, symbol) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("bad token line {s:?}")))?;
        let lang = match lang {
            "mand" => TokenLang::Mand,
            "shdia" => TokenLang::Shdia,
            "shared" => TokenLang::Shared,
            _ => return Err(Error::InvalidArgument(format!("bad token language in {s:?}"))),
        };
        if symbol.is_empty() {
            return Err(Error::InvalidArgument(format!("empty symbol in {s:?}")));
        }
        Ok(LetterToken {
            lang,
            symbol: symbol.to_string(),
        })
    }
}

/// Splits one syllable into letters plus an optional trailing tone token.
///
/// `"zhong1"` becomes `z h o n g <t1>`.
pub fn syllable_to_letters(syllable: &str) -> Result<Vec<String>> {
    let bad = || Error::MalformedSyllable(syllable.to_string());
    let bytes = syllable.as_bytes();
    let (letters, tone) = match bytes.last() {
        Some(b) if b.is_ascii_digit() => (&bytes[..bytes.len() - 1], Some(*b)),
        _ => (bytes, None),
    };
    if letters.is_empty() || !letters.iter().all(u8::is_ascii_lowercase) {
        return Err(bad());
    }
    let mut out: Vec<String> = letters.iter().map(|&b| (b as char).to_string()).collect();
    match tone {
        Some(t @ b'0'..=b'5') => out.push(format!("<t{}>", t as char)),
        Some(_) => return Err(bad()),
        None => {}
    }
    Ok(out)
}

pub fn tag_language(symbols: &[String], lang: Lang) -> Vec<LetterToken> {
    symbols
        .iter()
        .map(|s| {
            if SPECIALS.contains(&s.as_str()) {
                LetterToken::special(s)
            } else {
                LetterToken {
                    lang: lang.into(),
                    symbol: s.clone(),
                }
            }
        })
        .collect()
}

/// Bijective token inventory; ids are contiguous and `PAD` is 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<LetterToken>,
    index: HashMap<LetterToken, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<LetterToken>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i) != Some(&LetterToken::special(s)) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary must start with the specials; id {i} is not {s}"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &LetterToken) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&LetterToken> {
        self.tokens.get(id)
    }

    pub fn special_id(&self, symbol: &str) -> usize {
        self.index[&LetterToken::special(symbol)]
    }

    pub fn tokens(&self) -> &[LetterToken] {
        &self.tokens
    }

    pub fn contains(&self, token: &LetterToken) -> bool {
        self.index.contains_key(token)
    }

    /// One `lang:symbol` per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(&t.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(LetterToken::from_str)
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Specials first, then every observed `(lang, symbol)` in lexicographic order.
pub fn build_vocab(manifests: &[Utterance], mode: TagMode) -> Result<Vocabulary> {
    let mut seen = BTreeSet::new();
    for u in manifests {
        let lang = mode.effective_lang(u.lang);
        for syl in &u.syllables {
            let letters = syllable_to_letters(syl).map_err(|e| Error::in_utterance(&u.id, e))?;
            seen.extend(tag_language(&letters, lang));
        }
    }
    let mut tokens: Vec<LetterToken> = SPECIALS.iter().map(|s| LetterToken::special(s)).collect();
    tokens.extend(seen.into_iter().filter(|t| !t.is_special()));
    Vocabulary::from_tokens(tokens)
}

/// Token ids plus the language the transcript was encoded under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub lang: Lang,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[BOS] + letters of each syllable (+ SP between syllables) + [EOS]`.
/// Every out-of-vocabulary token is reported; none are skipped.
pub fn encode_transcript(
    syllables: &[String],
    lang: Lang,
    vocab: &Vocabulary,
    insert_pauses: bool,
) -> Result<TokenSequence> {
    let mut ids = vec![vocab.special_id(BOS)];
    let mut missing: Vec<String> = Vec::new();
    for (k, syl) in syllables.iter().enumerate() {
        if insert_pauses && k > 0 {
            ids.push(vocab.special_id(SP));
        }
        for tok in tag_language(&syllable_to_letters(syl)?, lang) {
            match vocab.id(&tok) {
                Some(id) => ids.push(id),
                None => {
                    let s = tok.to_string();
                    if !missing.contains(&s) {
                        missing.push(s);
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::OutOfVocabulary(missing.join(", ")));
    }
    ids.push(vocab.special_id(EOS));
    Ok(TokenSequence { ids, lang })
}

/// Inverse of [`encode_transcript`]: a syllable ends at a tone token, a
/// pause, or the end of the sequence.
pub fn decode_transcript(seq: &TokenSequence, vocab: &Vocabulary) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for &id in &seq.ids {
        let tok = vocab.token(id).ok_or(Error::TokenOutOfRange {
            id,
            size: vocab.len(),
        })?;
        if tok.is_special() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if tok.is_tone() {
            cur.push_str(&tok.symbol[2..tok.symbol.len() - 1]);
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push_str(&tok.symbol);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn utt(id: &str, lang: Lang, syl: &[&str]) -> Utterance {
        Utterance {
            id: id.into(),
            wav_path: String::new(),
            lang,
            syllables: strs(syl),
            duration_s: 1.0,
            approximate: false,
        }
    }

    #[test]
    fn decomposition() {
        assert_eq!(
            syllable_to_letters("zhong1").unwrap(),
            strs(&["z", "h", "o", "n", "g", "<t1>"])
        );
        assert_eq!(syllable_to_letters("a").unwrap(), strs(&["a"]));
        for bad in ["ni3hao3", "", "Ba1", "1", "ba9", "b a"] {
            match syllable_to_letters(bad) {
                Err(Error::MalformedSyllable(s)) => assert_eq!(s, bad),
                other => panic!("{bad:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn tagging_keeps_languages_apart() {
        let m = tag_language(&strs(&["z"]), Lang::Mand);
        let s = tag_language(&strs(&["z"]), Lang::Shdia);
        assert_eq!(m[0].to_string(), "mand:z");
        assert_ne!(m, s);
        assert!(tag_language(&[], Lang::Mand).is_empty());
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(&[utt("u", Lang::Mand, &["ba1"])], TagMode::Tagged).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(
            v.to_text(),
            "shared:PAD\nshared:BOS\nshared:EOS\nshared:SP\nmand:<t1>\nmand:a\nmand:b\n"
        );
        assert_eq!(build_vocab(&[], TagMode::Tagged).unwrap().len(), 4);

        let both = [utt("a", Lang::Mand, &["ba"]), utt("b", Lang::Shdia, &["ba"])];
        assert_eq!(build_vocab(&both, TagMode::Tagged).unwrap().len(), 8);
        assert_eq!(build_vocab(&both, TagMode::Shared).unwrap().len(), 6);

        let bad = [utt("broken", Lang::Mand, &["xyz9"])];
        match build_vocab(&bad, TagMode::Tagged) {
            Err(Error::InUtterance { id, .. }) => assert_eq!(id, "broken"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(&[utt("u", Lang::Mand, &["ba1"])], TagMode::Tagged).unwrap();
        let seq = encode_transcript(&strs(&["ba1"]), Lang::Mand, &v, false).unwrap();
        assert_eq!(seq.ids, vec![1, 6, 5, 4, 2]);
        let seq = encode_transcript(&strs(&["ba1", "ba1"]), Lang::Mand, &v, true).unwrap();
        assert_eq!(seq.ids.iter().filter(|&&i| i == v.special_id(SP)).count(), 1);
        assert!(encode_transcript(&strs(&["xyz9"]), Lang::Mand, &v, false).is_err());
        match encode_transcript(&strs(&["ka2"]), Lang::Mand, &v, false) {
            Err(Error::OutOfVocabulary(s)) => assert_eq!(s, "mand:k, mand:<t2>"),
            other => panic!("{other:?}"),
        }
        // Same letters under the other language are out of vocabulary.
        assert!(encode_transcript(&strs(&["ba1"]), Lang::Shdia, &v, false).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = build_vocab(
            &[utt("a", Lang::Mand, &["ba1", "zhong4"]), utt("b", Lang::Shdia, &["nga"])],
            TagMode::Tagged,
        )
        .unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }
}
