use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

const N_SPECIALS: usize = 3;

/// Lowercases, turns any whitespace into a single space and drops every
/// character outside `[a-z0-9' -]`. Idempotent.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars().flat_map(char::to_lowercase) {
        let ch = if ch.is_whitespace() { ' ' } else { ch };
        if matches!(ch, 'a'..='z' | '0'..='9' | '\'' | '-' | ' ') {
            if ch == ' ' && (out.is_empty() || out.ends_with(' ')) {
                continue;
            }
            out.push(ch);
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Normalized words of a caption.
pub fn words(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect()
}

/// Token/id bijection. Ids 0, 1, 2 are `<pad>`, `<bos>`, `<eos>`; corpus words
/// follow in descending frequency, ties broken alphabetically.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps words occurring strictly more than `min_occurrences` times.
    pub fn build<I, S>(captions: I, min_occurrences: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut n_captions = 0usize;
        for cap in captions {
            n_captions += 1;
            for w in words(cap.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if n_captions == 0 || counts.is_empty() {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(String, u64)> =
            counts.into_iter().filter(|&(_, c)| c > min_occurrences).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = [PAD, BOS, EOS].iter().map(|s| s.to_string()).collect();
        let mut cnts = vec![0; N_SPECIALS];
        for (w, c) in kept {
            tokens.push(w);
            cnts.push(c);
        }
        Self::from_parts(tokens, cnts)
    }

    /// Vocabulary from explicit words (specials are prepended), each count 0.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, BOS, EOS].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        let n = tokens.len();
        Self::from_parts(tokens, vec![0; n])
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if tokens.len() < N_SPECIALS || tokens[..N_SPECIALS] != [PAD, BOS, EOS] {
            return Err(Error::data("vocabulary must start with <pad>, <bos>, <eos>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::data(format!("invalid token {t:?}")));
            }
            if i >= N_SPECIALS && normalize(t) != *t {
                return Err(Error::data(format!("token {t:?} is not normalized")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            counts,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < N_SPECIALS
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[N_SPECIALS..].iter().map(String::as_str)
    }

    /// Ids of the caption's normalized words. Out-of-vocabulary words are
    /// dropped; no `<bos>`/`<eos>` framing is added.
    pub fn tokenize(&self, caption: &str) -> Vec<u32> {
        words(caption).iter().filter_map(|w| self.id(w)).collect()
    }

    /// Space-joined words, skipping `<pad>`/`<bos>` and stopping at `<eos>`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = Vec::new();
        for &id in ids {
            if id == EOS_ID {
                break;
            }
            if Self::is_special(id) {
                continue;
            }
            if let Some(t) = self.token(id) {
                out.push(t);
            }
        }
        out.join(" ")
    }

    /// `id<TAB>token<TAB>count` per line.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{i}\t{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let mut fields = line.split('\t');
            let (Some(id), Some(tok), Some(cnt), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(parse_err("expected `id<TAB>token<TAB>count`"));
            };
            let id: usize = id.parse().map_err(|_| parse_err("bad id"))?;
            if id != tokens.len() {
                return Err(parse_err("ids must be consecutive from 0"));
            }
            tokens.push(tok.to_string());
            counts.push(cnt.parse().map_err(|_| parse_err("bad count"))?);
        }
        Self::from_parts(tokens, counts)
    }
}

/// Ordered concept words: a duplicate-free subset of the vocabulary's
/// non-special words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptList {
    tokens: Vec<String>,
}

impl ConceptList {
    pub fn new(tokens: Vec<String>, vocab: &Vocabulary) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::data(format!("duplicate concept {t:?}")));
            }
            match vocab.id(t) {
                None => return Err(Error::data(format!("concept {t:?} is not in the vocabulary"))),
                Some(id) if Vocabulary::is_special(id) => {
                    return Err(Error::data(format!("special token {t:?} cannot be a concept")))
                }
                Some(_) => {}
            }
        }
        if tokens.is_empty() {
            return Err(Error::data("empty concept list"));
        }
        Ok(ConceptList { tokens })
    }

    /// Every non-special vocabulary word, in id order.
    pub fn all_words(vocab: &Vocabulary) -> Result<Self> {
        Self::new(vocab.words().map(str::to_string).collect(), vocab)
    }

    /// One concept per line; blank lines and `#` comments are skipped.
    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Self::new(tokens, vocab)
    }

    pub(crate) fn from_unchecked(tokens: Vec<String>) -> Self {
        ConceptList { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}
