//! Byte-pair style subword vocabulary with character fallback.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_FORMAT_VERSION: u32 = 1;
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pieces: Vec<String>,
    piece_ids: HashMap<String, u32>,
    max_piece_chars: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    format_version: u32,
    pieces: Vec<String>,
}

impl Vocab {
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < RESERVED.len() || pieces[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Schema {
                context: "vocab.pieces".into(),
                message: format!("first four pieces must be {RESERVED:?}"),
            });
        }
        let mut piece_ids = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || piece_ids.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Schema {
                    context: format!("vocab.pieces[{i}]"),
                    message: format!("empty or duplicate piece {p:?}"),
                });
            }
        }
        let max_piece_chars = pieces[4..].iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(Self { pieces, piece_ids, max_piece_chars })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.piece_ids.get(piece).copied()
    }

    /// Greedy longest-match segmentation of one token. Characters never
    /// seen in training map to `unk`.
    pub fn encode_token(&self, token: &str, out: &mut Vec<u32>) {
        let chars: Vec<(usize, char)> = token.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let mut matched = None;
            for len in (1..=self.max_piece_chars.min(chars.len() - i)).rev() {
                let end = chars.get(i + len).map_or(token.len(), |c| c.0);
                // reserved pieces are never matched from text
                if let Some(id) = self.id(&token[start..end]).filter(|&id| id > EOS) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            format_version: VOCAB_FORMAT_VERSION,
            pieces: self.pieces.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: format!("vocab line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if f.format_version != VOCAB_FORMAT_VERSION {
            return Err(Error::Schema {
                context: "vocab.format_version".into(),
                message: format!("unsupported version {}", f.format_version),
            });
        }
        Self::from_pieces(f.pieces)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Trains a vocabulary of exactly `target_size` pieces (or fewer when the
/// corpus runs out of pairs): reserved ids, every corpus character, then
/// the most frequent adjacent pair merged repeatedly. Ties go to the
/// lexicographically smallest pair.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in corpus {
        let t = t.as_ref();
        if !t.is_empty() {
            *word_counts.entry(t).or_default() += 1;
        }
    }
    let charset: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let minimum = charset.len() + RESERVED.len();
    if target_size < minimum {
        return Err(Error::TargetSizeTooSmall { target: target_size, minimum });
    }

    let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    pieces.extend(charset.iter().map(|c| c.to_string()));
    let mut known: BTreeSet<String> = pieces.iter().cloned().collect();
    let mut words: Vec<(Vec<String>, usize)> =
        word_counts.iter().map(|(w, &c)| (w.chars().map(String::from).collect(), c)).collect();

    while pieces.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        // max count, then smallest pair
        let Some(((a, b), _)) = pairs.iter().fold(None::<(&(&str, &str), usize)>, |best, (k, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((k, c)),
        }) else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{b}");
        for (syms, _) in &mut words {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged.clone()) {
            pieces.push(merged);
        }
    }
    Vocab::from_pieces(pieces)
}

/// `[bos] pieces… [eos]`, truncated to at most `v_max` ids (prefix kept).
pub fn encode_block<S: AsRef<str>>(tokens: &[S], vocab: &Vocab, v_max: usize) -> Vec<u32> {
    let mut ids = vec![BOS];
    for t in tokens {
        vocab.encode_token(t.as_ref(), &mut ids);
    }
    ids.push(EOS);
    ids.truncate(v_max);
    ids
}
