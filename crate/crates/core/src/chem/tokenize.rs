//! SMILES lexer and the fixed token vocabulary.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::Serialize;

use crate::error::{Error, Result};

/// Lexed SMILES string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub raw_tokens: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn detokenize(&self) -> String {
        self.raw_tokens.concat()
    }
}

const SPECIALS: [&str; 2] = ["<pad>", "<unk>"];

const PLAIN: &[&str] = &[
    "B", "C", "N", "O", "P", "S", "F", "I", "Cl", "Br", "Si", "Se", "b", "c", "n", "o", "p", "s",
    "*", "(", ")", "=", "#", "$", ":", "-", "/", "\\", ".", "0", "1", "2", "3", "4", "5", "6", "7",
    "8", "9",
];

const BRACKETS: &[&str] = &[
    "[nH]", "[NH+]", "[NH2+]", "[NH3+]", "[NH4+]", "[N+]", "[N-]", "[n+]", "[n-]", "[nH+]", "[O-]",
    "[O+]", "[OH-]", "[S-]", "[S+]", "[s+]", "[P+]", "[C-]", "[CH-]", "[C@H]", "[C@@H]", "[C@]",
    "[C@@]", "[S@]", "[S@@]", "[N@]", "[N@@]", "[N@+]", "[N@@+]", "[H]", "[2H]", "[13C]", "[Na+]",
    "[K+]", "[Li+]", "[Cl-]", "[Br-]", "[I-]", "[Ca+2]", "[Mg+2]", "[Zn+2]", "[Fe+2]", "[Fe+3]",
    "[Cu+2]", "[Al+3]", "[Si]", "[SiH]", "[SiH2]", "[Se]", "[se]", "[B-]", "[Pt]", "[Hg]", "[Sn]",
    "[As]", "[Co]", "[Mn]", "[Cr]", "[Ba+2]", "[Sb]", "[Ti]", "[Zr]", "[Ag]", "[Au]", "[Pb]",
];

/// Fixed vocabulary: specials, organic-subset atoms and syntax, `%10`..`%99`
/// ring labels and frequent bracket atoms. Anything else maps to `<unk>`.
#[derive(Debug)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
            entries.extend(PLAIN.iter().map(|s| s.to_string()));
            entries.extend((10..100).map(|n| format!("%{n}")));
            entries.extend(BRACKETS.iter().map(|s| s.to_string()));
            let index = entries.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
            Vocabulary { entries, index }
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }
}

fn malformed(smiles: &str, position: usize, reason: impl Into<String>) -> Error {
    Error::MalformedSmiles {
        smiles: smiles.to_string(),
        position,
        reason: reason.into(),
    }
}

/// Split a SMILES string into tokens. Bracket atoms, `%nn` ring labels and
/// the two-letter symbols `Cl`, `Br`, `Si`, `Se` are single tokens.
pub fn tokenize_smiles(smiles: &str) -> Result<TokenSequence> {
    if smiles.is_empty() {
        return Err(malformed(smiles, 0, "empty string"));
    }
    if !smiles.is_ascii() {
        return Err(malformed(smiles, 0, "non-ASCII input"));
    }
    let bytes = smiles.as_bytes();
    let vocab = Vocabulary::standard();
    let mut raw = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let len = match c {
            b'[' => match bytes[i + 1..].iter().position(|&b| b == b']' || b == b'[') {
                Some(off) if bytes[i + 1 + off] == b']' => {
                    if off == 0 {
                        return Err(malformed(smiles, i, "empty bracket atom"));
                    }
                    off + 2
                }
                Some(off) => return Err(malformed(smiles, i + 1 + off, "nested '['")),
                None => return Err(malformed(smiles, i, "unclosed '['")),
            },
            b']' => return Err(malformed(smiles, i, "unmatched ']'")),
            b'%' => {
                let ok = bytes.len() >= i + 3 && bytes[i + 1].is_ascii_digit() && bytes[i + 2].is_ascii_digit();
                if !ok {
                    return Err(malformed(smiles, i, "'%' must be followed by two digits"));
                }
                3
            }
            b'C' if bytes.get(i + 1) == Some(&b'l') => 2,
            b'B' if bytes.get(i + 1) == Some(&b'r') => 2,
            b'S' if matches!(bytes.get(i + 1), Some(b'i') | Some(b'e')) => 2,
            b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' | b'b' | b'c' | b'n' | b'o' | b'p'
            | b's' | b'*' | b'(' | b')' | b'=' | b'#' | b'$' | b':' | b'-' | b'/' | b'\\' | b'.' => 1,
            d if d.is_ascii_digit() => 1,
            _ => {
                return Err(malformed(
                    smiles,
                    i,
                    format!("illegal character {:?}", c as char),
                ))
            }
        };
        raw.push(smiles[i..i + len].to_string());
        i += len;
    }
    let tokens = raw.iter().map(|t| vocab.id(t)).collect();
    Ok(TokenSequence {
        tokens,
        raw_tokens: raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(s: &str) -> Vec<String> {
        tokenize_smiles(s).unwrap().raw_tokens
    }

    #[test]
    fn single_char_atoms() {
        let t = tokenize_smiles("CCO").unwrap();
        assert_eq!(t.raw_tokens, ["C", "C", "O"]);
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn aromatic_ring() {
        assert_eq!(raw("c1ccccc1"), ["c", "1", "c", "c", "c", "c", "c", "1"]);
    }

    #[test]
    fn halogen_and_bracket() {
        let t = tokenize_smiles("C(Cl)[NH4+]").unwrap();
        assert_eq!(t.raw_tokens, ["C", "(", "Cl", ")", "[NH4+]"]);
        assert_eq!(t.len(), 5);
        assert_ne!(t.tokens[2], Vocabulary::UNK);
    }

    #[test]
    fn ring_labels_and_stereo() {
        assert_eq!(raw("C%12CC%12"), ["C", "%12", "C", "C", "%12"]);
        assert_eq!(raw("F/C=C\\F"), ["F", "/", "C", "=", "C", "\\", "F"]);
        assert_eq!(raw("N[C@@H](C)C(=O)O")[1], "[C@@H]");
    }

    #[test]
    fn aromatic_after_sulfur_is_not_merged() {
        assert_eq!(raw("CSc1ccccc1")[1..3], ["S", "c"]);
        assert_eq!(raw("Cn1cccc1")[..2], ["C", "n"]);
    }

    #[test]
    fn unknown_bracket_maps_to_unk() {
        let t = tokenize_smiles("[Xe]").unwrap();
        assert_eq!(t.tokens, [Vocabulary::UNK]);
        assert_eq!(t.detokenize(), "[Xe]");
    }

    #[test]
    fn errors() {
        for bad in ["", "C[NH4+", "C]", "C[N[H]]", "CC?", "C%1", "Cé"] {
            assert!(
                matches!(tokenize_smiles(bad), Err(Error::MalformedSmiles { .. })),
                "{bad:?} should fail"
            );
        }
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = Vocabulary::standard();
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert_eq!(v.token(Vocabulary::PAD), Some("<pad>"));
    }
}
