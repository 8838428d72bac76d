//! Lexical pass over a SMILES string shared by the tokenizer and the graph
//! reader.

use super::vocab::PERIODIC_TABLE;
use super::SmilesError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BondSymbol {
    Single,
    Double,
    Triple,
    Aromatic,
    /// `/` or `\`; a single bond carrying stereo that we drop.
    Directional,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Lexeme {
    Atom {
        /// Element symbol with its first letter uppercased.
        symbol: String,
        /// Byte range of the symbol letters in the source.
        span: (usize, usize),
        aromatic: bool,
    },
    Bond { symbol: BondSymbol, offset: usize },
    Ring { label: u32, offset: usize },
    Open(usize),
    Close(usize),
    Dot(usize),
}

pub(crate) fn lex(source: &str) -> Result<Vec<Lexeme>, SmilesError> {
    if source.is_empty() {
        return Err(SmilesError::EmptyInput { offset: 0 });
    }
    let bytes = source.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'[' => {
                let close = bytes[i + 1..]
                    .iter()
                    .position(|&b| b == b']' || b == b'[')
                    .map(|p| p + i + 1);
                let close = match close {
                    Some(j) if bytes[j] == b']' => j,
                    _ => return Err(SmilesError::UnbalancedBracket { offset: i }),
                };
                out.push(bracket_atom(source, i + 1, close)?);
                i = close + 1;
            }
            b']' => return Err(SmilesError::UnbalancedBracket { offset: i }),
            b'-' => {
                out.push(Lexeme::Bond { symbol: BondSymbol::Single, offset: i });
                i += 1;
            }
            b'=' => {
                out.push(Lexeme::Bond { symbol: BondSymbol::Double, offset: i });
                i += 1;
            }
            b'#' => {
                out.push(Lexeme::Bond { symbol: BondSymbol::Triple, offset: i });
                i += 1;
            }
            b':' => {
                out.push(Lexeme::Bond { symbol: BondSymbol::Aromatic, offset: i });
                i += 1;
            }
            b'/' | b'\\' => {
                out.push(Lexeme::Bond { symbol: BondSymbol::Directional, offset: i });
                i += 1;
            }
            b'0'..=b'9' => {
                out.push(Lexeme::Ring { label: u32::from(c - b'0'), offset: i });
                i += 1;
            }
            b'%' => {
                let digits = bytes.get(i + 1..i + 3);
                match digits {
                    Some(d) if d.iter().all(u8::is_ascii_digit) => {
                        let label = u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0');
                        out.push(Lexeme::Ring { label, offset: i });
                        i += 3;
                    }
                    _ => {
                        return Err(SmilesError::UnknownElement {
                            symbol: "%".into(),
                            offset: i,
                        })
                    }
                }
            }
            b'(' => {
                out.push(Lexeme::Open(i));
                i += 1;
            }
            b')' => {
                out.push(Lexeme::Close(i));
                i += 1;
            }
            b'.' => {
                out.push(Lexeme::Dot(i));
                i += 1;
            }
            _ => {
                let (symbol, len, aromatic) = organic_atom(bytes, i).ok_or_else(|| {
                    SmilesError::UnknownElement {
                        symbol: char_at(source, i),
                        offset: i,
                    }
                })?;
                out.push(Lexeme::Atom {
                    symbol,
                    span: (i, i + len),
                    aromatic,
                });
                i += len;
            }
        }
    }
    Ok(out)
}

fn char_at(source: &str, offset: usize) -> String {
    source
        .get(offset..)
        .and_then(|s| s.chars().next())
        .map(String::from)
        .unwrap_or_else(|| format!("\\x{:02x}", source.as_bytes()[offset]))
}

/// Unbracketed atom: organic subset with greedy `Cl`/`Br`, or an aromatic
/// lowercase symbol.
fn organic_atom(bytes: &[u8], i: usize) -> Option<(String, usize, bool)> {
    let next = bytes.get(i + 1).copied();
    match bytes[i] {
        b'C' if next == Some(b'l') => Some(("Cl".into(), 2, false)),
        b'B' if next == Some(b'r') => Some(("Br".into(), 2, false)),
        c @ (b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I') => {
            Some(((c as char).to_string(), 1, false))
        }
        b's' if next == Some(b'e') => Some(("Se".into(), 2, true)),
        c @ (b'b' | b'c' | b'n' | b'o' | b'p' | b's') => {
            Some(((c.to_ascii_uppercase() as char).to_string(), 1, true))
        }
        _ => None,
    }
}

/// Parses the element of `[...]` between `start` (after `[`) and `end` (the
/// `]`). Isotope, chirality, hydrogen count, charge and class are skipped.
fn bracket_atom(source: &str, start: usize, end: usize) -> Result<Lexeme, SmilesError> {
    let bytes = source.as_bytes();
    let mut i = start;
    while i < end && bytes[i].is_ascii_digit() {
        i += 1;
    }
    let unknown = |offset: usize| SmilesError::UnknownElement {
        symbol: if offset < end { char_at(source, offset) } else { "]".into() },
        offset,
    };
    if i >= end {
        return Err(unknown(i));
    }
    let c = bytes[i];
    let next = if i + 1 < end { Some(bytes[i + 1]) } else { None };
    let (symbol, len, aromatic) = if c.is_ascii_lowercase() {
        let two = next
            .filter(u8::is_ascii_lowercase)
            .map(|n| [c, n])
            .filter(|pair| matches!(pair, b"se" | b"as" | b"te"));
        match two {
            Some(pair) => (capitalize(&pair), 2, true),
            None if matches!(c, b'b' | b'c' | b'n' | b'o' | b'p' | b's') => {
                ((c.to_ascii_uppercase() as char).to_string(), 1, true)
            }
            None => return Err(unknown(i)),
        }
    } else if c.is_ascii_uppercase() {
        let two = next
            .filter(u8::is_ascii_lowercase)
            .map(|n| capitalize(&[c, n]))
            .filter(|s| PERIODIC_TABLE.contains(&s.as_str()));
        match two {
            Some(s) => (s, 2, false),
            None => {
                let s = (c as char).to_string();
                if !PERIODIC_TABLE.contains(&s.as_str()) {
                    return Err(unknown(i));
                }
                (s, 1, false)
            }
        }
    } else {
        return Err(unknown(i));
    };
    Ok(Lexeme::Atom {
        symbol,
        span: (i, i + len),
        aromatic,
    })
}

fn capitalize(letters: &[u8]) -> String {
    let mut s = String::with_capacity(letters.len());
    for (k, &b) in letters.iter().enumerate() {
        s.push(if k == 0 { b.to_ascii_uppercase() } else { b } as char);
    }
    s
}
