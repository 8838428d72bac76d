//! SMILES to atom sequences and heavy-atom graphs.
//!
//! The token sequence is atom-only: bonds, ring labels, branches and dots
//! are consumed but not emitted. Aromatic lowercase atoms are emitted as
//! their uppercase element; aromaticity survives only as bond metadata in
//! the graph. Explicit hydrogen atoms (`[H]`, `[2H]`) are never emitted.

mod graph;
mod lexer;
mod vocab;

use std::fs;
use std::path::Path;

use thiserror::Error;

pub use graph::{parse_graph, AtomGraphMap, BondOrder, Edge, MolecularGraph};
pub use vocab::{Vocabulary, BOS, EOS, PAD};

use lexer::Lexeme;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty SMILES (offset {offset})")]
    EmptyInput { offset: usize },
    #[error("unknown element `{symbol}` at offset {offset}")]
    UnknownElement { symbol: String, offset: usize },
    #[error("unbalanced bracket at offset {offset}")]
    UnbalancedBracket { offset: usize },
    #[error("unmatched ring closure {label} at offset {offset}")]
    UnmatchedRingClosure { label: u32, offset: usize },
    #[error("dangling branch at offset {offset}")]
    DanglingBranch { offset: usize },
    #[error("ring closure {label} at offset {offset} duplicates an existing bond")]
    DuplicateBond { label: u32, offset: usize },
}

impl SmilesError {
    pub fn offset(&self) -> usize {
        match *self {
            Self::EmptyInput { offset }
            | Self::UnknownElement { offset, .. }
            | Self::UnbalancedBracket { offset }
            | Self::UnmatchedRingClosure { offset, .. }
            | Self::DanglingBranch { offset }
            | Self::DuplicateBond { offset, .. } => offset,
        }
    }
}

/// Atoms of a SMILES string in left-to-right order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSmiles {
    atoms: Vec<String>,
    spans: Vec<(usize, usize)>,
    source: String,
}

impl TokenizedSmiles {
    pub fn atoms(&self) -> &[String] {
        &self.atoms
    }

    /// Byte range of each atom's element letters in [`Self::source`].
    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Number of atoms `T` (always at least one).
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Extracts the atom sequence of `smiles`.
pub fn tokenize_atoms(smiles: &str) -> Result<TokenizedSmiles, SmilesError> {
    tokenize_with(smiles, &Vocabulary::new())
}

pub(crate) fn tokenize_with(
    smiles: &str,
    vocab: &Vocabulary,
) -> Result<TokenizedSmiles, SmilesError> {
    let mut atoms = Vec::new();
    let mut spans = Vec::new();
    for lexeme in lexer::lex(smiles)? {
        if let Lexeme::Atom { symbol, span, .. } = lexeme {
            if symbol == "H" {
                continue;
            }
            if !vocab.is_element(&symbol) {
                return Err(SmilesError::UnknownElement {
                    symbol,
                    offset: span.0,
                });
            }
            atoms.push(symbol);
            spans.push(span);
        }
    }
    if atoms.is_empty() {
        return Err(SmilesError::EmptyInput { offset: 0 });
    }
    Ok(TokenizedSmiles {
        atoms,
        spans,
        source: smiles.to_owned(),
    })
}

/// Maps atoms to vocabulary ids, optionally wrapped in `<bos>`/`<eos>`.
pub fn encode_ids(
    tokenized: &TokenizedSmiles,
    vocab: &Vocabulary,
    add_bos: bool,
    add_eos: bool,
) -> Vec<u32> {
    let mut ids = Vec::with_capacity(tokenized.len() + 2);
    if add_bos {
        ids.push(vocab.bos_id());
    }
    // Tokenization already rejected anything outside the vocabulary.
    ids.extend(
        tokenized
            .atoms()
            .iter()
            .map(|a| vocab.id(a).expect("atom outside vocabulary")),
    );
    if add_eos {
        ids.push(vocab.eos_id());
    }
    ids
}

/// One SMILES line of a corpus file with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLine {
    pub line: usize,
    pub smiles: String,
}

/// Splits corpus text into SMILES lines, skipping blanks and `#` comments.
pub fn corpus_lines(text: &str) -> Vec<CorpusLine> {
    text.lines()
        .enumerate()
        .filter_map(|(i, raw)| {
            let s = raw.trim();
            (!s.is_empty() && !s.starts_with('#')).then(|| CorpusLine {
                line: i + 1,
                smiles: s.to_owned(),
            })
        })
        .collect()
}

pub fn read_corpus(path: impl AsRef<Path>) -> std::io::Result<Vec<CorpusLine>> {
    Ok(corpus_lines(&fs::read_to_string(path)?))
}

/// A SMILES error tagged with the corpus line it came from.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {source}")]
pub struct CorpusError {
    pub line: usize,
    #[source]
    pub source: SmilesError,
}

/// Tokenizes every corpus line, failing on the first bad line.
pub fn tokenize_corpus(lines: &[CorpusLine]) -> Result<Vec<TokenizedSmiles>, CorpusError> {
    lines
        .iter()
        .map(|l| {
            tokenize_atoms(&l.smiles).map_err(|source| CorpusError {
                line: l.line,
                source,
            })
        })
        .collect()
}
