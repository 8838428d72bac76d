use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::lexer::{self, BondSymbol, Lexeme};
use super::{SmilesError, TokenizedSmiles};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn value(self) -> f64 {
        match self {
            Self::Single => 1.0,
            Self::Double => 2.0,
            Self::Triple => 3.0,
            Self::Aromatic => 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub order: BondOrder,
}

/// Heavy-atom graph. Nodes are atoms in tokenization order; every edge has
/// `u < v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolecularGraph {
    node_elements: Vec<String>,
    edges: Vec<Edge>,
}

impl MolecularGraph {
    pub fn node_count(&self) -> usize {
        self.node_elements.len()
    }

    pub fn node_elements(&self) -> &[String] {
        &self.node_elements
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.u == node || e.v == node).count()
    }

    /// True when any bond incident to `node` is aromatic.
    pub fn touches_aromatic(&self, node: usize) -> bool {
        self.edges
            .iter()
            .any(|e| (e.u == node || e.v == node) && e.order == BondOrder::Aromatic)
    }

    fn has_edge(&self, a: usize, b: usize) -> bool {
        let (u, v) = (a.min(b), a.max(b));
        self.edges.iter().any(|e| e.u == u && e.v == v)
    }
}

/// Map from 0-based atom-token position to graph node index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomGraphMap {
    pi: Vec<usize>,
}

impl AtomGraphMap {
    pub fn identity(len: usize) -> Self {
        Self { pi: (0..len).collect() }
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Node index of the atom at 0-based position `t`.
    pub fn node(&self, t: usize) -> usize {
        self.pi[t]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.pi
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Heavy(usize),
    Hydrogen,
}

struct OpenRing {
    slot: Slot,
    bond: Option<BondSymbol>,
    offset: usize,
}

/// Reads the heavy-atom graph of the string `tokenized` came from.
pub fn parse_graph(
    tokenized: &TokenizedSmiles,
) -> Result<(MolecularGraph, AtomGraphMap), SmilesError> {
    let mut graph = MolecularGraph {
        node_elements: Vec::with_capacity(tokenized.len()),
        edges: Vec::new(),
    };
    let mut aromatic = Vec::with_capacity(tokenized.len());
    let mut prev: Option<Slot> = None;
    let mut pending: Option<BondSymbol> = None;
    let mut branches: Vec<(Option<Slot>, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, OpenRing> = BTreeMap::new();

    let order = |bond: Option<BondSymbol>, a: usize, b: usize, aromatic: &[bool]| match bond {
        Some(BondSymbol::Double) => BondOrder::Double,
        Some(BondSymbol::Triple) => BondOrder::Triple,
        Some(BondSymbol::Aromatic) => BondOrder::Aromatic,
        Some(BondSymbol::Single | BondSymbol::Directional) => BondOrder::Single,
        None if aromatic[a] && aromatic[b] => BondOrder::Aromatic,
        None => BondOrder::Single,
    };

    for lexeme in lexer::lex(tokenized.source())? {
        match lexeme {
            Lexeme::Atom { symbol, aromatic: arom, .. } => {
                let slot = if symbol == "H" {
                    Slot::Hydrogen
                } else {
                    let n = graph.node_elements.len();
                    graph.node_elements.push(symbol);
                    aromatic.push(arom);
                    if let Some(Slot::Heavy(p)) = prev {
                        let o = order(pending, p, n, &aromatic);
                        graph.edges.push(Edge { u: p, v: n, order: o });
                    }
                    Slot::Heavy(n)
                };
                prev = Some(slot);
                pending = None;
            }
            Lexeme::Bond { symbol, .. } => pending = Some(symbol),
            Lexeme::Ring { label, offset } => {
                let Some(here) = prev else {
                    return Err(SmilesError::UnmatchedRingClosure { label, offset });
                };
                match rings.remove(&label) {
                    Some(open) => {
                        let bond = pending.or(open.bond);
                        if let (Slot::Heavy(a), Slot::Heavy(b)) = (open.slot, here) {
                            if a == b || graph.has_edge(a, b) {
                                return Err(SmilesError::DuplicateBond { label, offset });
                            }
                            let o = order(bond, a, b, &aromatic);
                            graph.edges.push(Edge { u: a.min(b), v: a.max(b), order: o });
                        }
                    }
                    None => {
                        rings.insert(label, OpenRing { slot: here, bond: pending, offset });
                    }
                }
                pending = None;
            }
            Lexeme::Open(offset) => {
                if prev.is_none() {
                    return Err(SmilesError::DanglingBranch { offset });
                }
                branches.push((prev, offset));
            }
            Lexeme::Close(offset) => {
                let (restored, _) = branches
                    .pop()
                    .ok_or(SmilesError::DanglingBranch { offset })?;
                prev = restored;
                pending = None;
            }
            Lexeme::Dot(_) => {
                prev = None;
                pending = None;
            }
        }
    }
    if let Some(&(_, offset)) = branches.last() {
        return Err(SmilesError::DanglingBranch { offset });
    }
    if let Some((&label, open)) = rings.iter().next() {
        return Err(SmilesError::UnmatchedRingClosure { label, offset: open.offset });
    }
    debug_assert_eq!(graph.node_count(), tokenized.len());
    let map = AtomGraphMap::identity(graph.node_count());
    Ok((graph, map))
}

#[cfg(test)]
mod tests {
    use super::super::tokenize_atoms;
    use super::*;

    fn edges(s: &str) -> Vec<(usize, usize, f64)> {
        let t = tokenize_atoms(s).unwrap();
        let (g, map) = parse_graph(&t).unwrap();
        assert_eq!(g.node_count(), t.len());
        assert_eq!(map.as_slice(), (0..t.len()).collect::<Vec<_>>().as_slice());
        let mut e: Vec<_> = g.edges().iter().map(|e| (e.u, e.v, e.order.value())).collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e
    }

    fn err(s: &str) -> SmilesError {
        parse_graph(&tokenize_atoms(s).unwrap()).unwrap_err()
    }

    #[test]
    fn cyclopropane() {
        assert_eq!(edges("C1CC1"), [(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)]);
    }

    #[test]
    fn acetic_acid_branch() {
        assert_eq!(edges("CC(=O)O"), [(0, 1, 1.0), (1, 2, 2.0), (1, 3, 1.0)]);
    }

    #[test]
    fn salt_has_no_bonds() {
        let t = tokenize_atoms("[Na+].[Cl-]").unwrap();
        let (g, _) = parse_graph(&t).unwrap();
        assert_eq!(g.node_count(), 2);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn benzene_is_aromatic_ring() {
        let e = edges("c1ccccc1");
        assert_eq!(e.len(), 6);
        assert!(e.iter().all(|&(_, _, o)| o == 1.5));
        // explicit single bond between aromatic atoms stays single
        assert_eq!(edges("c1ccccc1-c1ccccc1").iter().filter(|e| e.2 == 1.0).count(), 1);
    }

    #[test]
    fn ring_bond_orders() {
        assert!(edges("C=1CCC1").contains(&(0, 3, 2.0)));
        assert!(edges("C1CCC=1").contains(&(0, 3, 2.0)));
        assert_eq!(edges("C%10CC%10").len(), 3);
        // a label can be reused once closed
        assert_eq!(edges("C1CC1C1CC1").len(), 7);
    }

    #[test]
    fn hydrogens_are_transparent() {
        assert_eq!(edges("[H]C([H])O"), [(0, 1, 1.0)]);
    }

    #[test]
    fn structural_errors() {
        assert_eq!(err("C1CC"), SmilesError::UnmatchedRingClosure { label: 1, offset: 1 });
        assert_eq!(err("C(C"), SmilesError::DanglingBranch { offset: 1 });
        assert_eq!(err("CC)C"), SmilesError::DanglingBranch { offset: 2 });
        assert_eq!(err("(C)C"), SmilesError::DanglingBranch { offset: 0 });
        assert!(matches!(err("C12CC12"), SmilesError::DuplicateBond { label: 2, .. }));
        assert!(matches!(err("C11"), SmilesError::DuplicateBond { .. }));
    }

    #[test]
    fn parse_is_deterministic() {
        let t = tokenize_atoms("CC(=O)OC1=CC=CC=C1C(=O)O").unwrap();
        let a = parse_graph(&t).unwrap();
        let b = parse_graph(&t).unwrap();
        assert_eq!(a, b);
        for e in a.0.edges() {
            assert!(e.u < e.v && e.v < a.0.node_count());
        }
    }
}
