use std::collections::HashMap;

/// Padding token.
pub const PAD: &str = "<pad>";
/// Beginning-of-sequence token.
pub const BOS: &str = "<bos>";
/// End-of-sequence token.
pub const EOS: &str = "<eos>";

/// Specials first, then the elements grouped by chemical category.
const SYMBOLS: [&str; 39] = [
    PAD, BOS, EOS, // specials
    "F", "Cl", "Br", "I", // halogens
    "He", "Ne", "Ar", "Kr", "Xe", // noble gases
    "Li", "Na", // alkali metals
    "Mg", "Ca", // alkaline earth metals
    "Fe", "Co", "Ni", "Cu", "Zn", "Ag", "Au", "Pd", "Pt", "Mn", "Hg", // transition metals
    "Al", "Sn", // post-transition metals
    "B", "Si", "Sb", "Te", // metalloids
    "C", "N", "O", "P", "S", "Se", // other nonmetals
];

/// Every element symbol, used to decide how many letters a bracket atom's
/// symbol spans before checking vocabulary membership.
pub(crate) const PERIODIC_TABLE: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// The 39-token atom vocabulary of the next-atom predictor.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<&'static str>,
    index: HashMap<&'static str, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens = SYMBOLS.to_vec();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, s)| (*s, i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn bos_id(&self) -> u32 {
        1
    }

    pub fn eos_id(&self) -> u32 {
        2
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&'static str> {
        self.tokens.get(id as usize).copied()
    }

    /// True for element tokens (not specials).
    pub fn is_element(&self, symbol: &str) -> bool {
        self.id(symbol).is_some_and(|id| id > 2)
    }

    pub fn tokens(&self) -> &[&'static str] {
        &self.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::new();
        assert_eq!(v.len(), 39);
        assert_eq!(v.symbol(v.pad_id()), Some(PAD));
        assert_eq!(v.symbol(v.bos_id()), Some(BOS));
        assert_eq!(v.symbol(v.eos_id()), Some(EOS));
        for (i, s) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
        }
        assert!(v.is_element("Cl"));
        assert!(!v.is_element(BOS));
        assert!(!v.is_element("H"));
    }

    #[test]
    fn elements_are_real_elements() {
        let v = Vocabulary::new();
        for s in &v.tokens()[3..] {
            assert!(PERIODIC_TABLE.contains(s), "{s}");
        }
    }
}
