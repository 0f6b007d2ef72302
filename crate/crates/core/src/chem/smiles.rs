//! SMILES → heavy-atom molecular graph.
//!
//! Implicit hydrogens are not materialised, stereo marks are accepted and
//! dropped. Ring membership is topological (a bond is in a ring iff it is
//! not a bridge); implicit bonds between two aromatic atoms are aromatic
//! only when they end up inside a ring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::elements::atomic_number;
use super::tokenize::tokenize_smiles;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn index(self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomFeature {
    /// Atomic number; 0 for the `*` wildcard.
    pub element: u8,
    pub degree: u8,
    pub formal_charge: i8,
    pub aromatic: bool,
    pub in_ring: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BondFeature {
    pub begin: usize,
    pub end: usize,
    pub order: BondOrder,
    pub in_ring: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub atoms: Vec<AtomFeature>,
    pub bonds: Vec<BondFeature>,
    /// `adjacency[v]` lists `(neighbour, bond index)` pairs.
    pub adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolecularGraph {
    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// Build from atoms and bonds, deriving adjacency, degrees and ring flags.
    pub fn from_parts(mut atoms: Vec<AtomFeature>, mut bonds: Vec<BondFeature>) -> Self {
        let mut adjacency = vec![Vec::new(); atoms.len()];
        for (i, b) in bonds.iter().enumerate() {
            adjacency[b.begin].push((b.end, i));
            adjacency[b.end].push((b.begin, i));
        }
        let bridges = find_bridges(atoms.len(), &adjacency);
        for (i, b) in bonds.iter_mut().enumerate() {
            b.in_ring = !bridges[i];
        }
        for (v, a) in atoms.iter_mut().enumerate() {
            a.degree = adjacency[v].len() as u8;
            a.in_ring = adjacency[v].iter().any(|&(_, bi)| bonds[bi].in_ring);
        }
        MolecularGraph {
            atoms,
            bonds,
            adjacency,
        }
    }

    /// Relabel atoms: new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.atoms.len());
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let atoms = perm.iter().map(|&old| self.atoms[old].clone()).collect();
        let bonds = self
            .bonds
            .iter()
            .map(|b| BondFeature {
                begin: inverse[b.begin],
                end: inverse[b.end],
                ..b.clone()
            })
            .collect();
        Self::from_parts(atoms, bonds)
    }

    /// Check structural invariants: endpoints valid, no self loops or duplicates,
    /// symmetric adjacency.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.atoms.is_empty() {
            return Err("graph has no atoms".into());
        }
        let n = self.atoms.len();
        let mut seen = std::collections::HashSet::new();
        for b in &self.bonds {
            if b.begin >= n || b.end >= n {
                return Err(format!("bond {}-{} out of range", b.begin, b.end));
            }
            if b.begin == b.end {
                return Err(format!("self loop on atom {}", b.begin));
            }
            if !seen.insert((b.begin.min(b.end), b.begin.max(b.end))) {
                return Err(format!("duplicate bond {}-{}", b.begin, b.end));
            }
        }
        for (v, nbrs) in self.adjacency.iter().enumerate() {
            for &(u, bi) in nbrs {
                if !self.adjacency[u].contains(&(v, bi)) {
                    return Err(format!("asymmetric adjacency {v}-{u}"));
                }
            }
        }
        Ok(())
    }
}

/// Bridge flags per bond (iterative Tarjan lowlink).
fn find_bridges(n: usize, adjacency: &[Vec<(usize, usize)>]) -> Vec<bool> {
    let n_bonds = adjacency.iter().map(Vec::len).sum::<usize>() / 2;
    let mut is_bridge = vec![false; n_bonds];
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut time = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // (vertex, bond used to enter, next neighbour position)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = time;
        low[root] = time;
        time += 1;
        while let Some(&mut (v, via, ref mut pos)) = stack.last_mut() {
            if *pos < adjacency[v].len() {
                let (u, bi) = adjacency[v][*pos];
                *pos += 1;
                if bi == via {
                    continue;
                }
                if disc[u] == usize::MAX {
                    disc[u] = time;
                    low[u] = time;
                    time += 1;
                    stack.push((u, bi, 0));
                } else {
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if let Some(&(parent, _, _)) = stack.last() {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > disc[parent] {
                        is_bridge[via] = true;
                    }
                }
            }
        }
    }
    is_bridge
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BondMark {
    Single,
    Double,
    Triple,
    Aromatic,
}

fn bond_mark(tok: &str) -> Option<BondMark> {
    match tok {
        "-" | "/" | "\\" => Some(BondMark::Single),
        "=" => Some(BondMark::Double),
        "#" | "$" => Some(BondMark::Triple),
        ":" => Some(BondMark::Aromatic),
        _ => None,
    }
}

struct BracketAtom {
    element: u8,
    aromatic: bool,
    charge: i8,
}

fn parse_bracket(body: &str) -> std::result::Result<BracketAtom, String> {
    let b = body.as_bytes();
    let mut i = 0;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let rest = &body[i..];
    let (element, aromatic, used) = if rest.starts_with('*') {
        (0, false, 1)
    } else {
        let aromatic_two = ["se", "as", "te"];
        if let Some(sym) = aromatic_two.iter().find(|s| rest.starts_with(**s)) {
            let cap = sym[..1].to_uppercase() + &sym[1..];
            (atomic_number(&cap).unwrap(), true, 2)
        } else {
            let first = rest.chars().next().ok_or("missing element symbol")?;
            if first.is_ascii_lowercase() {
                if !"bcnops".contains(first) {
                    return Err(format!("unknown aromatic symbol {first}"));
                }
                let cap = first.to_ascii_uppercase().to_string();
                (atomic_number(&cap).unwrap(), true, 1)
            } else if first.is_ascii_uppercase() {
                let two = rest.get(..2).filter(|s| s.as_bytes()[1].is_ascii_lowercase());
                match two.and_then(atomic_number) {
                    Some(z) => (z, false, 2),
                    None => match atomic_number(&rest[..1]) {
                        Some(z) => (z, false, 1),
                        None => return Err(format!("unknown element in [{body}]")),
                    },
                }
            } else {
                return Err(format!("bad bracket atom [{body}]"));
            }
        }
    };
    i += used;
    while i < b.len() && b[i] == b'@' {
        i += 1;
    }
    for class in ["TH", "AL", "SP", "TB", "OH"] {
        if body[i..].starts_with(class) {
            i += 2;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
        }
    }
    if i < b.len() && b[i] == b'H' {
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
    }
    let mut charge: i32 = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        let sign = if b[i] == b'+' { 1 } else { -1 };
        let mark = b[i];
        i += 1;
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i > start {
            charge = sign * body[start..i].parse::<i32>().map_err(|e| e.to_string())?;
        } else {
            charge = sign;
            while i < b.len() && b[i] == mark {
                charge += sign;
                i += 1;
            }
        }
    }
    if i < b.len() && b[i] == b':' {
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i != b.len() {
        return Err(format!("trailing characters in [{body}]"));
    }
    Ok(BracketAtom {
        element,
        aromatic,
        charge: charge.clamp(i8::MIN as i32, i8::MAX as i32) as i8,
    })
}

/// Parse a SMILES string into a heavy-atom graph.
pub fn parse_smiles(smiles: &str) -> Result<MolecularGraph> {
    let seq = tokenize_smiles(smiles)?;
    let err = |pos: usize, reason: String| Error::MalformedSmiles {
        smiles: smiles.to_string(),
        position: pos,
        reason,
    };

    let mut atoms: Vec<AtomFeature> = Vec::new();
    // (begin, end, explicit mark)
    let mut edges: Vec<(usize, usize, Option<BondMark>)> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<BondMark> = None;
    let mut branches: Vec<usize> = Vec::new();
    let mut rings: BTreeMap<String, (usize, Option<BondMark>, usize)> = BTreeMap::new();
    let mut pos = 0;

    let connect = |edges: &mut Vec<(usize, usize, Option<BondMark>)>,
                       a: usize,
                       b: usize,
                       mark: Option<BondMark>,
                       pos: usize|
     -> Result<()> {
        if a == b {
            return Err(err(pos, "ring closure onto the same atom".into()));
        }
        if edges
            .iter()
            .any(|&(x, y, _)| (x == a && y == b) || (x == b && y == a))
        {
            return Err(err(pos, format!("duplicate bond {a}-{b}")));
        }
        edges.push((a, b, mark));
        Ok(())
    };

    for tok in &seq.raw_tokens {
        let here = pos;
        pos += tok.len();
        let first = tok.as_bytes()[0];
        let atom = if first == b'[' {
            let a = parse_bracket(&tok[1..tok.len() - 1]).map_err(|r| err(here, r))?;
            Some(AtomFeature {
                element: a.element,
                degree: 0,
                formal_charge: a.charge,
                aromatic: a.aromatic,
                in_ring: false,
            })
        } else if first.is_ascii_alphabetic() || first == b'*' {
            let aromatic = first.is_ascii_lowercase();
            let symbol = if aromatic {
                tok.to_ascii_uppercase()
            } else {
                tok.clone()
            };
            let element = if tok == "*" {
                0
            } else {
                atomic_number(&symbol).ok_or_else(|| err(here, format!("unknown atom {tok}")))?
            };
            Some(AtomFeature {
                element,
                degree: 0,
                formal_charge: 0,
                aromatic,
                in_ring: false,
            })
        } else {
            None
        };

        if let Some(a) = atom {
            atoms.push(a);
            let idx = atoms.len() - 1;
            if let Some(p) = prev {
                connect(&mut edges, p, idx, pending.take(), here)?;
            } else if pending.is_some() {
                return Err(err(here, "bond symbol with no preceding atom".into()));
            }
            prev = Some(idx);
            continue;
        }

        match tok.as_str() {
            "(" => {
                let p = prev.ok_or_else(|| err(here, "branch opened before any atom".into()))?;
                if pending.is_some() {
                    return Err(err(here, "bond symbol before '('".into()));
                }
                branches.push(p);
            }
            ")" => {
                if pending.is_some() {
                    return Err(err(here, "dangling bond before ')'".into()));
                }
                prev = Some(branches.pop().ok_or_else(|| err(here, "unmatched ')'".into()))?);
            }
            "." => {
                if pending.is_some() {
                    return Err(err(here, "dangling bond before '.'".into()));
                }
                prev = None;
            }
            t if bond_mark(t).is_some() => {
                if pending.is_some() {
                    return Err(err(here, "two consecutive bond symbols".into()));
                }
                pending = bond_mark(t);
            }
            label => {
                // ring-bond digit or %nn
                let p = prev.ok_or_else(|| err(here, "ring label before any atom".into()))?;
                let mark = pending.take();
                match rings.remove(label) {
                    Some((other, open_mark, _)) => {
                        let m = match (open_mark, mark) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(err(here, format!("conflicting bonds on ring {label}")))
                            }
                            (a, b) => a.or(b),
                        };
                        connect(&mut edges, other, p, m, here)?;
                    }
                    None => {
                        rings.insert(label.to_string(), (p, mark, here));
                    }
                }
            }
        }
    }

    if let Some((label, &(_, _, at))) = rings.iter().next() {
        return Err(err(at, format!("unclosed ring {label}")));
    }
    if !branches.is_empty() {
        return Err(err(smiles.len(), "unclosed branch".into()));
    }
    if pending.is_some() {
        return Err(err(smiles.len(), "trailing bond symbol".into()));
    }
    if atoms.is_empty() {
        return Err(err(0, "no atoms".into()));
    }

    let bonds: Vec<BondFeature> = edges
        .iter()
        .map(|&(a, b, mark)| {
            let order = match mark {
                Some(BondMark::Single) => BondOrder::Single,
                Some(BondMark::Double) => BondOrder::Double,
                Some(BondMark::Triple) => BondOrder::Triple,
                Some(BondMark::Aromatic) => BondOrder::Aromatic,
                None if atoms[a].aromatic && atoms[b].aromatic => BondOrder::Aromatic,
                None => BondOrder::Single,
            };
            BondFeature {
                begin: a,
                end: b,
                order,
                in_ring: false,
            }
        })
        .collect();
    let mut graph = MolecularGraph::from_parts(atoms, bonds);
    for (b, (_, _, mark)) in graph.bonds.iter_mut().zip(&edges) {
        if mark.is_none() && b.order == BondOrder::Aromatic && !b.in_ring {
            b.order = BondOrder::Single;
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ethanol() {
        let g = parse_smiles("CCO").unwrap();
        assert_eq!(g.num_atoms(), 3);
        assert_eq!(g.num_bonds(), 2);
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Single && !b.in_ring));
        assert_eq!(g.atoms[1].degree, 2);
    }

    #[test]
    fn benzene_is_aromatic() {
        let g = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(g.num_atoms(), 6);
        assert_eq!(g.num_bonds(), 6);
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Aromatic && b.in_ring));
        assert!(g.atoms.iter().all(|a| a.aromatic && a.in_ring));
    }

    #[test]
    fn cyclopropane_ring_flags() {
        let g = parse_smiles("C1CC1").unwrap();
        assert_eq!((g.num_atoms(), g.num_bonds()), (3, 3));
        assert!(g.bonds.iter().all(|b| b.in_ring));
    }

    #[test]
    fn biaryl_link_is_single() {
        let g = parse_smiles("c1ccccc1c1ccccc1").unwrap();
        let link: Vec<_> = g.bonds.iter().filter(|b| !b.in_ring).collect();
        assert_eq!(link.len(), 1);
        assert_eq!(link[0].order, BondOrder::Single);
    }

    #[test]
    fn bracket_charges() {
        let g = parse_smiles("[O-][N+](=O)C").unwrap();
        assert_eq!(g.atoms[0].formal_charge, -1);
        assert_eq!(g.atoms[1].formal_charge, 1);
        assert_eq!(g.bonds[1].order, BondOrder::Double);
        let g = parse_smiles("[Ca++].[O--]").unwrap();
        assert_eq!(g.atoms[0].formal_charge, 2);
        assert_eq!(g.atoms[1].formal_charge, -2);
        let g = parse_smiles("[NH4+]").unwrap();
        assert_eq!((g.atoms[0].element, g.atoms[0].formal_charge), (7, 1));
        let g = parse_smiles("[13CH3][C@@H](Cl)[se]1cccc1").unwrap();
        assert_eq!(g.atoms[0].element, 6);
        assert_eq!(g.atoms[3].element, 34);
        assert!(g.atoms[3].aromatic);
    }

    #[test]
    fn stereo_is_ignored() {
        let a = parse_smiles("F/C=C/F").unwrap();
        let b = parse_smiles("FC=CF").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ring_bond_order_on_either_side() {
        let a = parse_smiles("C=1CCC1").unwrap();
        let b = parse_smiles("C1CCC=1").unwrap();
        assert_eq!(a.bonds.last().unwrap().order, BondOrder::Double);
        assert_eq!(b.bonds.last().unwrap().order, BondOrder::Double);
    }

    #[test]
    fn malformed_inputs() {
        for bad in ["C1CC", "C(C", "C)C", "C==C", "(C)", "1CC", "C1C1", "C=", "C1CC=", "CC.=C", "[Qq]"] {
            assert!(parse_smiles(bad).is_err(), "{bad:?} should fail");
        }
    }

    #[test]
    fn graph_invariants_hold() {
        for s in ["CC(C)(C)c1ccc(O)cc1", "C1CCC2(CC1)CCCC2", "[Na+].[Cl-]", "OC(=O)C#N"] {
            parse_smiles(s).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn permutation_preserves_counts() {
        let g = parse_smiles("c1ccccc1O").unwrap();
        let p = g.permuted(&[6, 5, 4, 3, 2, 1, 0]);
        p.validate().unwrap();
        assert_eq!(p.num_bonds(), 7);
        assert_eq!(p.atoms[0].element, 8);
        assert_eq!(p.atoms[0].degree, 1);
    }
}
