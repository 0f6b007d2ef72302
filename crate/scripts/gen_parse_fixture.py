"""Regenerate crates/core/tests/data/parse_fixture.csv with RDKit.

Counts are heavy-atom graph statistics: atoms, bonds, ring bonds and
aromatic bonds, as perceived by RDKit after sanitization.

    python3 scripts/gen_parse_fixture.py
"""
import csv
import pathlib

from rdkit import Chem

ROOT = pathlib.Path(__file__).resolve().parents[1]

EXTRA = [
    "CCO",
    "c1ccccc1",
    "C1CC1",
    "C(Cl)[NH3+]",
    "C%10CCCCC%10",
    "[O-][N+](=O)c1ccccc1",
    "F/C=C/F",
    "C[C@@H](N)C(=O)O",
    "c1ccc2ccccc2c1",
    "c1ccccc1-c1ccccc1",
    "[Na+].[Cl-]",
    "C1CCC2(CC1)CCCC2",
    "OC(=O)C#N",
    "c1cc[nH]c1",
    "BrC(Br)Br",
]


def esol_sample(n):
    with open(ROOT / "data" / "esol.csv") as fh:
        rows = [r["smiles"] for r in csv.DictReader(fh)]
    stride = len(rows) // n
    return [rows[i * stride] for i in range(n)]


def main():
    smiles = EXTRA + esol_sample(35)
    out = ROOT / "crates" / "core" / "tests" / "data" / "parse_fixture.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", "atoms", "bonds", "ring_bonds", "aromatic_bonds"])
        for s in smiles:
            m = Chem.MolFromSmiles(s)
            bonds = list(m.GetBonds())
            w.writerow([
                s,
                m.GetNumAtoms(),
                len(bonds),
                sum(b.IsInRing() for b in bonds),
                sum(b.GetIsAromatic() for b in bonds),
            ])


if __name__ == "__main__":
    main()
