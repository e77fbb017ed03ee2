"""Seeded synthetic SMILES corpus generator.

Molecules are assembled from a scaffold (ring or chain) plus a handful
of substituent units drawn from a fixed menu, respecting valence at
every attachment. Output lines come straight from write_smiles, so the
corpus is in writer-canonical form and parses by construction. Units are
weighted so that roughly half of all molecules carry at least one
hydroxyl, carboxyl or primary amine.
"""

from __future__ import annotations

import numpy as np

from moledit.molgraph import AROMATIC, DOUBLE, SINGLE, TRIPLE, Atom, Bond, MolGraph, _mark_rings, write_smiles

_CAPACITY = {"C": 4.0, "N": 3.0, "O": 2.0, "S": 2.0, "F": 1.0, "Cl": 1.0, "Br": 1.0}


class _Builder:
    def __init__(self):
        self.atoms: list[Atom] = []
        self.bonds: list[tuple[int, int, int]] = []
        self.slack: list[float] = []

    def add_atom(self, element: str, aromatic: bool = False, charge: int = 0) -> int:
        self.atoms.append(Atom(element, aromatic=aromatic, formal_charge=charge))
        self.slack.append(_CAPACITY.get(element, 4.0) + max(0, charge))
        return len(self.atoms) - 1

    def add_bond(self, a: int, b: int, order: int):
        cost = 1.5 if order == AROMATIC else float(order)
        self.bonds.append((a, b, order))
        self.slack[a] -= cost
        self.slack[b] -= cost

    def open_carbon_sites(self) -> list[int]:
        # Substituents hang off carbons only; keeps O-O / O-S oddities out.
        return [
            i
            for i, s in enumerate(self.slack)
            if s >= 1.0 and self.atoms[i].element == "C"
        ]

    def graph(self) -> MolGraph:
        atoms = tuple(self.atoms)
        bonds = tuple(Bond(a, b, o) for a, b, o in self.bonds)
        return MolGraph(atoms, _mark_rings(atoms, bonds))


def _chain(b: _Builder, site: int | None, rng: np.random.Generator) -> int:
    length = int(rng.integers(1, 4))
    prev = site
    first = -1
    for _ in range(length):
        atom = b.add_atom("C")
        if first < 0:
            first = atom
        if prev is not None:
            b.add_bond(prev, atom, SINGLE)
        prev = atom
    return first


def _ring(b: _Builder, site: int | None, rng: np.random.Generator) -> int:
    kind = rng.choice(["benzene", "benzene", "pyridine", "cyclohexane", "cyclopentane"])
    if kind in ("benzene", "pyridine"):
        members = [b.add_atom("C", aromatic=True) for _ in range(6)]
        if kind == "pyridine":
            # The substituted position stays carbon so the link is always C-x.
            swap = members[1 + int(rng.integers(5))]
            b.atoms[swap] = Atom("N", aromatic=True)
            b.slack[swap] = _CAPACITY["N"]
        order = AROMATIC
    else:
        size = 6 if kind == "cyclohexane" else 5
        members = [b.add_atom("C") for _ in range(size)]
        order = SINGLE
    for i, atom in enumerate(members):
        b.add_bond(atom, members[(i + 1) % len(members)], order)
    if site is not None:
        b.add_bond(site, members[0], SINGLE)
    return members[0]


def _hydroxyl(b: _Builder, site: int, rng) -> None:
    b.add_bond(site, b.add_atom("O"), SINGLE)


def _amine(b: _Builder, site: int, rng) -> None:
    b.add_bond(site, b.add_atom("N"), SINGLE)


def _carboxyl(b: _Builder, site: int, rng) -> None:
    c = b.add_atom("C")
    b.add_bond(site, c, SINGLE)
    b.add_bond(c, b.add_atom("O"), DOUBLE)
    b.add_bond(c, b.add_atom("O"), SINGLE)


def _amide(b: _Builder, site: int, rng) -> None:
    c = b.add_atom("C")
    b.add_bond(site, c, SINGLE)
    b.add_bond(c, b.add_atom("O"), DOUBLE)
    b.add_bond(c, b.add_atom("N"), SINGLE)


def _acetyl(b: _Builder, site: int, rng) -> None:
    c = b.add_atom("C")
    b.add_bond(site, c, SINGLE)
    b.add_bond(c, b.add_atom("O"), DOUBLE)
    b.add_bond(c, b.add_atom("C"), SINGLE)


def _ether(b: _Builder, site: int, rng) -> None:
    o = b.add_atom("O")
    b.add_bond(site, o, SINGLE)
    b.add_bond(o, b.add_atom("C"), SINGLE)


def _thioether(b: _Builder, site: int, rng) -> None:
    s = b.add_atom("S")
    b.add_bond(site, s, SINGLE)
    b.add_bond(s, b.add_atom("C"), SINGLE)


def _nitrile(b: _Builder, site: int, rng) -> None:
    c = b.add_atom("C")
    b.add_bond(site, c, SINGLE)
    b.add_bond(c, b.add_atom("N"), TRIPLE)


def _halogen(b: _Builder, site: int, rng) -> None:
    b.add_bond(site, b.add_atom(str(rng.choice(["F", "Cl", "Cl", "Br"]))), SINGLE)


def _nitro(b: _Builder, site: int, rng) -> None:
    n = b.add_atom("N", charge=1)
    b.add_bond(site, n, SINGLE)
    b.add_bond(n, b.add_atom("O"), DOUBLE)
    b.add_bond(n, b.add_atom("O", charge=-1), SINGLE)


_UNITS = [
    (_chain, 0.20),
    (_ring, 0.10),
    (_hydroxyl, 0.16),
    (_amine, 0.10),
    (_carboxyl, 0.10),
    (_amide, 0.06),
    (_acetyl, 0.06),
    (_ether, 0.06),
    (_thioether, 0.04),
    (_nitrile, 0.04),
    (_halogen, 0.06),
    (_nitro, 0.02),
]
_UNIT_FNS = [fn for fn, _ in _UNITS]
_UNIT_P = np.array([p for _, p in _UNITS])
_UNIT_P = _UNIT_P / _UNIT_P.sum()

MAX_ATOMS = 26


def random_molecule(rng: np.random.Generator) -> MolGraph:
    """One random molecule with 2..MAX_ATOMS heavy atoms."""
    b = _Builder()
    if rng.random() < 0.55:
        _ring(b, None, rng)
    else:
        _chain(b, None, rng)
        if len(b.atoms) == 1:  # a lone carbon fragments into nothing useful
            b.add_bond(0, b.add_atom("C"), SINGLE)

    n_units = int(rng.integers(1, 5))
    for _ in range(n_units):
        fn = _UNIT_FNS[int(rng.choice(len(_UNIT_FNS), p=_UNIT_P))]
        sites = b.open_carbon_sites()
        if not sites or len(b.atoms) >= MAX_ATOMS:
            break
        site = int(sites[int(rng.integers(len(sites)))])
        fn(b, site, rng)
    return b.graph()


def _random_line(rng: np.random.Generator, dimer_prob: float) -> str:
    graph = random_molecule(rng)
    if rng.random() < dimer_prob:
        other = random_molecule(rng)
        offset = graph.n_atoms
        atoms = graph.atoms + other.atoms
        bonds = graph.bonds + tuple(
            Bond(bd.a + offset, bd.b + offset, bd.order) for bd in other.bonds
        )
        graph = MolGraph(atoms, _mark_rings(atoms, bonds))
    return write_smiles(graph)


def generate_pool(size: int, seed: int = 0, dimer_prob: float = 0.02) -> list[str]:
    """``size`` distinct molecules whose token sequences are pairwise at
    least 3 edits apart, so no single masked token is ambiguous between
    pool members."""
    from moledit.editops import edit_distance
    from moledit.tokenizer import tokenize

    rng = np.random.default_rng(seed)
    pool: list[str] = []
    pool_toks: list[tuple[str, ...]] = []
    attempts = 0
    while len(pool) < size:
        attempts += 1
        if attempts > 80 * size:
            raise RuntimeError("pool generation stalled; relax the distance filter")
        line = _random_line(rng, dimer_prob)
        toks = tokenize(line).tokens
        close = any(
            abs(len(toks) - len(other)) <= 2 and edit_distance(toks, other) <= 2
            for other in pool_toks
        )
        if close:
            continue
        pool.append(line)
        pool_toks.append(toks)
    return pool


def generate_corpus(
    n: int, seed: int = 0, dimer_prob: float = 0.02, pool_size: int | None = None
) -> list[str]:
    """``n`` writer-canonical SMILES lines, deterministic in the seed.

    With ``pool_size`` the lines are drawn (with repetition) from that
    many distinct molecules, mimicking the heavy motif reuse of real
    molecular corpora; otherwise every line is sampled independently.
    """
    rng = np.random.default_rng(seed)
    if pool_size is None:
        return [_random_line(rng, dimer_prob) for _ in range(n)]
    pool = generate_pool(pool_size, seed=seed + 1, dimer_prob=dimer_prob)
    return [pool[int(i)] for i in rng.integers(len(pool), size=n)]
