"""Rule-based fragmentation and seeded fragment dropping.

Bonds are cut when they are acyclic single bonds and either connect a
ring to a side chain (R1) or form a carbon-heteroatom link with N, O or
S (R2). Cuts apply greedily in bond-index order and are skipped when
they would strand a fragment below two heavy atoms, so fragmentation is
deterministic. Corruption then drops whole fragments with a seeded
Bernoulli draw, always retaining at least ``min_retained`` of them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from moledit.molgraph import (
    SINGLE,
    Bond,
    MolGraph,
    induced_subgraph,
    parse_smiles,
    write_smiles,
)

HETEROATOMS = frozenset({"N", "O", "S"})


@dataclass(frozen=True)
class Fragment:
    atoms: tuple[int, ...]
    attachment_bonds: tuple[int, ...]


@dataclass(frozen=True)
class FragmentSet:
    parent: MolGraph
    fragments: tuple[Fragment, ...]
    cut_bonds: tuple[int, ...]


@dataclass(frozen=True)
class CorruptionConfig:
    drop_ratio: float = 0.15
    min_retained: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_ratio <= 1.0:
            raise ValueError(f"drop_ratio {self.drop_ratio} outside [0, 1]")
        if self.min_retained < 1:
            raise ValueError("min_retained must be at least 1")


@dataclass(frozen=True)
class CorruptionRecord:
    original: MolGraph
    original_smiles: str
    corrupted: MolGraph
    corrupted_smiles: str
    dropped: tuple[int, ...]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "orig": self.original_smiles,
                "corrupt": self.corrupted_smiles,
                "dropped": list(self.dropped),
                "seed": self.seed,
            }
        )


def _ring_atoms(graph: MolGraph) -> set[int]:
    atoms: set[int] = set()
    for bond in graph.bonds:
        if bond.in_ring:
            atoms.add(bond.a)
            atoms.add(bond.b)
    return atoms


def cut_eligible_bonds(graph: MolGraph) -> list[int]:
    """Indices of cuttable bonds, ascending.

    A bond qualifies when it is a non-ring single bond and either R1
    (exactly one endpoint sits in a ring) or R2 (a carbon bound to N, O
    or S) applies.
    """
    ring_atoms = _ring_atoms(graph)
    eligible = []
    for idx, bond in enumerate(graph.bonds):
        if bond.order != SINGLE or bond.in_ring:
            continue
        ea = graph.atoms[bond.a].element
        eb = graph.atoms[bond.b].element
        r1 = (bond.a in ring_atoms) != (bond.b in ring_atoms)
        r2 = (ea == "C" and eb in HETEROATOMS) or (eb == "C" and ea in HETEROATOMS)
        if r1 or r2:
            eligible.append(idx)
    return eligible


def _component_size(graph: MolGraph, start: int, blocked: set[int]) -> int:
    seen = {start}
    stack = [start]
    while stack:
        atom = stack.pop()
        for bond_idx in graph.adjacency[atom]:
            if bond_idx in blocked:
                continue
            nb = graph.bonds[bond_idx].other(atom)
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen)


def fragment(graph: MolGraph) -> FragmentSet:
    """Cut the graph into fragments.

    Candidate cuts are tried in bond-index order; a cut commits only if
    both sides keep at least two heavy atoms given the cuts so far.
    """
    cuts: set[int] = set()
    for bond_idx in cut_eligible_bonds(graph):
        bond = graph.bonds[bond_idx]
        blocked = cuts | {bond_idx}
        if _component_size(graph, bond.a, blocked) < 2:
            continue
        if _component_size(graph, bond.b, blocked) < 2:
            continue
        cuts.add(bond_idx)

    cut_tuple = tuple(sorted(cuts))
    assignment = [-1] * graph.n_atoms
    fragments: list[Fragment] = []
    for atom in range(graph.n_atoms):
        if assignment[atom] != -1:
            continue
        frag_id = len(fragments)
        members = [atom]
        assignment[atom] = frag_id
        stack = [atom]
        while stack:
            cur = stack.pop()
            for bond_idx in graph.adjacency[cur]:
                if bond_idx in cuts:
                    continue
                nb = graph.bonds[bond_idx].other(cur)
                if assignment[nb] == -1:
                    assignment[nb] = frag_id
                    members.append(nb)
                    stack.append(nb)
        attach = tuple(
            b
            for b in cut_tuple
            if assignment[graph.bonds[b].a] == frag_id
            or assignment[graph.bonds[b].b] == frag_id
        )
        fragments.append(Fragment(tuple(sorted(members)), attach))
    return FragmentSet(graph, tuple(fragments), cut_tuple)


def corrupt(
    graph: MolGraph,
    cfg: CorruptionConfig,
    frag_set: FragmentSet | None = None,
    original_smiles: str | None = None,
) -> CorruptionRecord:
    """Drop fragments independently with probability ``drop_ratio``.

    If every fragment would drop, a uniformly chosen one is retained so
    the corrupted molecule is never empty. Deterministic in (graph, cfg).
    ``frag_set`` may carry a precomputed fragmentation of ``graph``.
    """
    if frag_set is None:
        frag_set = fragment(graph)
    fragments = frag_set.fragments
    rng = np.random.default_rng(cfg.seed)
    draws = rng.random(len(fragments))
    dropped = [i for i, u in enumerate(draws) if u < cfg.drop_ratio]
    if len(fragments) - len(dropped) < cfg.min_retained:
        n_rescue = min(cfg.min_retained, len(fragments)) - (len(fragments) - len(dropped))
        for _ in range(n_rescue):
            rescue = dropped[int(rng.integers(len(dropped)))]
            dropped.remove(rescue)

    retained_atoms = [
        a for i, frag in enumerate(fragments) if i not in dropped for a in frag.atoms
    ]
    corrupted = induced_subgraph(graph, retained_atoms)
    return CorruptionRecord(
        original=graph,
        original_smiles=original_smiles if original_smiles is not None else write_smiles(graph),
        corrupted=corrupted,
        corrupted_smiles=write_smiles(corrupted),
        dropped=tuple(dropped),
        seed=cfg.seed,
    )


def corrupt_smiles(smiles: str, cfg: CorruptionConfig) -> CorruptionRecord:
    return corrupt(parse_smiles(smiles), cfg)
