"""Heavy-atom molecular graphs: SMILES parsing, writing, and graph utilities.

Hydrogens are implicit throughout; bracket H-counts are kept as atom
annotations but never expanded into atoms. Stereo markers (/ \\ @) are
consumed and discarded, counted in ``ParseResultWarnings``. Aromaticity
is taken from lowercase source symbols only, with no perception pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from moledit.tokenizer import TokenSeq, tokenize

SINGLE = 1
DOUBLE = 2
TRIPLE = 3
AROMATIC = 4

_BOND_CHAR = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}
_ORDER_CHAR = {SINGLE: "-", DOUBLE: "=", TRIPLE: "#", AROMATIC: ":"}

#: Valence ceilings used by the plausibility check; aromatic bonds count
#: as order 1 there, and unlisted elements are not checked.
VALENCE_MAX = {"C": 4, "N": 3, "O": 2, "S": 6, "P": 5, "F": 1, "Cl": 1, "Br": 1, "I": 1}

AROMATIC_ELEMENTS = frozenset({"B", "C", "N", "O", "S", "P"})
ORGANIC_SUBSET = frozenset({"B", "C", "N", "O", "S", "P", "F", "Cl", "Br", "I"})


class ParseError(ValueError):
    def __init__(self, position: int, reason: str):
        self.position = position
        self.reason = reason
        super().__init__(f"parse error at token {position}: {reason}")


class WriteError(RuntimeError):
    pass


class EmptySelection(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int | None = None
    isotope: int | None = None

    def __post_init__(self):
        if self.aromatic and self.element not in AROMATIC_ELEMENTS:
            raise ValueError(f"element {self.element} cannot be aromatic")
        if not -4 <= self.formal_charge <= 4:
            raise ValueError(f"formal charge {self.formal_charge} out of range [-4, 4]")


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: int
    in_ring: bool = False

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("bond endpoints must be distinct")

    def other(self, idx: int) -> int:
        return self.b if idx == self.a else self.a


@dataclass(frozen=True)
class MolGraph:
    """Immutable heavy-atom graph. ``bonds[i].in_ring`` is true iff the
    bond lies on some cycle (equivalently, it is not a bridge)."""

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    adjacency: tuple[tuple[int, ...], ...] = field(repr=False, compare=False, default=())

    def __post_init__(self):
        seen_pairs: set[tuple[int, int]] = set()
        for bond in self.bonds:
            if not (0 <= bond.a < len(self.atoms)) or not (0 <= bond.b < len(self.atoms)):
                raise ValueError("bond endpoint out of range")
            pair = (min(bond.a, bond.b), max(bond.a, bond.b))
            if pair in seen_pairs:
                raise ValueError(f"duplicate bond between atoms {pair}")
            seen_pairs.add(pair)
        if not self.adjacency:
            adj: list[list[int]] = [[] for _ in self.atoms]
            for i, bond in enumerate(self.bonds):
                adj[bond.a].append(i)
                adj[bond.b].append(i)
            object.__setattr__(self, "adjacency", tuple(tuple(x) for x in adj))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def neighbors(self, idx: int) -> list[tuple[int, Bond]]:
        """(neighbor atom index, bond) pairs in bond-index order."""
        return [(self.bonds[b].other(idx), self.bonds[b]) for b in self.adjacency[idx]]

    def bond_valence(self, idx: int) -> int:
        # Aromatic bonds count 1 here; this feeds the plausibility check only.
        total = 0
        for b in self.adjacency[idx]:
            order = self.bonds[b].order
            total += 1 if order == AROMATIC else order
        return total

    def components(self) -> list[list[int]]:
        seen = [False] * self.n_atoms
        comps: list[list[int]] = []
        for start in range(self.n_atoms):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                a = stack.pop()
                comp.append(a)
                for nb, _ in self.neighbors(a):
                    if not seen[nb]:
                        seen[nb] = True
                        stack.append(nb)
            comps.append(sorted(comp))
        return comps


def _check_valence(atoms: Sequence[Atom], bonds: Sequence[Bond], positions: Sequence[int]) -> None:
    order_sum = [0] * len(atoms)
    for bond in bonds:
        o = 1 if bond.order == AROMATIC else bond.order
        order_sum[bond.a] += o
        order_sum[bond.b] += o
    for idx, atom in enumerate(atoms):
        limit = VALENCE_MAX.get(atom.element)
        if limit is None:
            continue
        limit += max(0, atom.formal_charge)
        if order_sum[idx] > limit:
            raise ParseError(
                positions[idx],
                f"valence {order_sum[idx]} exceeds maximum {limit} for {atom.element}",
            )


def _mark_rings(atoms: Sequence[Atom], bonds: Sequence[Bond]) -> tuple[Bond, ...]:
    """Recompute in_ring flags: a bond is in a ring iff it is not a bridge."""
    n = len(atoms)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for i, bond in enumerate(bonds):
        adj[bond.a].append((bond.b, i))
        adj[bond.b].append((bond.a, i))

    # Iterative Tarjan bridge finding.
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        stack: list[tuple[int, int, int]] = [(root, -1, 0)]
        while stack:
            node, parent_edge, ptr = stack.pop()
            if ptr == 0:
                disc[node] = low[node] = timer
                timer += 1
            if ptr < len(adj[node]):
                stack.append((node, parent_edge, ptr + 1))
                nb, edge = adj[node][ptr]
                if edge == parent_edge:
                    continue
                if disc[nb] == -1:
                    stack.append((nb, edge, 0))
                else:
                    low[node] = min(low[node], disc[nb])
            else:
                if parent_edge != -1:
                    parent = bonds[parent_edge].other(node)
                    low[parent] = min(low[parent], low[node])
                    if low[node] > disc[parent]:
                        bridges.add(parent_edge)
    return tuple(
        replace(bond, in_ring=(i not in bridges)) for i, bond in enumerate(bonds)
    )


def ring_flags(graph: MolGraph) -> list[bool]:
    """Per-bond cycle membership, in bond order."""
    return [bond.in_ring for bond in graph.bonds]


_ELEMENT_SECOND = frozenset("abcdefghiklmnoprstuy")


def _parse_bracket(token: str, position: int) -> tuple[Atom, int]:
    """Parse one bracket-atom token; returns the atom and a stereo-warning count."""
    body = token[1:-1]
    if not body:
        raise ParseError(position, "empty bracket atom")
    i = 0
    warnings = 0

    isotope = None
    start = i
    while i < len(body) and body[i].isdigit():
        i += 1
    if i > start:
        isotope = int(body[start:i])

    if i >= len(body):
        raise ParseError(position, f"bracket atom '{token}' has no element symbol")
    aromatic = False
    if body[i] in "bcnosp" and not (i + 1 < len(body) and body[i : i + 2] in ("se", "as")):
        element = body[i].upper()
        aromatic = True
        i += 1
    elif body[i].isupper():
        element = body[i]
        i += 1
        if i < len(body) and body[i] in _ELEMENT_SECOND:
            element += body[i]
            i += 1
    else:
        raise ParseError(position, f"bad element in bracket atom '{token}'")
    if element == "H":
        raise ParseError(position, "explicit hydrogen atoms are out of scope")

    while i < len(body) and body[i] == "@":
        warnings += 1
        i += 1

    explicit_h = None
    if i < len(body) and body[i] == "H":
        i += 1
        start = i
        while i < len(body) and body[i].isdigit():
            i += 1
        explicit_h = int(body[start:i]) if i > start else 1

    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        i += 1
        start = i
        while i < len(body) and body[i].isdigit():
            i += 1
        if i > start:
            charge = sign * int(body[start:i])
        else:
            charge = sign
            while i < len(body) and body[i] == body[i - 1]:
                charge += sign
                i += 1

    if i < len(body) and body[i] == ":":
        # Atom maps carry no graph information here; accept and drop them.
        i += 1
        start = i
        while i < len(body) and body[i].isdigit():
            i += 1
        if i == start:
            raise ParseError(position, f"bad atom map in bracket atom '{token}'")

    if i != len(body):
        raise ParseError(position, f"unparsed bracket content {body[i:]!r} in '{token}'")
    if not -4 <= charge <= 4:
        raise ParseError(position, f"formal charge {charge} out of range [-4, 4]")
    if aromatic and element not in AROMATIC_ELEMENTS:
        raise ParseError(position, f"element {element} cannot be aromatic")
    return Atom(element, aromatic, charge, explicit_h, isotope), warnings


@dataclass
class ParseResult:
    graph: MolGraph
    stereo_warnings: int = 0


def parse_smiles(text: str, *, count_warnings: bool = False) -> MolGraph | ParseResult:
    """Parse SMILES text into a MolGraph.

    Branches, ring closures (digits and %nn), '.' disconnections,
    aromatic lowercase atoms, and bracket charge/isotope/H-count are all
    honoured. '*' and '>' tokens are rejected. With count_warnings a
    ParseResult carrying the discarded-stereo count is returned instead
    of the bare graph.
    """
    seq = tokenize(text)
    atoms: list[Atom] = []
    token_pos: list[int] = []
    bond_list: list[tuple[int, int, int | None, int]] = []  # (a, b, order-or-None, pos)
    ring_open: dict[str, tuple[int, int | None, int]] = {}
    stack: list[int | None] = []
    prev: int | None = None
    pending: int | None = None
    warnings = 0

    def add_atom(atom: Atom, pos: int):
        nonlocal prev, pending
        atoms.append(atom)
        token_pos.append(pos)
        idx = len(atoms) - 1
        if prev is not None:
            bond_list.append((prev, idx, pending, pos))
        elif pending is not None:
            raise ParseError(pos, "bond symbol with no preceding atom")
        pending = None
        prev = idx

    for pos, token in enumerate(seq.tokens):
        first = token[0]
        if token in ("*", ">"):
            raise ParseError(pos, f"'{token}' is outside the molecular-graph scope")
        if first == "[":
            atom, w = _parse_bracket(token, pos)
            warnings += w
            add_atom(atom, pos)
        elif token in ("Br", "Cl") or (token.isalpha() and token.isupper()):
            add_atom(Atom(token), pos)
        elif token.isalpha():
            add_atom(Atom(token.upper(), aromatic=True), pos)
        elif token in _BOND_CHAR:
            if pending is not None:
                raise ParseError(pos, "two bond symbols in a row")
            pending = _BOND_CHAR[token]
        elif token in ("/", "\\"):
            # Stereo bonds degrade to single bonds.
            warnings += 1
            if pending is not None:
                raise ParseError(pos, "two bond symbols in a row")
            pending = SINGLE
        elif token == "(":
            if prev is None:
                raise ParseError(pos, "branch start with no current atom")
            stack.append(prev)
        elif token == ")":
            if not stack:
                raise ParseError(pos, "unmatched ')'")
            if pending is not None:
                raise ParseError(pos, "dangling bond before ')'")
            prev = stack.pop()
        elif token == ".":
            if pending is not None:
                raise ParseError(pos, "dangling bond before '.'")
            prev = None
        elif token.isdigit() or first == "%":
            if prev is None:
                raise ParseError(pos, "ring closure with no current atom")
            key = token  # '%nn' keys never collide with bare digits
            if key in ring_open:
                open_atom, open_order, open_pos = ring_open.pop(key)
                if open_atom == prev:
                    raise ParseError(pos, f"ring closure {token} to the same atom")
                if open_order is not None and pending is not None and open_order != pending:
                    raise ParseError(pos, f"conflicting bond orders on ring closure {token}")
                order = pending if pending is not None else open_order
                bond_list.append((open_atom, prev, order, pos))
                pending = None
            else:
                ring_open[key] = (prev, pending, pos)
                pending = None
        elif token in ("~", "?", "$"):
            raise ParseError(pos, f"'{token}' is outside the molecular-graph scope")
        else:  # pragma: no cover - grammar and parser enumerate the same tokens
            raise ParseError(pos, f"unhandled token {token!r}")

    if pending is not None:
        raise ParseError(len(seq.tokens) - 1, "dangling bond at end of input")
    if stack:
        raise ParseError(len(seq.tokens) - 1, "unclosed branch")
    if ring_open:
        digit, (_, _, open_pos) = next(iter(sorted(ring_open.items())))
        raise ParseError(open_pos, f"unclosed ring bond {digit}")

    bonds: list[Bond] = []
    seen_pairs: set[tuple[int, int]] = set()
    for a, b, order, pos in bond_list:
        if order is None:
            both_aromatic = atoms[a].aromatic and atoms[b].aromatic
            order = AROMATIC if both_aromatic else SINGLE
        pair = (min(a, b), max(a, b))
        if pair in seen_pairs:
            raise ParseError(pos, f"duplicate bond between atoms {pair}")
        seen_pairs.add(pair)
        bonds.append(Bond(a, b, order))

    _check_valence(atoms, bonds, token_pos)
    graph = MolGraph(tuple(atoms), _mark_rings(atoms, bonds))
    if count_warnings:
        return ParseResult(graph, warnings)
    return graph


def _atom_text(atom: Atom) -> str:
    needs_bracket = (
        atom.formal_charge != 0
        or atom.isotope is not None
        or atom.explicit_h is not None
        or atom.element not in ORGANIC_SUBSET
    )
    symbol = atom.element.lower() if atom.aromatic else atom.element
    if not needs_bracket:
        return symbol
    parts = ["["]
    if atom.isotope is not None:
        parts.append(str(atom.isotope))
    parts.append(symbol)
    if atom.explicit_h is not None:
        if atom.explicit_h == 1:
            parts.append("H")
        elif atom.explicit_h > 1:
            parts.append(f"H{atom.explicit_h}")
    charge = atom.formal_charge
    if charge == 1:
        parts.append("+")
    elif charge == -1:
        parts.append("-")
    elif charge > 1:
        parts.append(f"+{charge}")
    elif charge < -1:
        parts.append(f"-{-charge}")
    parts.append("]")
    return "".join(parts)


def _bond_text(bond: Bond, atoms: Sequence[Atom]) -> str:
    both_aromatic = atoms[bond.a].aromatic and atoms[bond.b].aromatic
    if bond.order == AROMATIC:
        return "" if both_aromatic else ":"
    if bond.order == SINGLE:
        # Explicit '-' between aromatic atoms, else it would re-parse aromatic.
        return "-" if both_aromatic else ""
    return _ORDER_CHAR[bond.order]


class _DigitPool:
    def __init__(self):
        self._free = list(range(99, 0, -1))

    def take(self) -> str:
        if not self._free:
            raise WriteError("ring-closure digit pool exhausted")
        d = self._free.pop()
        return str(d) if d < 10 else f"%{d:02d}"

    def release(self, text: str) -> None:
        d = int(text.lstrip("%"))
        self._free.append(d)
        self._free.sort(reverse=True)


def write_smiles(graph: MolGraph) -> str:
    """Serialize a MolGraph back to SMILES.

    Output re-parses to an isomorphic graph; disconnected components are
    joined by '.'. Atom order follows a DFS from the lowest atom index
    of each component, visiting bonds in their stored order.
    """
    pieces: list[str] = []
    pool = _DigitPool()
    seen_atom = [False] * graph.n_atoms
    seen_bond = [False] * graph.n_bonds

    for comp in graph.components():
        root = comp[0]
        # Pass 1: depth-first spanning tree in bond-index order; bonds to
        # already-visited atoms become ring closures.
        parent_bond: dict[int, int] = {}
        closure_bonds: list[int] = []

        def explore(atom: int):
            seen_atom[atom] = True
            for bond_idx in graph.adjacency[atom]:
                if seen_bond[bond_idx]:
                    continue
                seen_bond[bond_idx] = True
                nb = graph.bonds[bond_idx].other(atom)
                if seen_atom[nb]:
                    closure_bonds.append(bond_idx)
                else:
                    parent_bond[nb] = bond_idx
                    explore(nb)

        explore(root)

        closures_at: dict[int, list[int]] = {}
        for bond_idx in closure_bonds:
            bond = graph.bonds[bond_idx]
            closures_at.setdefault(bond.a, []).append(bond_idx)
            closures_at.setdefault(bond.b, []).append(bond_idx)
        digit_of: dict[int, str] = {}
        out: list[str] = []

        # Pass 2: emit along the same tree. A closure digit opens at the
        # first endpoint reached and closes (and is recycled) at the second.
        def emit(atom: int, via_bond: int | None):
            if via_bond is not None:
                out.append(_bond_text(graph.bonds[via_bond], graph.atoms))
            out.append(_atom_text(graph.atoms[atom]))
            for bond_idx in closures_at.get(atom, ()):
                if bond_idx in digit_of:
                    out.append(digit_of[bond_idx])
                    pool.release(digit_of.pop(bond_idx))
                else:
                    digit = pool.take()
                    digit_of[bond_idx] = digit
                    out.append(_bond_text(graph.bonds[bond_idx], graph.atoms))
                    out.append(digit)
            children = [
                (graph.bonds[bond_idx].other(atom), bond_idx)
                for bond_idx in graph.adjacency[atom]
                if parent_bond.get(graph.bonds[bond_idx].other(atom)) == bond_idx
            ]
            for pos, (child, bond_idx) in enumerate(children):
                last = pos == len(children) - 1
                if not last:
                    out.append("(")
                emit(child, bond_idx)
                if not last:
                    out.append(")")

        emit(root, None)
        pieces.append("".join(out))

    return ".".join(pieces)


def induced_subgraph(graph: MolGraph, keep: Iterable[int]) -> MolGraph:
    """Subgraph on ``keep``, atoms re-indexed contiguously in ascending
    original order. Severed valences become implicit hydrogens."""
    keep_sorted = sorted(set(keep))
    if not keep_sorted:
        raise EmptySelection("cannot take the subgraph of an empty atom selection")
    if keep_sorted[0] < 0 or keep_sorted[-1] >= graph.n_atoms:
        raise ValueError("keep set contains an atom index out of range")
    remap = {old: new for new, old in enumerate(keep_sorted)}
    atoms = tuple(graph.atoms[i] for i in keep_sorted)
    bonds = tuple(
        Bond(remap[b.a], remap[b.b], b.order)
        for b in graph.bonds
        if b.a in remap and b.b in remap
    )
    return MolGraph(atoms, _mark_rings(atoms, bonds))


# --- canonical forms and isomorphism ---------------------------------------

def _atom_color(atom: Atom) -> tuple:
    return (atom.element, atom.aromatic, atom.formal_charge)


def _refine(graph: MolGraph, colors: list[int]) -> list[int]:
    n = graph.n_atoms
    while True:
        sig = []
        for i in range(n):
            nb = sorted(
                (graph.bonds[b].order, colors[graph.bonds[b].other(i)])
                for b in graph.adjacency[i]
            )
            sig.append((colors[i], tuple(nb)))
        table = {s: c for c, s in enumerate(sorted(set(sig)))}
        new = [table[s] for s in sig]
        if new == colors:
            return colors
        colors = new


def _canonical_string(graph: MolGraph, colors: list[int]) -> str | None:
    """Serialize if the coloring is discrete, else None."""
    n = graph.n_atoms
    if len(set(colors)) != n:
        return None
    order = sorted(range(n), key=lambda i: colors[i])
    rank = {atom: pos for pos, atom in enumerate(order)}
    atom_part = ";".join(
        f"{graph.atoms[i].element},{int(graph.atoms[i].aromatic)},{graph.atoms[i].formal_charge}"
        for i in order
    )
    edges = sorted(
        (min(rank[b.a], rank[b.b]), max(rank[b.a], rank[b.b]), b.order) for b in graph.bonds
    )
    edge_part = ";".join(f"{a}-{b}:{o}" for a, b, o in edges)
    return atom_part + "|" + edge_part


def canonical_form(graph: MolGraph) -> str:
    """Canonical string over (element, charge, aromaticity, bond order).

    Iterative neighbourhood refinement with backtracking tie-break: when
    the partition stalls, each member of the first smallest non-singleton
    cell is individualized in turn and the lexicographically smallest
    completion wins.
    """
    base = {c: i for i, c in enumerate(sorted({_atom_color(a) for a in graph.atoms}))}
    colors = _refine(graph, [base[_atom_color(a)] for a in graph.atoms])

    best: list[str | None] = [None]

    def search(colors: list[int]):
        done = _canonical_string(graph, colors)
        if done is not None:
            if best[0] is None or done < best[0]:
                best[0] = done
            return
        cells: dict[int, list[int]] = {}
        for i, c in enumerate(colors):
            cells.setdefault(c, []).append(i)
        target = min(
            (members for members in cells.values() if len(members) > 1),
            key=lambda m: (len(m), colors[m[0]]),
        )
        for atom in target:
            branched = list(colors)
            branched[atom] = len(colors) + len(cells)  # fresh color
            search(_refine(graph, branched))

    search(colors)
    assert best[0] is not None
    return best[0]


def isomorphic(a: MolGraph, b: MolGraph) -> bool:
    """True iff an element/charge/aromaticity/bond-order preserving
    bijection exists between the two graphs."""
    if a.n_atoms != b.n_atoms or a.n_bonds != b.n_bonds:
        return False
    return canonical_form(a) == canonical_form(b)
