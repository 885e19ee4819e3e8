"""Contractions: partitions of labelled noise vertices with flagged blocks.

A contraction splits the ordered vertex set into blocks (singletons included)
and flags a subset of blocks; every odd block must be flagged.  Flagged blocks
are integrated against compensated brackets, unflagged ones against raw
brackets.  Vertices of product expansions are pairs ``(factor, position)``
numbered from one.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import product
from typing import Hashable, Iterator, Sequence

DEFAULT_CAP = 8


@dataclass(frozen=True)
class Contraction:
    """Ordered vertices with labels, blocks sorted by minimal vertex, flags per block."""

    vertices: tuple
    labels: tuple
    blocks: tuple
    flagged: tuple

    def __post_init__(self):
        pos = {v: i for i, v in enumerate(self.vertices)}
        if len(pos) != len(self.vertices):
            raise ValueError("duplicate vertices")
        if len(self.labels) != len(self.vertices):
            raise ValueError("one label per vertex required")
        seen = [v for b in self.blocks for v in b]
        if sorted(pos[v] for v in seen) != list(range(len(self.vertices))):
            raise ValueError("blocks must partition the vertex set")
        if any(len(b) == 0 for b in self.blocks):
            raise ValueError("blocks must be non-empty")
        if len(self.flagged) != len(self.blocks):
            raise ValueError("one flag per block required")
        for b, f in zip(self.blocks, self.flagged):
            if len(b) % 2 and not f:
                raise ValueError(f"odd block {b} must be flagged")
        # canonical order: vertices inside blocks by position, blocks by minimum
        blocks = [tuple(sorted(b, key=pos.__getitem__)) for b in self.blocks]
        order = sorted(range(len(blocks)), key=lambda i: pos[blocks[i][0]])
        object.__setattr__(self, "blocks", tuple(blocks[i] for i in order))
        object.__setattr__(self, "flagged", tuple(bool(self.flagged[i]) for i in order))

    # accessors
    def position(self, v) -> int:
        return self.vertices.index(v)

    def block_positions(self) -> list[list[int]]:
        pos = {v: i for i, v in enumerate(self.vertices)}
        return [[pos[v] for v in b] for b in self.blocks]

    def block_labels(self, i: int) -> tuple:
        lab = dict(zip(self.vertices, self.labels))
        return tuple(lab[v] for v in self.blocks[i])

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_flagged(self) -> int:
        return sum(self.flagged)

    def is_all_singletons(self) -> bool:
        return all(len(b) == 1 for b in self.blocks)

    def text(self) -> str:
        return to_text(self)


def _blocks_from_rgs(items: Sequence, rgs: Sequence[int]) -> list[tuple]:
    out: list[list] = []
    for v, g in zip(items, rgs):
        if g == len(out):
            out.append([])
        out[g].append(v)
    return [tuple(b) for b in out]


def set_partitions(items: Sequence) -> Iterator[list[tuple]]:
    """All set partitions via restricted growth strings, in lexicographic order."""
    n = len(items)
    if n == 0:
        yield []
        return
    rgs = [0] * n

    def rec(i: int, top: int):
        if i == n:
            yield _blocks_from_rgs(items, rgs)
            return
        for g in range(top + 2):
            rgs[i] = g
            yield from rec(i + 1, max(top, g))
    rgs[0] = 0
    yield from rec(1, 0)


def enumerate_contractions(vertices: Sequence[Hashable], labels: Sequence[int],
                           cap: int = DEFAULT_CAP) -> list[Contraction]:
    """Every (partition, flags) pair with all odd blocks flagged."""
    vertices, labels = tuple(vertices), tuple(labels)
    if len(vertices) > cap:
        raise ValueError(f"{len(vertices)} vertices exceed the cap of {cap}")
    out = []
    for blocks in set_partitions(vertices):
        choices = [(True,) if len(b) % 2 else (False, True) for b in blocks]
        for flags in product(*choices):
            out.append(Contraction(vertices, labels, tuple(blocks), tuple(flags)))
    return out


def product_vertices(label_vectors: Sequence[Sequence[int]]) -> tuple[tuple, tuple]:
    verts, labs = [], []
    for i, K in enumerate(label_vectors, start=1):
        for j, k in enumerate(K, start=1):
            verts.append((i, j))
            labs.append(int(k))
    return tuple(verts), tuple(labs)


def enumerate_product_contractions(label_vectors: Sequence[Sequence[int]],
                                   cap: int = DEFAULT_CAP) -> list[Contraction]:
    """Contractions whose blocks hold at most one vertex per factor, odd blocks flagged."""
    if len(label_vectors) < 1 or any(len(K) < 1 for K in label_vectors):
        raise ValueError("need at least one non-empty factor")
    verts, labs = product_vertices(label_vectors)
    if len(verts) > cap:
        raise ValueError(f"{len(verts)} vertices exceed the cap of {cap}")
    out = []
    blocks: list[list] = []

    def rec(i: int):
        if i == len(verts):
            bl = tuple(tuple(b) for b in blocks)
            out.append(Contraction(verts, labs, bl, tuple(len(b) % 2 == 1 for b in bl)))
            return
        v = verts[i]
        for b in blocks:
            if all(w[0] != v[0] for w in b):
                b.append(v)
                rec(i + 1)
                b.pop()
        blocks.append([v])
        rec(i + 1)
        blocks.pop()
    rec(0)
    pos = {v: i for i, v in enumerate(verts)}
    out.sort(key=lambda g: [[pos[v] for v in b] for b in g.blocks] + [list(g.flagged)])
    return out


def remove_component(gamma: Contraction, e) -> Contraction:
    """Drop the vertices of block ``e`` (a block tuple or a block index)."""
    idx = e if isinstance(e, int) else _block_index(gamma, e)
    gone = set(gamma.blocks[idx])
    keep = [i for i, v in enumerate(gamma.vertices) if v not in gone]
    return Contraction(tuple(gamma.vertices[i] for i in keep), tuple(gamma.labels[i] for i in keep),
                       tuple(b for j, b in enumerate(gamma.blocks) if j != idx),
                       tuple(f for j, f in enumerate(gamma.flagged) if j != idx))


def insert_component(gamma: Contraction, block: Sequence, labels: Sequence[int], flagged: bool,
                     positions: Sequence[int] | None = None) -> Contraction:
    """Add a new block of fresh vertices; ``positions`` places them in the vertex order."""
    block, labels = tuple(block), tuple(labels)
    verts, labs = list(gamma.vertices), list(gamma.labels)
    if positions is None:
        positions = range(len(verts), len(verts) + len(block))
    for p, v, k in sorted(zip(positions, block, labels)):
        verts.insert(p, v)
        labs.insert(p, k)
    return Contraction(tuple(verts), tuple(labs), gamma.blocks + (block,), gamma.flagged + (flagged,))


def _block_index(gamma: Contraction, e) -> int:
    key = set(e)
    for i, b in enumerate(gamma.blocks):
        if set(b) == key:
            return i
    raise ValueError(f"{e} is not a block of the contraction")


def to_text(gamma: Contraction) -> str:
    """Compact form: each block in braces, '*' before a flagged block."""
    def vtext(v):
        if isinstance(v, tuple):
            return "(" + ",".join(str(c) for c in v) + ")"
        return f"({v})"
    return "".join(("*" if f else "") + "{" + "".join(vtext(v) for v in b) + "}"
                   for b, f in zip(gamma.blocks, gamma.flagged))


_BLOCK = re.compile(r"(\*?)\{((?:\([^()]*\))+)\}")
_VERT = re.compile(r"\(([^()]*)\)")


def from_text(text: str, labels: dict | None = None) -> Contraction:
    """Parse ``to_text`` output; vertices become int tuples, labels default to 1."""
    blocks, flags = [], []
    pos = 0
    for m in _BLOCK.finditer(text):
        if m.start() != pos:
            raise ValueError(f"cannot parse contraction text at {text[pos:]!r}")
        pos = m.end()
        flags.append(m.group(1) == "*")
        verts = [tuple(int(c) for c in g.split(",")) for g in _VERT.findall(m.group(2))]
        blocks.append(tuple(v if len(v) > 1 else v[0] for v in verts))
    if pos != len(text):
        raise ValueError(f"cannot parse contraction text at {text[pos:]!r}")
    verts = tuple(sorted(v for b in blocks for v in b))
    labs = tuple((labels or {}).get(v, 1) for v in verts)
    return Contraction(verts, labs, tuple(blocks), tuple(flags))
