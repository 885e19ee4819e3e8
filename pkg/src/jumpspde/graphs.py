"""Power counting on labelled multigraphs.

A graph has one root vertex (role ``star``), vertices carrying test functions
(``up``), noise vertices (``noise``, only outgoing edges) and integrated
vertices (``internal``).  Each directed edge carries a singularity label ``a``
and a renormalization order ``r``.  Contracting along a partition of the
noise vertices merges each block into one vertex and sums the labels of
parallel edges.  Four integrability conditions and the homogeneity exponents
are evaluated by brute force over vertex subsets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .contractions import Contraction

ROLES = ("star", "up", "noise", "internal")
SUBSET_CAP = 16


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    a: float
    r: int = 0
    kernel: str = "K"


@dataclass(frozen=True)
class LabeledMultigraph:
    """Directed multigraph with vertex roles, edge labels and noise labels."""

    vertices: tuple
    roles: dict = field(hash=False)
    edges: tuple
    d: int
    noise_labels: dict = field(default_factory=dict, hash=False)
    name: str = ""
    measures: dict = field(default_factory=dict, hash=False)

    @property
    def s(self) -> int:
        return self.d + 2

    def with_role(self, role: str) -> list:
        return [v for v in self.vertices if self.roles[v] == role]

    @property
    def star(self):
        stars = self.with_role("star")
        return stars[0] if stars else None

    @property
    def up(self) -> list:
        return self.with_role("up")

    @property
    def noise(self) -> list:
        return self.with_role("noise")

    @property
    def internal(self) -> list:
        return self.with_role("internal")

    def label_of(self, v) -> int:
        return int(self.noise_labels.get(v, 1))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "d": self.d,
            "vertices": [{"name": v, "role": self.roles[v],
                          **({"label": self.label_of(v)} if self.roles[v] == "noise" else {})}
                         for v in self.vertices],
            "edges": [[e.src, e.dst, e.a, e.r, e.kernel] for e in self.edges],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LabeledMultigraph":
        verts = tuple(v["name"] for v in doc["vertices"])
        roles = {v["name"]: v["role"] for v in doc["vertices"]}
        labels = {v["name"]: int(v.get("label", 1)) for v in doc["vertices"] if v["role"] == "noise"}
        edges = tuple(Edge(str(e[0]), str(e[1]), float(e[2]), int(e[3]),
                           str(e[4]) if len(e) > 4 else "K") for e in doc["edges"])
        measures = {v["name"]: v["measure"] for v in doc["vertices"] if "measure" in v}
        return cls(verts, roles, edges, int(doc["d"]), labels, doc.get("name", ""), measures)


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str


def _weakly_connected(vertices: Sequence, edges: Iterable[Edge]) -> bool:
    adj = {v: set() for v in vertices}
    for e in edges:
        adj[e.src].add(e.dst)
        adj[e.dst].add(e.src)
    if not vertices:
        return True
    seen, stack = {vertices[0]}, [vertices[0]]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(vertices)


def validate_graph(G: LabeledMultigraph) -> list[Violation]:
    """All structural and label violations; an empty list means the graph is valid."""
    out: list[Violation] = []
    vs = set(G.vertices)
    for v in G.vertices:
        if G.roles.get(v) not in ROLES:
            out.append(Violation("roles", f"vertex {v} has unknown role {G.roles.get(v)!r}"))
    if len(G.with_role("star")) != 1:
        out.append(Violation("roles", "exactly one root vertex is required"))
    if not G.up:
        out.append(Violation("roles", "at least one test-function vertex is required"))
    if not G.noise:
        out.append(Violation("roles", "at least one noise vertex is required"))
    for e in G.edges:
        if e.src not in vs or e.dst not in vs:
            out.append(Violation("edges", f"edge {e.src}->{e.dst} has an unknown endpoint"))
            return out
        if e.src == e.dst:
            out.append(Violation("loopless", f"self-loop at {e.src}"))
        if e.a < 0:
            out.append(Violation("labels", f"edge {e.src}->{e.dst} has negative a"))
    incident = {v: 0 for v in G.vertices}
    for e in G.edges:
        incident[e.src] += 1
        incident[e.dst] += 1
    for v, c in incident.items():
        if c == 0:
            out.append(Violation("loopless", f"vertex {v} has no incident edge"))
    if not _weakly_connected(list(G.vertices), G.edges):
        out.append(Violation("connected", "graph is not weakly connected"))
    star, up = G.star, set(G.up)
    if star is not None:
        targets = {e.dst for e in G.edges if e.src == star}
        if targets != up:
            out.append(Violation("star", f"root must point exactly to the test vertices, points to {sorted(targets)}"))
    for e in G.edges:
        if G.roles.get(e.dst) == "noise":
            out.append(Violation("noise", f"noise vertex {e.dst} has an incoming edge"))
        if e.dst == star and e.r > 0:
            out.append(Violation("labels", f"edge {e.src}->{e.dst} into the root has r > 0"))
        top = up | {star}
        if e.src in top and e.dst in top and e.r != 0:
            out.append(Violation("labels", f"edge {e.src}->{e.dst} among root/test vertices has r != 0"))
    for v in G.vertices:
        neg = [e for e in G.edges if v in (e.src, e.dst) and e.r < 0]
        if len(neg) > 1:
            out.append(Violation("labels", f"vertex {v} has {len(neg)} incident edges with r < 0"))
    pairs: dict = {}
    for e in G.edges:
        pairs.setdefault(frozenset((e.src, e.dst)), []).append(e)
    for key, es in pairs.items():
        if len(es) > 1:
            nz = [e for e in es if e.r != 0]
            if len(nz) > 1:
                out.append(Violation("parallel", f"parallel edges {sorted(key)}: at most one can have nonzero r"))
            elif len(nz) == 1 and nz[0].r < 0:
                out.append(Violation("parallel", f"parallel edges {sorted(key)}: the nonzero r must be positive"))
    return out


# ---------------------------------------------------------------------------
# contraction


@dataclass(frozen=True)
class HatEdge:
    src: str
    dst: str
    a: float
    r: int
    members: tuple  # indices of the original edges merged into this one


@dataclass(frozen=True)
class ContractedGraph:
    vertices: tuple
    roles: dict = field(hash=False)
    edges: tuple
    d: int
    block_of: dict = field(hash=False)  # hat vertex -> original noise vertices
    flagged: frozenset
    gamma: Contraction
    graph: LabeledMultigraph

    @property
    def s(self) -> int:
        return self.d + 2

    @property
    def star(self):
        return next(v for v in self.vertices if self.roles[v] == "star")

    @property
    def noise(self) -> list:
        return [v for v in self.vertices if self.roles[v] == "noise"]

    @property
    def up(self) -> list:
        return [v for v in self.vertices if self.roles[v] == "up"]

    @property
    def internal(self) -> list:
        return [v for v in self.vertices if self.roles[v] == "internal"]


def block_name(block: Sequence) -> str:
    return block[0] if len(block) == 1 else "{" + ",".join(str(v) for v in block) + "}"


def contract_graph(G: LabeledMultigraph, gamma: Contraction) -> ContractedGraph:
    """Identify the noise vertices of each block and merge parallel edges."""
    if set(gamma.vertices) != set(G.noise) or len(gamma.vertices) != len(G.noise):
        raise ValueError("contraction vertices must equal the noise vertices of the graph")
    image = {v: v for v in G.vertices}
    block_of, flagged = {}, set()
    for b, f in zip(gamma.blocks, gamma.flagged):
        name = block_name(b)
        block_of[name] = tuple(b)
        if f:
            flagged.add(name)
        for v in b:
            image[v] = name
    verts = []
    for v in G.vertices:
        if image[v] not in verts:
            verts.append(image[v])
    roles = {image[v]: G.roles[v] for v in G.vertices}
    # parallel edges are merged per unordered pair; the merged edge keeps the
    # direction of its nonzero-r member, otherwise that of the first member
    merged: dict = {}
    for i, e in enumerate(G.edges):
        key = frozenset((image[e.src], image[e.dst]))
        merged.setdefault(key, []).append(i)
    edges = []
    for idx in merged.values():
        nz = [i for i in idx if G.edges[i].r != 0]
        lead = G.edges[nz[0] if nz else idx[0]]
        src, dst = image[lead.src], image[lead.dst]
        if len(nz) > 1:
            raise ValueError(f"merging edges {src}-{dst} would combine several nonzero r values")
        if len(idx) > 1 and nz and lead.r < 0:
            raise ValueError(f"merging edges {src}-{dst} would merge a negative r into a parallel class")
        edges.append(HatEdge(src, dst, float(sum(G.edges[i].a for i in idx)), int(lead.r), tuple(idx)))
    return ContractedGraph(tuple(verts), roles, tuple(edges), G.d, block_of,
                           frozenset(flagged), gamma, G)


# ---------------------------------------------------------------------------
# labels and conditions


def improved_labels(H: ContractedGraph, gamma: Contraction | None = None) -> list[float]:
    """Labels shifted by the extra powers of eps carried by contracted noise blocks."""
    s = H.s
    out = []
    for e in H.edges:
        shift = 0.0
        if e.src in H.block_of:
            m = len(H.block_of[e.src])
            shift = (1 - m) * s / 2 if e.src in H.flagged else (1 - m / 2) * s
        out.append(e.a + shift)
    return out


def integrated_vertices(H: ContractedGraph) -> list:
    """Vertices of the fourth condition: integrated, not root, test or noise."""
    return H.internal


@dataclass
class ConditionResult:
    name: str
    passed: bool
    witness: tuple | None
    min_slack: float | None
    slacks: list  # (subset, slack) for every checked subset or edge


def _edge_sets(H: ContractedGraph, subset: set):
    E0, up, down, inc = [], [], [], []
    for i, e in enumerate(H.edges):
        a_in, b_in = e.src in subset, e.dst in subset
        if a_in and b_in:
            E0.append(i)
        if a_in and not b_in:
            up.append(i)
        if b_in and not a_in:
            down.append(i)
        if a_in or b_in:
            inc.append(i)
    return E0, up, down, inc


def _subsets(pool: Sequence, min_size: int, must: Sequence = ()):
    pool = [v for v in pool if v not in must]
    for k in range(max(0, min_size - len(must)), len(pool) + 1):
        for c in combinations(pool, k):
            sub = tuple(must) + c
            if len(sub) >= min_size and sub:
                yield sub


def condition_slacks(H: ContractedGraph, labels: Sequence[float]) -> dict[str, list]:
    """Slack of every constraint: positive means strictly satisfied."""
    s = H.s
    r = [e.r for e in H.edges]
    L = list(labels)
    star = H.star
    others = [v for v in H.vertices if v != star]
    out = {"c1": [], "c2": [], "c3": [], "c4": []}
    for i, e in enumerate(H.edges):
        out["c1"].append(((e.src, e.dst), s - (L[i] + min(r[i], 0))))
    for sub in _subsets(others, 3):
        E0, _, _, _ = _edge_sets(H, set(sub))
        out["c2"].append((sub, (len(sub) - 1) * s - sum(L[i] for i in E0)))
    for sub in _subsets(others, 2, must=(star,)):
        E0, up, down, _ = _edge_sets(H, set(sub))
        lhs = sum(L[i] for i in E0)
        lhs += sum(L[i] + r[i] - 1 for i in up if r[i] > 0)
        lhs -= sum(r[i] for i in down if r[i] > 0)
        out["c3"].append((sub, (len(sub) - 1) * s - lhs))
    for sub in _subsets(integrated_vertices(H), 1):
        _, up, down, inc = _edge_sets(H, set(sub))
        down_plus = {i for i in down if r[i] > 0}
        lhs = sum(L[i] for i in inc if i not in down_plus)
        lhs += sum(r[i] for i in up if r[i] > 0)
        lhs -= sum(r[i] - 1 for i in down_plus)
        out["c4"].append((sub, lhs - len(sub) * s))
    return out


def check_integrability(H: ContractedGraph, labels: str | Sequence[float] = "improved") -> dict:
    """Evaluate the four conditions; equality counts as failure.

    ``labels`` is "improved" (default), "raw" or an explicit label list.
    """
    if len(H.vertices) > SUBSET_CAP:
        raise ValueError(f"{len(H.vertices)} vertices exceed the subset cap {SUBSET_CAP}")
    if labels == "improved":
        L = improved_labels(H)
    elif labels == "raw":
        L = [e.a for e in H.edges]
    else:
        L = list(labels)
    res = {}
    for name, rows in condition_slacks(H, L).items():
        bad = [sub for sub, sl in rows if not sl > 0]
        res[name] = ConditionResult(name, not bad, bad[0] if bad else None,
                                    min((sl for _, sl in rows), default=None), rows)
    return res


def all_pass(report: dict) -> bool:
    return all(c.passed for c in report.values())


# ---------------------------------------------------------------------------
# exponents


@dataclass
class ExponentReport:
    alpha: float
    beta: float
    alpha_tilde: float
    alpha_tilde_printed: float
    improved: list
    kappa_sup: float | None
    kappa_slack: float | None
    kappa_reason: str
    conditions: dict
    raw_conditions: dict

    def to_dict(self) -> dict:
        def cond(c: ConditionResult):
            return {"passed": c.passed, "witness": list(c.witness) if c.witness else None,
                    "min_slack": c.min_slack}
        return {
            "alpha": self.alpha, "beta": self.beta, "alpha_tilde": self.alpha_tilde,
            "alpha_tilde_printed": self.alpha_tilde_printed, "improved_labels": self.improved,
            "kappa_sup": self.kappa_sup, "kappa_slack": self.kappa_slack,
            "kappa_reason": self.kappa_reason,
            "conditions": {k: cond(v) for k, v in self.conditions.items()},
            "raw_conditions": {k: cond(v) for k, v in self.raw_conditions.items()},
            "all_pass": all_pass(self.conditions),
        }


def alpha_gamma(G: LabeledMultigraph, gamma: Contraction, H: ContractedGraph) -> float:
    s = G.s
    free = [v for v in H.vertices if H.roles[v] not in ("star", "up")]
    return (len(free) - gamma.n_flagged / 2) * s - sum(e.a for e in G.edges)


def beta_gamma(G: LabeledMultigraph, gamma: Contraction) -> float:
    return (len(G.noise) - 2 * len(gamma.blocks) + gamma.n_flagged) * G.s / 2


def alpha_tilde_gamma(G: LabeledMultigraph, gamma: Contraction) -> float:
    """Closed form of alpha + beta in terms of the uncontracted graph."""
    return (len(G.internal) + len(G.noise) / 2) * G.s - sum(e.a for e in G.edges)


def alpha_tilde_printed(G: LabeledMultigraph, gamma: Contraction) -> float:
    """The closed form with an additional |F|/2 term; differs from alpha + beta
    whenever flagged blocks exist and is reported for comparison only."""
    return alpha_tilde_gamma(G, gamma) + gamma.n_flagged / 2 * G.s


def max_kappa(H: ContractedGraph, beta: float) -> tuple[float | None, float | None, str]:
    """Largest admissible increase of one improved label on an edge leaving a
    noise block, capped at ``beta``.  Returns (capped, uncapped, reason)."""
    L = improved_labels(H)
    base = check_integrability(H, L)
    if not all_pass(base):
        return None, None, "improved labels violate the conditions"
    cands = [i for i, e in enumerate(H.edges) if e.src in H.block_of]
    if not cands:
        return None, None, "no edge leaves a noise vertex"
    best = None
    for i in cands:
        # every slack is affine in the perturbation with coefficient -1, 0 or +1
        bumped = list(L)
        bumped[i] += 1.0
        s0 = condition_slacks(H, L)
        s1 = condition_slacks(H, bumped)
        lim = float("inf")
        for name in s0:
            for (sub, a0), (_, a1) in zip(s0[name], s1[name]):
                slope = a1 - a0
                if slope < 0:
                    lim = min(lim, a0 / -slope)
        best = lim if best is None else max(best, lim)
    capped = min(best, max(beta, 0.0))
    return capped, best, "ok"


def exponents(G: LabeledMultigraph, gamma: Contraction, H: ContractedGraph | None = None) -> ExponentReport:
    H = contract_graph(G, gamma) if H is None else H
    a = alpha_gamma(G, gamma, H)
    b = beta_gamma(G, gamma)
    at = alpha_tilde_gamma(G, gamma)
    if abs(at - (a + b)) > 1e-12 * max(1.0, abs(at)):
        raise AssertionError(f"alpha_tilde {at} differs from alpha + beta {a + b}")
    k, slack, reason = max_kappa(H, b)
    return ExponentReport(a, b, at, alpha_tilde_printed(G, gamma), improved_labels(H), k, slack,
                          reason, check_integrability(H, "improved"), check_integrability(H, "raw"))


# ---------------------------------------------------------------------------
# corpus


def contraction_from_spec(G: LabeledMultigraph, spec: dict | None) -> Contraction:
    """Blocks listed in ``spec['blocks']``; unlisted noise vertices are singletons.
    ``spec['flagged']`` lists flagged blocks; odd blocks are always flagged."""
    spec = spec or {}
    noise = G.noise
    listed = [tuple(b) for b in spec.get("blocks", [])]
    used = {v for b in listed for v in b}
    blocks = listed + [(v,) for v in noise if v not in used]
    flagged_sets = {frozenset(b) for b in spec.get("flagged", [])}
    flags = tuple(len(b) % 2 == 1 or frozenset(b) in flagged_sets for b in blocks)
    return Contraction(tuple(noise), tuple(G.label_of(v) for v in noise), tuple(blocks), flags)


@dataclass
class CorpusEntry:
    name: str
    graph: LabeledMultigraph
    gamma: Contraction
    expected: str
    failing: list
    note: str


def load_corpus(path: str | None = None) -> list[CorpusEntry]:
    if path is None:
        text = resources.files("jumpspde").joinpath("data/diagram_corpus.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    out = []
    for item in doc["diagrams"]:
        G = LabeledMultigraph.from_dict(item)
        out.append(CorpusEntry(item["name"], G, contraction_from_spec(G, item.get("contraction")),
                               item.get("expected", ""), item.get("failing", []), item.get("note", "")))
    return out


# ---------------------------------------------------------------------------
# random graphs for fuzzing


def random_labeled_graph(rng: np.random.Generator, max_vertices: int = 7,
                         max_tries: int = 200) -> tuple[LabeledMultigraph, Contraction]:
    """A random valid labelled graph with at most ``max_vertices`` vertices and a
    random contraction of its noise vertices."""
    if max_vertices < 3:
        raise ValueError("need room for a root, a test vertex and a noise vertex")
    for _ in range(max_tries):
        d = int(rng.integers(1, 4))
        n_up = int(rng.integers(1, 3))
        room = max_vertices - 1 - n_up
        if room < 1:
            n_up, room = 1, max_vertices - 2
        n_noise = int(rng.integers(1, min(room, 4) + 1))
        n_int = int(rng.integers(0, room - n_noise + 1))
        up = [f"u{i}" for i in range(n_up)]
        noise = [f"w{i}" for i in range(n_noise)]
        inner = [f"v{i}" for i in range(n_int)]
        verts = ["root"] + up + inner + noise
        roles = {"root": "star", **{v: "up" for v in up}, **{v: "internal" for v in inner},
                 **{v: "noise" for v in noise}}
        edges = [Edge("root", u, 0.0, 0, "test") for u in up]
        sinks = up + inner

        def label():
            return float(rng.integers(0, 7)) / 2.0, int(rng.choice([-1, 0, 0, 1, 2]))
        for v in inner + noise:
            targets = [w for w in sinks if w != v]
            a, r = label()
            edges.append(Edge(v, str(rng.choice(targets)), a, r))
        for _ in range(int(rng.integers(0, 4))):
            src = str(rng.choice(inner + noise + up))
            targets = [w for w in sinks if w != src]
            if not targets:
                continue
            a, r = label()
            edges.append(Edge(src, str(rng.choice(targets)), a, r))
        labels = {v: int(rng.integers(1, 3)) for v in noise}
        G = LabeledMultigraph(tuple(verts), roles, tuple(edges), d, labels, "random")
        if validate_graph(G):
            continue
        order = rng.permutation(n_noise)
        blocks, cur = [], []
        for i in order:
            cur.append(noise[i])
            if rng.random() < 0.5:
                blocks.append(tuple(cur))
                cur = []
        if cur:
            blocks.append(tuple(cur))
        flags = tuple(len(b) % 2 == 1 or bool(rng.random() < 0.5) for b in blocks)
        gamma = Contraction(tuple(noise), tuple(labels[v] for v in noise), tuple(blocks), flags)
        try:
            contract_graph(G, gamma)
        except ValueError:
            continue
        return G, gamma
    raise RuntimeError("no valid random graph found")
