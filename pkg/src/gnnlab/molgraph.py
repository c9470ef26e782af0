"""Molecular graphs: a small SMILES subset, featurization, and synthetic task mixes.

Molecules are undirected simple graphs with an element symbol per node and a
bond order per edge. Everything downstream (features, labels, splits) is
derived deterministically from seeds so that dataset builds are reproducible
byte for byte.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

ELEMENTS = ("C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
BOND_ORDERS = ("single", "double", "triple", "aromatic")
BOND_SYMBOL = {"single": "-", "double": "=", "triple": "#", "aromatic": ":"}
SYMBOL_BOND = {v: k for k, v in BOND_SYMBOL.items()}
MAX_DEGREE = 6  # degrees above this share the last one-hot slot

NODE_FEATURE_DIM = len(ELEMENTS) + MAX_DEGREE + 1
EDGE_FEATURE_DIM = len(BOND_ORDERS)

_ELEMENT_INDEX = {s: i for i, s in enumerate(ELEMENTS)}
_ORDER_INDEX = {o: i for i, o in enumerate(BOND_ORDERS)}


class SmilesError(ValueError):
    """Parse failure with the 0-based offset of the offending character."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class MolGraph:
    """Undirected molecular graph.

    Edges are stored once, as (u, v) with u < v, sorted lexicographically;
    ``orders[i]`` is the bond order of ``edges[i]``.
    """

    symbols: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    orders: tuple[str, ...]

    def __post_init__(self):
        if not self.symbols:
            raise ValueError("molecule must have at least one atom")
        for s in self.symbols:
            if s not in _ELEMENT_INDEX:
                raise ValueError(f"unknown element symbol {s!r}")
        if len(self.orders) != len(self.edges):
            raise ValueError("orders and edges must have equal length")
        n = len(self.symbols)
        seen = set()
        prev = None
        for (u, v), o in zip(self.edges, self.orders):
            if not (0 <= u < v < n):
                raise ValueError(f"bad edge ({u}, {v}) for {n} nodes")
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u}, {v})")
            if prev is not None and (u, v) < prev:
                raise ValueError("edges must be sorted")
            if o not in _ORDER_INDEX:
                raise ValueError(f"unknown bond order {o!r}")
            seen.add((u, v))
            prev = (u, v)

    @property
    def n_nodes(self) -> int:
        return len(self.symbols)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for u, v in self.edges:
            d[u] += 1
            d[v] += 1
        return d

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        for u, v in self.edges:
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a

    def neighbors(self, u: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == u:
                out.append(b)
            elif b == u:
                out.append(a)
        return sorted(out)


def _canonical_edges(edges, orders):
    pairs = sorted(zip([tuple(sorted(e)) for e in edges], orders))
    return tuple(e for e, _ in pairs), tuple(o for _, o in pairs)


def make_molgraph(symbols, edges, orders) -> MolGraph:
    """Build a MolGraph, normalizing edge direction and order."""
    e, o = _canonical_edges(edges, orders)
    return MolGraph(tuple(symbols), e, o)


def relabel(g: MolGraph, perm) -> MolGraph:
    """Apply a node permutation: node i of ``g`` becomes node perm[i]."""
    perm = list(perm)
    if sorted(perm) != list(range(g.n_nodes)):
        raise ValueError("perm must be a permutation of node indices")
    symbols = [""] * g.n_nodes
    for i, s in enumerate(g.symbols):
        symbols[perm[i]] = s
    edges = [(perm[u], perm[v]) for u, v in g.edges]
    return make_molgraph(symbols, edges, g.orders)


def connected_components(g: MolGraph) -> int:
    parent = list(range(g.n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in g.edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
    return len({find(i) for i in range(g.n_nodes)})


def ring_count(g: MolGraph) -> int:
    """Cyclomatic number M - N + C (independent cycles)."""
    return g.n_edges - g.n_nodes + connected_components(g)


# ---------------------------------------------------------------------------
# SMILES subset
# ---------------------------------------------------------------------------

_LOWER_AROMATIC = set("cnosp")


def parse_smiles(text: str) -> MolGraph:
    """Parse the supported SMILES subset into a MolGraph.

    Supported: atoms C N O F P S Cl Br I, bonds - = # :, branches, and
    ring-closure digits 1-9 (implicitly single bonds). Errors carry the
    0-based position of the offending character.
    """
    symbols: list[str] = []
    edges: list[tuple[int, int]] = []
    orders: list[str] = []
    edge_set: set[tuple[int, int]] = set()

    def add_edge(u: int, v: int, order: str, pos: int):
        key = (min(u, v), max(u, v))
        if u == v:
            raise SmilesError("ring closure forms a self-loop", pos)
        if key in edge_set:
            raise SmilesError(f"duplicate bond between atoms {key[0]} and {key[1]}", pos)
        edge_set.add(key)
        edges.append(key)
        orders.append(order)

    prev: int | None = None
    pending_bond: str | None = None
    pending_pos = -1
    stack: list[int] = []
    ring_open: dict[str, int] = {}

    i = 0
    n_text = len(text)
    while i < n_text:
        ch = text[i]
        if text[i : i + 2] in ("Cl", "Br"):
            sym, width = text[i : i + 2], 2
        elif ch in _ELEMENT_INDEX:
            sym, width = ch, 1
        else:
            sym, width = None, 1

        if sym is not None:
            symbols.append(sym)
            node = len(symbols) - 1
            if prev is not None:
                add_edge(prev, node, pending_bond or "single", i)
            elif pending_bond is not None:
                raise SmilesError("bond symbol with no following atom", pending_pos)
            pending_bond = None
            prev = node
            i += width
            continue

        if pending_bond is not None and ch not in SYMBOL_BOND:
            # Anything but an atom after a bond symbol is malformed, including
            # ring digits: closures are implicitly single in this subset.
            raise SmilesError("bond symbol with no following atom", pending_pos)

        if ch in SYMBOL_BOND:
            if pending_bond is not None:
                raise SmilesError("bond symbol with no following atom", pending_pos)
            if prev is None:
                raise SmilesError("bond symbol with no preceding atom", i)
            pending_bond = SYMBOL_BOND[ch]
            pending_pos = i
        elif ch == "(":
            if prev is None:
                raise SmilesError("branch opened before any atom", i)
            stack.append(prev)
        elif ch == ")":
            if not stack:
                raise SmilesError("unbalanced parenthesis", i)
            prev = stack.pop()
        elif ch.isdigit():
            if ch == "0":
                raise SmilesError("ring-closure digit must be 1-9", i)
            if prev is None:
                raise SmilesError("ring-closure digit before any atom", i)
            if ch in ring_open:
                add_edge(ring_open.pop(ch), prev, "single", i)
            else:
                ring_open[ch] = prev
        elif ch in _LOWER_AROMATIC:
            raise SmilesError(
                f"lowercase aromatic atom {ch!r} not supported; write the uppercase "
                "element with ':' bonds", i)
        else:
            raise SmilesError(f"unknown atom symbol {ch!r}", i)
        i += 1

    if pending_bond is not None:
        raise SmilesError("bond symbol with no following atom", pending_pos)
    if stack:
        raise SmilesError("unbalanced parenthesis", n_text - 1)
    if ring_open:
        digit, node = next(iter(sorted(ring_open.items())))
        raise SmilesError(f"unmatched ring-closure digit {digit!r} at end of input", n_text - 1)
    if not symbols:
        raise SmilesError("empty SMILES", 0)
    return make_molgraph(symbols, edges, orders)


def _spanning_tree_preferring_nonsingle(g: MolGraph):
    """Spanning tree containing every non-single edge; remainder are closures.

    Ring-closure bonds are implicitly single in the grammar, so any non-single
    edge must be written as a tree (chain/branch) bond. That is possible iff
    the non-single edges form a forest, which holds for every parseable
    molecule and for generated ones by construction.
    """
    parent = list(range(g.n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = set()
    ranked = sorted(range(g.n_edges), key=lambda i: (g.orders[i] == "single", g.edges[i]))
    for i in ranked:
        u, v = g.edges[i]
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            tree.add(g.edges[i])
        elif g.orders[i] != "single":
            raise ValueError("non-single bond orders form a cycle; not expressible "
                             "in the SMILES subset")
    return tree


def write_smiles(g: MolGraph) -> str:
    s, _ = write_smiles_with_order(g)
    return s


def write_smiles_with_order(g: MolGraph) -> tuple[str, list[int]]:
    """Emit a (non-canonical) SMILES string plus the atom emission order.

    ``order[k]`` is the original node index of the k-th emitted atom, i.e.
    re-parsing the string yields the graph relabeled by order position.
    """
    if connected_components(g) != 1:
        raise ValueError("can only write connected molecules")
    tree = _spanning_tree_preferring_nonsingle(g)
    order_of = {e: o for e, o in zip(g.edges, g.orders)}
    adj: dict[int, list[int]] = {i: [] for i in range(g.n_nodes)}
    for u, v in tree:
        adj[u].append(v)
        adj[v].append(u)
    closures: dict[int, list[int]] = {i: [] for i in range(g.n_nodes)}
    for u, v in g.edges:
        if (u, v) not in tree:
            closures[u].append(v)
            closures[v].append(u)

    digit_of: dict[tuple[int, int], str] = {}
    free_digits = [str(d) for d in range(1, 10)]
    out: list[str] = []
    emit_order: list[int] = []
    visited = [False] * g.n_nodes

    def bond_str(u, v):
        o = order_of[(min(u, v), max(u, v))]
        return "" if o == "single" else BOND_SYMBOL[o]

    def ring_digits(u):
        chunks = []
        for w in sorted(closures[u]):
            key = (min(u, w), max(u, w))
            if key in digit_of:
                chunks.append(digit_of.pop(key))
                free_digits.append(chunks[-1])
                free_digits.sort()
            else:
                if not free_digits:
                    raise ValueError("more than 9 ring closures open at once")
                d = free_digits.pop(0)
                digit_of[key] = d
                chunks.append(d)
        return "".join(chunks)

    def emit(u):
        out.append(g.symbols[u])
        emit_order.append(u)
        visited[u] = True
        out.append(ring_digits(u))
        kids = [w for w in sorted(adj[u]) if not visited[w]]
        for idx, v in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(bond_str(u, v))
            emit(v)
            if not last:
                out.append(")")

    emit(0)
    return "".join(out), emit_order


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMatrices:
    """Dense node/edge features; arrays are read-only and safe to share."""

    node: np.ndarray  # (n_nodes, NODE_FEATURE_DIM) float64
    edge: np.ndarray  # (n_edges, EDGE_FEATURE_DIM) float64, row i <-> edges[i]


def featurize(g: MolGraph) -> FeatureMatrices:
    """One-hot element plus one-hot degree (capped) per node; one-hot bond order per edge."""
    node = np.zeros((g.n_nodes, NODE_FEATURE_DIM), dtype=np.float64)
    deg = g.degrees()
    for i, s in enumerate(g.symbols):
        node[i, _ELEMENT_INDEX[s]] = 1.0
        node[i, len(ELEMENTS) + min(int(deg[i]), MAX_DEGREE)] = 1.0
    edge = np.zeros((g.n_edges, EDGE_FEATURE_DIM), dtype=np.float64)
    for j, o in enumerate(g.orders):
        edge[j, _ORDER_INDEX[o]] = 1.0
    node.setflags(write=False)
    edge.setflags(write=False)
    return FeatureMatrices(node=node, edge=edge)


def local_clustering(g: MolGraph) -> np.ndarray:
    """Fraction of closed neighbor pairs per node; 0 where degree < 2."""
    a = g.adjacency() > 0
    deg = g.degrees()
    out = np.zeros(g.n_nodes, dtype=np.float64)
    for i in range(g.n_nodes):
        if deg[i] < 2:
            continue
        nbrs = np.flatnonzero(a[i])
        closed = 0
        for x in range(len(nbrs)):
            for y in range(x + 1, len(nbrs)):
                if a[nbrs[x], nbrs[y]]:
                    closed += 1
        out[i] = closed / (deg[i] * (deg[i] - 1) / 2)
    return out


def triangle_count(g: MolGraph) -> int:
    a = g.adjacency()
    return int(round(np.trace(a @ a @ a) / 6.0))


# ---------------------------------------------------------------------------
# Task tables and dataset mixes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskTable:
    """Labels for one table.

    Graph level: ``values``/``mask`` are (n_molecules, n_columns) arrays.
    Node level: per-molecule (n_nodes_i, n_columns) arrays, one per molecule.
    ``mask`` is True where a label is observed.
    """

    name: str
    level: str  # "graph" | "node"
    kind: str  # "classification" | "regression"
    values: object
    mask: object

    def __post_init__(self):
        if self.level not in ("graph", "node"):
            raise ValueError(f"bad level {self.level!r}")
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"bad kind {self.kind!r}")

    @property
    def n_columns(self) -> int:
        if self.level == "graph":
            return self.values.shape[1]
        return self.values[0].shape[1]


@dataclass(frozen=True)
class DatasetMix:
    """Molecules plus task tables plus a train/val/test split over molecule indices."""

    molecules: tuple[MolGraph, ...]
    tasks: tuple[TaskTable, ...]
    splits: dict

    def __post_init__(self):
        n = len(self.molecules)
        seen = []
        for part in ("train", "val", "test"):
            if part not in self.splits:
                raise DatasetError(f"missing split {part!r}")
            seen.extend(int(i) for i in self.splits[part])
        if sorted(seen) != list(range(n)):
            raise DatasetError("splits must partition the molecule indices")
        for t in self.tasks:
            if t.level == "graph":
                if t.values.shape[0] != n or t.mask.shape != t.values.shape:
                    raise DatasetError(f"task {t.name!r} rows do not match molecules")
            else:
                if len(t.values) != n:
                    raise DatasetError(f"task {t.name!r} rows do not match molecules")
                for g, v, m in zip(self.molecules, t.values, t.mask):
                    if v.shape != (g.n_nodes, t.n_columns) or m.shape != v.shape:
                        raise DatasetError(f"task {t.name!r} node rows do not match")

    def task(self, name: str) -> TaskTable:
        for t in self.tasks:
            if t.name == name:
                return t
        raise DatasetError(f"unknown task {name!r}; have {[t.name for t in self.tasks]}")


def molecule_id(index: int) -> str:
    return f"m{index:06d}"


@dataclass(frozen=True)
class GeneratorConfig:
    n_molecules: int
    seed: int
    min_nodes: int = 4
    max_nodes: int = 20
    extra_edge_prob: float = 0.03
    pcba_mask_rate: float = 0.85
    n_l1000_columns: int = 16
    n_pcba_columns: int = 32

    def __post_init__(self):
        if self.n_molecules < 10:
            raise DatasetError("n_molecules too small to populate all splits (need >= 10)")
        if not (1 <= self.min_nodes <= self.max_nodes):
            raise DatasetError("need 1 <= min_nodes <= max_nodes")
        if not (0.0 <= self.extra_edge_prob <= 1.0):
            raise DatasetError("extra_edge_prob must be in [0, 1]")
        if not (0.0 <= self.pcba_mask_rate < 1.0):
            raise DatasetError("pcba_mask_rate must be in [0, 1)")


_ELEMENT_WEIGHTS = np.array([0.55, 0.12, 0.12, 0.04, 0.03, 0.05, 0.04, 0.03, 0.02])
_TREE_ORDER_CHOICES = ("single", "double", "triple", "aromatic")
_TREE_ORDER_WEIGHTS = np.array([0.75, 0.15, 0.05, 0.05])


def _random_molecule(rng: np.random.Generator, cfg: GeneratorConfig) -> MolGraph:
    n = int(rng.integers(cfg.min_nodes, cfg.max_nodes + 1))
    symbols = [ELEMENTS[i] for i in rng.choice(len(ELEMENTS), size=n, p=_ELEMENT_WEIGHTS)]
    edges = []
    orders = []
    # random recursive tree keeps everything connected
    for i in range(1, n):
        parent = int(rng.integers(0, i))
        edges.append((parent, i))
        orders.append(_TREE_ORDER_CHOICES[int(rng.choice(4, p=_TREE_ORDER_WEIGHTS))])
    tree = set(tuple(sorted(e)) for e in edges)
    # ring-forming extras are single bonds so every cycle stays writable
    for u in range(n):
        for v in range(u + 1, n):
            if (u, v) in tree:
                continue
            if rng.random() < cfg.extra_edge_prob:
                edges.append((u, v))
                orders.append("single")
    return make_molgraph(symbols, edges, orders)


def _substructure_counts(g: MolGraph) -> np.ndarray:
    deg = g.degrees()
    counts = np.zeros(len(ELEMENTS) + len(BOND_ORDERS) + (MAX_DEGREE + 1) + 4)
    for s in g.symbols:
        counts[_ELEMENT_INDEX[s]] += 1
    for o in g.orders:
        counts[len(ELEMENTS) + _ORDER_INDEX[o]] += 1
    base = len(ELEMENTS) + len(BOND_ORDERS)
    for d in deg:
        counts[base + min(int(d), MAX_DEGREE)] += 1
    counts[-4] = g.n_nodes
    counts[-3] = g.n_edges
    counts[-2] = ring_count(g)
    counts[-1] = triangle_count(g)
    return counts


def _normalized_laplacian(g: MolGraph) -> np.ndarray:
    a = g.adjacency()
    deg = g.degrees().astype(np.float64)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(g.n_nodes) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return lap

def spectral_label(g: MolGraph) -> float:
    """Sum of the ceil(N/2) smallest normalized-Laplacian eigenvalues.

    The full eigenvalue sum is the trace (constant N here), so the partial sum
    is used to keep the label informative while staying exactly computable.
    """
    eigvals = np.linalg.eigvalsh(_normalized_laplacian(g))
    k = (g.n_nodes + 1) // 2
    return float(np.sum(np.sort(eigvals)[:k]))


def _projection_labels(counts: np.ndarray, n_columns: int, rng: np.random.Generator):
    """Thresholded random projections of substructure counts; balanced by median."""
    w = rng.normal(size=(counts.shape[1], n_columns))
    scores = counts @ w
    return (scores > np.median(scores, axis=0)).astype(np.float64)


def generate_synthetic_mix(cfg: GeneratorConfig) -> DatasetMix:
    """Build the five-table synthetic mix (two L1000-like, PCBA-like, G25-like, N4-like)."""
    rng_struct = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    molecules = tuple(_random_molecule(rng_struct, cfg) for _ in range(cfg.n_molecules))

    counts = np.stack([_substructure_counts(g) for g in molecules])
    n = cfg.n_molecules

    tables = []
    for stage, name in ((1, "l1000_vcap"), (2, "l1000_mcf7")):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, stage)))
        vals = _projection_labels(counts, cfg.n_l1000_columns, rng)
        tables.append(TaskTable(name, "graph", "classification", vals,
                                np.ones_like(vals, dtype=bool)))

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 3)))
    vals = _projection_labels(counts, cfg.n_pcba_columns, rng)
    mask = rng.random(size=vals.shape) >= cfg.pcba_mask_rate
    tables.append(TaskTable("pcba", "graph", "classification", vals, mask))

    g25 = np.zeros((n, 3))
    for i, g in enumerate(molecules):
        g25[i, 0] = spectral_label(g)
        g25[i, 1] = ring_count(g)
        g25[i, 2] = 2.0 * g.n_edges / g.n_nodes
    tables.append(TaskTable("g25", "graph", "regression", g25, np.ones_like(g25, dtype=bool)))

    node_vals = []
    node_mask = []
    for g in molecules:
        v = np.stack([g.degrees().astype(np.float64), local_clustering(g)], axis=1)
        node_vals.append(v)
        node_mask.append(np.ones_like(v, dtype=bool))
    tables.append(TaskTable("n4", "node", "regression", tuple(node_vals), tuple(node_mask)))

    rng_split = np.random.default_rng(np.random.SeedSequence((cfg.seed, 4)))
    perm = rng_split.permutation(n)
    n_train = int(math.floor(0.8 * n))
    n_val = int(math.floor(0.1 * n))
    if n_train == 0 or n_val == 0 or n - n_train - n_val == 0:
        raise DatasetError("n_molecules too small to populate all splits")
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }
    return DatasetMix(molecules, tuple(tables), splits)


# ---------------------------------------------------------------------------
# Subsampling and ablation
# ---------------------------------------------------------------------------


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def subsample(mix: DatasetMix, molecule_fraction: float, label_fraction: float,
              seed: int) -> DatasetMix:
    """Shrink the training split and the label columns, deterministically.

    Keeps floor(molecule_fraction * |train|) training molecules (val/test are
    untouched) and ceil(label_fraction * n_columns) columns per task. Dropped
    training molecules are removed from the mix and everything is reindexed.
    """
    if not (0.0 < molecule_fraction <= 1.0) or not (0.0 < label_fraction <= 1.0):
        raise DatasetError("fractions must be in (0, 1]")
    train = np.asarray(mix.splits["train"], dtype=np.int64)
    keep_n = int(math.floor(molecule_fraction * len(train)))
    if keep_n == 0:
        raise DatasetError("molecule_fraction would empty the training split")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    kept_train = np.sort(rng.permutation(train)[:keep_n])

    keep = np.sort(np.concatenate([kept_train, np.asarray(mix.splits["val"], dtype=np.int64),
                                   np.asarray(mix.splits["test"], dtype=np.int64)]))
    new_index = {int(old): i for i, old in enumerate(keep)}

    molecules = tuple(mix.molecules[int(i)] for i in keep)
    tasks = []
    for t in mix.tasks:
        n_cols = t.n_columns
        k = int(math.ceil(label_fraction * n_cols))
        col_rng = np.random.default_rng(np.random.SeedSequence((seed, 1, _stable_hash(t.name))))
        cols = np.sort(col_rng.permutation(n_cols)[:k])
        if t.level == "graph":
            vals = t.values[keep][:, cols]
            mask = t.mask[keep][:, cols]
        else:
            vals = tuple(t.values[int(i)][:, cols] for i in keep)
            mask = tuple(t.mask[int(i)][:, cols] for i in keep)
        tasks.append(TaskTable(t.name, t.level, t.kind, vals, mask))

    splits = {
        "train": np.array([new_index[int(i)] for i in kept_train], dtype=np.int64),
        "val": np.array([new_index[int(i)] for i in mix.splits["val"]], dtype=np.int64),
        "test": np.array([new_index[int(i)] for i in mix.splits["test"]], dtype=np.int64),
    }
    return DatasetMix(molecules, tuple(tasks), splits)


def ablate_dataset(mix: DatasetMix, task_name: str) -> DatasetMix:
    """Drop one task table entirely."""
    names = [t.name for t in mix.tasks]
    if task_name not in names:
        raise DatasetError(f"unknown task {task_name!r}; have {names}")
    return replace(mix, tasks=tuple(t for t in mix.tasks if t.name != task_name))


# ---------------------------------------------------------------------------
# Serialization: graphs.jsonl + task_<name>.csv + splits.json
# ---------------------------------------------------------------------------


def _format_value(x: float) -> str:
    return repr(float(x))


def save_mix(mix: DatasetMix, out_dir) -> None:
    """Write graphs.jsonl, one task CSV per table, and splits.json.

    Molecules are renumbered by their own SMILES emission order at write time
    so a reader reconstructing node numbering from the SMILES string agrees
    with the stored edge lists and node-level labels.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    perms = []  # emit_order per molecule: order[k] = old index of k-th atom
    lines = []
    for i, g in enumerate(mix.molecules):
        smiles, order = write_smiles_with_order(g)
        pos = [0] * g.n_nodes
        for k, old in enumerate(order):
            pos[old] = k
        g2 = relabel(g, pos)
        perms.append(order)
        rec = {
            "id": molecule_id(i),
            "smiles": smiles,
            "n_nodes": g2.n_nodes,
            "edges": [[u, v, o] for (u, v), o in zip(g2.edges, g2.orders)],
        }
        lines.append(json.dumps(rec, separators=(",", ":"), sort_keys=True))
    (out / "graphs.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")

    task_meta = {}
    for t in mix.tasks:
        task_meta[t.name] = {"level": t.level, "kind": t.kind, "n_columns": t.n_columns}
        rows = []
        if t.level == "graph":
            header = "molecule,column,value"
            for i in range(len(mix.molecules)):
                for c in range(t.n_columns):
                    if t.mask[i, c]:
                        rows.append(f"{molecule_id(i)},{c},{_format_value(t.values[i, c])}")
        else:
            header = "molecule,node,column,value"
            for i in range(len(mix.molecules)):
                order = perms[i]
                for k in range(len(order)):  # node rows in written numbering
                    old = order[k]
                    for c in range(t.n_columns):
                        if t.mask[i][old, c]:
                            rows.append(
                                f"{molecule_id(i)},{k},{c},{_format_value(t.values[i][old, c])}")
        (out / f"task_{t.name}.csv").write_text(header + "\n" + "\n".join(rows) + "\n",
                                                encoding="utf-8")

    splits_doc = {
        "splits": {k: [int(i) for i in mix.splits[k]] for k in ("train", "val", "test")},
        "task_order": [t.name for t in mix.tasks],
        "tasks": task_meta,
    }
    (out / "splits.json").write_text(
        json.dumps(splits_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_mix(in_dir) -> DatasetMix:
    src = Path(in_dir)
    for fname in ("graphs.jsonl", "splits.json"):
        if not (src / fname).exists():
            raise DatasetError(f"missing {fname} in {src}")

    molecules = []
    ids = []
    for ln, line in enumerate((src / "graphs.jsonl").read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        g = parse_smiles(rec["smiles"])
        stored = tuple((int(u), int(v)) for u, v, _ in rec["edges"])
        orders = tuple(o for _, _, o in rec["edges"])
        expect = make_molgraph(g.symbols, stored, orders)
        if g != expect or g.n_nodes != int(rec["n_nodes"]):
            raise DatasetError(f"graphs.jsonl line {ln}: SMILES disagrees with edge list")
        ids.append(rec["id"])
        molecules.append(g)
    index_of = {mid: i for i, mid in enumerate(ids)}

    doc = json.loads((src / "splits.json").read_text(encoding="utf-8"))
    tasks = []
    order = doc.get("task_order", sorted(doc["tasks"]))
    for name in order:
        meta = doc["tasks"][name]
        n_cols = int(meta["n_columns"])
        path = src / f"task_{name}.csv"
        if not path.exists():
            raise DatasetError(f"missing task CSV for {name!r}")
        body = path.read_text(encoding="utf-8").splitlines()
        if meta["level"] == "graph":
            vals = np.zeros((len(molecules), n_cols))
            mask = np.zeros((len(molecules), n_cols), dtype=bool)
            for row in body[1:]:
                if not row:
                    continue
                mid, col, val = row.split(",")
                vals[index_of[mid], int(col)] = float(val)
                mask[index_of[mid], int(col)] = True
        else:
            vals = [np.zeros((g.n_nodes, n_cols)) for g in molecules]
            mask = [np.zeros((g.n_nodes, n_cols), dtype=bool) for g in molecules]
            for row in body[1:]:
                if not row:
                    continue
                mid, node, col, val = row.split(",")
                i = index_of[mid]
                vals[i][int(node), int(col)] = float(val)
                mask[i][int(node), int(col)] = True
            vals = tuple(vals)
            mask = tuple(mask)
        tasks.append(TaskTable(name, meta["level"], meta["kind"], vals, mask))

    splits = {k: np.asarray(v, dtype=np.int64) for k, v in doc["splits"].items()}
    return DatasetMix(tuple(molecules), tuple(tasks), splits)
