"""Dataset directory format, split generation and a synthetic citation-graph generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .graph import Graph, IngestionError, add_reverse_and_self_edges
from .tensor import CsrMatrix

SPLIT_KINDS = ("planetoid", "ra_pl", "s622")
META_KEYS = ("num_vertices", "num_features", "num_classes", "multilabel")
RA_PL_TRAIN, RA_PL_VAL = 20, 30
PLANETOID_VAL, PLANETOID_TEST = 500, 1000


@dataclass(frozen=True)
class Split:
    kind: str
    seed: int | None
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise IngestionError(f"unknown split kind {self.kind!r}")
        for name in ("train", "val", "test"):
            arr = np.unique(np.asarray(getattr(self, name), dtype=np.int64))
            if len(arr) != len(getattr(self, name)):
                raise IngestionError(f"split {name} set contains duplicate indices")
            object.__setattr__(self, name, arr)
        if (
            np.intersect1d(self.train, self.val).size
            or np.intersect1d(self.train, self.test).size
            or np.intersect1d(self.val, self.test).size
        ):
            raise IngestionError("split sets overlap")

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def check_graph(self, g: Graph):
        top = max((int(a.max()) for a in (self.train, self.val, self.test) if a.size), default=-1)
        if top >= g.num_vertices or min((int(a.min()) for a in (self.train, self.val, self.test) if a.size), default=0) < 0:
            raise IngestionError("split references a vertex outside the graph")

    def to_json(self) -> str:
        body = {
            "kind": self.kind,
            "seed": self.seed,
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        }
        return json.dumps(body, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Split:
        try:
            d = json.loads(text)
            return cls(d["kind"], d.get("seed"), d["train"], d["val"], d["test"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IngestionError(f"malformed split file: {exc}") from exc


def save_split(split: Split, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(split.to_json())
    return path


def load_split(path) -> Split:
    path = Path(path)
    try:
        return Split.from_json(path.read_text())
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror}") from exc


# -- dataset directories ------------------------------------------------------------------


def _read_meta(path: Path) -> dict:
    try:
        meta = json.loads(path.read_text())
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise IngestionError(f"{path}: missing keys {missing}")
    for k in ("num_vertices", "num_features", "num_classes"):
        if not isinstance(meta[k], int) or meta[k] < 0:
            raise IngestionError(f"{path}: {k} must be a non-negative integer")
    if not isinstance(meta["multilabel"], bool):
        raise IngestionError(f"{path}: multilabel must be true or false")
    return meta


def _read_edges(path: Path, n: int) -> np.ndarray:
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror}") from exc
    lines = text.splitlines()
    tokens = text.split()
    if len(tokens) == 2 * len(lines) and all(line.count("\t") == 1 for line in lines):
        try:
            edges = np.array(tokens, dtype=np.int64).reshape(-1, 2)
        except ValueError:
            edges = None
        if edges is not None and (len(edges) == 0 or (edges.min() >= 0 and edges.max() < n)):
            return edges
    # slow path: find and name the first bad line
    out = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(f"{path}:{lineno}: expected 'src<TAB>dst'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise IngestionError(f"{path}:{lineno}: vertex ids must be base-10 integers") from None
        if not (0 <= a < n and 0 <= b < n):
            raise IngestionError(f"{path}:{lineno}: vertex id outside [0, {n})")
        out.append((a, b))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def _read_labels(path: Path, n: int, c: int, multilabel: bool) -> np.ndarray:
    try:
        lines = path.read_text().split("\n")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror}") from exc
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) != n:
        raise IngestionError(f"{path}: expected {n} lines, found {len(lines)}")
    labels = np.zeros((n, c), dtype=np.int8) if multilabel else np.zeros(n, dtype=np.int64)
    for lineno, line in enumerate(lines, 1):
        try:
            ids = [int(t) for t in line.split()]
        except ValueError:
            raise IngestionError(f"{path}:{lineno}: labels must be integers") from None
        if not multilabel and len(ids) != 1:
            raise IngestionError(f"{path}:{lineno}: expected exactly one class id")
        if any(not 0 <= k < c for k in ids):
            raise IngestionError(f"{path}:{lineno}: class id outside [0, {c})")
        if multilabel:
            labels[lineno - 1, ids] = 1
        else:
            labels[lineno - 1] = ids[0]
    return labels


def load_dataset(directory) -> Graph:
    """Read a dataset directory (meta.json, features.f64, edges.tsv, labels.txt)."""
    d = Path(directory)
    if not d.is_dir():
        raise IngestionError(f"{d}: dataset directory not found")
    meta = _read_meta(d / "meta.json")
    n, f, c = meta["num_vertices"], meta["num_features"], meta["num_classes"]
    feat_path = d / "features.f64"
    try:
        raw = np.fromfile(feat_path, dtype="<f8")
    except OSError as exc:
        raise IngestionError(f"{feat_path}: {exc.strerror}") from exc
    if raw.size != n * f:
        raise IngestionError(f"{feat_path}: holds {raw.size} values, meta.json implies {n} x {f}")
    edges = _read_edges(d / "edges.tsv", n)
    labels = _read_labels(d / "labels.txt", n, c, meta["multilabel"])
    sym = add_reverse_and_self_edges(edges, n)
    sym = sym[sym[:, 0] != sym[:, 1]]
    adj = CsrMatrix.from_coo(sym[:, 0], sym[:, 1], np.ones(len(sym)), (n, n))
    return Graph(n, raw.astype(np.float64).reshape(n, f), labels, adj, c, multilabel=meta["multilabel"])


def write_dataset(g: Graph, directory) -> Path:
    """Write ``g`` in the directory format; each undirected edge is written once (src < dst)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"num_vertices": g.num_vertices, "num_features": g.num_features,
            "num_classes": g.num_classes, "multilabel": bool(g.multilabel)}
    (d / "meta.json").write_text(json.dumps(meta) + "\n")
    g.features.astype("<f8").tofile(d / "features.f64")
    e = g.edge_list()
    e = e[e[:, 0] < e[:, 1]]
    (d / "edges.tsv").write_text("".join(f"{a}\t{b}\n" for a, b in e.tolist()))
    if g.multilabel:
        rows = (" ".join(str(k) for k in np.flatnonzero(r)) for r in g.labels)
    else:
        rows = (str(int(k)) for k in g.labels)
    (d / "labels.txt").write_text("".join(r + "\n" for r in rows))
    return d


def undirected_edge_entries(g: Graph) -> int:
    """Stored adjacency entries without self-loops: each undirected edge counted twice."""
    rows = g.adj.row_ids()
    return int(np.count_nonzero(rows != g.adj.col_idx))


# -- splits ------------------------------------------------------------------------------


def _class_of(g: Graph) -> np.ndarray:
    if g.multilabel:
        raise ValueError("class-stratified splits need single-label data")
    return g.labels


def generate_split(g: Graph, kind: str, seed: int) -> Split:
    """Random split, a pure function of (labels, kind, seed).

    ``ra_pl``: per class 20 train then 30 validation vertices drawn without
    replacement, remainder test. ``s622``: one global shuffle, first
    floor(0.6 N) train, next floor(0.2 N) validation, remainder test.
    """
    kind = normalize_kind(kind)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), SPLIT_KINDS.index(kind)]))
    n = g.num_vertices
    if kind == "ra_pl":
        labels = _class_of(g)
        train, val = [], []
        for c in range(g.num_classes):
            members = np.flatnonzero(labels == c)
            if len(members) < RA_PL_TRAIN + RA_PL_VAL:
                raise ValueError(f"class {c} has {len(members)} vertices; ra_pl needs {RA_PL_TRAIN + RA_PL_VAL}")
            pick = rng.permutation(members)
            train.append(pick[:RA_PL_TRAIN])
            val.append(pick[RA_PL_TRAIN : RA_PL_TRAIN + RA_PL_VAL])
        train, val = np.concatenate(train), np.concatenate(val)
        test = np.setdiff1d(np.arange(n), np.concatenate([train, val]))
        return Split("ra_pl", int(seed), train, val, test)
    if kind == "s622":
        perm = rng.permutation(n)
        n_train, n_val = math.floor(0.6 * n), math.floor(0.2 * n)
        return Split("s622", int(seed), perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])
    raise ValueError("the planetoid split is fixed; use load_planetoid_split")


def normalize_kind(kind: str) -> str:
    aliases = {"ra-pl": "ra_pl", "rapl": "ra_pl", "622": "s622", "pl": "planetoid", "plan": "planetoid"}
    kind = aliases.get(kind, kind)
    if kind not in SPLIT_KINDS:
        raise ValueError(f"unknown split kind {kind!r}")
    return kind


def check_planetoid_sizes(split: Split, g: Graph):
    expect = (RA_PL_TRAIN * g.num_classes, PLANETOID_VAL, PLANETOID_TEST)
    if split.sizes() != expect:
        raise IngestionError(f"planetoid split sizes {split.sizes()} differ from expected {expect}")


def load_planetoid_split(path, g: Graph) -> Split:
    """Load a fixed benchmark split and verify 20 C / 500 / 1000 sizes."""
    split = load_split(path)
    if split.kind != "planetoid":
        split = Split("planetoid", split.seed, split.train, split.val, split.test)
    split.check_graph(g)
    check_planetoid_sizes(split, g)
    return split


def packaged_planetoid_split(name: str) -> Path | None:
    """Bundled public split for ``name`` (only those derivable from index conventions)."""
    ref = resources.files("flatgraph") / "splits" / f"{name.lower()}_planetoid.json"
    return Path(str(ref)) if ref.is_file() else None


def resolve_split(g: Graph, dataset_dir, spec: dict, seed: int) -> Split:
    """Materialise a split reference from an experiment config.

    ``{"file": path}`` loads a stored split; ``{"kind": "planetoid"}`` looks
    for ``planetoid.json`` in the dataset directory, then for a bundled copy;
    other kinds are generated with the run seed.
    """
    if "file" in spec:
        path = Path(spec["file"])
        if not path.is_absolute() and dataset_dir is not None and not path.exists():
            path = Path(dataset_dir) / path
        split = load_split(path)
        split.check_graph(g)
        if split.kind == "planetoid":
            check_planetoid_sizes(split, g)
        return split
    kind = normalize_kind(spec["kind"])
    if kind == "planetoid":
        local = Path(dataset_dir) / "planetoid.json" if dataset_dir is not None else None
        if local is not None and local.is_file():
            return load_planetoid_split(local, g)
        bundled = packaged_planetoid_split(Path(dataset_dir).name) if dataset_dir is not None else None
        if bundled is None:
            raise IngestionError(f"no planetoid.json for dataset {dataset_dir}")
        return load_planetoid_split(bundled, g)
    return generate_split(g, kind, int(spec.get("seed", seed)))


# -- synthetic data --------------------------------------------------------------------


def synthetic_citation_graph(
    class_sizes,
    num_features: int = 500,
    words_per_vertex: int = 18,
    topic_purity: float = 0.3,
    mean_degree: float = 4.0,
    homophily: float = 0.5,
    seed: int = 0,
) -> Graph:
    """Citation-like graph: sparse binary bag-of-words features and homophilous edges.

    Each class owns a block of feature words; a vertex draws a
    ``topic_purity`` fraction of its words from its class block and the rest
    uniformly. Each vertex starts about ``mean_degree / 2`` edges, each to a
    same-class vertex with probability ``homophily``.
    """
    rng = np.random.default_rng(seed)
    sizes = np.asarray(class_sizes, dtype=np.int64)
    c = len(sizes)
    n = int(sizes.sum())
    labels = rng.permutation(np.repeat(np.arange(c), sizes))
    block = max(num_features // c, 1)
    feats = np.zeros((n, num_features))
    for v in range(n):
        k = max(1, rng.poisson(words_per_vertex))
        own = rng.random(k) < topic_purity
        lo = labels[v] * block
        words = np.where(own, lo + rng.integers(0, block, k), rng.integers(0, num_features, k))
        feats[v, np.minimum(words, num_features - 1)] = 1.0
    members = [np.flatnonzero(labels == k) for k in range(c)]
    src, dst = [], []
    for v in range(n):
        for _ in range(max(1, rng.poisson(mean_degree / 2))):
            pool = members[labels[v]] if rng.random() < homophily else None
            u = int(rng.choice(pool)) if pool is not None else int(rng.integers(n))
            if u != v:
                src.append(v)
                dst.append(u)
    sym = add_reverse_and_self_edges(np.stack([src, dst], axis=1), n)
    sym = sym[sym[:, 0] != sym[:, 1]]
    adj = CsrMatrix.from_coo(sym[:, 0], sym[:, 1], np.ones(len(sym)), (n, n))
    return Graph(n, feats, labels, adj, c)


# class sizes of the two small citation graphs; used to build size-faithful stand-ins
CORA_CLASS_SIZES = (351, 217, 418, 818, 426, 298, 180)
CITESEER_CLASS_SIZES = (264, 590, 668, 701, 596, 508)


def planetoid_like_split(g: Graph, seed: int = 0) -> Split:
    """First 20 per class train, then 500 validation and 1000 test, for synthetic stand-ins."""
    rng = np.random.default_rng(seed)
    labels = _class_of(g)
    train = np.concatenate([rng.permutation(np.flatnonzero(labels == k))[:RA_PL_TRAIN] for k in range(g.num_classes)])
    rest = rng.permutation(np.setdiff1d(np.arange(g.num_vertices), train))
    return Split("planetoid", seed, train, rest[:PLANETOID_VAL], rest[PLANETOID_VAL : PLANETOID_VAL + PLANETOID_TEST])
