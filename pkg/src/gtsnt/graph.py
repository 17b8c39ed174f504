"""Graph storage, on-disk formats and the normalized propagation operator."""

from __future__ import annotations

import json
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SPLIT_NAMES = ("train", "val", "test")
BINARY_MAGIC = b"GTS1"
_HEADER = struct.Struct("<4sQQQ")


class GraphFormatError(ValueError):
    """Malformed graph files. The message carries ``file:line`` when known."""

    def __init__(self, path, message, line=None):
        where = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with a transductive split.

    ``adjacency`` is a CSR matrix of ones, symmetric, without duplicate
    entries. Unlabeled nodes carry label ``-1``.
    """

    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    num_classes: int = 0

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        """Directed edge count (each undirected edge counted twice)."""
        return int(self.adjacency.nnz)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        if self.adjacency.shape != other.adjacency.shape:
            return False
        a, b = self.adjacency, other.adjacency
        return (
            np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and self.num_classes == other.num_classes
            and set(self.splits) == set(other.splits)
            and all(np.array_equal(self.splits[k], other.splits[k]) for k in self.splits)
        )

    __hash__ = None


def make_graph(n, edges, features, labels=None, splits=None, num_classes=None) -> Graph:
    """Build a validated :class:`Graph` from an edge list.

    Edges are symmetrized, deduplicated and self-loops are dropped.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ValueError(f"edge endpoint outside [0, {n})")
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    keep = src != dst
    adj = sp.csr_matrix(
        (np.ones(int(keep.sum())), (src[keep], dst[keep])), shape=(n, n)
    )
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()

    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != n:
        raise ValueError(f"features must be {n}xd, got {features.shape}")
    labels = np.full(n, -1, np.int64) if labels is None else np.asarray(labels, np.int64)
    if labels.shape != (n,):
        raise ValueError(f"labels must have length {n}")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    if np.any(labels < -1) or np.any(labels >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")

    splits = {k: np.asarray(v, dtype=np.int64) for k, v in (splits or {}).items()}
    _check_splits(splits, n)
    return Graph(adj, features, labels, splits, int(num_classes))


def _check_splits(splits, n, path="splits"):
    seen = set()
    for name, idx in splits.items():
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise GraphFormatError(path, f"split {name!r} has index outside [0, {n})")
        overlap = seen.intersection(idx.tolist())
        if overlap:
            raise GraphFormatError(path, f"split {name!r} overlaps another split at {sorted(overlap)[:5]}")
        seen.update(idx.tolist())


# ---------------------------------------------------------------------------
# on-disk formats


def _read_edges(path: Path, n: int) -> np.ndarray:
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise GraphFormatError(path, "expected two node ids", lineno)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(path, "node ids must be integers", lineno) from None
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(path, f"node id outside [0, {n})", lineno)
            rows.append((u, v))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _read_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(x) for x in line.split(",")]
            except ValueError:
                raise GraphFormatError(path, "non-numeric feature", lineno) from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise GraphFormatError(path, f"expected {width} values, got {len(row)}", lineno)
            rows.append(row)
    if not rows:
        raise GraphFormatError(path, "no feature rows")
    return np.array(rows, dtype=np.float64)


def _read_labels(path: Path, n: int, num_classes: int | None) -> np.ndarray:
    labels = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                y = int(line)
            except ValueError:
                raise GraphFormatError(path, "label must be an integer", lineno) from None
            if y < -1 or (num_classes is not None and y >= num_classes):
                raise GraphFormatError(path, f"label {y} out of range", lineno)
            labels.append(y)
    if len(labels) != n:
        raise GraphFormatError(path, f"expected {n} labels, got {len(labels)}")
    return np.array(labels, dtype=np.int64)


def _read_splits(path: Path, n: int) -> tuple[dict[str, np.ndarray], int | None]:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(path, exc.msg, exc.lineno) from None
    splits = {}
    for name in SPLIT_NAMES:
        if name not in raw:
            raise GraphFormatError(path, f"missing split {name!r}")
        splits[name] = np.asarray(raw[name], dtype=np.int64)
    _check_splits(splits, n, path)
    return splits, raw.get("num_classes")


def _require(path: Path) -> Path:
    if not path.is_file():
        raise GraphFormatError(path, "missing file")
    return path


def load_graph(path, format: str = "text") -> Graph:
    """Load a graph directory written in the ``text`` or ``binary`` layout.

    Text layout: ``edges.txt``, ``features.csv``, ``labels.txt``,
    ``splits.json``. Binary layout replaces the first two by ``graph.bin``.
    """
    root = Path(path)
    if format == "text":
        features = _read_features(_require(root / "features.csv"))
        n = features.shape[0]
        edges = _read_edges(_require(root / "edges.txt"), n)
    elif format == "binary":
        n, indptr, indices, features = _read_binary(_require(root / "graph.bin"))
        counts = np.diff(indptr)
        edges = np.stack([np.repeat(np.arange(n), counts), indices], axis=1)
    else:
        raise ValueError(f"unknown graph format {format!r}")

    splits, num_classes = _read_splits(_require(root / "splits.json"), n)
    labels = _read_labels(_require(root / "labels.txt"), n, num_classes)
    return make_graph(n, edges, features, labels, splits, num_classes)


def write_graph(g: Graph, path, format: str = "text") -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if format == "text":
        coo = sp.triu(g.adjacency, k=1).tocoo()
        with (root / "edges.txt").open("w") as fh:
            for u, v in zip(coo.row.tolist(), coo.col.tolist()):
                fh.write(f"{u} {v}\n")
        with (root / "features.csv").open("w") as fh:
            for row in g.features:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
    elif format == "binary":
        _write_binary(root / "graph.bin", g)
    else:
        raise ValueError(f"unknown graph format {format!r}")

    (root / "labels.txt").write_text("".join(f"{int(y)}\n" for y in g.labels))
    payload = {k: g.splits.get(k, np.empty(0, np.int64)).tolist() for k in SPLIT_NAMES}
    payload["num_classes"] = g.num_classes
    (root / "splits.json").write_text(json.dumps(payload))
    return root


def _write_binary(path: Path, g: Graph) -> None:
    adj = g.adjacency
    n, d = g.features.shape
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, n, d, adj.nnz))
        fh.write(adj.indptr.astype("<u8").tobytes())
        fh.write(adj.indices.astype("<u8").tobytes())
        fh.write(g.features.astype("<f4").tobytes())


def _read_binary(path: Path):
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise GraphFormatError(path, "truncated header")
    magic, n, d, nnz = _HEADER.unpack_from(blob)
    if magic != BINARY_MAGIC:
        raise GraphFormatError(path, f"bad magic {magic!r}")
    expected = _HEADER.size + 8 * (n + 1) + 8 * nnz + 4 * n * d
    if len(blob) != expected:
        raise GraphFormatError(path, f"expected {expected} bytes, found {len(blob)}")
    off = _HEADER.size
    indptr = np.frombuffer(blob, "<u8", n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    indices = np.frombuffer(blob, "<u8", nnz, off).astype(np.int64)
    off += 8 * nnz
    features = np.frombuffer(blob, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr) < 0):
        raise GraphFormatError(path, "inconsistent CSR row pointers")
    return int(n), indptr, indices, features


def load_planetoid(path, name: str) -> Graph:
    """Read the public Planetoid pickles (``ind.<name>.x`` ...) with the
    standard split: 20 labels per class for training, 500 validation and
    1000 test nodes."""
    root = Path(path)
    objs = {}
    for key in ("x", "y", "tx", "ty", "allx", "ally", "graph"):
        with _require(root / f"ind.{name}.{key}").open("rb") as fh:
            objs[key] = pickle.load(fh, encoding="latin1")
    test_index = np.loadtxt(_require(root / f"ind.{name}.test.index"), dtype=np.int64)
    test_sorted = np.sort(test_index)

    tx, ty = objs["tx"], objs["ty"]
    if name == "citeseer":
        # isolated test nodes are missing from tx/ty; pad with zero rows
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = sp.lil_matrix((len(full), objs["x"].shape[1]))
        tx_ext[test_sorted - test_sorted.min(), :] = tx
        tx = tx_ext
        ty_ext = np.zeros((len(full), objs["y"].shape[1]))
        ty_ext[test_sorted - test_sorted.min(), :] = ty
        ty = ty_ext

    features = sp.vstack((objs["allx"], tx)).tolil()
    features[test_index, :] = features[test_sorted, :]
    onehot = np.vstack((objs["ally"], ty))
    onehot[test_index, :] = onehot[test_sorted, :]
    labels = np.where(onehot.sum(1) > 0, onehot.argmax(1), -1)

    n = features.shape[0]
    edges = [(u, v) for u, nbrs in objs["graph"].items() for v in nbrs if u < n and v < n]
    n_train = objs["y"].shape[0]
    splits = {
        "train": np.arange(n_train),
        "val": np.arange(n_train, min(n_train + 500, objs["ally"].shape[0])),
        "test": test_sorted[labels[test_sorted] >= 0][:1000],
    }
    return make_graph(n, edges, features.toarray(), labels, splits, onehot.shape[1])


# ---------------------------------------------------------------------------
# propagation operator


@dataclass(frozen=True)
class SparseOperator:
    matrix: sp.csr_matrix
    normalization: str = "sym_self_loops"

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)


def build_propagation_operator(g: Graph) -> SparseOperator:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
    n = g.num_nodes
    a_hat = (g.adjacency + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    p = sp.diags(inv_sqrt) @ a_hat @ sp.diags(inv_sqrt)
    p = sp.csr_matrix(p)
    p.sort_indices()
    return SparseOperator(p)


def apply_operator(p: SparseOperator, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != p.shape[1]:
        raise ValueError(f"operator is {p.shape}, matrix is {m.shape}")
    return np.asarray(p.matrix @ m)


def synthesize_graph(
    n: int,
    avg_degree: float,
    d: int,
    num_classes: int,
    seed: int,
    homophily: float = 0.8,
    feature_noise: float = 1.0,
    split_fractions: tuple[float, float] = (0.6, 0.2),
) -> Graph:
    """Planted-partition random graph with class-correlated Gaussian features.

    Roughly ``n * avg_degree / 2`` undirected edges are drawn; each edge
    stays inside the source's class with probability ``homophily``.
    """
    if n < 1 or d < 1 or num_classes < 1 or avg_degree < 0:
        raise ValueError("n, d and num_classes must be >= 1 and avg_degree >= 0")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)

    m = int(round(n * avg_degree / 2)) if n > 1 else 0
    edges = np.empty((0, 2), np.int64)
    if m:
        src = rng.integers(0, n, size=m)
        dst = rng.integers(0, n, size=m)
        by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
        same = rng.random(m) < homophily
        for i in np.flatnonzero(same):
            pool = by_class[labels[src[i]]]
            dst[i] = pool[rng.integers(len(pool))]
        edges = np.stack([src, dst], axis=1)

    centers = rng.normal(size=(num_classes, d))
    features = centers[labels] + feature_noise * rng.normal(size=(n, d))

    perm = rng.permutation(n)
    n_train = int(split_fractions[0] * n)
    n_val = int(split_fractions[1] * n)
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }
    return make_graph(n, edges, features, labels, splits, num_classes)


def permute_graph(g: Graph, perm: np.ndarray) -> Graph:
    """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    adj = g.adjacency[perm][:, perm].tocsr()
    adj.sort_indices()
    splits = {k: np.sort(inv[v]) for k, v in g.splits.items()}
    return Graph(adj, g.features[perm], g.labels[perm], splits, g.num_classes)
