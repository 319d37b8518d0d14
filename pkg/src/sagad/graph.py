"""Graph and dataset representation, validation, and homophily metrics.

The structural source of truth is a symmetric CSR adjacency without
self-loops.  Datasets live on disk as a small directory of neutral files
(meta.json, edges.tsv, features.bin or features.csv, labels.csv,
splits.json) so they can be produced and consumed by external tools.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetFormatError

UNKNOWN_LABEL = -1

FEATURES_MAGIC = b"SGFEAT01"


@dataclass
class SparseAdjacency:
    """Symmetric CSR adjacency: no self-loops, sorted columns, no duplicates.

    Each undirected edge is stored twice (once per direction), so
    ``col_indices`` has length 2m for m undirected edges.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: np.ndarray,
        weights: np.ndarray | None = None,
    ) -> "SparseAdjacency":
        """Build from an (m, 2) array of node-id pairs.

        Direction is ignored, duplicates are merged, self-loops dropped.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise DatasetFormatError(
                f"edge endpoint out of range [0, {num_nodes}): "
                f"min={edges.min() if edges.size else 0}, max={edges.max() if edges.size else 0}"
            )
        if weights is None:
            weights = np.ones(len(edges), dtype=np.float64)
        keep = edges[:, 0] != edges[:, 1]
        edges = edges[keep]
        weights = np.asarray(weights, dtype=np.float64)[keep]

        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        key = lo * num_nodes + hi
        order = np.argsort(key, kind="stable")
        key = key[order]
        uniq_mask = np.ones(len(key), dtype=bool)
        uniq_mask[1:] = key[1:] != key[:-1]
        lo = lo[order][uniq_mask]
        hi = hi[order][uniq_mask]
        w = weights[order][uniq_mask]

        rows = np.concatenate([lo, hi])
        cols = np.concatenate([hi, lo])
        vals = np.concatenate([w, w])
        return cls._from_coo(num_nodes, rows, cols, vals)

    @classmethod
    def _from_coo(cls, num_nodes, rows, cols, vals) -> "SparseAdjacency":
        order = np.lexsort((cols, rows))
        rows = rows[order]
        cols = cols[order]
        vals = vals[order]
        counts = np.bincount(rows, minlength=num_nodes)
        offsets = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(
            num_nodes=int(num_nodes),
            row_offsets=offsets,
            col_indices=cols.astype(np.int64),
            values=vals.astype(np.float64),
        )

    @property
    def num_edges(self) -> int:
        """Number of unordered edges."""
        return len(self.col_indices) // 2

    def degrees(self) -> np.ndarray:
        """Weighted degree per node (entry count when all weights are 1)."""
        rows = np.repeat(np.arange(self.num_nodes), np.diff(self.row_offsets))
        return np.bincount(rows, weights=self.values, minlength=self.num_nodes)

    def neighbor_counts(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, node: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[node] : self.row_offsets[node + 1]]

    def to_scipy(self):
        from scipy.sparse import csr_matrix

        return csr_matrix(
            (self.values, self.col_indices, self.row_offsets),
            shape=(self.num_nodes, self.num_nodes),
        )

    def with_self_loops(self, weight: float = 1.0) -> "SparseAdjacency":
        """Return a copy with a unit self-loop added to every node."""
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.row_offsets))
        rows = np.concatenate([rows, np.arange(self.num_nodes, dtype=np.int64)])
        cols = np.concatenate([self.col_indices, np.arange(self.num_nodes, dtype=np.int64)])
        vals = np.concatenate([self.values, np.full(self.num_nodes, weight)])
        return SparseAdjacency._from_coo(self.num_nodes, rows, cols, vals)

    def validate(self) -> None:
        """Check the structural invariants; raise DatasetFormatError on violation."""
        n = self.num_nodes
        if self.row_offsets.shape != (n + 1,) or self.row_offsets[0] != 0:
            raise DatasetFormatError("malformed row offsets")
        if self.row_offsets[-1] != len(self.col_indices):
            raise DatasetFormatError("row offsets do not cover col_indices")
        if len(self.col_indices) and (self.col_indices.min() < 0 or self.col_indices.max() >= n):
            raise DatasetFormatError("column index out of range")
        rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.row_offsets))
        if np.any(rows == self.col_indices):
            raise DatasetFormatError("self-loop present")
        same_row = rows[1:] == rows[:-1]
        if np.any(same_row & (np.diff(self.col_indices) <= 0)):
            raise DatasetFormatError("a row has unsorted or duplicate columns")
        # Symmetry: the multiset of (row, col) pairs equals its transpose.
        fwd = rows * n + self.col_indices
        bwd = self.col_indices * n + rows
        if not np.array_equal(np.sort(fwd), np.sort(bwd)):
            raise DatasetFormatError("adjacency is not symmetric")


@dataclass
class SplitSet:
    """One train/val/test partition of node ids."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def validate(self, num_nodes: int, labels: np.ndarray) -> None:
        parts = {"train": self.train, "val": self.val, "test": self.test}
        seen: set[int] = set()
        for name, ids in parts.items():
            ids = np.asarray(ids)
            if ids.size and (ids.min() < 0 or ids.max() >= num_nodes):
                raise DatasetFormatError(f"{name} split contains node id >= {num_nodes}")
            as_set = set(int(i) for i in ids)
            if len(as_set) != len(ids):
                raise DatasetFormatError(f"{name} split contains duplicate ids")
            if seen & as_set:
                raise DatasetFormatError("splits are not pairwise disjoint")
            seen |= as_set
        for name in ("train", "val"):
            ids = parts[name]
            if ids.size and np.any(labels[np.asarray(ids)] == UNKNOWN_LABEL):
                raise DatasetFormatError(f"{name} split contains unlabeled nodes")


@dataclass
class GraphDataset:
    """Adjacency + features + labels + evaluation splits.

    Labels are 1 for anomalies (positive class), 0 for normal nodes and
    UNKNOWN_LABEL (-1) where no ground truth is available.
    """

    adjacency: SparseAdjacency
    features: np.ndarray
    labels: np.ndarray
    splits: list[SplitSet] = field(default_factory=list)
    name: str = "unnamed"

    @property
    def num_nodes(self) -> int:
        return self.adjacency.num_nodes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        self.adjacency.validate()
        n = self.num_nodes
        if self.features.shape[0] != n:
            raise DatasetFormatError(
                f"feature rows ({self.features.shape[0]}) != num_nodes ({n})"
            )
        if self.labels.shape != (n,):
            raise DatasetFormatError("labels must be one value per node")
        bad = ~np.isin(self.labels, (0, 1, UNKNOWN_LABEL))
        if np.any(bad):
            raise DatasetFormatError(
                f"non-binary label value {self.labels[bad][0]} at node {np.nonzero(bad)[0][0]}"
            )
        for s in self.splits:
            s.validate(n, self.labels)


@dataclass
class HomophilyReport:
    edge_homophily: float
    node_homophily: np.ndarray
    class_homophily_abnormal: float
    class_homophily_normal: float


# ---------------------------------------------------------------------------
# Normalized operators
# ---------------------------------------------------------------------------


def normalized_adjacency(adj: SparseAdjacency) -> SparseAdjacency:
    """Symmetric normalization D^{-1/2} A D^{-1/2}.

    Rows and columns of isolated nodes stay all-zero (they have no entries).
    """
    rows = np.repeat(np.arange(adj.num_nodes), np.diff(adj.row_offsets))
    deg = np.bincount(rows, weights=adj.values, minlength=adj.num_nodes)
    with np.errstate(divide="ignore"):
        dinv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    vals = adj.values * dinv_sqrt[rows] * dinv_sqrt[adj.col_indices]
    return SparseAdjacency(
        num_nodes=adj.num_nodes,
        row_offsets=adj.row_offsets.copy(),
        col_indices=adj.col_indices.copy(),
        values=vals,
    )


# ---------------------------------------------------------------------------
# Homophily metrics
# ---------------------------------------------------------------------------


def _require_labeled(labels: np.ndarray, ids: np.ndarray, what: str) -> None:
    bad = ids[labels[ids] == UNKNOWN_LABEL]
    if bad.size:
        raise DatasetFormatError(f"{what}: node {bad[0]} has no label")


def edge_homophily(dataset: GraphDataset) -> float:
    """Fraction of unordered edges whose endpoints share a label."""
    adj = dataset.adjacency
    if adj.num_edges == 0:
        return 0.0
    rows = np.repeat(np.arange(adj.num_nodes), np.diff(adj.row_offsets))
    cols = adj.col_indices
    _require_labeled(dataset.labels, np.unique(np.concatenate([rows, cols])), "edge_homophily")
    same = dataset.labels[rows] == dataset.labels[cols]
    # Each undirected edge appears twice, so the mean over directed entries
    # equals the unordered-edge fraction.
    return float(np.mean(same))


def node_homophily(dataset: GraphDataset) -> np.ndarray:
    """Per-node fraction of neighbors sharing the node's label.

    Isolated nodes get NaN and are excluded from downstream averages.
    """
    adj = dataset.adjacency
    labels = dataset.labels
    rows = np.repeat(np.arange(adj.num_nodes), np.diff(adj.row_offsets))
    if rows.size:
        _require_labeled(labels, np.unique(np.concatenate([rows, adj.col_indices])), "node_homophily")
    same = (labels[rows] == labels[adj.col_indices]).astype(np.float64)
    agree = np.bincount(rows, weights=same, minlength=adj.num_nodes)
    counts = np.diff(adj.row_offsets).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        h = np.where(counts > 0, agree / counts, np.nan)
    return h


def class_homophily(dataset: GraphDataset) -> tuple[float, float]:
    """Mean node homophily over anomalies and over normal nodes."""
    h = node_homophily(dataset)
    out = []
    for cls, name in ((1, "abnormal"), (0, "normal")):
        mask = (dataset.labels == cls) & ~np.isnan(h)
        if not np.any(mask):
            raise DatasetFormatError(
                f"class_homophily: no {name} node has a defined node homophily"
            )
        out.append(float(np.mean(h[mask])))
    return out[0], out[1]


def homophily_report(dataset: GraphDataset) -> HomophilyReport:
    h_a, h_n = class_homophily(dataset)
    return HomophilyReport(
        edge_homophily=edge_homophily(dataset),
        node_homophily=node_homophily(dataset),
        class_homophily_abnormal=h_a,
        class_homophily_normal=h_n,
    )


# ---------------------------------------------------------------------------
# Dataset directory I/O
# ---------------------------------------------------------------------------


def load_dataset(directory: str | os.PathLike) -> GraphDataset:
    """Load and validate a dataset directory.

    The directory must contain meta.json, edges.tsv, labels.csv,
    splits.json and either features.bin or features.csv.  Edges are
    symmetrized and deduplicated; self-loops are dropped.
    """
    directory = os.fspath(directory)

    def path_of(name: str) -> str:
        p = os.path.join(directory, name)
        if not os.path.exists(p):
            raise DatasetFormatError(f"missing dataset file: {p}")
        return p

    with open(path_of("meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    for key in ("name", "num_nodes", "num_features"):
        if key not in meta:
            raise DatasetFormatError(f"meta.json missing key '{key}'")
    n = int(meta["num_nodes"])
    d = int(meta["num_features"])

    edges = _read_edges_tsv(path_of("edges.tsv"))
    adjacency = SparseAdjacency.from_edges(n, edges)

    bin_path = os.path.join(directory, "features.bin")
    if os.path.exists(bin_path):
        features = _read_features_bin(bin_path)
    else:
        features = _read_features_csv(path_of("features.csv"))
    if features.shape[0] != n:
        raise DatasetFormatError(
            f"feature rows ({features.shape[0]}) != num_nodes ({n})"
        )
    if features.shape[1] != d:
        raise DatasetFormatError(
            f"feature dim ({features.shape[1]}) != meta num_features ({d})"
        )

    labels = _read_labels_csv(path_of("labels.csv"), n)
    splits = _read_splits_json(path_of("splits.json"))

    dataset = GraphDataset(
        adjacency=adjacency,
        features=features,
        labels=labels,
        splits=splits,
        name=str(meta["name"]),
    )
    dataset.validate()
    return dataset


def write_dataset(dataset: GraphDataset, directory: str | os.PathLike) -> None:
    """Serialize a dataset into the directory format understood by load_dataset."""
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    meta = {
        "name": dataset.name,
        "num_nodes": dataset.num_nodes,
        "num_features": dataset.num_features,
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)

    adj = dataset.adjacency
    rows = np.repeat(np.arange(adj.num_nodes), np.diff(adj.row_offsets))
    mask = rows < adj.col_indices  # each unordered edge once
    with open(os.path.join(directory, "edges.tsv"), "w", encoding="utf-8") as f:
        for u, v in zip(rows[mask], adj.col_indices[mask]):
            f.write(f"{u}\t{v}\n")

    _write_features_bin(os.path.join(directory, "features.bin"), dataset.features)

    with open(os.path.join(directory, "labels.csv"), "w", encoding="utf-8") as f:
        for i, y in enumerate(dataset.labels):
            if y != UNKNOWN_LABEL:
                f.write(f"{i},{int(y)}\n")

    payload = [
        {"train": [int(i) for i in s.train],
         "val": [int(i) for i in s.val],
         "test": [int(i) for i in s.test]}
        for s in dataset.splits
    ]
    with open(os.path.join(directory, "splits.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f)


def _read_edges_tsv(path: str) -> np.ndarray:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t") if "\t" in line else line.split()
            if len(parts) != 2:
                raise DatasetFormatError(f"edges.tsv line {lineno}: expected 'u<TAB>v'")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise DatasetFormatError(f"edges.tsv line {lineno}: {exc}") from exc
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


def _read_features_bin(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FEATURES_MAGIC:
            raise DatasetFormatError(f"features.bin: bad magic {magic!r}")
        header = f.read(16)
        if len(header) != 16:
            raise DatasetFormatError("features.bin: truncated header")
        n, d = struct.unpack("<QQ", header)
        payload = f.read()
    expected = n * d * 4
    if len(payload) != expected:
        raise DatasetFormatError(
            f"features.bin: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()


def _write_features_bin(path: str, features: np.ndarray) -> None:
    n, d = features.shape
    with open(path, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<QQ", n, d))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())
        f.flush()
        os.fsync(f.fileno())


def _read_features_csv(path: str) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DatasetFormatError(f"features.csv: {exc}") from exc
    return data.astype(np.float32)


def _read_labels_csv(path: str, num_nodes: int) -> np.ndarray:
    labels = np.full(num_nodes, UNKNOWN_LABEL, dtype=np.int8)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DatasetFormatError(f"labels.csv line {lineno}: expected 'node_id,label'")
            node, value = int(parts[0]), parts[1].strip()
            if node < 0 or node >= num_nodes:
                raise DatasetFormatError(f"labels.csv line {lineno}: node id {node} >= {num_nodes}")
            if value not in ("0", "1"):
                raise DatasetFormatError(f"labels.csv line {lineno}: non-binary label {value!r}")
            labels[node] = int(value)
    return labels


def _read_splits_json(path: str) -> list[SplitSet]:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list):
        raise DatasetFormatError("splits.json must hold an array of split objects")
    splits = []
    for i, entry in enumerate(raw):
        try:
            splits.append(
                SplitSet(
                    train=np.asarray(entry["train"], dtype=np.int64),
                    val=np.asarray(entry["val"], dtype=np.int64),
                    test=np.asarray(entry["test"], dtype=np.int64),
                )
            )
        except (KeyError, TypeError) as exc:
            raise DatasetFormatError(f"splits.json entry {i}: {exc}") from exc
    return splits
