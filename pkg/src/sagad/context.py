"""Per-node max-Rayleigh-Quotient subgraph extraction and context caching.

For every node we pick, among its 1-hop candidates, the induced subgraph
with the largest Rayleigh Quotient (spectral energy of the feature signal
on that subgraph), then cache the mean-pooled features of that subgraph.
Small neighborhoods are solved exactly by enumeration; larger ones use a
greedy marginal-gain search over a capped, seeded candidate sample.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CacheFormatError
from .graph import GraphDataset

CONTEXT_MAGIC = b"SGCTX001"

EXHAUSTIVE_DEGREE_LIMIT = 10
DEFAULT_CANDIDATE_CAP = 64

_SEED_DOMAIN_SAMPLER = 0x5C1


@dataclass
class ContextCache:
    """Mean-pooled features of each node's max-RQ subgraph."""

    num_nodes: int
    dim: int
    context: np.ndarray
    subgraph_size: np.ndarray

    def validate(self) -> None:
        if self.context.shape != (self.num_nodes, self.dim):
            raise CacheFormatError(f"context has shape {self.context.shape}")
        if self.subgraph_size.shape != (self.num_nodes,):
            raise CacheFormatError("subgraph_size must be one entry per node")
        if self.num_nodes and self.subgraph_size.min() < 1:
            raise CacheFormatError("subgraph sizes must be >= 1")


def rayleigh_quotient(subset: np.ndarray, dataset: GraphDataset) -> float:
    """trace(X^T L X) / trace(X^T X) on the induced subgraph.

    L is the unnormalized Laplacian of the subgraph induced by ``subset``;
    feature rows are restricted to the subset.  Returns 0 when the feature
    energy (denominator) is zero.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ValueError("rayleigh_quotient: subset must be non-empty")
    members = set(int(i) for i in subset)
    x = np.asarray(dataset.features, dtype=np.float64)
    den = float(np.sum(x[subset] ** 2))
    if den == 0.0:
        return 0.0
    adj = dataset.adjacency
    num = 0.0
    for i in members:
        for j in adj.neighbors(i):
            j = int(j)
            if j in members and j > i:  # each undirected edge once
                diff = x[i] - x[j]
                num += float(diff @ diff)
    return num / den


def max_rq_subgraph(
    node: int,
    dataset: GraphDataset,
    hop: int = 1,
    cap: int = DEFAULT_CANDIDATE_CAP,
    seed: int = 0,
    branch: str = "auto",
) -> np.ndarray:
    """Subset of {node} + 1-hop neighbors maximizing the Rayleigh Quotient.

    Candidates above ``cap`` are uniformly subsampled with a per-node seeded
    stream.  Degree <= 10 is solved exactly by enumerating every subset
    containing the node; larger candidate sets use greedy marginal gain
    (ties broken by smallest node id, stop when no strict improvement).
    ``branch`` forces "exhaustive" or "greedy" for testing.
    """
    if hop != 1:
        raise ValueError("only 1-hop subgraph extraction is supported")
    n = dataset.num_nodes
    if node < 0 or node >= n:
        raise ValueError(f"node id {node} out of range [0, {n})")
    if branch not in ("auto", "exhaustive", "greedy"):
        raise ValueError(f"unknown branch {branch!r}")

    neighbors = dataset.adjacency.neighbors(node)
    if len(neighbors) > cap:
        rng = np.random.default_rng(np.random.SeedSequence([_SEED_DOMAIN_SAMPLER, seed, node]))
        neighbors = np.sort(rng.choice(neighbors, size=cap, replace=False))
    if len(neighbors) == 0:
        return np.asarray([node], dtype=np.int64)

    if branch == "exhaustive" or (branch == "auto" and len(neighbors) <= EXHAUSTIVE_DEGREE_LIMIT):
        return _exhaustive_subgraph(node, neighbors, dataset)
    return _greedy_subgraph(node, neighbors, dataset)


def _pair_energy(node: int, others: np.ndarray, dataset: GraphDataset) -> tuple[np.ndarray, np.ndarray]:
    """Local adjacency weights w_ij = a_ij * ||x_i - x_j||^2 and node energies."""
    ids = np.concatenate([[node], others]).astype(np.int64)
    x = np.asarray(dataset.features[ids], dtype=np.float64)
    m = len(ids)
    pos = {int(v): i for i, v in enumerate(ids)}
    w = np.zeros((m, m))
    adj = dataset.adjacency
    for local_i, global_i in enumerate(ids):
        for global_j in adj.neighbors(int(global_i)):
            local_j = pos.get(int(global_j))
            if local_j is not None and local_j > local_i:
                diff = x[local_i] - x[local_j]
                val = float(diff @ diff)
                w[local_i, local_j] = val
                w[local_j, local_i] = val
    energies = np.sum(x**2, axis=1)
    return w, energies


def _exhaustive_subgraph(node: int, neighbors: np.ndarray, dataset: GraphDataset) -> np.ndarray:
    w, energies = _pair_energy(node, neighbors, dataset)
    k = len(neighbors)
    masks = np.arange(2**k, dtype=np.uint32)
    # membership matrix over neighbors; the center node is always in.
    member = ((masks[:, None] >> np.arange(k, dtype=np.uint32)) & 1).astype(np.float64)
    member = np.concatenate([np.ones((len(masks), 1)), member], axis=1)
    num = 0.5 * np.einsum("si,ij,sj->s", member, w, member)
    den = member @ energies
    with np.errstate(invalid="ignore", divide="ignore"):
        rq = np.where(den > 0, num / den, 0.0)
    # argmax returns the first (smallest) mask attaining the maximum; mask 0
    # is the singleton {node}, so an all-tied landscape keeps the node alone.
    best = int(np.argmax(rq))
    chosen = [node] + [int(neighbors[i]) for i in range(k) if (best >> i) & 1]
    return np.asarray(sorted(chosen), dtype=np.int64)


def _greedy_subgraph(node: int, neighbors: np.ndarray, dataset: GraphDataset) -> np.ndarray:
    w, energies = _pair_energy(node, neighbors, dataset)
    k = len(neighbors)
    in_set = np.zeros(k + 1, dtype=bool)
    in_set[0] = True
    num = 0.0
    den = energies[0]
    cur_rq = num / den if den > 0 else 0.0
    remaining = list(range(1, k + 1))
    while remaining:
        best_rq = cur_rq
        best_local = None
        best_num = best_den = 0.0
        for local in remaining:
            cand_num = num + float(w[local] @ in_set)
            cand_den = den + energies[local]
            cand_rq = cand_num / cand_den if cand_den > 0 else 0.0
            # strict improvement; ties resolved by smallest node id, which
            # is the enumeration order since neighbor lists are sorted.
            if cand_rq > best_rq:
                best_rq = cand_rq
                best_local = local
                best_num, best_den = cand_num, cand_den
        if best_local is None:
            break
        in_set[best_local] = True
        remaining.remove(best_local)
        num, den, cur_rq = best_num, best_den, best_rq
    ids = np.concatenate([[node], neighbors]).astype(np.int64)
    return np.asarray(sorted(int(i) for i in ids[in_set]), dtype=np.int64)


def build_context_cache(
    dataset: GraphDataset,
    hop: int = 1,
    cap: int = DEFAULT_CANDIDATE_CAP,
    seed: int = 0,
    mode: str = "rq",
    workers: int = 1,
) -> ContextCache:
    """Mean-pooled subgraph features for every node.

    mode "rq" runs the max-RQ sampler per node (parallelizable over node
    chunks; per-node seeding keeps results independent of scheduling).
    mode "full_khop" pools over the whole 1-hop neighborhood plus the node
    itself, computed as one sparse product.
    """
    n = dataset.num_nodes
    x = np.asarray(dataset.features, dtype=np.float64)
    if mode == "full_khop":
        adj = dataset.adjacency
        pooled = adj.to_scipy() @ x + x
        sizes = (np.diff(adj.row_offsets) + 1).astype(np.int64)
        context = pooled / sizes[:, None]
    elif mode == "rq":
        context = np.empty_like(x)
        sizes = np.empty(n, dtype=np.int64)
        if workers > 1 and n >= 256:
            _sample_parallel(dataset, hop, cap, seed, workers, context, sizes)
        else:
            for v in range(n):
                subset = max_rq_subgraph(v, dataset, hop=hop, cap=cap, seed=seed)
                context[v] = x[subset].mean(axis=0)
                sizes[v] = len(subset)
    else:
        raise ValueError(f"unknown context mode {mode!r}")
    cache = ContextCache(
        num_nodes=n,
        dim=dataset.num_features,
        context=np.ascontiguousarray(context, dtype=np.float32),
        subgraph_size=sizes,
    )
    cache.validate()
    return cache


_WORKER_STATE: dict = {}


def _init_worker(dataset, hop, cap, seed):
    _WORKER_STATE.update(dataset=dataset, hop=hop, cap=cap, seed=seed)


def _sample_chunk(bounds):
    lo, hi = bounds
    dataset = _WORKER_STATE["dataset"]
    x = np.asarray(dataset.features, dtype=np.float64)
    ctx = np.empty((hi - lo, x.shape[1]))
    sizes = np.empty(hi - lo, dtype=np.int64)
    for v in range(lo, hi):
        subset = max_rq_subgraph(
            v, dataset,
            hop=_WORKER_STATE["hop"],
            cap=_WORKER_STATE["cap"],
            seed=_WORKER_STATE["seed"],
        )
        ctx[v - lo] = x[subset].mean(axis=0)
        sizes[v - lo] = len(subset)
    return lo, hi, ctx, sizes


def _sample_parallel(dataset, hop, cap, seed, workers, context, sizes) -> None:
    import multiprocessing as mp

    n = dataset.num_nodes
    chunk = max(64, (n + workers * 4 - 1) // (workers * 4))
    jobs = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    ctx_mp = mp.get_context("fork")
    with ctx_mp.Pool(
        processes=workers, initializer=_init_worker, initargs=(dataset, hop, cap, seed)
    ) as pool:
        for lo, hi, ctx, sz in pool.imap_unordered(_sample_chunk, jobs):
            context[lo:hi] = ctx
            sizes[lo:hi] = sz


# ---------------------------------------------------------------------------
# Cache file I/O
# ---------------------------------------------------------------------------


def write_context_cache(cache: ContextCache, path: str | os.PathLike) -> None:
    cache.validate()
    with open(os.fspath(path), "wb") as f:
        f.write(CONTEXT_MAGIC)
        f.write(struct.pack("<QQ", cache.num_nodes, cache.dim))
        f.write(np.ascontiguousarray(cache.context, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cache.subgraph_size, dtype="<u4").tobytes())
        f.flush()
        os.fsync(f.fileno())


def read_context_cache(path: str | os.PathLike) -> ContextCache:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise CacheFormatError(f"context cache not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CONTEXT_MAGIC:
            raise CacheFormatError(f"bad context cache magic {magic!r}")
        header = f.read(16)
        if len(header) != 16:
            raise CacheFormatError("truncated context cache header")
        n, d = struct.unpack("<QQ", header)
        payload = f.read()
    expected = n * d * 4 + n * 4
    if len(payload) != expected:
        raise CacheFormatError(
            f"context cache payload is {len(payload)} bytes, expected {expected}"
        )
    context = np.frombuffer(payload[: n * d * 4], dtype="<f4").reshape(n, d).copy()
    sizes = np.frombuffer(payload[n * d * 4 :], dtype="<u4").astype(np.int64)
    cache = ContextCache(num_nodes=n, dim=d, context=context, subgraph_size=sizes)
    cache.validate()
    return cache
