"""Code dictionary and budgeted nearest-neighbour annotation transfer.

The index is a k-d tree: each node splits on the coordinate with the
widest spread at the median, and leaves hold small buckets of entries.
Queries use best-bin-first backtracking: the unexplored branch with the
smallest lower-bound distance is visited next, and approximate queries
stop after ``max_comparisons`` leaf visits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import _binio
from .errors import ConfigError, FormatError, ShapeError, StateError

DICT_MAGIC = b"N4DC"
PROVENANCE_MAGIC = b"PROV"
# 30 visits of 128-entry leaves reach recall@1 of about 0.9 on 10k Gaussian codes
LEAF_SIZE = 128


@dataclass(frozen=True)
class SearchConfig:
    max_comparisons: int = 30
    exact: bool = False

    def __post_init__(self):
        if self.max_comparisons < 1:
            raise ConfigError("max_comparisons must be >= 1")


@dataclass
class KDTree:
    """Flat-array k-d tree over ``points`` (kept in tree order)."""

    points: np.ndarray      # (T, D) float64, reordered
    index: np.ndarray       # tree position -> original entry index
    split_dim: np.ndarray   # -1 for leaves
    split_val: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray       # leaf bucket [start, end) in tree order
    end: np.ndarray
    leaf_size: int

    @classmethod
    def build(cls, points, leaf_size: int = LEAF_SIZE) -> "KDTree":
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ShapeError("k-d tree needs a non-empty (T, D) array")
        if leaf_size < 1:
            raise ConfigError("leaf_size must be >= 1")
        nodes = {"dim": [], "val": [], "left": [], "right": [], "start": [], "end": []}
        order = np.arange(len(pts))
        stack = [(0, len(pts), -1, 0)]  # (lo, hi, parent, side)

        def new_node():
            for v in nodes.values():
                v.append(-1)
            nodes["val"][-1] = 0.0
            return len(nodes["dim"]) - 1

        while stack:
            lo, hi, parent, side = stack.pop()
            node = new_node()
            if parent >= 0:
                nodes["left" if side == 0 else "right"][parent] = node
            sub = pts[order[lo:hi]]
            spread = sub.max(axis=0) - sub.min(axis=0) if hi - lo > 0 else None
            if hi - lo <= leaf_size or not np.any(spread > 0):
                nodes["start"][node], nodes["end"][node] = lo, hi
                continue
            dim = int(np.argmax(spread))
            # sort by (value, entry index) so equal multisets give equal trees
            local = np.lexsort((order[lo:hi], sub[:, dim]))
            order[lo:hi] = order[lo:hi][local]
            mid = lo + (hi - lo) // 2
            nodes["dim"][node] = dim
            nodes["val"][node] = float(pts[order[mid], dim])
            stack.append((mid, hi, node, 1))
            stack.append((lo, mid, node, 0))
        return cls(
            points=np.ascontiguousarray(pts[order]),
            index=order.astype(np.int64),
            split_dim=np.array(nodes["dim"], dtype=np.int64),
            split_val=np.array(nodes["val"], dtype=np.float64),
            left=np.array(nodes["left"], dtype=np.int64),
            right=np.array(nodes["right"], dtype=np.int64),
            start=np.array(nodes["start"], dtype=np.int64),
            end=np.array(nodes["end"], dtype=np.int64),
            leaf_size=leaf_size,
        )

    def query(self, queries, max_leaves: int | None = None):
        """Nearest entry per query: ``(index, squared distance, leaves visited)``."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        if q.shape[1] != self.points.shape[1]:
            raise ShapeError(f"query dim {q.shape[1]} != tree dim {self.points.shape[1]}")
        budget = -1 if max_leaves is None else int(max_leaves)
        return _search_batch(q, self.points, self.index, self.split_dim, self.split_val,
                             self.left, self.right, self.start, self.end, budget)


@numba.njit(cache=True)
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        p = (i - 1) // 2
        if keys[p] <= keys[i]:
            break
        keys[p], keys[i] = keys[i], keys[p]
        vals[p], vals[i] = vals[i], vals[p]
        i = p
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, vals, size):
    key, val = keys[0], vals[0]
    size -= 1
    keys[0], vals[0] = keys[size], vals[size]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        c = l
        if l + 1 < size and keys[l + 1] < keys[l]:
            c = l + 1
        if keys[i] <= keys[c]:
            break
        keys[c], keys[i] = keys[i], keys[c]
        vals[c], vals[i] = vals[i], vals[c]
        i = c
    return key, val, size


@numba.njit(cache=True)
def _search_batch(queries, points, index, split_dim, split_val, left, right,
                  start, end, budget):
    nq, d = queries.shape
    n_nodes = split_dim.shape[0]
    out_idx = np.empty(nq, dtype=np.int64)
    out_dist = np.empty(nq, dtype=np.float64)
    out_visits = np.empty(nq, dtype=np.int64)
    keys = np.empty(n_nodes + 1, dtype=np.float64)
    slots = np.empty(n_nodes + 1, dtype=np.int64)
    slot_node = np.empty(n_nodes + 1, dtype=np.int64)
    offsets = np.empty((n_nodes + 1, d), dtype=np.float64)
    cur = np.empty(d, dtype=np.float64)
    for qi in range(nq):
        q = queries[qi]
        # every node is pushed at most once per query, so slots never run out
        size = 0
        s0 = 0
        next_slot = 1
        slot_node[s0] = 0
        for k in range(d):
            offsets[s0, k] = 0.0
        size = _heap_push(keys, slots, size, 0.0, s0)
        best_d = np.inf
        best_i = -1
        visits = 0
        while size > 0:
            if budget >= 0 and visits >= budget:
                break
            bound, slot, size = _heap_pop(keys, slots, size)
            if bound > best_d:
                break
            node = slot_node[slot]
            for k in range(d):
                cur[k] = offsets[slot, k]
            while split_dim[node] >= 0:
                dim = split_dim[node]
                diff = q[dim] - split_val[node]
                if diff < 0:
                    near, far = left[node], right[node]
                else:
                    near, far = right[node], left[node]
                far_bound = bound - cur[dim] * cur[dim] + diff * diff
                if far_bound <= best_d:
                    fs = next_slot
                    next_slot += 1
                    slot_node[fs] = far
                    for k in range(d):
                        offsets[fs, k] = cur[k]
                    offsets[fs, dim] = diff
                    size = _heap_push(keys, slots, size, far_bound, fs)
                node = near
            visits += 1
            for t in range(start[node], end[node]):
                dist = 0.0
                for k in range(d):
                    e = points[t, k] - q[k]
                    dist += e * e
                ent = index[t]
                if dist < best_d or (dist == best_d and ent < best_i):
                    best_d = dist
                    best_i = ent
        out_idx[qi] = best_i
        out_dist[qi] = best_d
        out_visits[qi] = visits
    return out_idx, out_dist, out_visits


@dataclass
class CodeDictionary:
    codes: np.ndarray        # (T, D) float32
    annotations: np.ndarray  # (T, N, N) float32
    provenance: np.ndarray | None = None  # (T, 3) int: image id, row, col
    leaf_size: int = LEAF_SIZE
    tree: KDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.float32)
        self.annotations = np.ascontiguousarray(self.annotations, dtype=np.float32)
        if self.codes.ndim != 2 or len(self.codes) == 0:
            raise StateError("dictionary needs at least one (T, D) code")
        if self.annotations.ndim != 3 or len(self.annotations) != len(self.codes):
            raise ShapeError("annotations must be (T, N, N) aligned with codes")
        if self.annotations.shape[1] != self.annotations.shape[2]:
            raise ShapeError("annotation patches must be square")
        self.tree = KDTree.build(self.codes, self.leaf_size)

    @property
    def size(self) -> int:
        return len(self.codes)

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    @property
    def patch_size(self) -> int:
        return self.annotations.shape[1]


def nearest(dictionary: CodeDictionary, query, cfg: SearchConfig = SearchConfig()):
    """Index and Euclidean distance of the nearest entry for each query.

    Exact mode backtracks until the bound proves optimality (ties go to the
    lowest entry index); otherwise at most ``cfg.max_comparisons`` leaves
    are visited.
    """
    if dictionary is None or dictionary.size == 0:
        raise StateError("empty dictionary")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    if q2.shape[1] != dictionary.code_dim:
        raise ShapeError(f"query dim {q2.shape[1]} != dictionary dim {dictionary.code_dim}")
    budget = None if cfg.exact else cfg.max_comparisons
    idx, d2, _ = dictionary.tree.query(q2, budget)
    dist = np.sqrt(d2)
    if single:
        return int(idx[0]), float(dist[0])
    return idx, dist


def transfer_annotation(dictionary: CodeDictionary, query, cfg: SearchConfig = SearchConfig()):
    """Annotation patch(es) of the nearest dictionary entry, unmodified."""
    idx, _ = nearest(dictionary, query, cfg)
    return dictionary.annotations[idx]


def save_dictionary(dictionary: CodeDictionary, path) -> None:
    """Magic, T, D, N, then codes and annotations; provenance trailer if known."""
    with open(path, "wb") as fh:
        _binio.write_magic(fh, DICT_MAGIC)
        _binio.write_u32(fh, dictionary.size, dictionary.code_dim, dictionary.patch_size)
        _binio.write_f32(fh, dictionary.codes)
        _binio.write_f32(fh, dictionary.annotations)
        if dictionary.provenance is not None:
            fh.write(PROVENANCE_MAGIC)
            fh.write(np.ascontiguousarray(dictionary.provenance, dtype="<u4").tobytes())


def load_dictionary(path, leaf_size: int = LEAF_SIZE) -> CodeDictionary:
    with open(path, "rb") as fh:
        _binio.read_magic(fh, DICT_MAGIC)
        t, d, n = _binio.read_u32(fh, 3)
        codes = _binio.read_f32(fh, t * d).reshape(t, d)
        ann = _binio.read_f32(fh, t * n * n).reshape(t, n, n)
        prov = None
        tag = fh.read(4)
        if tag:
            if tag != PROVENANCE_MAGIC:
                raise FormatError(f"{path}: unexpected trailer {tag!r}")
            raw = fh.read(12 * t)
            if len(raw) != 12 * t:
                raise FormatError(f"{path}: truncated provenance")
            prov = np.frombuffer(raw, dtype="<u4").reshape(t, 3).astype(np.int64)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after dictionary payload")
    return CodeDictionary(codes, ann, prov, leaf_size=leaf_size)
