"""Hierarchical navigable small-world index over unit-norm melody embeddings.

Construction inserts one vector at a time: a geometric level draw, greedy
descent through the upper layers, then a beam search of width
``ef_construction`` per layer to pick the M nearest neighbors, linked
bidirectionally with simple keep-the-closest pruning (bound M per layer,
2M at layer 0). Queries descend greedily to layer 0 and run a beam of width
``ef_search`` there. Similarity is cosine via dot products (vectors are
unit-norm; they are stored float32 and compared in float64, so results are
bit-stable across persistence round trips).

A brute-force oracle (`brute_knn`) provides the exact answer for testing and
for small databases.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from . import smallnet
from .errors import FormatError, ValidationError

MAGIC = b"MVDB"
FORMAT_VERSION = 1
_NO_ENTRY = 0xFFFFFFFFFFFFFFFF


@dataclass
class SearchResult:
    hits: list[tuple[int, float]]  # (id, cosine), similarity non-increasing
    k: int


class HnswIndex:
    def __init__(
        self,
        dim: int,
        M: int = 16,
        ef_construction: int = 200,
        level_lambda: float | None = None,
        seed: int = 0,
        neighbor_selection: str = "heuristic",
    ):
        if dim < 1:
            raise ValidationError(f"dim must be >= 1, got {dim}")
        if M < 2:
            raise ValidationError(f"M must be >= 2, got {M}")
        if ef_construction < 1:
            raise ValidationError(f"ef_construction must be >= 1, got {ef_construction}")
        if neighbor_selection not in ("heuristic", "simple"):
            raise ValidationError(
                f"neighbor_selection must be 'heuristic' or 'simple', got {neighbor_selection!r}"
            )
        self.dim = dim
        self.M = M
        self.ef_construction = ef_construction
        self.neighbor_selection = neighbor_selection
        self.level_lambda = 1.0 / np.log(M) if level_lambda is None else level_lambda
        self._rng = smallnet.spawn_rng(seed, 303)
        self._vecs = np.zeros((16, dim), dtype=np.float32)  # grows by doubling
        self._vecs64 = np.zeros((16, dim), dtype=np.float64)  # f64 view of the same bits
        self._ids: list[int] = []  # slot -> id
        self._id2slot: dict[int, int] = {}
        self._levels: list[int] = []
        self._neighbors: list[list[list[int]]] = []  # slot -> level -> [slot]
        self._entry_slot = -1

    # -- basic accessors ---------------------------------------------------

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, id: int) -> bool:
        return id in self._id2slot

    @property
    def entry_point(self) -> int | None:
        return None if self._entry_slot < 0 else self._ids[self._entry_slot]

    def level_of(self, id: int) -> int:
        return self._levels[self._id2slot[id]]

    def vector_of(self, id: int) -> np.ndarray:
        return self._vecs[self._id2slot[id]].copy()

    def vectors(self) -> dict[int, np.ndarray]:
        """id -> stored (float32) vector; usable directly by brute_knn."""
        return {i: self._vecs[s].copy() for i, s in self._id2slot.items()}

    def neighbors_of(self, id: int, level: int) -> list[int]:
        return [self._ids[s] for s in self._neighbors[self._id2slot[id]][level]]

    # -- similarity helpers ---------------------------------------------------
    #
    # Cosines are computed in float64 on the float32-stored vectors with a
    # fixed-order multiply + sum (not BLAS dot), so a similarity depends only
    # on the stored bits — identical before/after persistence and identical
    # between graph search and the brute-force oracle.

    def _sim_one(self, q: np.ndarray, slot: int) -> float:
        return float(np.sum(self._vecs64[slot] * q))

    def _sim_many(self, q: np.ndarray, slots: list[int]) -> np.ndarray:
        return np.sum(self._vecs64[slots] * q, axis=1)

    # -- construction --------------------------------------------------------

    def _max_degree(self, level: int) -> int:
        return 2 * self.M if level == 0 else self.M

    def insert(self, id: int, vector: np.ndarray) -> None:
        if not (0 <= int(id) <= _NO_ENTRY - 1):
            raise ValidationError(f"id must fit in an unsigned 64-bit slot, got {id}")
        if id in self._id2slot:
            raise ValidationError(f"duplicate id {id}")
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValidationError(f"vector has shape {v.shape}, index wants ({self.dim},)")
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"vector must be unit-norm, got ||v|| = {norm}")

        u = self._rng.random()
        while u <= 0.0:  # guard the log
            u = self._rng.random()
        level = int(-np.log(u) * self.level_lambda)

        slot = len(self._ids)
        if slot == len(self._vecs):
            grown = np.zeros((2 * len(self._vecs), self.dim), dtype=np.float32)
            grown[:slot] = self._vecs
            self._vecs = grown
            self._vecs64 = grown.astype(np.float64)
        self._vecs[slot] = v.astype(np.float32)
        self._vecs64[slot] = self._vecs[slot]
        self._ids.append(int(id))
        self._id2slot[int(id)] = slot
        self._levels.append(level)
        self._neighbors.append([[] for _ in range(level + 1)])

        if self._entry_slot < 0:
            self._entry_slot = slot
            return

        q = v
        ep = self._entry_slot
        entry_level = self._levels[ep]
        for lev in range(entry_level, level, -1):
            ep = self._greedy_step(q, ep, lev)
        eps = [ep]
        for lev in range(min(level, entry_level), -1, -1):
            found = self._search_layer(q, eps, self.ef_construction, lev)
            found.sort(key=lambda t: (-t[0], t[1]))
            chosen = self._select_neighbors(found, self.M)
            self._neighbors[slot][lev] = list(chosen)
            for other in chosen:
                self._link(other, slot, lev)
            # the whole candidate set seeds the next layer down
            eps = [s for _, s in found]
        if level > entry_level:
            self._entry_slot = slot

    def _select_neighbors(self, candidates: list[tuple[float, int]],
                          bound: int) -> list[int]:
        """Pick up to ``bound`` links from (sim, slot) candidates sorted by
        descending sim.

        "simple" keeps the closest; "heuristic" keeps a candidate only when it
        is closer to the query than to every already-kept link (preserves edge
        diversity and long-range navigability), then fills leftover capacity
        with the closest of the skipped ones.
        """
        if self.neighbor_selection == "simple" or len(candidates) <= bound:
            return [s for _, s in candidates[:bound]]
        slots = [s for _, s in candidates]
        sims_q = np.array([sim for sim, _ in candidates])
        sub = self._vecs64[slots]
        cross = sub @ sub.T
        # best similarity from each candidate to any kept one, updated as we keep
        best_to_kept = np.full(len(slots), -np.inf)
        kept_idx: list[int] = []
        skipped: list[int] = []
        for i in range(len(slots)):
            if len(kept_idx) == bound:
                break
            if best_to_kept[i] >= sims_q[i]:
                skipped.append(i)
                continue
            kept_idx.append(i)
            np.maximum(best_to_kept, cross[:, i], out=best_to_kept)
        for i in skipped:
            if len(kept_idx) == bound:
                break
            kept_idx.append(i)
        return [slots[i] for i in kept_idx]

    def _link(self, slot: int, new_neighbor: int, level: int) -> None:
        lst = self._neighbors[slot][level]
        lst.append(new_neighbor)
        bound = self._max_degree(level)
        if len(lst) > bound:
            sims = self._sim_many(self._vecs64[slot], lst)
            order = sorted(range(len(lst)), key=lambda i: (-sims[i], lst[i]))
            ranked = [(float(sims[i]), lst[i]) for i in order]
            self._neighbors[slot][level] = self._select_neighbors(ranked, bound)

    def _greedy_step(self, q: np.ndarray, ep: int, level: int) -> int:
        cur = ep
        cur_sim = self._sim_one(q, cur)
        improved = True
        while improved:
            improved = False
            nbrs = self._neighbors[cur][level]
            if not nbrs:
                break
            sims = self._sim_many(q, nbrs)
            best = int(np.argmax(sims))
            if sims[best] > cur_sim:
                cur = nbrs[best]
                cur_sim = sims[best]
                improved = True
        return cur

    def _search_layer(self, q: np.ndarray, eps: list[int], ef: int, level: int):
        """Beam search from entry slots; returns [(sim, slot)] of up to ef
        best-found nodes."""
        visited = set(eps)
        candidates = []  # max-heap via negation
        best: list[tuple[float, int]] = []  # min-heap of keepers
        for ep in eps:
            ep_sim = self._sim_one(q, ep)
            heapq.heappush(candidates, (-ep_sim, ep))
            heapq.heappush(best, (ep_sim, ep))
        while len(best) > ef:
            heapq.heappop(best)
        while candidates:
            neg, cur = heapq.heappop(candidates)
            if -neg < best[0][0] and len(best) >= ef:
                break
            fresh = [s for s in self._neighbors[cur][level] if s not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            sims = self._sim_many(q, fresh)
            for s, sim in zip(fresh, sims):
                if len(best) < ef or sim > best[0][0]:
                    heapq.heappush(candidates, (-sim, s))
                    heapq.heappush(best, (float(sim), s))
                    if len(best) > ef:
                        heapq.heappop(best)
        return list(best)

    # -- queries -------------------------------------------------------------

    def search(self, query: np.ndarray, k: int, ef_search: int) -> SearchResult:
        if len(self._ids) == 0:
            raise ValidationError("cannot search an empty index")
        if k <= 0:
            raise ValidationError(f"k must be >= 1, got {k}")
        if ef_search < k:
            raise ValidationError(f"ef_search ({ef_search}) must be >= k ({k})")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValidationError(f"query has shape {q.shape}, index wants ({self.dim},)")
        ep = self._entry_slot
        for lev in range(self._levels[ep], 0, -1):
            ep = self._greedy_step(q, ep, lev)
        found = self._search_layer(q, [ep], ef_search, 0)
        found.sort(key=lambda t: (-t[0], self._ids[t[1]]))
        hits = [(self._ids[s], float(sim)) for sim, s in found[:k]]
        return SearchResult(hits=hits, k=k)

    # -- invariants ----------------------------------------------------------

    def check_invariants(self, check_reachability: bool = False) -> None:
        """Raise ValidationError on any structural violation."""
        n = len(self._ids)
        if n == 0:
            if self._entry_slot != -1:
                raise ValidationError("empty index has an entry point")
            return
        if not (0 <= self._entry_slot < n):
            raise ValidationError("entry point slot out of range")
        max_level = max(self._levels)
        if self._levels[self._entry_slot] != max_level:
            raise ValidationError("entry point does not have the maximum level")
        for slot in range(n):
            if len(self._neighbors[slot]) != self._levels[slot] + 1:
                raise ValidationError(f"node {self._ids[slot]} has a bad level list")
            for lev, lst in enumerate(self._neighbors[slot]):
                if len(lst) > self._max_degree(lev):
                    raise ValidationError(
                        f"node {self._ids[slot]} exceeds degree bound at level {lev}"
                    )
                for s in lst:
                    if not (0 <= s < n):
                        raise ValidationError("neighbor edge points to a missing node")
                    if self._levels[s] < lev:
                        raise ValidationError("neighbor edge points below a node's top level")
        if check_reachability:
            for lev in range(max_level + 1):
                members = {s for s in range(n) if self._levels[s] >= lev}
                start = self._entry_slot
                seen = {start}
                frontier = [start]
                while frontier:
                    cur = frontier.pop()
                    for s in self._neighbors[cur][lev]:
                        if s not in seen:
                            seen.add(s)
                            frontier.append(s)
                if seen != members:
                    missing = sorted(self._ids[s] for s in members - seen)
                    raise ValidationError(
                        f"level {lev} not navigable from entry point; unreachable ids {missing[:5]}"
                    )


def brute_knn(vectors: dict[int, np.ndarray], query: np.ndarray, k: int) -> SearchResult:
    """Exact top-k by cosine; ties broken by ascending id."""
    if not vectors:
        raise ValidationError("cannot search an empty vector set")
    if k <= 0:
        raise ValidationError(f"k must be >= 1, got {k}")
    ids = sorted(vectors)
    mat = np.stack([np.asarray(vectors[i], dtype=np.float64) for i in ids])
    q = np.asarray(query, dtype=np.float64)
    sims = np.sum(mat * q, axis=1)  # same fixed-order reduction as the index
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    hits = [(ids[i], float(sims[i])) for i in order[:k]]
    return SearchResult(hits=hits, k=k)


# --- persistence ------------------------------------------------------------
#
# Little-endian binary layout:
#   "MVDB"  u32 version  u32 dim  u64 count  u32 M  u32 ef_construction
#   u64 entry_point_id (0xFFFF...FF when empty)
#   then per node, in insertion order:
#     u64 id  u32 level  dim x f32 vector
#     per level 0..level: u32 n_neighbors, then n x u64 neighbor ids


def persist(index: HnswIndex, path) -> None:
    with open(path, "wb") as f:
        entry = _NO_ENTRY if index.entry_point is None else index.entry_point
        f.write(MAGIC)
        f.write(struct.pack("<IIQIIQ", FORMAT_VERSION, index.dim, len(index),
                            index.M, index.ef_construction, entry))
        for slot, id in enumerate(index._ids):
            level = index._levels[slot]
            f.write(struct.pack("<QI", id, level))
            f.write(index._vecs[slot].astype("<f4").tobytes())
            for lev in range(level + 1):
                nbrs = index._neighbors[slot][lev]
                f.write(struct.pack("<I", len(nbrs)))
                for s in nbrs:
                    f.write(struct.pack("<Q", index._ids[s]))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(
                f"file truncated: wanted {size} bytes for {fmt!r}", self.pos
            )
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out


def restore(path) -> HnswIndex:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    (magic,) = r.take("<4s")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, dim, count, M, efc, entry_id = r.take("<IIQIIQ")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)

    index = HnswIndex(dim=dim, M=M, ef_construction=efc)
    ids, levels, vecs, neighbor_ids = [], [], [], []
    for _ in range(count):
        id, level = r.take("<QI")
        vec_off = r.pos
        if r.pos + 4 * dim > len(data):
            raise FormatError("file truncated inside a vector", vec_off)
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=vec_off).copy()
        r.pos += 4 * dim
        per_level = []
        for _lev in range(level + 1):
            (n_nbrs,) = r.take("<I")
            nbrs = [r.take("<Q")[0] for _ in range(n_nbrs)]
            per_level.append(nbrs)
        ids.append(id)
        levels.append(level)
        vecs.append(vec)
        neighbor_ids.append(per_level)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last node", r.pos)

    if count:
        index._vecs = np.stack(vecs).astype(np.float32)
        index._vecs64 = index._vecs.astype(np.float64)
    index._ids = [int(i) for i in ids]
    index._id2slot = {int(i): s for s, i in enumerate(ids)}
    if len(index._id2slot) != len(ids):
        raise FormatError("duplicate node ids in file")
    index._levels = [int(l) for l in levels]
    for node_id, per_level in zip(ids, neighbor_ids):
        resolved = []
        for nbrs in per_level:
            row = []
            for nid in nbrs:
                if nid not in index._id2slot:
                    raise FormatError(f"node {node_id} references missing id {nid}")
                row.append(index._id2slot[nid])
            resolved.append(row)
        index._neighbors.append(resolved)
    if entry_id == _NO_ENTRY:
        if count:
            raise FormatError("non-empty index without an entry point")
        index._entry_slot = -1
    else:
        if entry_id not in index._id2slot:
            raise FormatError(f"entry point {entry_id} is not a stored node")
        index._entry_slot = index._id2slot[entry_id]
    index.check_invariants()
    return index
