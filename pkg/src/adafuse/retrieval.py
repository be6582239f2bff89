"""Exact cosine retrieval over a fixed corpus of unit vectors.

Ranking uses a total order: higher score first, ties broken by ascending id.

A BLAS matrix product scores the whole corpus quickly, but its rounding
depends on where a row sits in memory and on how many queries share the
call, so two identical rows can come out a few ulps apart. Every comparison
that decides an order is therefore settled on an exactly rounded dot product
(``math.fsum`` over the elementwise products), which depends only on the
query and the row contents. Only rows within ``_AMBIGUITY`` of the decisive
score are rescored this way.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, IndexBuildError, ShapeError, UnknownIdError

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-4
# far above BLAS rounding error for unit vectors, far below real score gaps
_AMBIGUITY = 1e-9


@dataclass(frozen=True)
class RankedList:
    ids: np.ndarray
    scores: np.ndarray
    clamped: bool = False  # k exceeded the corpus size

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids.tolist(), self.scores.tolist()))


class EmbeddingIndex:
    """Immutable id-addressed matrix of unit rows."""

    def __init__(self, ids, matrix):
        matrix = np.asarray(matrix, dtype=np.float32)
        ids = np.asarray(ids)
        if matrix.ndim != 2:
            raise IndexBuildError(f"index matrix must be 2-D, got shape {matrix.shape}")
        if ids.shape != (matrix.shape[0],):
            raise IndexBuildError(f"{ids.shape[0] if ids.ndim else 0} ids for {matrix.shape[0]} rows")
        if matrix.shape[0] == 0:
            raise IndexBuildError("cannot index an empty corpus")
        uniq, counts = np.unique(ids, return_counts=True)
        if np.any(counts > 1):
            raise IndexBuildError(f"duplicate id {uniq[counts > 1][0]!r}")
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        dev = np.abs(norms - 1.0)
        if dev.max() > UNIT_TOL:
            row = int(dev.argmax())
            raise IndexBuildError(f"row {row} (id {ids[row]!r}) has norm {norms[row]:.6f}, expected unit")

        self._ids = ids.copy()
        self._ids.setflags(write=False)
        self._matrix = matrix.astype(np.float64)
        self._matrix.setflags(write=False)
        self._row_of = {k: i for i, k in enumerate(self._ids.tolist())}
        # rank position of each row under ascending id, used for tie-breaks
        self._id_order = np.empty(len(ids), dtype=np.int64)
        self._id_order[np.argsort(ids, kind="stable")] = np.arange(len(ids))

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def size(self) -> int:
        return self._matrix.shape[0]

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def scores(self, queries) -> np.ndarray:
        """``(Q, N)`` float64 dot products for ``(Q, d)`` queries."""
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise ShapeError(f"query shape {np.shape(queries)} incompatible with index dim {self.dim}")
        dev = np.abs(np.linalg.norm(q, axis=1) - 1.0)
        if dev.max() > UNIT_TOL:
            raise ContractViolation(f"query {int(dev.argmax())} is not unit-norm")
        return q @ self._matrix.T

    def _exact(self, q: np.ndarray, rows: np.ndarray) -> np.ndarray:
        prods = q[None, :] * self._matrix[rows]
        return np.array([math.fsum(p) for p in prods], dtype=np.float64)

    def _query_row(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        return q[0] if q.ndim == 2 else q

    def top_k(self, query, k: int) -> RankedList:
        if k < 1:
            raise ValueError("k must be >= 1")
        clamped = k > self.size
        if clamped:
            logger.warning("top_k: k=%d exceeds corpus size %d; clamping", k, self.size)
            k = self.size
        s = self.scores(query)[0]
        if k < self.size:
            part = np.argpartition(-s, k - 1)[:k]
            # anything that could tie with or beat the k-th score competes exactly
            candidates = np.flatnonzero(s >= s[part].min() - _AMBIGUITY)
        else:
            candidates = np.arange(self.size)
        exact = self._exact(self._query_row(query), candidates)
        order = np.lexsort((self._id_order[candidates], -exact))[:k]
        rows = candidates[order]
        return RankedList(self._ids[rows], exact[order], clamped)

    def _rank_from_scores(self, q: np.ndarray, s: np.ndarray, row: int) -> int:
        t = s[row]
        better = np.count_nonzero(s > t + _AMBIGUITY)
        close = np.flatnonzero(np.abs(s - t) <= _AMBIGUITY)
        exact = self._exact(q, close)
        te = exact[np.searchsorted(close, row)]
        ahead = (exact > te) | ((exact == te) & (self._id_order[close] < self._id_order[row]))
        return int(1 + better + np.count_nonzero(ahead))

    def rank_of(self, query, target_id) -> int:
        """1-based rank of ``target_id`` for ``query``."""
        row = self._row(target_id)
        return self._rank_from_scores(self._query_row(query), self.scores(query)[0], row)

    def rank_of_batch(self, queries, target_ids) -> np.ndarray:
        """Ranks for many queries; output order follows input order."""
        queries = np.asarray(queries)
        rows = [self._row(t) for t in target_ids]
        if len(rows) != len(queries):
            raise ShapeError("one target id is needed per query")
        S = self.scores(queries)
        Q = np.asarray(queries, dtype=np.float64).reshape(len(rows), -1)
        return np.array([self._rank_from_scores(Q[i], S[i], r) for i, r in enumerate(rows)], dtype=np.int64)

    def _row(self, target_id) -> int:
        key = target_id.item() if isinstance(target_id, np.generic) else target_id
        try:
            return self._row_of[key]
        except KeyError:
            raise UnknownIdError(f"id {target_id!r} not in index") from None


def build_index(ids, matrix) -> EmbeddingIndex:
    return EmbeddingIndex(ids, matrix)


def top_k(index: EmbeddingIndex, query, k: int) -> RankedList:
    return index.top_k(query, k)


def rank_of(index: EmbeddingIndex, query, target_id) -> int:
    return index.rank_of(query, target_id)


def ranked_csv(query_ids, ranked_lists) -> str:
    """CSV rows ``query_id, rank, target_id, score``; target_id is the retrieved item."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "rank", "target_id", "score"])
    for qid, ranked in zip(query_ids, ranked_lists):
        for pos, (cid, score) in enumerate(ranked, start=1):
            w.writerow([qid, pos, cid, repr(float(score))])
    return buf.getvalue()
