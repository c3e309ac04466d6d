"""Block partitions induced by blocking (matching) variables.

A partition of {0, ..., n-1} into disjoint groups constrains an unknown
permutation to act within groups only.  It induces the K x n constraint
matrix C (C[j, i] = 1 iff i in group j) used by the constrained
penalized fit, and the block-averaging projection Q used by the
estimating-equation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint groups covering {0, ..., n-1}, ordered by smallest member."""

    n: int
    groups: tuple[np.ndarray, ...]
    # int label of the group each index belongs to
    labels: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("partition needs n >= 1")
        seen = np.zeros(self.n, dtype=bool)
        labels = np.empty(self.n, dtype=np.int64)
        for j, g in enumerate(self.groups):
            if g.size == 0:
                raise ValueError("empty group in partition")
            if np.any(g < 0) or np.any(g >= self.n):
                raise ValueError("group index out of range")
            if np.any(seen[g]):
                raise ValueError("groups are not disjoint")
            seen[g] = True
            labels[g] = j
        if not np.all(seen):
            raise ValueError("groups do not cover all indices")
        object.__setattr__(self, "labels", labels)

    # -- constructors ---------------------------------------------------

    @classmethod
    def from_groups(cls, n: int, groups) -> "BlockPartition":
        arrs = [np.sort(np.asarray(g, dtype=np.int64)) for g in groups]
        arrs.sort(key=lambda g: int(g[0]) if g.size else -1)
        return cls(n=n, groups=tuple(arrs))

    @classmethod
    def from_labels(cls, labels) -> "BlockPartition":
        """Group indices sharing a label value; tuples of values work too."""
        keys = list(labels)
        n = len(keys)
        by_key: dict = {}
        for i, k in enumerate(keys):
            by_key.setdefault(k, []).append(i)
        return cls.from_groups(n, by_key.values())

    @classmethod
    def single_block(cls, n: int) -> "BlockPartition":
        return cls.from_groups(n, [np.arange(n)])

    @classmethod
    def singletons(cls, n: int) -> "BlockPartition":
        return cls.from_groups(n, [[i] for i in range(n)])

    # -- views ------------------------------------------------------------

    @property
    def n_blocks(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([g.size for g in self.groups], dtype=np.int64)

    def nonsingleton_groups(self) -> list[np.ndarray]:
        return [g for g in self.groups if g.size > 1]

    def singleton_mask(self) -> np.ndarray:
        """Boolean mask over indices living in singleton groups."""
        mask = np.zeros(self.n, dtype=bool)
        for g in self.groups:
            if g.size == 1:
                mask[g] = True
        return mask

    def constraint_matrix(self) -> np.ndarray:
        """Dense K x n matrix C with C[j, i] = 1 iff i in group j."""
        c = np.zeros((self.n_blocks, self.n))
        for j, g in enumerate(self.groups):
            c[j, g] = 1.0
        return c

    # -- block averaging ----------------------------------------------------

    def group_sums(self, v: np.ndarray) -> np.ndarray:
        """Per-group sums of a vector or of matrix rows, shape (K,) or (K, d)."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return np.bincount(self.labels, weights=v, minlength=self.n_blocks)
        out = np.empty((self.n_blocks, v.shape[1]))
        for j in range(v.shape[1]):
            out[:, j] = np.bincount(self.labels, weights=v[:, j], minlength=self.n_blocks)
        return out

    def group_means(self, v: np.ndarray) -> np.ndarray:
        sums = self.group_sums(v)
        sizes = self.sizes.astype(float)
        return sums / (sizes if np.ndim(sums) == 1 else sizes[:, None])

    def apply_q(self, v: np.ndarray) -> np.ndarray:
        """Q v, replacing each entry (or row) by its block mean."""
        return self.group_means(v)[self.labels]

    def dense_q(self) -> np.ndarray:
        """Dense n x n averaging projection; small-n diagnostics only."""
        q = np.zeros((self.n, self.n))
        for g in self.groups:
            q[np.ix_(g, g)] = 1.0 / g.size
        return q
