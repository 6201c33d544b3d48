"""Geometry primitives: superposition, interfaces, contact proxies, clustering.

All lengths are in Angstrom.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

# similarity = 1 / (1 + rmsd / CLUSTER_D0)
CLUSTER_D0 = 3.0
DEFAULT_CLUSTER_THRESHOLD = 0.5
DEFAULT_INTERFACE_CUTOFF = 8.0
DEFAULT_HBOND_MAX = 3.5


@dataclass(frozen=True, eq=False)
class PointChain:
    """One chain of alpha-carbon positions."""

    coords: np.ndarray
    residue_ids: tuple
    chain_id: int = 0
    resnames: Optional[tuple] = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3 or len(coords) == 0:
            raise ValueError(f"coords must be a nonempty (n, 3) array, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords contain non-finite values")
        ids = tuple(int(r) for r in self.residue_ids)
        if len(ids) != len(coords):
            raise ValueError("residue_ids length does not match coords")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("residue_ids must be strictly increasing")
        if self.resnames is not None and len(self.resnames) != len(coords):
            raise ValueError("resnames length does not match coords")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "residue_ids", ids)

    @classmethod
    def from_coords(cls, coords, chain_id: int = 0, start: int = 1, resnames=None) -> "PointChain":
        coords = np.asarray(coords, dtype=float)
        return cls(coords, tuple(range(start, start + len(coords))), chain_id, resnames)

    def __len__(self) -> int:
        return len(self.coords)

    def subset(self, indices) -> "PointChain":
        idx = sorted(int(i) for i in indices)
        names = None if self.resnames is None else tuple(self.resnames[i] for i in idx)
        return PointChain(self.coords[idx], tuple(self.residue_ids[i] for i in idx), self.chain_id, names)

    def with_chain_id(self, chain_id: int) -> "PointChain":
        return PointChain(self.coords, self.residue_ids, chain_id, self.resnames)

    def __eq__(self, other):
        if not isinstance(other, PointChain):
            return NotImplemented
        return (
            self.chain_id == other.chain_id
            and self.residue_ids == other.residue_ids
            and self.resnames == other.resnames
            and np.array_equal(self.coords, other.coords)
        )


@dataclass(frozen=True)
class Complex:
    chains: tuple
    binder_index: Optional[int] = None

    def __post_init__(self):
        chains = tuple(self.chains)
        if not chains:
            raise ValueError("a Complex needs at least one chain")
        if self.binder_index is not None and not 0 <= self.binder_index < len(chains):
            raise ValueError(f"binder_index {self.binder_index} out of range")
        object.__setattr__(self, "chains", chains)

    def __len__(self) -> int:
        return len(self.chains)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple
    threshold: float = DEFAULT_CLUSTER_THRESHOLD
    representatives: tuple = field(default=())

    @property
    def n_clusters(self) -> int:
        return len(set(self.labels))


def _as_coords(x) -> np.ndarray:
    if isinstance(x, PointChain):
        return x.coords
    return np.asarray(x, dtype=float)


def kabsch_align(mobile, fixed):
    """Optimal rigid superposition of ``mobile`` onto ``fixed``.

    Returns ``(rotation, translation, rmsd)`` such that
    ``mobile @ rotation.T + translation`` best matches ``fixed``.
    """
    p = _as_coords(mobile)
    q = _as_coords(fixed)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)} points")
    if len(p) == 0:
        raise ValueError("need at least one point")
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    p0, q0 = p - pc, q - qc
    if np.allclose(p0, 0.0) or np.allclose(q0, 0.0):
        # any rotation is optimal; keep identity
        rot = np.eye(3)
    else:
        h = p0.T @ q0
        u, _, vt = np.linalg.svd(h)
        sign = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
        rot = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    trans = qc - rot @ pc
    diff = p @ rot.T + trans - q
    rmsd = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    return rot, trans, rmsd


def interface_residues(a, b, cutoff: float = DEFAULT_INTERFACE_CUTOFF):
    """Indices of ``a`` within ``cutoff`` of any point of ``b``, and vice versa."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    pa, pb = _as_coords(a), _as_coords(b)
    if len(pa) == 0 or len(pb) == 0:
        return set(), set()
    close = cdist(pa, pb) <= cutoff
    return set(np.flatnonzero(close.any(axis=1)).tolist()), set(np.flatnonzero(close.any(axis=0)).tolist())


def detect_contacts(binder, target, donor_acceptor_max: float = DEFAULT_HBOND_MAX) -> int:
    """Hydrogen-bond proxy: number of binder/target point pairs within range."""
    if donor_acceptor_max <= 0:
        raise ValueError("donor_acceptor_max must be positive")
    pa, pb = _as_coords(binder), _as_coords(target)
    if len(pa) == 0 or len(pb) == 0:
        return 0
    return int(np.count_nonzero(cdist(pa, pb) <= donor_acceptor_max))


def structure_similarity(a, b, d0: float = CLUSTER_D0) -> float:
    """``1 / (1 + rmsd / d0)`` after superposing the common prefix."""
    pa, pb = _as_coords(a), _as_coords(b)
    n = min(len(pa), len(pb))
    _, _, rmsd = kabsch_align(pa[:n], pb[:n])
    return 1.0 / (1.0 + rmsd / d0)


def greedy_cluster(structures: Sequence, similarity_threshold: float = DEFAULT_CLUSTER_THRESHOLD) -> ClusterAssignment:
    """Leader clustering in input order.

    Each item joins the first existing cluster whose representative has
    similarity at least ``similarity_threshold``; otherwise it founds a new
    cluster and becomes its representative.
    """
    if not 0 < similarity_threshold <= 1:
        raise ValueError("similarity_threshold must lie in (0, 1]")
    reps: list = []
    rep_index: list = []
    labels = []
    for i, s in enumerate(structures):
        coords = _as_coords(s)
        if len(coords) == 0:
            raise ValueError(f"structure {i} is empty")
        for k, rep in enumerate(reps):
            if structure_similarity(coords, rep) >= similarity_threshold:
                labels.append(k)
                break
        else:
            labels.append(len(reps))
            reps.append(coords)
            rep_index.append(i)
    return ClusterAssignment(tuple(labels), similarity_threshold, tuple(rep_index))
