"""Reward terms on fully denoised binders and their weighted composition.

All terms work in Angstrom. Search code maximises reward, so ``proxy_ipae``
(lower is better) enters a :class:`RewardSpec` with a negative weight.
"""

from __future__ import annotations

import math
import os
import subprocess
import tempfile
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from binderflow.datapipe import write_structure
from binderflow.geomcore import DEFAULT_HBOND_MAX, DEFAULT_INTERFACE_CUTOFF, Complex, PointChain, detect_contacts

IPAE_MAX = 31.0
IPAE_RHO = 10.0
CONTACT_NORMALIZER = 10.0
TERM_NAMES = ("proxy_ipae", "contact_count", "com_placement", "custom")
SIGN_CONVENTION = "maximise; proxy_ipae enters with a negative weight"


class RewardConfigError(ValueError):
    pass


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, PointChain) else np.asarray(x, dtype=float).reshape(-1, 3)


def proxy_ipae(binder, ctx, rho: float = IPAE_RHO, interface_cutoff: float = DEFAULT_INTERFACE_CUTOFF) -> float:
    """``31 (1 - exp(-d / rho))`` with ``d`` the mean nearest-hotspot distance over interface points.

    Interface points are binder points within ``interface_cutoff`` of any
    target point. A binder with no interface point scores the ceiling, 31.
    """
    hot = ctx.hotspots
    if len(hot) == 0:
        raise ValueError("proxy_ipae needs at least one hotspot")
    b = _coords(binder)
    near_target = cdist(b, ctx.points).min(axis=1) <= interface_cutoff
    if not near_target.any():
        return IPAE_MAX
    d = cdist(b[near_target], hot).min(axis=1).mean()
    return float(IPAE_MAX * (1.0 - math.exp(-d / rho)))


def contact_count_reward(binder, ctx, radius: float = DEFAULT_HBOND_MAX) -> float:
    return float(detect_contacts(_coords(binder), ctx.points, radius))


def com_placement_reward(binder, ctx) -> float:
    return -float(np.linalg.norm(_coords(binder).mean(axis=0) - ctx.hotspot_centroid()))


def label_agreement(binder, labels, ctx, radius: float = 7.0) -> float:
    """Fraction of residues whose label class matches their geometry.

    Toy labels ``0, 1`` mark residues within ``radius`` of a hotspot and
    ``2, 3`` the rest. A label-dependent term to use as the ``custom`` reward.
    """
    b = _coords(binder)
    near = cdist(b, ctx.hotspots).min(axis=1) <= radius
    return float(np.mean((np.asarray(labels) < 2) == near))


@dataclass(frozen=True)
class RewardTerm:
    name: str
    weight: float = 1.0
    normalizer: float = 1.0

    def __post_init__(self):
        if self.name not in TERM_NAMES:
            raise RewardConfigError(f"unknown reward component {self.name!r}; expected one of {TERM_NAMES}")
        if not math.isfinite(self.weight):
            raise RewardConfigError(f"weight of {self.name} must be finite")
        if not (self.normalizer > 0 and math.isfinite(self.normalizer)):
            raise RewardConfigError(f"normalizer of {self.name} must be positive")


@dataclass(frozen=True)
class RewardSpec:
    terms: tuple
    contact_radius: float = DEFAULT_HBOND_MAX
    ipae_rho: float = IPAE_RHO

    def __post_init__(self):
        terms = tuple(t if isinstance(t, RewardTerm) else RewardTerm(*t) for t in self.terms)
        object.__setattr__(self, "terms", terms)

    @classmethod
    def ipae_only(cls, **kw) -> "RewardSpec":
        return cls((RewardTerm("proxy_ipae", -1.0, IPAE_MAX),), **kw)

    @classmethod
    def ipae_plus_contacts(cls, contact_normalizer: float = CONTACT_NORMALIZER, **kw) -> "RewardSpec":
        """Equal weights on the normalised folding proxy and the normalised contact count."""
        return cls((RewardTerm("proxy_ipae", -1.0, IPAE_MAX), RewardTerm("contact_count", 1.0, contact_normalizer)), **kw)

    def scaled(self, factor: float) -> "RewardSpec":
        return RewardSpec(
            tuple(RewardTerm(t.name, t.weight * factor, t.normalizer) for t in self.terms), self.contact_radius, self.ipae_rho
        )

    def describe(self) -> dict:
        return {
            "terms": [{"name": t.name, "weight": t.weight, "normalizer": t.normalizer} for t in self.terms],
            "contact_radius": self.contact_radius,
            "convention": SIGN_CONVENTION,
        }


def normalize_reward(raw: Mapping[str, float], spec: RewardSpec) -> float:
    """``sum_k weight_k * raw_k / normalizer_k`` over the spec's terms."""
    total = 0.0
    for t in spec.terms:
        if t.name not in raw:
            raise RewardConfigError(f"missing raw value for reward component {t.name!r}")
        total += t.weight * float(raw[t.name]) / t.normalizer
    return total


class ExternalScorer:
    """Runs ``command + [pdb_path]`` and parses the last stdout line as a float.

    The structure file holds the binder as chain A and the target as chain B.
    """

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        if not command:
            raise RewardConfigError("external scorer command is empty")
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, binder, labels, ctx) -> float:
        chains = (PointChain.from_coords(_coords(binder)), PointChain.from_coords(ctx.points, chain_id=1))
        text = write_structure(Complex(chains, binder_index=0))
        fd, path = tempfile.mkstemp(suffix=".pdb")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            proc = subprocess.run(
                self.command + [path], capture_output=True, text=True, timeout=self.timeout, check=False
            )
        finally:
            os.unlink(path)
        if proc.returncode != 0:
            raise RuntimeError(f"external scorer exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        lines = [ln for ln in proc.stdout.strip().splitlines() if ln.strip()]
        try:
            return float(lines[-1])
        except (IndexError, ValueError):
            raise RuntimeError(f"external scorer printed no number: {proc.stdout[:200]!r}") from None


def raw_components(
    binder,
    labels,
    ctx,
    spec: Optional[RewardSpec] = None,
    custom: Optional[Callable] = None,
    extra: Sequence[str] = ("proxy_ipae", "contact_count", "com_placement"),
) -> dict:
    """Raw values for every term in ``spec`` plus the names in ``extra``."""
    spec = spec or RewardSpec.ipae_only()
    names = list(dict.fromkeys([t.name for t in spec.terms] + list(extra)))
    out = {}
    for name in names:
        if name == "proxy_ipae":
            out[name] = proxy_ipae(binder, ctx, rho=spec.ipae_rho)
        elif name == "contact_count":
            out[name] = contact_count_reward(binder, ctx, spec.contact_radius)
        elif name == "com_placement":
            out[name] = com_placement_reward(binder, ctx)
        elif name == "custom":
            if custom is None:
                raise RewardConfigError("reward spec uses 'custom' but no custom scorer was supplied")
            out[name] = float(custom(binder, labels, ctx))
        else:
            raise RewardConfigError(f"unknown reward component {name!r}")
    return out


def evaluate_reward(binder, labels, ctx, spec: RewardSpec, custom: Optional[Callable] = None):
    """``(scalar reward, raw components)``."""
    raw = raw_components(binder, labels, ctx, spec, custom)
    return normalize_reward(raw, spec), raw
