"""Synthetic binder-placement datasets.

A target is a fixed cloud of points on a sphere centred at the origin, with a
few hotspot patches. Each binder is an arc of ``K`` points hugging the sphere
at a constant gap, centred over one hotspot patch chosen with the task's
patch frequencies, plus isotropic jitter. Latents are a fixed linear code of
each residue's label and local geometry plus a little Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from binderflow.denoiser.codec import GEOM_DIM, N_LABELS, geometry_code, one_hot
from binderflow.denoiser.field import TargetContext, stack_contexts
from binderflow.flowcore import LENGTH_SCALE, BinderState, CFMBatch
from binderflow.geomcore import DEFAULT_INTERFACE_CUTOFF

DATASET_VERSION = 1


def fibonacci_sphere(m: int, radius: float) -> np.ndarray:
    i = np.arange(m) + 0.5
    phi = np.arccos(1 - 2 * i / m)
    theta = np.pi * (1 + 5**0.5) * i
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


@dataclass(frozen=True)
class TaskSpec:
    n_target: int = 32
    target_radius: float = 12.0
    patch_centers: tuple = ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, -1.0, 0.0))
    patch_size: int = 3
    patch_freqs: tuple = (0.5, 0.3, 0.2)
    binder_len: int = 8
    spacing: float = 3.8
    gap: float = 3.0
    sigma_data: float = 0.5
    latent_noise: float = 0.05
    d_z: int = 8
    random_rotation: bool = True
    label_radius: float = 7.0
    flag_all_patches: bool = False

    def __post_init__(self):
        if len(self.patch_centers) == 0 or self.patch_size < 1:
            raise ValueError("task needs at least one hotspot")
        if len(self.patch_freqs) != len(self.patch_centers):
            raise ValueError("one frequency per hotspot patch")
        freqs = np.asarray(self.patch_freqs, float)
        if np.any(freqs < 0) or not np.isclose(freqs.sum(), 1.0):
            raise ValueError("patch frequencies must be a probability vector")
        if self.binder_len < 1 or self.spacing <= 0 or self.sigma_data < 0:
            raise ValueError("invalid binder rule")
        if self.d_z < N_LABELS + GEOM_DIM:
            raise ValueError(f"d_z must be at least {N_LABELS + GEOM_DIM} for the linear latent code")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TaskSpec":
        d = dict(d)
        if "patch_centers" in d:
            d["patch_centers"] = tuple(tuple(float(v) for v in c) for c in d["patch_centers"])
        if "patch_freqs" in d:
            d["patch_freqs"] = tuple(float(f) for f in d["patch_freqs"])
        return cls(**d)

    def target_points(self) -> np.ndarray:
        return fibonacci_sphere(self.n_target, self.target_radius)

    def hotspot_patches(self) -> list:
        """Index sets of the ``patch_size`` target points nearest each patch direction."""
        pts = self.target_points()
        out = []
        for c in self.patch_centers:
            c = np.asarray(c, float) / np.linalg.norm(c)
            order = np.argsort(np.linalg.norm(pts - self.target_radius * c, axis=1), kind="stable")
            out.append(np.sort(order[: self.patch_size]))
        return out

    def hotspot_flags(self) -> np.ndarray:
        flags = np.zeros(self.n_target, bool)
        for patch in self.hotspot_patches():
            flags[patch] = True
        return flags

    def arc_template(self, patch: int) -> np.ndarray:
        """Noise-free binder over a patch, in the unrotated target frame (Angstrom)."""
        pts = self.target_points()
        centre = pts[self.hotspot_patches()[patch]].mean(axis=0)
        u = centre / np.linalg.norm(centre)
        helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        w = np.cross(u, helper)
        w /= np.linalg.norm(w)
        r = self.target_radius + self.gap
        dphi = 2 * np.arcsin(min(self.spacing / (2 * r), 1.0))
        phis = (np.arange(self.binder_len) - (self.binder_len - 1) / 2) * dphi
        return r * (np.cos(phis)[:, None] * u + np.sin(phis)[:, None] * w)


def residue_labels(coords: np.ndarray, hotspots: np.ndarray, radius: float) -> np.ndarray:
    """``2 * (not near a hotspot) + (index parity)``: four classes."""
    near = cdist(coords, hotspots).min(axis=1) <= radius
    return 2 * (~near).astype(int) + (np.arange(len(coords)) % 2)


def latent_code(labels, geom, d_z: int) -> np.ndarray:
    """The fixed linear code ``[one_hot(label), geom, 0, ...]`` used by the datasets."""
    code = np.concatenate([one_hot(labels), geom], axis=-1)
    pad = np.zeros(code.shape[:-1] + (d_z - code.shape[-1],))
    return np.concatenate([code, pad], axis=-1)


@dataclass(eq=False)
class ToyDataset:
    """Columnar binder dataset. Coordinates are stored in Angstrom."""

    coords: np.ndarray
    latents: np.ndarray
    labels: np.ndarray
    geom: np.ndarray
    target_points: np.ndarray
    hotspot_flags: np.ndarray
    anchors: np.ndarray
    spec: Optional[TaskSpec] = None
    translations: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def context(self, i: int) -> TargetContext:
        return TargetContext(self.target_points[i], self.hotspot_flags[i])

    def records(self):
        for i in range(len(self)):
            yield BinderState(self.coords[i], self.latents[i]), self.context(i)

    def sample_batch(self, rng: np.random.Generator, size: int) -> CFMBatch:
        idx = rng.integers(len(self), size=size)
        ctx = stack_contexts(self.context(i) for i in idx)
        return CFMBatch(self.coords[idx] / LENGTH_SCALE, self.latents[idx], ctx)

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx)
        tr = None if self.translations is None else self.translations[idx]
        return ToyDataset(
            self.coords[idx], self.latents[idx], self.labels[idx], self.geom[idx],
            self.target_points[idx], self.hotspot_flags[idx], self.anchors[idx], self.spec, tr, dict(self.meta),
        )

    def to_npz(self, path) -> None:
        extra = {} if self.translations is None else {"translations": self.translations}
        np.savez(
            path,
            version=DATASET_VERSION,
            coords=self.coords,
            latents=self.latents,
            labels=self.labels,
            geom=self.geom,
            target_points=self.target_points,
            hotspot_flags=self.hotspot_flags,
            anchors=self.anchors,
            spec=json.dumps(None if self.spec is None else self.spec.to_dict()),
            **extra,
        )

    @classmethod
    def from_npz(cls, path) -> "ToyDataset":
        with np.load(path, allow_pickle=False) as f:
            if int(f["version"]) != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {int(f['version'])}")
            spec = json.loads(str(f["spec"]))
            return cls(
                f["coords"], f["latents"], f["labels"], f["geom"], f["target_points"], f["hotspot_flags"], f["anchors"],
                None if spec is None else TaskSpec.from_dict(spec),
                f["translations"] if "translations" in f else None,
            )


def gen_toy_binder_dataset(rng: np.random.Generator, spec: TaskSpec, n: int, translate: float = 0.0) -> ToyDataset:
    """Draw ``n`` (binder, target) pairs.

    Per sample: anchor patch ~ Categorical(patch_freqs), whose points are
    flagged as hotspots (all patches are flagged if ``flag_all_patches``), a uniform random
    rotation of the whole complex (if enabled), arc jitter ~ N(0, sigma_data^2),
    latent noise, and, when ``translate > 0``, a rigid shift of the whole
    complex uniform on the sphere of that radius.
    """
    base = spec.target_points()
    patches = spec.hotspot_patches()
    templates = [spec.arc_template(k) for k in range(len(patches))]
    for k, tmpl in enumerate(templates):
        if cdist(tmpl, base[patches[k]]).min() > DEFAULT_INTERFACE_CUTOFF:
            raise ValueError(f"binder over patch {k} never reaches the interface cutoff")

    anchors = rng.choice(len(patches), size=n, p=np.asarray(spec.patch_freqs, float))
    if spec.random_rotation:
        rots = Rotation.random(n, random_state=rng).as_matrix()
    else:
        rots = np.broadcast_to(np.eye(3), (n, 3, 3))
    jitter = rng.standard_normal((n, spec.binder_len, 3)) * spec.sigma_data
    znoise = rng.standard_normal((n, spec.binder_len, spec.d_z)) * spec.latent_noise
    shifts = np.zeros((n, 3))
    if translate > 0:
        v = rng.standard_normal((n, 3))
        shifts = translate * v / np.linalg.norm(v, axis=1, keepdims=True)

    coords = np.empty((n, spec.binder_len, 3))
    targets = np.empty((n, spec.n_target, 3))
    labels = np.empty((n, spec.binder_len), int)
    flags = np.zeros((n, spec.n_target), bool)
    for i in range(n):
        flags[i] = spec.hotspot_flags() if spec.flag_all_patches else np.isin(np.arange(spec.n_target), patches[anchors[i]])
        r = rots[i]
        binder = templates[anchors[i]] @ r.T + jitter[i]
        target = base @ r.T
        labels[i] = residue_labels(binder, target[flags[i]], spec.label_radius)
        coords[i] = binder + shifts[i]
        targets[i] = target + shifts[i]
    geom = geometry_code(coords)
    latents = latent_code(labels, geom, spec.d_z) + znoise
    return ToyDataset(
        coords, latents, labels, geom, targets, flags, anchors, spec,
        shifts if translate > 0 else None,
    )


@dataclass(eq=False)
class GaussianDataset:
    """Independent Gaussian coordinates and latents in model units, no target."""

    mu_x: float
    sigma_x: float
    mu_z: float = 0.0
    sigma_z: float = 1.0
    n: int = 1
    d_z: int = 1

    def sample_batch(self, rng: np.random.Generator, size: int) -> CFMBatch:
        x = self.mu_x + self.sigma_x * rng.standard_normal((size, self.n, 3))
        z = self.mu_z + self.sigma_z * rng.standard_normal((size, self.n, self.d_z))
        return CFMBatch(x, z, None)
