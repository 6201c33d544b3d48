"""Toy per-residue autoencoder.

The encoder sees a residue's label (one-hot over a small alphabet) and its
2-D local-geometry code and returns a Gaussian posterior ``(mean, log_scale)``
over a ``d_z``-dimensional latent. The decoder maps a latent to label logits
and a unit-variance Gaussian mean for the geometry code. Both maps are affine,
which is enough for the toy alphabet and makes a hand-wired identity codec
possible whenever ``d_z >= n_labels + 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from binderflow.denoiser.autograd import Tensor, linear
from binderflow.flowcore import BinderState, ElboTerms, elbo_loss, gaussian_kl_standard

N_LABELS = 4
GEOM_DIM = 2
IDENTITY_LOGIT_GAIN = 10.0
IDENTITY_LOG_SCALE = np.log(0.05)


def geometry_code(coords: np.ndarray, scale: float = 10.0) -> np.ndarray:
    """Per-residue ``[cos(bond angle), distance to centroid / scale]`` for coords ``(..., N, 3)``.

    Chain ends copy the angle of their interior neighbour; chains shorter than
    three residues get a cosine of 0.
    """
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[-2]
    cos = np.zeros(coords.shape[:-1])
    if n >= 3:
        a = coords[..., :-2, :] - coords[..., 1:-1, :]
        b = coords[..., 2:, :] - coords[..., 1:-1, :]
        denom = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
        inner = (a * b).sum(-1) / np.maximum(denom, 1e-12)
        cos[..., 1:-1] = inner
        cos[..., 0] = inner[..., 0]
        cos[..., -1] = inner[..., -1]
    dist = np.linalg.norm(coords - coords.mean(axis=-2, keepdims=True), axis=-1) / scale
    return np.stack([cos, dist], axis=-1)


def one_hot(labels, n: int = N_LABELS) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    return np.eye(n)[labels]


class ToyCodec:
    def __init__(self, d_z: int = 8, params: Optional[np.ndarray] = None, n_labels: int = N_LABELS):
        if d_z < 1:
            raise ValueError("d_z must be positive")
        self.d_z = d_z
        self.n_labels = n_labels
        n = self.n_params()
        self.params = np.zeros(n) if params is None else np.array(params, dtype=float)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} codec parameters, got {self.params.shape}")

    @property
    def in_dim(self) -> int:
        return self.n_labels + GEOM_DIM

    def param_shapes(self):
        return [
            ("enc_w", (self.in_dim, 2 * self.d_z)),
            ("enc_b", (2 * self.d_z,)),
            ("dec_w", (self.d_z, self.in_dim)),
            ("dec_b", (self.in_dim,)),
        ]

    def n_params(self) -> int:
        return int(sum(np.prod(s) for _, s in self.param_shapes()))

    def unpack(self, flat=None) -> dict:
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.param_shapes():
            size = int(np.prod(shape))
            out[name] = flat[i : i + size].reshape(shape)
            i += size
        return out

    def pack(self, parts: dict) -> np.ndarray:
        return np.concatenate([np.asarray(parts[name], float).ravel() for name, _ in self.param_shapes()])

    @classmethod
    def init(cls, d_z: int, rng: np.random.Generator, scale: float = 0.1) -> "ToyCodec":
        codec = cls(d_z)
        codec.params = scale * rng.standard_normal(codec.params.size)
        return codec

    @classmethod
    def identity(cls, d_z: int = 8) -> "ToyCodec":
        """Hand-wired codec: latent = [one-hot label, geometry code, 0...]."""
        codec = cls(d_z)
        k = codec.in_dim
        if d_z < k:
            raise ValueError(f"identity codec needs d_z >= {k}")
        enc_w = np.zeros((k, 2 * d_z))
        enc_w[:, :k] = np.eye(k)
        enc_b = np.concatenate([np.zeros(d_z), np.full(d_z, IDENTITY_LOG_SCALE)])
        dec_w = np.zeros((d_z, k))
        dec_w[:k, :k] = np.eye(k)
        dec_w[: codec.n_labels, : codec.n_labels] *= IDENTITY_LOGIT_GAIN
        codec.params = codec.pack({"enc_w": enc_w, "enc_b": enc_b, "dec_w": dec_w, "dec_b": np.zeros(k)})
        return codec

    def _inputs(self, geom, labels):
        geom = np.asarray(geom, dtype=float)
        labels = np.asarray(labels, dtype=int)
        if geom.shape[:-1] != labels.shape or geom.shape[-1] != GEOM_DIM:
            raise ValueError("geometry codes must be (..., N, 2) matching the labels")
        return np.concatenate([one_hot(labels, self.n_labels), geom], axis=-1)

    def encode(self, geom, labels):
        """Posterior ``(mean, log_scale)``, each ``(..., N, d_z)``."""
        p = self.unpack()
        h = self._inputs(geom, labels) @ p["enc_w"] + p["enc_b"]
        return h[..., : self.d_z], h[..., self.d_z :]

    def decode(self, coords, latents):
        """``(label logits, geometry mean)``; coordinates are accepted for interface parity but unused."""
        p = self.unpack()
        out = np.asarray(latents, float) @ p["dec_w"] + p["dec_b"]
        return out[..., : self.n_labels], out[..., self.n_labels :]

    def decode_labels(self, coords, latents) -> np.ndarray:
        logits, _ = self.decode(coords, latents)
        return logits.argmax(axis=-1)

    def elbo_graph(self, coords, geom, labels, rng=None):
        """Per-residue reconstruction log-likelihood and KL as graph tensors."""
        p = {k: Tensor(v) for k, v in self.unpack().items()}
        x = self._inputs(geom, labels)
        h = linear(x, p["enc_w"], p["enc_b"])
        mean, log_scale = h[..., : self.d_z], h[..., self.d_z :]
        if rng is None:
            z = mean
        else:
            eps = rng.standard_normal(mean.shape)
            z = mean + log_scale.exp() * eps
        out = linear(z, p["dec_w"], p["dec_b"])
        logp = out[..., : self.n_labels].log_softmax(axis=-1)
        label_ll = (logp * one_hot(labels, self.n_labels)).sum(axis=-1)
        resid = out[..., self.n_labels :] - np.asarray(geom, float)
        geom_ll = (resid * resid).sum(axis=-1) * -0.5 - GEOM_DIM * 0.5 * np.log(2 * np.pi)
        recon = label_ll + geom_ll
        kl = gaussian_kl_standard(mean, log_scale)
        return p, (recon, kl)

    def collect_grad(self, p: dict) -> np.ndarray:
        return np.concatenate([np.zeros(v.data.size) if v.grad is None else v.grad.ravel() for v in p.values()])


@dataclass(frozen=True)
class RoundtripReport:
    terms: ElboTerms
    geom_rmse: float
    label_accuracy: float


def codec_roundtrip(codec: ToyCodec, state: BinderState, labels, geom=None):
    """Encode at the posterior mean, decode, and report reconstruction quality.

    Returns ``(state with encoded latents, decoded labels, RoundtripReport)``.
    ``geom`` defaults to :func:`geometry_code` of the state's coordinates
    (coordinates in Angstrom).
    """
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (state.n,):
        raise ValueError(f"expected {state.n} labels, got shape {labels.shape}")
    geom = geometry_code(state.coords) if geom is None else np.asarray(geom, float)
    if geom.shape != (state.n, GEOM_DIM):
        raise ValueError("geometry code shape does not match the state")
    mean, _ = codec.encode(geom, labels)
    logits, geom_hat = codec.decode(state.coords, mean)
    decoded = logits.argmax(axis=-1)
    _, terms, _ = elbo_loss(codec, (state.coords[None], geom[None], labels[None]), beta=1.0)
    report = RoundtripReport(
        terms=terms,
        geom_rmse=float(np.sqrt(((geom_hat - geom) ** 2).sum(-1).mean())),
        label_accuracy=float((decoded == labels).mean()),
    )
    return BinderState(state.coords, mean), decoded, report
