"""Vector fields: a per-token MLP conditioned on a pooled target summary, and
closed-form Gaussian oracle fields."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from binderflow.denoiser.autograd import Tensor, concat, linear
from binderflow.flowcore import LENGTH_SCALE, NumericError


@dataclass(frozen=True, eq=False)
class TargetContext:
    """Conditioning data. Points are in Angstrom; a leading batch axis is allowed."""

    points: np.ndarray
    hotspot_flags: np.ndarray
    chain_index: Optional[np.ndarray] = None
    class_label: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        flags = np.asarray(self.hotspot_flags, dtype=bool)
        if pts.shape[-1] != 3 or pts.shape[:-1] != flags.shape:
            raise ValueError("points must be (..., M, 3) with matching hotspot flags")
        if not np.all(np.isfinite(pts)):
            raise NumericError("target coordinates must be finite")
        chain = np.zeros(flags.shape, dtype=int) if self.chain_index is None else np.asarray(self.chain_index, int)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "hotspot_flags", flags)
        object.__setattr__(self, "chain_index", chain)

    @property
    def hotspots(self) -> np.ndarray:
        return self.points[self.hotspot_flags]

    def hotspot_centroid(self) -> np.ndarray:
        if not self.hotspot_flags.any():
            raise ValueError("target context has no hotspots")
        return self.hotspots.mean(axis=0)

    def translated(self, shift) -> "TargetContext":
        return TargetContext(self.points + np.asarray(shift, float), self.hotspot_flags, self.chain_index, self.class_label)

    def __getitem__(self, i) -> "TargetContext":
        """Select from a batched context."""
        return TargetContext(self.points[i], self.hotspot_flags[i], self.chain_index[i], self.class_label)


def stack_contexts(ctxs) -> TargetContext:
    ctxs = list(ctxs)
    labels = {c.class_label for c in ctxs}
    if len(labels) > 1:
        raise ValueError("cannot stack contexts with different class labels")
    return TargetContext(
        np.stack([c.points for c in ctxs]),
        np.stack([c.hotspot_flags for c in ctxs]),
        np.stack([c.chain_index for c in ctxs]),
        labels.pop(),
    )


@dataclass(frozen=True)
class FieldArch:
    d_z: int = 8
    hidden: tuple = (64, 64)
    time_freqs: int = 4
    pos_freqs: int = 2
    embed_dim: int = 8
    n_classes: int = 0
    activation: str = "silu"
    length_scale: float = LENGTH_SCALE

    @property
    def time_dim(self) -> int:
        return 2 * (1 + 2 * self.time_freqs)

    @property
    def in_dim(self) -> int:
        return 3 + self.d_z + 2 * self.pos_freqs + 2 * self.embed_dim + self.n_classes + self.time_dim

    @property
    def out_dim(self) -> int:
        return 3 + self.d_z

    def param_shapes(self):
        shapes = [("emb_w", (3, self.embed_dim)), ("emb_b", (self.embed_dim,))]
        width = self.in_dim
        for k, h in enumerate(self.hidden):
            shapes += [(f"w{k}", (width, h)), (f"b{k}", (h,)), (f"s{k}", (self.time_dim, h))]
            width = h
        shapes += [("out_w", (width, self.out_dim)), ("out_b", (self.out_dim,)), ("skip_w", (self.in_dim, self.out_dim))]
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for _, s in self.param_shapes()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d) -> "FieldArch":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def time_features(t, n_freqs: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)[..., None]
    k = np.arange(1, n_freqs + 1)
    return np.concatenate([t, np.sin(np.pi * k * t), np.cos(np.pi * k * t)], axis=-1)


def position_features(n: int, n_freqs: int) -> np.ndarray:
    frac = (np.arange(n) / n)[:, None]
    k = np.arange(1, n_freqs + 1)
    return np.concatenate([np.sin(2 * np.pi * k * frac), np.cos(2 * np.pi * k * frac)], axis=-1)


class MLPField:
    """Per-residue MLP with time-adaptive hidden scaling and a linear skip path.

    Token features: noisy coordinates and latents, relative sequence position,
    two pooled target embeddings (hotspot-weighted and plain mean over target
    points), an optional class one-hot, and sinusoidal features of both times.
    Each hidden layer is multiplied by ``1 + T s_k`` where ``T`` holds the time
    features, so the times modulate every layer.
    """

    def __init__(self, arch: FieldArch, params: Optional[np.ndarray] = None):
        self.arch = arch
        n = arch.n_params()
        self.params = np.zeros(n) if params is None else np.array(params, dtype=float)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.params.shape}")

    @classmethod
    def init(cls, arch: FieldArch, rng: np.random.Generator, scale: float = 1.0) -> "MLPField":
        chunks = []
        for name, shape in arch.param_shapes():
            if name.startswith(("w", "emb_w")):
                chunks.append(rng.standard_normal(shape).ravel() * scale / np.sqrt(shape[0]))
            elif name == "out_w":
                chunks.append(rng.standard_normal(shape).ravel() * 0.1 * scale / np.sqrt(shape[0]))
            else:
                chunks.append(np.zeros(int(np.prod(shape))))
        return cls(arch, np.concatenate(chunks))

    def copy(self) -> "MLPField":
        return MLPField(self.arch, self.params.copy())

    def unpack(self, flat=None) -> dict:
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.arch.param_shapes():
            size = int(np.prod(shape))
            out[name] = flat[i : i + size].reshape(shape)
            i += size
        return out

    def _context_features(self, p, ctx, batch: int):
        a = self.arch
        if ctx is None:
            zero = Tensor(np.zeros((batch, 1, 2 * a.embed_dim)))
            return zero, None
        pts = ctx.points / a.length_scale
        emb = linear(pts, p["emb_w"]) + p["emb_b"]
        flags = ctx.hotspot_flags.astype(float)
        w_hot = flags / np.maximum(flags.sum(axis=-1, keepdims=True), 1.0)
        w_all = np.ones_like(flags) / flags.shape[-1]
        pooled_hot = (emb * w_hot[..., None]).sum(axis=-2)
        pooled_all = (emb * w_all[..., None]).sum(axis=-2)
        pooled = concat([pooled_hot, pooled_all], axis=-1)
        if pooled.data.ndim == 1:
            pooled = pooled.reshape(1, 1, -1)
        else:
            pooled = pooled.reshape(pooled.shape[0], 1, -1)
        onehot = None
        if a.n_classes:
            onehot = np.zeros(a.n_classes)
            if ctx.class_label is not None:
                onehot[int(ctx.class_label)] = 1.0
        return pooled, onehot

    def forward_graph(self, x, z, t_x, t_z, ctx):
        a = self.arch
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise NumericError("non-finite input to the denoiser")
        b, n, _ = x.shape
        p = {k: Tensor(v) for k, v in self.unpack().items()}
        tfeat = np.concatenate(
            [time_features(np.broadcast_to(t_x, (b,)), a.time_freqs), time_features(np.broadcast_to(t_z, (b,)), a.time_freqs)],
            axis=-1,
        )[:, None, :]
        pooled, onehot = self._context_features(p, ctx, b)
        parts = [
            Tensor(x),
            Tensor(z),
            Tensor(np.broadcast_to(position_features(n, a.pos_freqs), (b, n, 2 * a.pos_freqs))),
            pooled.broadcast_to((b, n, 2 * a.embed_dim)),
        ]
        if onehot is not None:
            parts.append(Tensor(np.broadcast_to(onehot, (b, n, a.n_classes))))
        parts.append(Tensor(np.broadcast_to(tfeat, (b, n, a.time_dim))))
        h0 = concat(parts, axis=-1)
        h = h0
        for k in range(len(a.hidden)):
            pre = linear(h, p[f"w{k}"], p[f"b{k}"])
            act = pre.silu() if a.activation == "silu" else pre.tanh()
            h = act * (linear(tfeat, p[f"s{k}"]) + 1.0)
        out = linear(h, p["out_w"], p["out_b"]) + linear(h0, p["skip_w"])
        return p, (out[..., :3], out[..., 3:])

    def collect_grad(self, p: dict) -> np.ndarray:
        return np.concatenate(
            [np.zeros(v.data.size) if v.grad is None else v.grad.ravel() for v in p.values()]
        )

    def velocity(self, x, z, t_x, t_z, ctx=None):
        _, (vx, vz) = self.forward_graph(x, z, t_x, t_z, ctx)
        return vx.data, vz.data


def field_forward(field, noisy, ctx):
    """Velocities for a single NoisyState."""
    vx, vz = field.velocity(
        noisy.state.coords[None], noisy.state.latents[None], np.array([noisy.t_x]), np.array([noisy.t_z]), ctx
    )
    return vx[0], vz[0]


def gaussian_velocity(x, t, mu, var_data, var_src=1.0):
    """``E[x1 - x0 | x_t]`` for ``x1 ~ N(mu, var_data)``, ``x0 ~ N(0, var_src)``, elementwise."""
    t = np.asarray(t, dtype=float)
    cov = t * var_data - (1.0 - t) * var_src
    var_t = t * t * var_data + (1.0 - t) ** 2 * var_src
    return mu + cov / var_t * (x - t * mu)


def gaussian_marginal_score(x, t, mu, var_data, var_src=1.0):
    t = np.asarray(t, dtype=float)
    return -(x - t * mu) / (t * t * var_data + (1.0 - t) ** 2 * var_src)


class AnalyticGaussianField:
    """Exact velocity for isotropic Gaussian data under the linear interpolant.

    Coordinates: ``N(mu_x, sigma_x^2 I)`` with source ``x0 + d 1``, ``d ~ N(0, c_d^2 I)``.
    The shared translation only enlarges the source variance of the
    residue-mean mode (to ``1 + N c_d^2``), so the velocity is computed
    separately for the mean and the deviations from it. Latents:
    ``N(mu_z, sigma_z^2 I)`` with standard-normal source.
    """

    params = np.zeros(0)

    def __init__(self, mu_x, sigma_x: float, mu_z=0.0, sigma_z: float = 1.0, c_d: float = 0.0):
        if sigma_x <= 0 or sigma_z <= 0:
            raise ValueError("sigma must be positive")
        self.mu_x = np.asarray(mu_x, dtype=float)
        self.sigma_x = float(sigma_x)
        self.mu_z = np.asarray(mu_z, dtype=float)
        self.sigma_z = float(sigma_z)
        self.c_d = float(c_d)

    def velocity(self, x, z, t_x, t_z, ctx=None):
        x = np.asarray(x, dtype=float)
        tx = np.asarray(t_x, dtype=float).reshape(-1, 1, 1)
        tz = np.asarray(t_z, dtype=float).reshape(-1, 1, 1)
        n = x.shape[-2]
        mu = np.broadcast_to(self.mu_x, x.shape[-2:])
        s2 = self.sigma_x**2
        x_mean = x.mean(axis=-2, keepdims=True)
        mu_mean = mu.mean(axis=-2, keepdims=True)
        v_dev = gaussian_velocity(x - x_mean, tx, mu - mu_mean, s2, 1.0)
        v_mean = gaussian_velocity(x_mean, tx, mu_mean, s2, 1.0 + n * self.c_d**2) if n > 1 or self.c_d else None
        if v_mean is None:
            vx = gaussian_velocity(x, tx, mu, s2, 1.0)
        else:
            vx = v_dev - v_dev.mean(axis=-2, keepdims=True) + v_mean
        vz = gaussian_velocity(np.asarray(z, float), tz, self.mu_z, self.sigma_z**2, 1.0)
        return vx, vz

    def forward_graph(self, *args, **kwargs):
        raise TypeError("the analytic field has no trainable parameters")


def analytic_gaussian_field(mu, sigma: float, **kwargs) -> AnalyticGaussianField:
    return AnalyticGaussianField(mu, sigma, **kwargs)
