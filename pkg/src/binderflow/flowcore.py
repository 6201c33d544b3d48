"""Interpolants with translation noise, time mixtures, losses, score conversion
and the two-time Euler-Maruyama sampler.

Conventions
-----------
Coordinates inside the flow are in model units (``LENGTH_SCALE`` Angstrom per
unit). Batched arrays carry a leading batch axis: coords ``(B, N, 3)``,
latents ``(B, N, d_z)``, times ``(B,)``.

Random streams are identified by integer tuples ``key``; ``stream(key)``
turns a key into a numpy Generator. The first key element is the global seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from binderflow.denoiser.autograd import Tensor

LENGTH_SCALE = 10.0
DEFAULT_DZ = 8
DEFAULT_CD = 0.2
DEFAULT_STEPS = 400
DEFAULT_ETA = 0.1
DEFAULT_BETA_CLAMP = 1e3

# t_x ~ 0.02 U(0,1) + 0.98 Beta(1.9, 1);  t_z ~ 0.02 U(0,1) + 0.98 Beta(1, 1.5)
TIME_MIXTURES = {"x": (0.02, 1.9, 1.0), "z": (0.02, 1.0, 1.5)}

# stream tags appended to trajectory keys
TAG_INIT = 0
TAG_STEP = 1


def stream(key) -> np.random.Generator:
    key = tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=key[0], spawn_key=key[1:]))


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class BinderState:
    coords: np.ndarray
    latents: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        latents = np.asarray(self.latents, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError(f"coords must be (N, 3) with N >= 1, got {coords.shape}")
        if latents.ndim != 2 or latents.shape[0] != coords.shape[0] or latents.shape[1] < 1:
            raise ValueError(f"latents must be (N, d_z), got {latents.shape}")
        if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(latents))):
            raise NumericError("BinderState entries must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "latents", latents)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d_z(self) -> int:
        return self.latents.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, BinderState)
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.latents, other.latents)
        )


@dataclass(frozen=True, eq=False)
class NoisyState:
    state: BinderState
    t_x: float
    t_z: float
    rng_key: tuple = (0,)
    step: int = 0

    def __post_init__(self):
        if not (0.0 <= self.t_x <= 1.0 and 0.0 <= self.t_z <= 1.0):
            raise ValueError(f"times must lie in [0, 1], got ({self.t_x}, {self.t_z})")


@dataclass(frozen=True)
class InterpolantDraw:
    x0: np.ndarray
    z0: np.ndarray
    d: np.ndarray
    c_d: float = DEFAULT_CD


def draw_interpolant(rng: np.random.Generator, n: int, d_z: int, c_d: float = DEFAULT_CD, batch=None):
    """Gaussian source draws; the draw order (x0, z0, d) is part of the stream contract."""
    lead = () if batch is None else (batch,)
    x0 = rng.standard_normal(lead + (n, 3))
    z0 = rng.standard_normal(lead + (n, d_z))
    d = c_d * rng.standard_normal(lead + (3,))
    return InterpolantDraw(x0, z0, d, c_d)


@dataclass(frozen=True)
class ScheduleSpec:
    steps: int = DEFAULT_STEPS
    kind_x: str = "exponential"
    kind_z: str = "quadratic"
    gamma_x: float = 3.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        for kind in (self.kind_x, self.kind_z):
            if kind not in ("exponential", "quadratic", "linear"):
                raise ValueError(f"unknown schedule kind {kind!r}")

    def _grid(self, kind: str) -> np.ndarray:
        s = np.arange(self.steps + 1) / self.steps
        if kind == "exponential":
            g = (1.0 - np.exp(-self.gamma_x * s)) / (1.0 - np.exp(-self.gamma_x))
        elif kind == "quadratic":
            g = s**2
        else:
            g = s.copy()
        g[0], g[-1] = 0.0, 1.0
        return g

    @property
    def t_x(self) -> np.ndarray:
        return self._grid(self.kind_x)

    @property
    def t_z(self) -> np.ndarray:
        return self._grid(self.kind_z)


def sample_times(rng: np.random.Generator, which: str, size=None):
    """Draw from the two-component time mixture of branch ``which`` ('x' or 'z')."""
    w, a, b = TIME_MIXTURES[which]
    pick_uniform = rng.random(size) < w
    u = rng.random(size)
    beta = rng.beta(a, b, size)
    return np.where(pick_uniform, u, beta)


def time_mixture_mean(which: str) -> float:
    w, a, b = TIME_MIXTURES[which]
    return w * 0.5 + (1 - w) * a / (a + b)


def interpolate(clean: BinderState, draw: InterpolantDraw, t_x: float, t_z: float, rng_key=(0,)) -> NoisyState:
    """``x_t = t_x x + (1 - t_x)(x0 + d)``, ``z_t = t_z z + (1 - t_z) z0``; d is broadcast over residues."""
    if draw.x0.shape != clean.coords.shape or draw.z0.shape != clean.latents.shape or np.shape(draw.d) != (3,):
        raise ValueError("interpolant draw does not match the clean state's shapes")
    if t_x == 1.0 and t_z == 1.0:
        return NoisyState(clean, 1.0, 1.0, tuple(rng_key))
    xt = t_x * clean.coords + (1.0 - t_x) * (draw.x0 + draw.d)
    zt = t_z * clean.latents + (1.0 - t_z) * draw.z0
    return NoisyState(BinderState(xt, zt), float(t_x), float(t_z), tuple(rng_key))


# ----------------------------------------------------------------------------
# compute accounting


@dataclass
class ForwardCounter:
    """Counts per-sample denoiser evaluations."""

    calls: int = 0


def evaluate_field(field, x, z, t_x, t_z, ctx, counter: Optional[ForwardCounter] = None):
    """The single choke point through which samplers call a denoiser."""
    if counter is not None:
        counter.calls += int(np.shape(x)[0])
    return field.velocity(x, z, t_x, t_z, ctx)


# ----------------------------------------------------------------------------
# losses


@dataclass
class CFMBatch:
    """Clean batch: coords (B, N, 3) in model units, latents (B, N, d_z), and a context."""

    coords: np.ndarray
    latents: np.ndarray
    ctx: object = None


def _cfm_draws(rng, batch: CFMBatch, c_d: float):
    b, n, _ = batch.coords.shape
    t_x = sample_times(rng, "x", b)
    t_z = sample_times(rng, "z", b)
    draw = draw_interpolant(rng, n, batch.latents.shape[-1], c_d, batch=b)
    return t_x, t_z, draw


def _cfm_from_draws(field, batch, t_x, t_z, x_src, z0, with_grad: bool):
    tx = t_x[:, None, None]
    tz = t_z[:, None, None]
    xt = tx * batch.coords + (1.0 - tx) * x_src
    zt = tz * batch.latents + (1.0 - tz) * z0
    target_x = batch.coords - x_src
    target_z = batch.latents - z0
    if not with_grad:
        vx, vz = field.velocity(xt, zt, t_x, t_z, batch.ctx)
        per = ((vx - target_x) ** 2).sum(axis=(1, 2)) + ((vz - target_z) ** 2).sum(axis=(1, 2))
        per = per / batch.coords.shape[1]
        _check_finite(per)
        return float(per.mean()), None
    params, (vx, vz) = field.forward_graph(xt, zt, t_x, t_z, batch.ctx)
    ex = vx - target_x
    ez = vz - target_z
    per = ((ex * ex).sum(axis=(1, 2)) + (ez * ez).sum(axis=(1, 2))) * (1.0 / batch.coords.shape[1])
    _check_finite(per.data)
    loss = per.mean()
    loss.backward()
    return float(loss.data), field.collect_grad(params)


def _check_finite(per_sample):
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NumericError(f"non-finite CFM loss at batch index {int(bad[0])}")


def cfm_loss(field, batch: CFMBatch, rng: np.random.Generator, c_d: float = DEFAULT_CD, with_grad: bool = True):
    """Flow-matching loss with translation noise on the coordinate branch.

    Per sample: ``(||v_x - (x - (x0 + d))||^2 + ||v_z - (z - z0)||^2) / N``,
    averaged over the batch. Returns ``(loss, grad)`` where ``grad`` is the flat
    parameter gradient (``None`` when ``with_grad`` is false).
    """
    t_x, t_z, draw = _cfm_draws(rng, batch, c_d)
    x_src = draw.x0 + draw.d[:, None, :]
    return _cfm_from_draws(field, batch, t_x, t_z, x_src, draw.z0, with_grad)


def cfm_loss_plain(field, batch: CFMBatch, rng: np.random.Generator, with_grad: bool = True):
    """Flow-matching loss without any translation term (source is x0 alone).

    Consumes the random stream exactly like :func:`cfm_loss`.
    """
    t_x, t_z, draw = _cfm_draws(rng, batch, 0.0)
    return _cfm_from_draws(field, batch, t_x, t_z, draw.x0, draw.z0, with_grad)


@dataclass(frozen=True)
class ElboTerms:
    recon: float
    kl: float
    beta: float

    @property
    def elbo(self) -> float:
        return self.recon - self.beta * self.kl


def gaussian_kl_standard(mean, log_scale):
    """KL(N(mean, exp(log_scale)^2) || N(0, 1)), summed over the last axis."""
    if isinstance(mean, Tensor):
        var = (log_scale * 2.0).exp()
        return ((mean * mean + var - 1.0) * 0.5 - log_scale).sum(axis=-1)
    var = np.exp(2.0 * log_scale)
    return (0.5 * (mean**2 + var - 1.0) - log_scale).sum(axis=-1)


def elbo_loss(codec, batch, beta: float = 1.0, rng: Optional[np.random.Generator] = None, with_grad: bool = False):
    """Negative beta-ELBO, averaged per residue.

    ``batch`` is ``(coords, geom, labels)`` with coords in model units. When
    ``rng`` is given the latent is a reparameterised posterior sample,
    otherwise the posterior mean is used. Returns ``(loss, ElboTerms, grad)``;
    ``loss = beta * KL - recon``.
    """
    coords, geom, labels = batch
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    params, graph = codec.elbo_graph(coords, geom, labels, rng)
    recon, kl = graph
    n_res = float(np.prod(labels.shape))
    loss = (kl.sum() * beta - recon.sum()) * (1.0 / n_res)
    grad = None
    if with_grad:
        loss.backward()
        grad = codec.collect_grad(params)
    terms = ElboTerms(float(recon.data.sum() / n_res), float(kl.data.sum() / n_res), beta)
    return float(loss.data), terms, grad


# ----------------------------------------------------------------------------
# sampling


def velocity_to_score(v, x_t, t, source_var: float = 1.0):
    """Marginal score implied by the linear interpolant with Gaussian source.

    From ``x_t = t x1 + (1 - t) x0``: ``E[x0 | x_t] = x_t - t v`` and
    ``score = -E[x0 | x_t] / ((1 - t) source_var)``.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t >= 1.0):
        raise ZeroDivisionError("score is singular at t = 1")
    if np.any(t < 0.0):
        raise ValueError("t must be nonnegative")
    return -(x_t - t * v) / ((1.0 - t) * source_var)


def beta_x(t):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(t > 0, 1.0 / np.where(t > 0, t, 1.0), np.inf)


def beta_z(t):
    t = np.asarray(t, dtype=float)
    return np.where(t > 0, 0.5 * np.pi * np.tan(0.5 * np.pi * (1.0 - t)), np.inf)


def langevin_scale(beta, dt, clamp: float):
    """Clamp a Langevin scale and keep ``beta * dt <= 1`` so Euler steps stay contractive."""
    out = np.minimum(beta, clamp)
    dt = np.asarray(dt, dtype=float)
    cap = np.where(dt > 0, 1.0 / np.where(dt > 0, dt, 1.0), np.inf)
    return np.minimum(out, cap)


@dataclass(frozen=True)
class SamplerSettings:
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    eta_x: float = DEFAULT_ETA
    eta_z: float = DEFAULT_ETA
    c_d: float = DEFAULT_CD
    beta_clamp: float = DEFAULT_BETA_CLAMP
    use_score: bool = True

    def __post_init__(self):
        if self.eta_x < 0 or self.eta_z < 0:
            raise ValueError("eta must be nonnegative")


def em_update(x, z, vx, vz, t_x, t_z, dt_x, dt_z, settings: SamplerSettings, noise_x=None, noise_z=None, step=None):
    """One Euler-Maruyama update of both branches (batched over the leading axis)."""
    with np.errstate(invalid="ignore", over="ignore"):
        x_new, z_new = _em_arith(x, z, vx, vz, t_x, t_z, dt_x, dt_z, settings, noise_x, noise_z)
    for name, arr in (("x", x_new), ("z", z_new)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite update at step {step} on branch {name}")
    return x_new, z_new


def _em_arith(x, z, vx, vz, t_x, t_z, dt_x, dt_z, settings, noise_x, noise_z):
    tx = np.asarray(t_x, dtype=float).reshape(-1, 1, 1)
    tz = np.asarray(t_z, dtype=float).reshape(-1, 1, 1)
    if settings.use_score and settings.beta_clamp > 0:
        bx = langevin_scale(beta_x(tx), dt_x, settings.beta_clamp)
        bz = langevin_scale(beta_z(tz), dt_z, settings.beta_clamp)
        drift_x = vx + bx * velocity_to_score(vx, x, tx)
        drift_z = vz + bz * velocity_to_score(vz, z, tz)
    else:
        bx = bz = np.zeros_like(tx)
        drift_x, drift_z = vx, vz
    x_new = x + drift_x * dt_x
    z_new = z + drift_z * dt_z
    if noise_x is not None and settings.eta_x > 0:
        x_new = x_new + np.sqrt(2.0 * bx * dt_x) * settings.eta_x * noise_x
    if noise_z is not None and settings.eta_z > 0:
        z_new = z_new + np.sqrt(2.0 * bz * dt_z) * settings.eta_z * noise_z
    return x_new, z_new


def euler_ode_update(x, z, vx, vz, dt_x, dt_z):
    """Plain Euler step of the probability-flow ODE."""
    return x + vx * dt_x, z + vz * dt_z


def _needs_noise(settings: SamplerSettings) -> bool:
    return settings.use_score and settings.beta_clamp > 0 and (settings.eta_x > 0 or settings.eta_z > 0)


def step_noise(key, step: int, n: int, d_z: int):
    rng = stream(tuple(key) + (TAG_STEP, step))
    return rng.standard_normal((n, 3)), rng.standard_normal((n, d_z))


def sde_step(
    state: NoisyState,
    field,
    step: int,
    settings: SamplerSettings,
    rng: Optional[np.random.Generator] = None,
    ctx=None,
    counter: Optional[ForwardCounter] = None,
) -> NoisyState:
    """Advance one state by one schedule step; ``rng`` supplies this step's noise."""
    sched = settings.schedule
    if not 0 <= step < sched.steps:
        raise ValueError(f"step {step} outside schedule of {sched.steps} steps")
    gx, gz = sched.t_x, sched.t_z
    x = state.state.coords[None]
    z = state.state.latents[None]
    tx, tz = np.array([gx[step]]), np.array([gz[step]])
    vx, vz = evaluate_field(field, x, z, tx, tz, ctx, counter)
    nx = nz = None
    if rng is not None and _needs_noise(settings):
        nx = rng.standard_normal(x.shape[1:])[None]
        nz = rng.standard_normal(z.shape[1:])[None]
    x, z = em_update(x, z, vx, vz, tx, tz, gx[step + 1] - gx[step], gz[step + 1] - gz[step], settings, nx, nz, step)
    return NoisyState(BinderState(x[0], z[0]), float(gx[step + 1]), float(gz[step + 1]), state.rng_key, step + 1)


def initial_state(key, n: int, d_z: int, c_d: float) -> NoisyState:
    """Gaussian noise at (0, 0) plus one global translation draw on the coordinates."""
    draw = draw_interpolant(stream(tuple(key) + (TAG_INIT,)), n, d_z, c_d)
    return NoisyState(BinderState(draw.x0 + draw.d, draw.z0), 0.0, 0.0, tuple(key), 0)


def advance_batch(
    states,
    field,
    n_steps: int,
    settings: SamplerSettings,
    ctx=None,
    counter: Optional[ForwardCounter] = None,
):
    """Advance states that share a schedule position by ``n_steps`` (clipped at the end).

    Step noise for each state comes from ``stream(state.rng_key + (TAG_STEP, step))``,
    so the result does not depend on how states are grouped into batches.
    """
    states = list(states)
    if not states:
        return []
    step = states[0].step
    if any(s.step != step for s in states):
        raise ValueError("batched states must share a schedule step")
    sched = settings.schedule
    gx, gz = sched.t_x, sched.t_z
    end = min(step + n_steps, sched.steps)
    x = np.stack([s.state.coords for s in states])
    z = np.stack([s.state.latents for s in states])
    noisy = _needs_noise(settings)
    for s in range(step, end):
        tx = np.full(len(states), gx[s])
        tz = np.full(len(states), gz[s])
        vx, vz = evaluate_field(field, x, z, tx, tz, ctx, counter)
        nx = nz = None
        if noisy:
            draws = [step_noise(st.rng_key, s, x.shape[1], z.shape[2]) for st in states]
            nx = np.stack([d[0] for d in draws])
            nz = np.stack([d[1] for d in draws])
        x, z = em_update(x, z, vx, vz, tx, tz, gx[s + 1] - gx[s], gz[s + 1] - gz[s], settings, nx, nz, s)
    return [
        NoisyState(BinderState(x[i], z[i]), float(gx[end]), float(gz[end]), st.rng_key, end)
        for i, st in enumerate(states)
    ]


def rekey(state: NoisyState, key) -> NoisyState:
    return replace(state, rng_key=tuple(key))


def sample_trajectory(
    field,
    ctx,
    settings: SamplerSettings,
    key,
    n_residues: int,
    d_z: int = DEFAULT_DZ,
    codec=None,
    start: Optional[NoisyState] = None,
    counter: Optional[ForwardCounter] = None,
):
    """Simulate from (0, 0), or from ``start``, to (1, 1) and decode.

    Returns ``(final BinderState, labels)``; labels are ``None`` without a codec.
    """
    if start is None:
        state = initial_state(key, n_residues, d_z, settings.c_d)
    else:
        sched = settings.schedule
        if not math.isclose(start.t_x, sched.t_x[start.step]) or not math.isclose(start.t_z, sched.t_z[start.step]):
            raise ValueError("start state's times are not on the schedule grid")
        state = start
    (final,) = advance_batch([state], field, settings.schedule.steps, settings, ctx, counter)
    labels = None
    if codec is not None:
        labels = codec.decode_labels(final.state.coords[None], final.state.latents[None])[0]
    return final.state, labels
