"""Shared search types: configuration, success predicates, success sets,
trajectory generators and candidate scoring.

Stream keys
-----------
Every trajectory owns an integer-tuple key (see ``flowcore.stream``).
Trajectory ``i`` of a pass starts from ``root + (TAG_TRAJ, i)``. When a state is
branched, branch 0 continues its parent's key and branch ``j > 0`` forks to
``parent + (TAG_BRANCH, round, j)``. Rollouts use
``root + (TAG_ROLLOUT, round, candidate)``. Keys therefore depend only on
the search position, never on execution order.
"""

from __future__ import annotations

import json
import logging
import math
import operator
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from binderflow.flowcore import LENGTH_SCALE, ForwardCounter, NoisyState, SamplerSettings, advance_batch, initial_state, rekey
from binderflow.reward import RewardSpec, evaluate_reward

log = logging.getLogger(__name__)

TAG_TRAJ = 10
TAG_BRANCH = 11
TAG_ROLLOUT = 12
TAG_RESAMPLE = 13
TAG_MCTS = 14
TAG_REFINE = 15

ALGORITHMS = ("bon", "beam", "fks", "mcts", "refine")


@dataclass(frozen=True)
class SearchConfig:
    beam_width: int = 4
    branch_factor: int = 4
    block_steps: int = 100
    inverse_temperature: float = 10.0
    mcts_epsilon: float = 0.5
    mcts_c: float = 1.0
    mcts_simulations: int = 20
    n_samples: int = 16
    refine_iterations: int = 20
    budget_evaluations: Optional[int] = None
    budget_seconds: Optional[float] = None

    def __post_init__(self):
        for name in ("beam_width", "branch_factor", "block_steps", "mcts_simulations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.mcts_epsilon <= 1.0:
            raise ValueError("mcts_epsilon must lie in [0, 1]")
        if self.inverse_temperature < 0 or self.mcts_c < 0:
            raise ValueError("inverse_temperature and mcts_c must be nonnegative")
        if self.n_samples < 0 or self.refine_iterations < 0:
            raise ValueError("sample and iteration counts must be nonnegative")


_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge}


@dataclass(frozen=True)
class SuccessCriterion:
    """Conjunction of ``(component, op, threshold)`` predicates on raw reward components."""

    predicates: tuple = ()
    always: Optional[bool] = None

    def __post_init__(self):
        preds = tuple((str(n), str(op), float(v)) for n, op, v in self.predicates)
        for _, op, _ in preds:
            if op not in _OPS:
                raise ValueError(f"unknown comparison {op!r}")
        object.__setattr__(self, "predicates", preds)

    @classmethod
    def toy_default(cls, ipae_max: float = 7.0, min_contacts: int = 1) -> "SuccessCriterion":
        return cls((("proxy_ipae", "<", ipae_max), ("contact_count", ">=", min_contacts)))

    @classmethod
    def never(cls) -> "SuccessCriterion":
        return cls((), always=False)

    @classmethod
    def anything(cls) -> "SuccessCriterion":
        return cls((), always=True)

    def __call__(self, raw) -> bool:
        if self.always is not None:
            return self.always
        return all(_OPS[op](raw[name], thr) for name, op, thr in self.predicates)

    def describe(self) -> list:
        if self.always is not None:
            return [str(self.always).lower()]
        return [f"{n} {op} {v:g}" for n, op, v in self.predicates]


@dataclass(frozen=True)
class Scored:
    reward: float
    raw: dict
    passed: bool


@dataclass(frozen=True)
class SuccessRecord:
    coords: tuple
    labels: tuple
    reward: float
    raw: tuple
    algorithm: str
    pass_index: int
    round: int
    candidate: int
    kind: str

    def sort_key(self):
        return (self.algorithm, self.pass_index, self.round, self.kind, self.candidate, self.coords, self.labels)

    def to_json(self) -> str:
        d = {
            "algorithm": self.algorithm,
            "pass": self.pass_index,
            "round": self.round,
            "candidate": self.candidate,
            "kind": self.kind,
            "reward": self.reward,
            "raw": dict(self.raw),
            "labels": list(self.labels),
            "coords": [list(c) for c in self.coords],
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SuccessRecord":
        d = json.loads(line)
        return cls(
            tuple(tuple(c) for c in d["coords"]), tuple(d["labels"]), d["reward"], tuple(sorted(d["raw"].items())),
            d["algorithm"], d["pass"], d["round"], d["candidate"], d["kind"],
        )

    @property
    def coords_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


class SuccessSet:
    """Accepted samples. Iteration and serialisation use a canonical order."""

    def __init__(self, records=()):
        self._records = list(records)

    def add(self, record: SuccessRecord) -> None:
        self._records.append(record)

    def extend(self, other: "SuccessSet") -> None:
        self._records.extend(other._records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(sorted(self._records, key=SuccessRecord.sort_key))

    def __eq__(self, other) -> bool:
        return isinstance(other, SuccessSet) and list(self) == list(other)

    def structures(self) -> list:
        return [r.coords_array for r in self]

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self)

    @classmethod
    def from_jsonl(cls, text: str) -> "SuccessSet":
        return cls(SuccessRecord.from_json(ln) for ln in text.splitlines() if ln.strip())


@dataclass
class Candidate:
    state: NoisyState
    cand_id: int
    reward: float = float("nan")
    scored: Optional[Scored] = None


@dataclass
class SearchResult:
    algorithm: str
    success: SuccessSet
    final: list
    evaluations: int
    rounds: int = 0
    beam_history: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


class FlowGenerator:
    """Trajectory operations over a vector field for one target."""

    def __init__(
        self,
        field,
        ctx,
        settings: SamplerSettings,
        n_residues: int,
        d_z: int,
        codec=None,
        counter: Optional[ForwardCounter] = None,
        chunk: int = 256,
    ):
        self.field = field
        self.ctx = ctx
        self.settings = settings
        self.n_residues = n_residues
        self.d_z = d_z
        self.codec = codec
        self.counter = counter if counter is not None else ForwardCounter()
        self.chunk = chunk

    @property
    def steps(self) -> int:
        return self.settings.schedule.steps

    def init(self, key) -> NoisyState:
        return initial_state(key, self.n_residues, self.d_z, self.settings.c_d)

    def advance(self, states: Sequence[NoisyState], n_steps: int) -> list:
        out = []
        for i in range(0, len(states), self.chunk):
            out.extend(advance_batch(states[i : i + self.chunk], self.field, n_steps, self.settings, self.ctx, self.counter))
        return out

    def decode(self, state: NoisyState):
        """``(coords in Angstrom, labels)``."""
        coords = state.state.coords * LENGTH_SCALE
        if self.codec is None:
            labels = np.zeros(len(coords), dtype=int)
        else:
            labels = self.codec.decode_labels(state.state.coords[None], state.state.latents[None])[0]
        return coords, labels


class RewardScorer:
    """Scores decoded samples with a RewardSpec and a SuccessCriterion."""

    def __init__(self, ctx, spec: RewardSpec, criterion: SuccessCriterion, custom: Optional[Callable] = None):
        self.ctx, self.spec, self.criterion, self.custom = ctx, spec, criterion, custom

    def __call__(self, coords, labels, info) -> Scored:
        reward, raw = evaluate_reward(coords, labels, self.ctx, self.spec, self.custom)
        passed = bool(math.isfinite(reward) and self.criterion(raw))
        return Scored(reward, raw, passed)


def branch_key(parent_key, round_index: int, j: int) -> tuple:
    return tuple(parent_key) if j == 0 else tuple(parent_key) + (TAG_BRANCH, round_index, j)


def make_record(coords, labels, scored: Scored, algorithm, pass_index, round_index, cand_id, kind) -> SuccessRecord:
    return SuccessRecord(
        coords=tuple(tuple(float(v) for v in row) for row in np.asarray(coords)),
        labels=tuple(int(v) for v in labels),
        reward=float(scored.reward),
        raw=tuple(sorted((k, float(v)) for k, v in scored.raw.items())),
        algorithm=algorithm,
        pass_index=int(pass_index),
        round=int(round_index),
        candidate=int(cand_id),
        kind=kind,
    )


def score_states(gen, scorer, states, info_list):
    """Decode and score each state; returns a list of ``(coords, labels, Scored)``."""
    out = []
    for st, info in zip(states, info_list):
        coords, labels = gen.decode(st)
        out.append((coords, labels, scorer(coords, labels, info)))
    return out


def rekey_all(states, keys) -> list:
    return [rekey(s, k) for s, k in zip(states, keys)]
