"""Best-of-N, beam search, Feynman-Kac steering, stochastic-expansion MCTS,
mutation refinement, and a compute-budget driver.

All algorithms talk to a generator (``init``/``advance``/``decode``/``steps``
and a ``counter``) and a scorer ``(coords, labels, info) -> Scored`` so they
can run against stubs as well as flow models.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from binderflow.flowcore import rekey, stream
from binderflow.search.common import (
    TAG_MCTS,
    TAG_REFINE,
    TAG_RESAMPLE,
    TAG_ROLLOUT,
    TAG_TRAJ,
    Candidate,
    SearchConfig,
    SearchResult,
    SuccessSet,
    branch_key,
    make_record,
    score_states,
)

log = logging.getLogger(__name__)


class SteeringCollapseError(RuntimeError):
    pass


def _root(seed, pass_index: int = 0) -> tuple:
    return (int(seed), int(pass_index))


# ----------------------------------------------------------------------------
# Best-of-N


def best_of_n(gen, scorer, n: int, seed: int = 0, pass_index: int = 0) -> SearchResult:
    """``n`` independent trajectories; every criterion-passing sample is kept."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    root = _root(seed, pass_index)
    start = gen.counter.calls
    states = gen.advance([gen.init(root + (TAG_TRAJ, i)) for i in range(n)], gen.steps) if n else []
    success = SuccessSet()
    final = []
    for i, st in enumerate(states):
        info = {"algorithm": "bon", "round": 0, "candidate": i}
        try:
            ((coords, labels, sc),) = score_states(gen, scorer, [st], [info])
        except Exception as exc:
            raise RuntimeError(f"best_of_n candidate {i} failed: {exc}") from exc
        final.append(Candidate(st, i, sc.reward, sc))
        if sc.passed:
            success.add(make_record(coords, labels, sc, "bon", pass_index, 0, i, "final"))
    return SearchResult("bon", success, final, gen.counter.calls - start, rounds=1)


# ----------------------------------------------------------------------------
# beam search and FK steering share candidate generation


def _branch(gen, beam, cfg: SearchConfig, round_index: int):
    """Each beam state spawns ``L`` children advanced by one block."""
    children = []
    for pos, cand in enumerate(beam):
        for j in range(cfg.branch_factor):
            key = branch_key(cand.state.rng_key, round_index, j)
            children.append(Candidate(rekey(cand.state, key), pos * cfg.branch_factor + j))
    advanced = gen.advance([c.state for c in children], cfg.block_steps)
    for c, st in zip(children, advanced):
        c.state = st
    return children


def _score_candidates(gen, scorer, children, root, round_index, algorithm, pass_index, success, dropped):
    """Roll every unfinished candidate out to t = 1 and score the clean sample."""
    unfinished = [c for c in children if c.state.step < gen.steps]
    rollout_starts = [rekey(c.state, root + (TAG_ROLLOUT, round_index, c.cand_id)) for c in unfinished]
    finals = dict(zip((c.cand_id for c in unfinished), gen.advance(rollout_starts, gen.steps))) if unfinished else {}
    for c in children:
        final_state = finals.get(c.cand_id, c.state)
        kind = "rollout" if c.cand_id in finals else "final"
        info = {"algorithm": algorithm, "round": round_index, "candidate": c.cand_id, "kind": kind, "lineage": c.state.rng_key}
        ((coords, labels, sc),) = score_states(gen, scorer, [final_state], [info])
        c.scored = sc
        c.reward = float(sc.reward)
        if not math.isfinite(c.reward):
            dropped.append((round_index, c.cand_id))
            log.warning("%s round %d: candidate %d has non-finite reward; dropped", algorithm, round_index, c.cand_id)
            continue
        if sc.passed:
            success.add(make_record(coords, labels, sc, algorithm, pass_index, round_index, c.cand_id, kind))


def top_n(candidates, n: int) -> list:
    """Highest reward first; ties go to the lower candidate id. Non-finite rewards are excluded."""
    ok = [c for c in candidates if math.isfinite(c.reward)]
    return sorted(ok, key=lambda c: (-c.reward, c.cand_id))[:n]


def fk_weights(rewards, beta: float) -> np.ndarray:
    """``exp(beta R_i) / sum_j exp(beta R_j)`` with the maximum subtracted; non-finite rewards get weight 0."""
    r = np.asarray(rewards, dtype=float)
    ok = np.isfinite(r)
    if not ok.any():
        raise SteeringCollapseError("all candidate rewards are non-finite")
    logits = np.where(ok, beta * np.where(ok, r, 0.0), -np.inf)
    logits = logits - logits[ok].max()
    w = np.exp(logits)
    return w / w.sum()


def fk_resample(rewards, beta: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` draws with replacement from :func:`fk_weights`."""
    w = fk_weights(rewards, beta)
    return rng.choice(len(w), size=n, replace=True, p=w)


def _population_search(gen, scorer, cfg: SearchConfig, seed, pass_index, algorithm, select):
    root = _root(seed, pass_index)
    start = gen.counter.calls
    beam = [Candidate(gen.init(root + (TAG_TRAJ, i)), i) for i in range(cfg.beam_width)]
    success = SuccessSet()
    history, dropped, rounds = [], [], []
    r = 0
    while beam and beam[0].state.step < gen.steps:
        children = _branch(gen, beam, cfg, r)
        _score_candidates(gen, scorer, children, root, r, algorithm, pass_index, success, dropped)
        rounds.append([(c.cand_id, c.reward) for c in children])
        beam = select(children, r, root)
        history.append([c.cand_id for c in beam])
        r += 1
    return SearchResult(
        algorithm, success, beam, gen.counter.calls - start, rounds=r, beam_history=history, dropped=dropped,
        extra={"candidates": rounds},
    )


def beam_search(gen, scorer, cfg: SearchConfig, seed: int = 0, pass_index: int = 0) -> SearchResult:
    """Keep the top ``N`` of ``N L`` branched candidates, ranked by rollout reward."""
    return _population_search(gen, scorer, cfg, seed, pass_index, "beam", lambda ch, r, root: top_n(ch, cfg.beam_width))


def fk_steering(gen, scorer, cfg: SearchConfig, seed: int = 0, pass_index: int = 0) -> SearchResult:
    """Resample ``N`` of the ``N L`` candidates with replacement, probabilities ``softmax(beta R)``."""

    def select(children, r, root):
        picks = fk_resample([c.reward for c in children], cfg.inverse_temperature, cfg.beam_width, stream(root + (TAG_RESAMPLE, r)))
        out = []
        for pos, k in enumerate(picks):
            src = children[int(k)]
            st = rekey(src.state, tuple(src.state.rng_key) + (TAG_RESAMPLE, r, pos))
            out.append(Candidate(st, src.cand_id, src.reward, src.scored))
        return out

    return _population_search(gen, scorer, cfg, seed, pass_index, "fks", select)


def population_evaluations(cfg: SearchConfig, steps: int) -> int:
    """Forward calls of one beam or FKS pass: ``N L sum_r (S - r K)`` over rounds."""
    total, r = 0, 0
    while r * cfg.block_steps < steps:
        total += cfg.beam_width * cfg.branch_factor * (steps - r * cfg.block_steps)
        r += 1
    return total


# ----------------------------------------------------------------------------
# MCTS


@dataclass(eq=False)
class SearchNode:
    state: object
    parent: Optional["SearchNode"] = None
    visits: int = 0
    cumulative_reward: float = 0.0
    children: list = field(default_factory=list)
    order: int = 0
    decisions: int = 0
    forced: int = 0

    @property
    def mean_reward(self) -> float:
        return self.cumulative_reward / self.visits if self.visits else float("-inf")

    def walk(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


def ucb_score(child: SearchNode, parent: SearchNode, c: float) -> float:
    """``R / V + C sqrt(ln V_parent / V)``."""
    if child.visits < 1 or parent.visits < 1:
        raise ValueError("UCB needs visited child and parent nodes")
    return child.cumulative_reward / child.visits + c * math.sqrt(math.log(parent.visits) / child.visits)


def mcts_search(gen, scorer, cfg: SearchConfig, seed: int = 0, pass_index: int = 0) -> SearchResult:
    """Stochastic-expansion MCTS.

    Each simulation descends from the committed node. At every node it
    expands a fresh child (one block of denoising) with probability epsilon,
    or unconditionally when the node is childless or its children would be
    fully denoised; otherwise it follows the max-UCB child. The terminal
    sample is scored and its reward backed up to the tree root. After
    ``N_sim`` simulations the committed node moves to its child with the
    highest mean reward.
    """
    root_key = _root(seed, pass_index)
    start = gen.counter.calls
    root = SearchNode(gen.init(root_key + (TAG_TRAJ, 0)))
    committed = root
    success = SuccessSet()
    created = 1
    sim_index = 0
    dropped = []
    evaluated = 0
    commits = 0
    while committed.state.step < gen.steps:
        for _ in range(cfg.mcts_simulations):
            rng = stream(root_key + (TAG_MCTS, sim_index))
            node = committed
            path = [node]
            while node.state.step < gen.steps:
                node.decisions += 1
                forced = not node.children or node.state.step + cfg.block_steps >= gen.steps
                if forced or rng.random() < cfg.mcts_epsilon:
                    node.forced += int(forced)
                    key = tuple(node.state.rng_key) + (TAG_MCTS, len(node.children))
                    (st,) = gen.advance([rekey(node.state, key)], cfg.block_steps)
                    child = SearchNode(st, parent=node, order=created)
                    created += 1
                    node.children.append(child)
                    node = child
                else:
                    # children were all visited when created, so UCB is defined
                    node = max(node.children, key=lambda ch: (ucb_score(ch, node, cfg.mcts_c), -ch.order))
                path.append(node)
            info = {"algorithm": "mcts", "round": commits, "candidate": sim_index, "kind": "final"}
            ((coords, labels, sc),) = score_states(gen, scorer, [node.state], [info])
            evaluated += 1
            reward = float(sc.reward)
            if not math.isfinite(reward):
                dropped.append((commits, sim_index))
                reward = None
            elif sc.passed:
                success.add(make_record(coords, labels, sc, "mcts", pass_index, commits, sim_index, "final"))
            anc = path[0].parent
            chain = path + []
            while anc is not None:
                chain.append(anc)
                anc = anc.parent
            for n in chain:
                n.visits += 1
                if reward is not None:
                    n.cumulative_reward += reward
            sim_index += 1
        committed = max(committed.children, key=lambda ch: (ch.mean_reward, -ch.order))
        commits += 1
    final_coords, final_labels = gen.decode(committed.state)
    return SearchResult(
        "mcts", success, [committed], gen.counter.calls - start, rounds=commits, dropped=dropped,
        extra={"tree": root, "simulations": sim_index, "final_decoded": (final_coords, final_labels)},
    )


def children_per_visit(root: SearchNode, steps: int, block: int) -> tuple:
    """``(sum of optional expansions, sum of optional decisions)`` over the tree.

    A node's first decision always expands (it is childless), and nodes whose
    children would be fully denoised always expand, so only the remaining
    decisions carry the epsilon coin.
    """
    num = den = 0
    for node in root.walk():
        if node.state.step >= steps or node.state.step + block >= steps or node.decisions < 1:
            continue
        num += len(node.children) - node.forced
        den += node.decisions - node.forced
    return num, den


# ----------------------------------------------------------------------------
# mutation refinement


@dataclass
class RefineResult:
    labels: np.ndarray
    reward: float
    trace: list
    mutations_per_iteration: int
    accepted: int


def mutation_count(n: int) -> int:
    return max(1, math.ceil(0.01 * n)) if n > 0 else 0


def mutation_refine(coords, labels, reward_fn: Callable, iterations: int, seed: int = 0, n_labels: int = 4) -> RefineResult:
    """Improve-only random label mutation.

    Each iteration picks ``ceil(0.01 N)`` distinct positions uniformly and
    gives each a different label drawn uniformly; the batch is kept only if
    ``reward_fn(coords, labels)`` strictly improves. ``seed`` is an integer
    or a stream key tuple.
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    labels = np.array(labels, dtype=int, copy=True)
    n = len(labels)
    m = mutation_count(n)
    best = float(reward_fn(coords, labels))
    trace = [best]
    key = (int(seed),) if np.isscalar(seed) else tuple(int(k) for k in seed)
    rng = stream(key + (TAG_REFINE,))
    accepted = 0
    for _ in range(iterations):
        pos = rng.choice(n, size=m, replace=False)
        proposal = labels.copy()
        shift = rng.integers(1, n_labels, size=m)
        proposal[pos] = (proposal[pos] + shift) % n_labels
        r = float(reward_fn(coords, proposal))
        if r > best:
            labels, best = proposal, r
            accepted += 1
        trace.append(best)
    return RefineResult(labels, best, trace, m, accepted)


# ----------------------------------------------------------------------------
# compute budget


def pass_cost(algorithm: str, cfg: SearchConfig, steps: int) -> Optional[int]:
    """Forward calls of one pass when known in closed form (MCTS is random)."""
    if algorithm == "bon":
        return cfg.n_samples * steps
    if algorithm in ("beam", "fks"):
        return population_evaluations(cfg, steps)
    return None


def run_with_budget(run_pass: Callable, cost: Optional[int], budget: int, max_seconds: Optional[float] = None):
    """Repeat ``run_pass(pass_index)`` while the next full pass fits in ``budget`` forward calls.

    Returns ``(list of SearchResult, truncated)``; ``truncated`` is true when
    budget remained but a further pass would not fit. When ``cost`` is unknown
    the largest pass seen so far stands in for it, so the total can overshoot
    only through the first pass or one costlier than all before it. With
    ``max_seconds``, no new pass starts once that much wall-clock time has
    elapsed, which makes the pass count machine-dependent.
    """
    if cost == 0:
        return [run_pass(0)], False
    results, used, p = [], 0, 0
    start = time.monotonic()
    while True:
        if cost is not None and used + cost > budget:
            break
        if cost is None and (used >= budget or (results and used + max(r.evaluations for r in results) > budget)):
            break
        if max_seconds is not None and results and time.monotonic() - start >= max_seconds:
            break
        res = run_pass(p)
        results.append(res)
        used += res.evaluations
        p += 1
    return results, used < budget
