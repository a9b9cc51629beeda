"""Noise orders and noise schedules for the interleaved forward process.

Time conventions used across the package:

* sequence time ``t`` runs over ``0 .. T-1`` with ``T = rounds * L``; step
  ``t`` noises position ``i_t = perm[t % L]`` and belongs to round ``t // L``;
* a continuous position visited in round ``rho`` receives ``K[rho]`` inner
  Gaussian steps ``k = 0 .. K[rho]-1``;
* the betas of one continuous position form a single table indexed by the
  running count of Gaussian steps that position has received, so inner step
  ``k`` of a visit uses ``betas[m]`` with ``m = sum(K[:rho]) + k``.

``signal_level(m)`` is the product of ``(1 - beta)`` over the first ``m``
steps: the coefficient of ``s0`` in an element that has been noised ``m``
times.  ``cumulative_alpha(j)`` is the inclusive product up to index ``j``, so
``signal_level(m) == cumulative_alpha(m - 1)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence as Seq

import numpy as np

from .state import ElementLayout, LayoutError


class ScheduleError(ValueError):
    pass


def beta_cosine(a: float, b: float, K_total: int, j) -> float:
    """``b + (a - b) * (1 + cos(pi * j / K)) / 2``: rises from ``a`` at 0 to ``b`` at ``K``."""
    _check_ab(a, b)
    j = np.asarray(j, dtype=np.float64)
    if K_total < 1 or np.any(j < 0) or np.any(j > K_total):
        raise ScheduleError(f"index outside 0..{K_total}")
    out = b + 0.5 * (a - b) * (1.0 + np.cos(j / K_total * math.pi))
    return float(out) if out.ndim == 0 else out


def beta_linear(a: float, b: float, K_total: int, j) -> float:
    """``a + (b - a) * j / K``."""
    _check_ab(a, b)
    j = np.asarray(j, dtype=np.float64)
    if K_total < 1 or np.any(j < 0) or np.any(j > K_total):
        raise ScheduleError(f"index outside 0..{K_total}")
    out = a + (b - a) * (j / K_total)
    return float(out) if out.ndim == 0 else out


def _check_ab(a, b):
    if not (0.0 < a <= b < 1.0):
        raise ScheduleError(f"need 0 < a <= b < 1, got a={a}, b={b}")


@dataclass(frozen=True)
class NoiseOrder:
    """A fixed permutation of the ``L`` positions repeated for ``rounds`` rounds."""

    perm: tuple[int, ...]
    rounds: int

    def __post_init__(self):
        perm = tuple(int(p) for p in self.perm)
        object.__setattr__(self, "perm", perm)
        if sorted(perm) != list(range(len(perm))):
            raise ScheduleError(f"noise order {perm} is not a permutation of 0..{len(perm) - 1}")
        if self.rounds < 2:
            raise ScheduleError("the forward process needs more than one round")

    @classmethod
    def round_robin(cls, length: int, rounds: int) -> "NoiseOrder":
        return cls(tuple(range(length)), rounds)

    @property
    def length(self) -> int:
        return len(self.perm)

    @property
    def T(self) -> int:
        return self.rounds * self.length

    def position(self, t: int) -> int:
        self._check(t)
        return self.perm[t % self.length]

    def round_of(self, t: int) -> int:
        self._check(t)
        return t // self.length

    def _check(self, t):
        if not 0 <= t < self.T:
            raise ScheduleError(f"time {t} outside 0..{self.T - 1}")


@dataclass(frozen=True)
class DiscreteSchedule:
    """Per-round probability of the no-flip symbol; the flip law is uniform over the vocabulary."""

    phi_probs: tuple[float, ...]
    vocab_size: int

    def __post_init__(self):
        object.__setattr__(self, "phi_probs", tuple(float(p) for p in self.phi_probs))
        if not self.phi_probs:
            raise ScheduleError("need at least one round")
        for p in self.phi_probs:
            if not 0.0 <= p <= 1.0:
                raise ScheduleError(f"phi probability {p} outside [0, 1]")

    @property
    def mixes(self) -> bool:
        """Whether every round can flip (keeps convergence to the uniform law)."""
        return max(self.phi_probs) < 1.0

    def phi(self, rnd: int) -> float:
        return self.phi_probs[rnd]

    def token_prob(self, rnd: int) -> float:
        """Probability of drawing any particular vocabulary token."""
        return (1.0 - self.phi_probs[rnd]) / self.vocab_size

    def flip_law(self) -> np.ndarray:
        return np.full(self.vocab_size, 1.0 / self.vocab_size)


def cumulative_flip_prob(sched: DiscreteSchedule, visits: int) -> float:
    """Probability that at least one of the first ``visits`` visits resampled the token.

    Visit ``v`` happens in round ``v``; the token survives only if every visit
    drew the no-flip symbol.
    """
    if visits < 0:
        raise ScheduleError("visits must be non-negative")
    keep = 1.0
    for p in sched.phi_probs[:visits]:
        keep *= p
    return 1.0 - keep


@dataclass(frozen=True)
class BetaSchedule:
    """Named beta schedule: ``cosine(a, b)``, ``linear(a, b)`` or an explicit table."""

    kind: str = "cosine"
    a: float = 1e-4
    b: float = 0.03
    table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("cosine", "linear", "table"):
            raise ScheduleError(f"unknown beta schedule {self.kind!r}")
        if self.kind == "table":
            if self.table is None:
                raise ScheduleError("explicit beta schedule needs a table")
            object.__setattr__(self, "table", tuple(float(x) for x in self.table))
            if any(not 0.0 <= x <= 1.0 for x in self.table):
                raise ScheduleError("beta values must lie in [0, 1]")
        else:
            _check_ab(self.a, self.b)

    def betas(self, K_total: int) -> np.ndarray:
        if self.kind == "table":
            if len(self.table) != K_total:
                raise ScheduleError(f"beta table has {len(self.table)} entries, need {K_total}")
            return np.array(self.table, dtype=np.float64)
        j = np.arange(K_total, dtype=np.float64)
        fn = beta_cosine if self.kind == "cosine" else beta_linear
        return np.atleast_1d(fn(self.a, self.b, K_total, j))


@dataclass(frozen=True)
class ContinuousSchedule:
    steps_per_round: tuple[int, ...]
    beta: BetaSchedule = field(default_factory=BetaSchedule)

    def __post_init__(self):
        object.__setattr__(self, "steps_per_round", tuple(int(k) for k in self.steps_per_round))
        if any(k < 1 for k in self.steps_per_round):
            raise ScheduleError("every round needs at least one continuous step")

    @property
    def K_total(self) -> int:
        return sum(self.steps_per_round)

    @cached_property
    def betas(self) -> np.ndarray:
        b = self.beta.betas(self.K_total)
        b.setflags(write=False)
        return b

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        """Inclusive products ``prod_{j' <= j} (1 - beta_j')``."""
        a = np.cumprod(1.0 - self.betas)
        a.setflags(write=False)
        return a

    @cached_property
    def signal(self) -> np.ndarray:
        """``signal[m]`` = product over the first ``m`` steps; ``signal[0] == 1``."""
        s = np.concatenate([[1.0], self.alpha_bar])
        s.setflags(write=False)
        return s


def cumulative_alpha(sched: ContinuousSchedule, j: int) -> float:
    if not 0 <= j < sched.K_total:
        raise ScheduleError(f"index {j} outside 0..{sched.K_total - 1}")
    return float(sched.alpha_bar[j])


class ScheduleTable:
    """Everything the forward and reverse processes need, precomputed.

    ``visits_before[t, j]`` is the number of steps before ``t`` that visited
    ``j``; from it follow the flip probabilities of discrete positions and the
    Gaussian step counts of continuous positions.
    """

    def __init__(
        self,
        layout: ElementLayout,
        order: NoiseOrder,
        discrete: DiscreteSchedule,
        continuous: ContinuousSchedule | None = None,
    ):
        if order.length != layout.length:
            raise ScheduleError(f"noise order covers {order.length} positions, layout has {layout.length}")
        if len(discrete.phi_probs) != order.rounds:
            raise ScheduleError("discrete schedule needs one phi probability per round")
        if discrete.vocab_size != layout.vocab_size:
            raise ScheduleError("discrete schedule vocabulary does not match the layout")
        if layout.n_continuous:
            if continuous is None:
                raise ScheduleError("layout has continuous positions but no continuous schedule")
            if len(continuous.steps_per_round) != order.rounds:
                raise ScheduleError("continuous schedule needs one step count per round")
        self.layout = layout
        self.order = order
        self.discrete = discrete
        self.continuous = continuous

        L, T = layout.length, order.T
        self.positions = np.array([order.perm[t % L] for t in range(T)], dtype=np.int64)
        self.positions.setflags(write=False)
        visits = np.zeros((T + 1, L), dtype=np.int64)
        keep = np.ones((T + 1, L))
        steps = np.zeros((T + 1, L), dtype=np.int64)
        K = continuous.steps_per_round if continuous is not None else None
        for t in range(T):
            i, rnd = self.positions[t], t // L
            visits[t + 1] = visits[t]
            keep[t + 1] = keep[t]
            steps[t + 1] = steps[t]
            visits[t + 1, i] += 1
            if i < layout.n_discrete:
                keep[t + 1, i] *= discrete.phi(rnd)
            else:
                steps[t + 1, i] += K[rnd]
        self.visits_before = visits
        self.flip_prob_table = 1.0 - keep
        self.steps_before = steps
        for a in (visits, self.flip_prob_table, steps):
            a.setflags(write=False)

    @property
    def T(self) -> int:
        return self.order.T

    def position(self, t: int) -> int:
        self.order._check(t)
        return int(self.positions[t])

    def round_of(self, t: int) -> int:
        return self.order.round_of(t)

    def is_discrete_step(self, t: int) -> bool:
        return self.position(t) < self.layout.n_discrete

    def phi(self, t: int) -> float:
        return self.discrete.phi(self.round_of(t))

    def inner_steps(self, t: int) -> int:
        """``K`` for the continuous visit at time ``t``."""
        if self.continuous is None:
            raise ScheduleError("no continuous schedule")
        return self.continuous.steps_per_round[self.round_of(t)]

    def visit_count(self, j: int, t: int, k: int = 0) -> int:
        """Number of noising steps element ``j`` has received in state ``s^(t, k)``.

        Discrete: visits strictly before ``t``.  Continuous: Gaussian steps of
        earlier visits, plus ``k`` when ``j`` is the element being noised at
        ``t``.
        """
        self.layout.check_position(j)
        if not 0 <= t <= self.T:
            raise ScheduleError(f"time {t} outside 0..{self.T}")
        if j < self.layout.n_discrete:
            return int(self.visits_before[t, j])
        m = int(self.steps_before[t, j])
        if t < self.T and self.positions[t] == j:
            if not 0 <= k <= self.inner_steps(t):
                raise ScheduleError(f"element time {k} outside 0..{self.inner_steps(t)}")
            m += k
        elif k:
            raise ScheduleError("element time is only meaningful for the element being noised")
        return m

    def flip_prob(self, j: int, t: int) -> float:
        """Probability that discrete ``j`` has been resampled at least once by time ``t``."""
        if not self.layout.is_discrete(j):
            raise LayoutError(f"position {j} is continuous")
        return float(self.flip_prob_table[t, j])

    def signal_level(self, j: int, t: int, k: int = 0) -> float:
        return float(self.continuous.signal[self.visit_count(j, t, k)])

    def beta_index(self, t: int, k: int) -> int:
        """Index into the beta table of the inner step ``(t, k)`` (maps ``s^(t,k)`` to ``s^(t,k+1)``)."""
        i = self.position(t)
        if i < self.layout.n_discrete:
            raise LayoutError(f"step {t} is discrete")
        if not 0 <= k < self.inner_steps(t):
            raise ScheduleError(f"element time {k} outside 0..{self.inner_steps(t) - 1}")
        return int(self.steps_before[t, i]) + k

    def beta_at(self, t: int, k: int) -> float:
        return float(self.continuous.betas[self.beta_index(t, k)])

    def max_inner_steps(self) -> int:
        return max(self.continuous.steps_per_round) if self.continuous else 1

    def to_dict(self) -> dict:
        d = {
            "layout": self.layout.to_dict(),
            "noise_order": list(self.order.perm),
            "rounds": self.order.rounds,
            "phi_probs": list(self.discrete.phi_probs),
        }
        if self.continuous is not None:
            beta = self.continuous.beta
            d["steps_per_round"] = list(self.continuous.steps_per_round)
            d["beta"] = {"kind": beta.kind, "a": beta.a, "b": beta.b}
            if beta.table is not None:
                d["beta"]["table"] = list(beta.table)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_table(
    layout: ElementLayout,
    rounds: int,
    phi_probs: Seq[float],
    steps_per_round: Seq[int] | None = None,
    beta: BetaSchedule | None = None,
    noise_order: Seq[int] | str = "round_robin",
) -> ScheduleTable:
    """Convenience constructor used by the tasks and the command line."""
    if isinstance(noise_order, str):
        if noise_order != "round_robin":
            raise ScheduleError(f"unknown noise order {noise_order!r}")
        order = NoiseOrder.round_robin(layout.length, rounds)
    else:
        order = NoiseOrder(tuple(noise_order), rounds)
    continuous = None
    if layout.n_continuous:
        if steps_per_round is None:
            raise ScheduleError("layout has continuous positions but no steps_per_round")
        continuous = ContinuousSchedule(tuple(steps_per_round), beta or BetaSchedule())
    return ScheduleTable(layout, order, DiscreteSchedule(tuple(phi_probs), layout.vocab_size), continuous)


def default_table(layout: ElementLayout) -> ScheduleTable:
    """Four rounds, phi 0.5 each round, 200 Gaussian steps per round, cosine(1e-4, 0.03)."""
    return make_table(layout, 4, [0.5] * 4, [200] * 4, BetaSchedule("cosine", 1e-4, 0.03))
