"""Reverse sampling: the interleaved denoising sweep, conditional generation and ReDeNoise.

A denoiser is any object with

``flavor``
    ``"full"``: ``discrete_query`` returns a probability vector over the
    vocabulary for the token at ``i`` before step ``t`` (either conditioned on
    all of ``s^(t+1)`` or only on the other positions; both reverse the chain
    exactly).  ``"binary"``: it returns, for every token ``x``, the
    probability that ``x`` at position ``i`` was freshly drawn by the forward
    step given the other positions and ``s_i = x``.
``discrete_query(batch, i, t) -> (N, V) array``
``continuous_query(batch, i, t, k) -> (N, d) array``
    prediction of the cumulative noise in ``s^(t, k+1)``, the state passed in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .rng import as_keyed
from .schedule import DiscreteSchedule, ScheduleError, ScheduleTable
from .state import ConditioningError, LayoutError, Sequence, SequenceBatch

CLAMP_DELTA = 1e-7


class SamplerError(RuntimeError):
    pass


class Denoiser(Protocol):
    flavor: str

    def discrete_query(self, batch: SequenceBatch, i: int, t: int) -> np.ndarray: ...

    def continuous_query(self, batch: SequenceBatch, i: int, t: int, k: int) -> np.ndarray: ...


@dataclass(frozen=True)
class SamplerConfig:
    top_p: float = 1.0
    redenoise_rounds: int = 0
    redenoise_iterations: int = 0
    last_step_zero_noise: bool = True
    # "score" divides the noise prediction by sqrt(1 - alpha_bar); "plain" uses it as is.
    continuous_update: str = "score"

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.redenoise_rounds < 0 or self.redenoise_iterations < 0:
            raise ValueError("ReDeNoise rounds and iterations must be non-negative")
        if self.continuous_update not in ("score", "plain"):
            raise ValueError(f"unknown continuous update {self.continuous_update!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SamplerDiagnostics:
    """Counters collected during sampling; ``write`` emits them as JSON lines."""

    clamp_events: int = 0
    aborted_rows: set = field(default_factory=set)
    records: list = field(default_factory=list)

    def log(self, **rec):
        self.records.append(rec)

    def write(self, path):
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.write(json.dumps({"event": "summary", "clamp_events": self.clamp_events,
                                "aborted": sorted(int(r) for r in self.aborted_rows)}, sort_keys=True) + "\n")


def binary_to_conditional(y, sched: DiscreteSchedule, rnd: int, diag: SamplerDiagnostics | None = None) -> np.ndarray:
    """Turn fresh-draw probabilities ``y_x`` into a conditional over the vocabulary.

    ``p(x)`` is proportional to ``(Pi(x) / Pi(phi)) * (1/y_x - 1)``.  Values of
    ``y`` at 0 or 1 are clamped to ``[1e-7, 1 - 1e-7]``; each clamped entry is
    counted in ``diag``.  Works on a single vector or on rows of a matrix.
    """
    y = np.asarray(y, dtype=np.float64)
    phi = sched.phi(rnd)
    if phi <= 0.0:
        raise ScheduleError("conversion needs a positive no-flip probability")
    if not np.all(np.isfinite(y)):
        raise SamplerError("non-finite binary denoiser output")
    clipped = np.clip(y, CLAMP_DELTA, 1.0 - CLAMP_DELTA)
    if diag is not None:
        diag.clamp_events += int(np.count_nonzero(clipped != y))
    w = (sched.token_prob(rnd) / phi) * (1.0 / clipped - 1.0)
    return w / w.sum(axis=-1, keepdims=True)


def top_p_filter(probs, p: float) -> np.ndarray:
    """Keep the smallest high-probability prefix with mass at least ``p`` and renormalise.

    Tokens are ranked by probability, ties by ascending id.  ``p = 1`` returns
    the input (renormalised).
    """
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    P = np.atleast_2d(probs)
    P = P / P.sum(axis=1, keepdims=True)
    if p >= 1.0:
        out = P
    else:
        order = np.argsort(-P, axis=1, kind="stable")
        sorted_p = np.take_along_axis(P, order, axis=1)
        before = np.cumsum(sorted_p, axis=1) - sorted_p
        keep_sorted = before < p
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=1)
        out = np.where(keep, P, 0.0)
        out /= out.sum(axis=1, keepdims=True)
    return out[0] if single else out


def _categorical(P: np.ndarray, u: np.ndarray) -> np.ndarray:
    c = np.cumsum(P, axis=1)
    c[:, -1] = np.inf
    return (u[:, None] >= c).sum(axis=1)


def discrete_conditional(den, batch: SequenceBatch, table: ScheduleTable, t: int, cfg: SamplerConfig, diag=None) -> np.ndarray:
    """The (top-p filtered) conditional the reverse step at ``t`` samples from."""
    i = table.position(t)
    out = np.asarray(den.discrete_query(batch, i, t), dtype=np.float64)
    if out.shape != (len(batch), table.layout.vocab_size):
        raise SamplerError(f"denoiser returned shape {out.shape}")
    if den.flavor == "binary":
        P = binary_to_conditional(out, table.discrete, table.round_of(t), diag)
    elif den.flavor == "full":
        if not np.all(np.isfinite(out)) or np.any(out < 0) or np.any(out.sum(axis=1) <= 0):
            raise SamplerError("denoiser returned an invalid distribution")
        P = out / out.sum(axis=1, keepdims=True)
    else:
        raise SamplerError(f"unknown denoiser flavor {den.flavor!r}")
    return top_p_filter(P, cfg.top_p)


def reverse_step_discrete(den, seq, table: ScheduleTable, t: int, rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig(), diag=None):
    """Resample the token noised at ``t`` from the denoiser's conditional."""
    single = isinstance(seq, Sequence)
    batch = SequenceBatch.from_sequences([seq]) if single else seq
    i = table.position(t)
    if i >= table.layout.n_discrete:
        raise LayoutError(f"step {t} denoises continuous position {i}")
    free = ~batch.cond_tokens[:, i]
    if not free.any():
        return seq
    P = discrete_conditional(den, batch, table, t, cfg, diag)
    draw = _categorical(P, rng.random(len(batch)))
    out = batch.copy()
    out.tokens[free, i] = draw[free]
    return out[0] if single else out


def reverse_step_continuous(den, seq, table: ScheduleTable, t: int, keyed, cfg: SamplerConfig = SamplerConfig(), diag=None):
    """All inner steps ``k = K-1 .. 0`` for the element noised at ``t``.

    Each step maps ``x`` (at signal level ``a``, produced by the forward step
    with ``beta``) to ``(x - beta / sqrt(1 - a) * eps_hat) / sqrt(1 - beta) +
    sqrt(beta) * noise``.  Noise draws are keyed by ``("rev", t, k)``.
    """
    single = isinstance(seq, Sequence)
    batch = SequenceBatch.from_sequences([seq]) if single else seq
    keyed = as_keyed(keyed)
    lay = table.layout
    i = table.position(t)
    if i < lay.n_discrete:
        raise LayoutError(f"step {t} denoises discrete position {i}")
    j = i - lay.n_discrete
    cond = batch.cond_vectors[j]
    if cond.all():
        return seq
    out = batch.copy()
    alive = np.ones(len(batch), dtype=bool)
    if diag is not None and diag.aborted_rows:
        alive[list(diag.aborted_rows)] = False
    sig = table.continuous.signal
    final_visit = table.round_of(t) == 0
    for k in range(table.inner_steps(t) - 1, -1, -1):
        m = table.beta_index(t, k)
        beta, a = table.continuous.betas[m], sig[m + 1]
        x = out.vectors[j]
        eps = np.asarray(den.continuous_query(out, i, t, k), dtype=np.float64)
        if eps.shape != x.shape:
            raise SamplerError(f"denoiser returned shape {eps.shape}, expected {x.shape}")
        coef = beta / np.sqrt(1.0 - a) if cfg.continuous_update == "score" else beta
        new = (x - coef * eps) / np.sqrt(1.0 - beta)
        if not (cfg.last_step_zero_noise and final_visit and k == 0):
            new = new + np.sqrt(beta) * keyed.generator("rev", t, k).standard_normal(x.shape)
        bad = ~np.all(np.isfinite(new), axis=1) & alive
        if bad.any():
            if diag is None:
                raise SamplerError(f"non-finite value at t={t}, k={k}")
            for r in np.nonzero(bad)[0]:
                diag.aborted_rows.add(int(r))
                diag.log(event="abort", row=int(r), t=int(t), k=int(k))
            alive &= ~bad
        new = np.where(alive[:, None], new, x)
        out.vectors[j] = np.where(cond, x, new)
    return out[0] if single else out


def stationary_batch(template: SequenceBatch, table: ScheduleTable, gen: np.random.Generator) -> SequenceBatch:
    """Fill every unconditioned element with a draw from the stationary law."""
    lay = table.layout
    n = len(template)
    out = template.copy()
    draws = gen.integers(lay.vocab_size, size=(n, lay.n_discrete))
    out.tokens = np.where(template.cond_tokens, template.tokens, draws)
    for j, d in enumerate(lay.dims):
        out.vectors[j] = np.where(template.cond_vectors[j], template.vectors[j], gen.standard_normal((n, d)))
    return out


def empty_template(layout, n: int) -> SequenceBatch:
    return SequenceBatch(layout, np.zeros((n, layout.n_discrete), dtype=np.int64),
                         [np.zeros((n, d)) for d in layout.dims])


def reverse_sweep(den, batch: SequenceBatch, table: ScheduleTable, t_start: int, rng, cfg: SamplerConfig, diag=None) -> SequenceBatch:
    """Denoise from ``s^(t_start)`` down to ``s^(0)``."""
    keyed = as_keyed(rng)
    out = batch
    for t in range(t_start - 1, -1, -1):
        if table.is_discrete_step(t):
            out = reverse_step_discrete(den, out, table, t, keyed.generator("rev", t), cfg, diag)
        else:
            out = reverse_step_continuous(den, out, table, t, keyed, cfg, diag)
    return out


def generate(den, table: ScheduleTable, cfg: SamplerConfig = SamplerConfig(), n: int | None = None,
             condition=None, rng=0, initial: SequenceBatch | None = None, diag=None) -> SequenceBatch:
    """Draw samples by the full reverse sweep ``t = T-1 .. 0``.

    ``condition`` is a :class:`Sequence` (repeated ``n`` times) or a batch
    whose conditioned entries are kept bit-identical.  ``initial`` replaces
    the stationary start with a given ``s^(T)`` batch.  ReDeNoise is applied
    afterwards when the config asks for it.
    """
    keyed = as_keyed(rng)
    if initial is not None:
        start = initial
    else:
        if condition is None:
            if n is None:
                raise ValueError("need n or a condition")
            template = empty_template(table.layout, n)
        elif isinstance(condition, Sequence):
            template = SequenceBatch.repeat(condition, 1 if n is None else n)
        else:
            template = condition
        if template.layout != table.layout:
            raise LayoutError("condition layout does not match the schedule")
        start = stationary_batch(template, table, keyed.generator("init"))
    out = reverse_sweep(den, start, table, table.T, keyed, cfg, diag)
    if cfg.redenoise_rounds and cfg.redenoise_iterations:
        out = redenoise(out, den, table, cfg, keyed.child("redenoise"), diag=diag)
    return out


def redenoise(sample: SequenceBatch, den, table: ScheduleTable, cfg: SamplerConfig, rng, iterations: int | None = None,
              diag=None, callback=None) -> SequenceBatch:
    """Re-noise a finished sample through the first ``r'`` rounds and denoise it again.

    Repeated ``iterations`` times (default ``cfg.redenoise_iterations``).
    ``callback(it, batch)`` is called after every iteration.
    """
    from .forward import _direct

    keyed = as_keyed(rng)
    rounds = cfg.redenoise_rounds
    iterations = cfg.redenoise_iterations if iterations is None else iterations
    if rounds == 0 or iterations == 0:
        return sample
    if rounds > table.order.rounds:
        raise ScheduleError(f"cannot re-noise {rounds} rounds of a {table.order.rounds}-round schedule")
    t_mid = rounds * table.layout.length
    n = len(sample)
    out = sample
    for it in range(iterations):
        kk = keyed.child("iter", it)
        noisy, _ = _direct(out, table, np.full(n, t_mid), np.zeros(n, dtype=np.int64), kk.generator("fwd"))
        out = reverse_sweep(den, noisy, table, t_mid, kk, cfg, diag)
        if callback is not None:
            callback(it, out)
    return out


def check_condition_kept(condition: SequenceBatch, out: SequenceBatch) -> None:
    """Raise if any conditioned entry changed."""
    if not np.array_equal(out.tokens[condition.cond_tokens], condition.tokens[condition.cond_tokens]):
        raise ConditioningError("a conditioned token changed")
    for j, m in enumerate(condition.cond_vectors):
        if not np.array_equal(out.vectors[j][m], condition.vectors[j][m]):
            raise ConditioningError("a conditioned scalar changed")
