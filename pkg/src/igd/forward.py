"""The interleaved forward (noising) process.

Single steps, a step-by-step walk, direct sampling of ``s^(t)`` / ``s^(t,k)``
from ``s^(0)``, and extraction of training examples.  All functions accept a
:class:`~igd.state.SequenceBatch`; the single-step functions also accept a
:class:`~igd.state.Sequence` and return the same type.

Conditioned elements are never modified.  Conditioned scalars inside a
vector keep their value and get a zero entry in the stored cumulative noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import KeyedRNG, as_keyed
from .schedule import ScheduleError, ScheduleTable
from .state import LayoutError, Sequence, SequenceBatch


def _as_batch(x):
    if isinstance(x, Sequence):
        return SequenceBatch.from_sequences([x]), True
    return x, False


def _unwrap(batch: SequenceBatch, single: bool):
    return batch[0] if single else batch


def forward_step_discrete(seq, table: ScheduleTable, t: int, rng: np.random.Generator):
    """One discrete noising step at time ``t``.

    Returns ``(new_state, z)`` where ``z`` holds the drawn token per row, or
    the layout's phi id where the no-flip symbol was drawn.
    """
    batch, single = _as_batch(seq)
    lay = table.layout
    i = table.position(t)
    if i >= lay.n_discrete:
        raise LayoutError(f"step {t} noises continuous position {i}")
    n = len(batch)
    phi = table.phi(t)
    no_flip = rng.random(n) < phi
    draws = rng.integers(lay.vocab_size, size=n)
    z = np.where(no_flip, lay.phi_token_id, draws)
    out = batch.copy()
    change = ~no_flip & ~batch.cond_tokens[:, i]
    out.tokens[change, i] = draws[change]
    if single:
        return out[0], int(z[0])
    return out, z


def forward_step_continuous(seq, table: ScheduleTable, t: int, k: int, rng: np.random.Generator):
    """One Gaussian step ``s^(t,k) -> s^(t,k+1)`` on the element noised at ``t``."""
    batch, single = _as_batch(seq)
    lay = table.layout
    i = table.position(t)
    if i < lay.n_discrete:
        raise LayoutError(f"step {t} noises discrete position {i}")
    j = i - lay.n_discrete
    beta = table.beta_at(t, k)
    out = batch.copy()
    x = out.vectors[j]
    noise = rng.standard_normal(x.shape)
    new = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * noise
    out.vectors[j] = np.where(batch.cond_vectors[j], x, new)
    return _unwrap(out, single)


def forward_walk(batch: SequenceBatch, table: ScheduleTable, t_start: int, t_stop: int, rng) -> SequenceBatch:
    """Apply every forward step ``t_start .. t_stop-1`` in order.

    Draws are keyed by ``("fwd", t)`` for discrete steps and
    ``("fwd", t, k)`` for Gaussian steps.
    """
    rng = as_keyed(rng)
    if not 0 <= t_start <= t_stop <= table.T:
        raise ScheduleError(f"bad time range {t_start}..{t_stop}")
    out = batch
    for t in range(t_start, t_stop):
        if table.is_discrete_step(t):
            out, _ = forward_step_discrete(out, table, t, rng.generator("fwd", t))
        else:
            for k in range(table.inner_steps(t)):
                out = forward_step_continuous(out, table, t, k, rng.generator("fwd", t, k))
    return out


@dataclass
class ForwardAux:
    """Side information of a direct forward sample.

    ``flipped[n, i]``: discrete ``i`` was resampled at least once.
    ``eps[j]``: cumulative noise of continuous ``j`` (zero where conditioned).
    ``signal[j]``: per-row signal level used for continuous ``j``.
    """

    flipped: np.ndarray
    eps: list[np.ndarray]
    signal: list[np.ndarray]


def _direct(s0: SequenceBatch, table: ScheduleTable, t_rows: np.ndarray, extra: np.ndarray, gen: np.random.Generator):
    """Direct sample with per-row times; ``extra`` Gaussian steps go to the element noised at ``t``."""
    lay = table.layout
    n = len(s0)
    out = s0.copy()
    L1 = lay.n_discrete
    if L1:
        p = table.flip_prob_table[t_rows, :L1]
        flipped = gen.random((n, L1)) < p
        flipped &= ~s0.cond_tokens
        draws = gen.integers(lay.vocab_size, size=(n, L1))
        out.tokens = np.where(flipped, draws, s0.tokens)
    else:
        flipped = np.zeros((n, 0), dtype=bool)
    eps, signal = [], []
    pos_at_t = table.positions[np.minimum(t_rows, table.T - 1)]
    for j, d in enumerate(lay.dims):
        i = L1 + j
        m = table.steps_before[t_rows, i] + np.where((pos_at_t == i) & (t_rows < table.T), extra, 0)
        a = table.continuous.signal[m]
        e = gen.standard_normal((n, d))
        cond = s0.cond_vectors[j]
        e = np.where(cond, 0.0, e)
        out.vectors[j] = np.where(cond, s0.vectors[j], np.sqrt(a)[:, None] * s0.vectors[j] + np.sqrt(1.0 - a)[:, None] * e)
        eps.append(e)
        signal.append(a)
    return out, ForwardAux(flipped, eps, signal)


def sample_state_at(s0, table: ScheduleTable, t: int, k: int = 0, rng: np.random.Generator = None):
    """Draw ``s^(t)`` (or ``s^(t,k)`` when ``t`` noises a continuous element) directly from ``s^(0)``.

    Returns ``(state, aux)``; see :class:`ForwardAux`.
    """
    batch, single = _as_batch(s0)
    if not 0 <= t <= table.T:
        raise ScheduleError(f"time {t} outside 0..{table.T}")
    if k:
        if t == table.T or table.is_discrete_step(t):
            raise ScheduleError("element time is only meaningful for a continuous step")
        if not 0 <= k <= table.inner_steps(t):
            raise ScheduleError(f"element time {k} outside 0..{table.inner_steps(t)}")
    rng = rng if rng is not None else np.random.default_rng()
    n = len(batch)
    out, aux = _direct(batch, table, np.full(n, t), np.full(n, k), rng)
    return _unwrap(out, single), aux


@dataclass
class TrainingBatch:
    """Inputs and targets for one denoiser update.

    Row ``n`` denoises position ``positions[n]`` at time ``t[n]`` (and element
    time ``k[n]`` for continuous rows).  ``inputs`` holds ``s^(t+1)`` for
    discrete rows and ``s^(t,k+1)`` for continuous rows.
    """

    t: np.ndarray
    k: np.ndarray
    positions: np.ndarray
    is_discrete: np.ndarray
    inputs: SequenceBatch
    target_token: np.ndarray
    z_was_phi: np.ndarray
    eps: list[np.ndarray]
    signal: list[np.ndarray]
    active: np.ndarray

    def __len__(self):
        return len(self.t)


def make_training_batch(s0: SequenceBatch, table: ScheduleTable, t: np.ndarray, gen: np.random.Generator, k=None) -> TrainingBatch:
    """Vectorised version of :func:`make_training_example` with one time per row.

    Rows whose element is conditioned get ``active = False`` and carry no loss.
    """
    lay = table.layout
    t = np.asarray(t, dtype=np.int64)
    n = len(s0)
    if t.shape != (n,) or np.any(t < 0) or np.any(t >= table.T):
        raise ScheduleError("need one time in 0..T-1 per row")
    pos = table.positions[t]
    disc = pos < lay.n_discrete
    if k is None:
        if lay.n_continuous:
            K = np.array(table.continuous.steps_per_round)[t // lay.length]
            k = np.where(disc, 0, np.floor(gen.random(n) * K).astype(np.int64))
        else:
            k = np.zeros(n, dtype=np.int64)
    k = np.asarray(k, dtype=np.int64)
    state, aux = _direct(s0, table, t, k + 1, gen)
    target = np.full(n, -1, dtype=np.int64)
    z_phi = np.zeros(n, dtype=bool)
    inputs = state
    if lay.n_discrete:
        rows = np.nonzero(disc)[0]
        target[rows] = state.tokens[rows, pos[rows]]
        phi = np.array(table.discrete.phi_probs)[t // lay.length]
        no_flip = gen.random(n) < phi
        draws = gen.integers(lay.vocab_size, size=n)
        inputs = state.copy()
        cond = state.cond_tokens[np.arange(n), np.minimum(pos, lay.n_discrete - 1)]
        change = disc & ~no_flip & ~cond
        inputs.tokens[change, pos[change]] = draws[change]
        z_phi = disc & no_flip
    active = ~np.array([s0.cond_tokens[r, pos[r]] if disc[r] else s0.cond_vectors[pos[r] - lay.n_discrete][r].all() for r in range(n)], dtype=bool)
    return TrainingBatch(t, k, pos, disc, inputs, target, z_phi, aux.eps, aux.signal, active)


@dataclass
class TrainingExample:
    kind: str
    t: int
    k: int
    i_t: int
    input_seq: Sequence
    target_token: int | None
    z_was_phi: bool
    eps: np.ndarray | None


def make_training_example(s0: Sequence, table: ScheduleTable, t: int, rng: np.random.Generator, k: int | None = None) -> TrainingExample:
    """One training example at time ``t`` from a clean sequence ``s0``.

    For a continuous step, ``k`` defaults to a uniform draw in ``0 .. K-1``.
    """
    if not 0 <= t < table.T:
        raise ScheduleError(f"time {t} outside 0..{table.T - 1}")
    if k is not None and (table.is_discrete_step(t) or not 0 <= k < table.inner_steps(t)):
        raise ScheduleError("bad element time")
    tb = make_training_batch(SequenceBatch.from_sequences([s0]), table, np.array([t]), rng, None if k is None else np.array([k]))
    i = int(tb.positions[0])
    if tb.is_discrete[0]:
        return TrainingExample("discrete", t, 0, i, tb.inputs[0], int(tb.target_token[0]), bool(tb.z_was_phi[0]), None)
    j = i - table.layout.n_discrete
    return TrainingExample("continuous", t, int(tb.k[0]), i, tb.inputs[0], None, False, tb.eps[j][0].copy())


def sample_times(table: ScheduleTable, n: int, gen: np.random.Generator, mode: str = "uniform", positions=None) -> np.ndarray:
    """Sequence times for a training batch.

    ``uniform`` draws from ``0 .. T-1`` (restricted to steps that visit
    ``positions`` when given).  ``balanced`` puts half of the mass on steps
    that noise continuous elements and half on discrete steps.
    """
    allowed = np.arange(table.T)
    if positions is not None:
        allowed = allowed[np.isin(table.positions, np.asarray(positions))]
    if allowed.size == 0:
        raise ScheduleError("no trainable time steps")
    if mode == "uniform":
        return allowed[gen.integers(allowed.size, size=n)]
    if mode != "balanced":
        raise ValueError(f"unknown time sampling mode {mode!r}")
    disc = allowed[table.positions[allowed] < table.layout.n_discrete]
    cont = allowed[table.positions[allowed] >= table.layout.n_discrete]
    if disc.size == 0 or cont.size == 0:
        return allowed[gen.integers(allowed.size, size=n)]
    pick_cont = gen.random(n) < 0.5
    return np.where(pick_cont, cont[gen.integers(cont.size, size=n)], disc[gen.integers(disc.size, size=n)])
