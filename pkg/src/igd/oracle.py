"""Exact references for small problems.

* :class:`ExactChain` enumerates the law of the forward chain on a small
  discrete state space and exposes every conditional the reverse sampler
  needs, computed from the enumerated laws.
* :class:`MixtureTarget` is a finite mixture whose components fix every token
  and put an independent Gaussian on every vector.  Its ideal denoisers
  (:class:`MixtureDenoiser`) are closed-form posterior computations.
* :func:`gauss_legendre` and the ``quad_*`` helpers evaluate the defining
  integrals numerically, as a second route to the closed forms.
* :func:`verify_lemma1` and :func:`wasserstein_contraction_check` are the
  convergence and contraction checks, returning a :class:`Report`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .forward import forward_walk
from .rng import as_keyed
from .schedule import ScheduleTable
from .state import ElementLayout, LayoutError, SequenceBatch

MAX_STATES = 4096


class OracleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# reports


@dataclass
class Check:
    name: str
    value: float
    bound: float
    passed: bool
    relation: str = "<="

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}  value={self.value:.6g}  bound{self.relation}{self.bound:.6g}  {status}"


@dataclass
class Report:
    """A list of named assertions plus warnings, printable one per line."""

    checks: list[Check] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def add(self, name, value, bound, relation="<="):
        value, bound = float(value), float(bound)
        ok = {"<=": value <= bound, "<": value < bound, ">=": value >= bound}[relation]
        self.checks.append(Check(name, value, bound, bool(ok), relation))
        return ok

    def warn(self, msg):
        self.warnings.append(msg)

    def extend(self, other: "Report"):
        self.checks += other.checks
        self.warnings += other.warnings
        self.notes.update(other.notes)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [c.line() for c in self.checks] + [f"WARNING {w}" for w in self.warnings]

    def __str__(self):
        return "\n".join(self.lines())


def tv(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())


# ---------------------------------------------------------------------------
# targets


@dataclass
class DiscreteTable:
    """Explicit law over ``X^{L1}``; ``probs`` has shape ``(V,) * L1``."""

    layout: ElementLayout
    probs: np.ndarray

    def __post_init__(self):
        lay = self.layout
        if lay.n_continuous:
            raise LayoutError("a discrete table has no continuous positions")
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape((lay.vocab_size,) * lay.n_discrete)
        if lay.vocab_size ** lay.n_discrete > MAX_STATES:
            raise OracleError("state space too large for enumeration")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise OracleError("probabilities must be non-negative and sum to 1")

    @classmethod
    def from_dict(cls, layout, mass: dict):
        p = np.zeros((layout.vocab_size,) * layout.n_discrete)
        for s, w in mass.items():
            p[tuple(s)] = w
        return cls(layout, p)

    def to_mixture(self) -> "MixtureTarget":
        idx = np.argwhere(self.probs > 0)
        return MixtureTarget(self.layout, self.probs[tuple(idx.T)], idx, [], [])

    def sample(self, n, gen) -> SequenceBatch:
        flat = self.probs.reshape(-1)
        k = gen.choice(flat.size, size=n, p=flat)
        tokens = np.stack(np.unravel_index(k, self.probs.shape), axis=1)
        return SequenceBatch(self.layout, tokens, [])


@dataclass
class MixtureTarget:
    """``sum_c w_c * delta(tokens_c) * prod_j N(mu_cj, Sigma_cj)``.

    ``means[j]`` is ``(C, d_j)`` and ``covs[j]`` is ``(C, d_j, d_j)``.
    """

    layout: ElementLayout
    weights: np.ndarray
    tokens: np.ndarray
    means: list
    covs: list

    def __post_init__(self):
        lay = self.layout
        self.weights = np.asarray(self.weights, dtype=np.float64)
        C = self.weights.size
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(C, lay.n_discrete)
        self.means = [np.asarray(m, dtype=np.float64).reshape(C, d) for m, d in zip(self.means, lay.dims)]
        self.covs = [np.asarray(s, dtype=np.float64).reshape(C, d, d) for s, d in zip(self.covs, lay.dims)]
        if len(self.means) != lay.n_continuous or len(self.covs) != lay.n_continuous:
            raise LayoutError("need one mean and covariance block per vector")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise OracleError("weights must be non-negative and sum to 1")
        if np.any((self.tokens < 0) | (self.tokens >= lay.vocab_size)):
            raise OracleError("component tokens outside the vocabulary")
        for s in self.covs:
            if np.any(np.linalg.eigvalsh(s) <= 0):
                raise OracleError("covariances must be positive definite")

    @property
    def n_components(self):
        return self.weights.size

    def sample(self, n, gen) -> SequenceBatch:
        c = gen.choice(self.n_components, size=n, p=self.weights)
        vecs = []
        for m, s in zip(self.means, self.covs):
            L = np.linalg.cholesky(s)
            z = gen.standard_normal((n, m.shape[1]))
            vecs.append(m[c] + np.einsum("nij,nj->ni", L[c], z))
        return SequenceBatch(self.layout, self.tokens[c], vecs)

    def token_law(self) -> dict:
        out = {}
        for w, tok in zip(self.weights, map(tuple, self.tokens)):
            out[tok] = out.get(tok, 0.0) + w
        return out

    def conditional_mean(self, j: int, tokens) -> np.ndarray:
        """Mean of vector ``j`` given the tokens."""
        sel = np.all(self.tokens == np.asarray(tokens), axis=1)
        w = self.weights[sel]
        return (w[:, None] * self.means[j][sel]).sum(0) / w.sum()


def labeled_gmm(labels_probs, means, sigmas, vocab_size=None) -> MixtureTarget:
    """One label token followed by one vector whose law depends on the label.

    ``means[c]`` is a list of component means for label ``c`` (or one mean),
    ``sigmas[c]`` the matching isotropic standard deviations.  Component
    weights within a label are equal.
    """
    labels_probs = np.asarray(labels_probs, dtype=np.float64)
    C = labels_probs.size
    V = vocab_size or max(C, 2)
    w, tok, mu, cov = [], [], [], []
    d = None
    for c in range(C):
        ms = np.atleast_2d(np.asarray(means[c], dtype=np.float64))
        ss = np.broadcast_to(np.asarray(sigmas[c], dtype=np.float64), (ms.shape[0],))
        d = ms.shape[1]
        for m, s in zip(ms, ss):
            w.append(labels_probs[c] / ms.shape[0])
            tok.append([c])
            mu.append(m)
            cov.append(np.eye(d) * s * s)
    layout = ElementLayout(1, (d,), V)
    return MixtureTarget(layout, np.array(w), np.array(tok), [np.array(mu)], [np.array(cov)])


# ---------------------------------------------------------------------------
# Gaussian mixtures on R^d


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        C = self.weights.size
        self.means = np.asarray(self.means, dtype=np.float64).reshape(C, -1)
        d = self.means.shape[1]
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(C, d, d)

    @classmethod
    def isotropic_1d(cls, weights, means, sigmas):
        sig = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), np.shape(means))
        return cls(weights, np.asarray(means)[:, None], (sig**2)[:, None, None])

    @property
    def dim(self):
        return self.means.shape[1]

    def noised(self, alpha_bar: float) -> "GaussianMixture":
        """Law of ``sqrt(a) X + sqrt(1 - a) E``."""
        a = alpha_bar
        return GaussianMixture(self.weights, math.sqrt(a) * self.means, a * self.covs + (1 - a) * np.eye(self.dim))

    def component_logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return _gauss_logpdf(x[:, None, :], self.means[None], self.covs)

    def logpdf(self, x) -> np.ndarray:
        lp = self.component_logpdf(x) + np.log(self.weights)
        return _logsumexp(lp, axis=1)

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        lp = self.component_logpdf(x) + np.log(self.weights)
        r = np.exp(lp - _logsumexp(lp, axis=1)[:, None])
        diff = self.means[None] - x[:, None, :]
        g = np.linalg.solve(self.covs[None], diff[..., None])[..., 0]
        return (r[..., None] * g).sum(1)


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)


def _gauss_logpdf(x, mean, cov):
    """Log density of ``N(mean, cov)`` at ``x``; ``cov`` is ``(d, d)`` or ``(C, d, d)`` broadcasting against ``mean``."""
    d = mean.shape[-1]
    diff = x - mean
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    quad = np.einsum("...i,...ij,...j->...", diff, inv, diff)
    return -0.5 * (quad + logdet + d * math.log(2 * math.pi))


def gmm_ideal_eps(gmm: GaussianMixture, alpha_bar: float, x) -> np.ndarray:
    """``E[eps | sqrt(a) X + sqrt(1-a) eps = x]`` for ``X`` distributed as ``gmm``.

    Computed through the posterior component weights; each component
    contributes ``sqrt(1-a) * C^{-1} (x - sqrt(a) mu)`` with ``C = a Sigma + (1-a) I``.
    """
    a = float(alpha_bar)
    if not 0.0 < a <= 1.0:
        raise OracleError(f"alpha_bar must lie in (0, 1], got {a}")
    if 1.0 - a < 1e-15:
        raise OracleError("degenerate noising: alpha_bar is numerically 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    noisy = gmm.noised(a)
    lp = noisy.component_logpdf(x) + np.log(gmm.weights)
    r = np.exp(lp - _logsumexp(lp, axis=1)[:, None])
    diff = x[:, None, :] - noisy.means[None]
    g = np.linalg.solve(noisy.covs[None], diff[..., None])[..., 0]
    return math.sqrt(1 - a) * (r[..., None] * g).sum(1)


# ---------------------------------------------------------------------------
# quadrature


def gauss_legendre(f, a: float, b: float, tol: float = 1e-10, n0: int = 32, n_max: int = 4096) -> float:
    """Integrate ``f`` (vectorised) over ``[a, b]``, doubling the node count until two estimates agree within ``tol``."""
    prev = None
    n = n0
    while n <= n_max:
        x, w = np.polynomial.legendre.leggauss(n)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        val = half * float(np.dot(w, f(mid + half * x)))
        if prev is not None and abs(val - prev) < tol:
            return val
        prev = val
        n *= 2
    raise OracleError(f"quadrature did not reach tolerance {tol}")


def _quad_mixture(gmm: GaussianMixture, integrand, tol):
    """Sum over components of ``w_c * int integrand(s) N(s; mu_c, sigma_c) ds`` on ``mu_c +- 8 sigma_c`` (1D)."""
    if gmm.dim != 1:
        raise OracleError("quadrature oracle is one-dimensional")
    total = 0.0
    for w, m, s2 in zip(gmm.weights, gmm.means[:, 0], gmm.covs[:, 0, 0]):
        s = math.sqrt(s2)
        dens = lambda u, m=m, s=s: np.exp(-0.5 * ((u - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        total += w * gauss_legendre(lambda u: integrand(u) * dens(u), m - 8 * s, m + 8 * s, tol)
    return total


def quad_marginal_density(gmm: GaussianMixture, alpha_bar: float, x: float, tol: float = 1e-13) -> float:
    """Density of ``sqrt(a) X + sqrt(1-a) E`` at ``x``, integrating over ``X``."""
    a = alpha_bar
    v = 1 - a
    kern = lambda s: np.exp(-0.5 * (x - math.sqrt(a) * s) ** 2 / v) / math.sqrt(2 * math.pi * v)
    return _quad_mixture(gmm, kern, tol)


def quad_ideal_eps(gmm: GaussianMixture, alpha_bar: float, x: float, tol: float = 1e-13) -> float:
    """``E[eps | x]`` as a ratio of two integrals over the clean value."""
    a = alpha_bar
    v = 1 - a
    kern = lambda s: np.exp(-0.5 * (x - math.sqrt(a) * s) ** 2 / v) / math.sqrt(2 * math.pi * v)
    num = _quad_mixture(gmm, lambda s: kern(s) * (x - math.sqrt(a) * s) / math.sqrt(v), tol)
    den = _quad_mixture(gmm, kern, tol)
    return num / den


def fd_score(gmm: GaussianMixture, alpha_bar: float, x: float, h: float = 1e-4) -> float:
    """Central difference of the log of the quadrature density."""
    lp = lambda u: math.log(quad_marginal_density(gmm, alpha_bar, u))
    return (lp(x + h) - lp(x - h)) / (2 * h)


# ---------------------------------------------------------------------------
# exact enumeration of the discrete chain


class ExactChain:
    """Exact laws ``P_t`` of the forward chain for a discrete table target.

    ``P[t]`` has shape ``(V,) * L1``.  Conditionals are computed from these
    laws; the fresh-draw probabilities (:meth:`binary_probs`) are computed
    by walking every (state, forward draw) pair.
    """

    def __init__(self, target: DiscreteTable, table: ScheduleTable):
        lay = table.layout
        if target.layout != lay:
            raise LayoutError("target and schedule layouts differ")
        if lay.n_continuous:
            raise OracleError("enumeration covers discrete chains only")
        self.target = target
        self.table = table
        self.V = lay.vocab_size
        self.L1 = lay.n_discrete
        self.shape = (self.V,) * self.L1
        P = [target.probs.copy()]
        for t in range(table.T):
            P.append(self._apply(P[-1], t))
        self.P = P
        self._binary = {}

    @property
    def n_states(self):
        return self.V**self.L1

    def _apply(self, P, t):
        i, phi = self.table.position(t), self.table.phi(t)
        marg = P.sum(axis=i, keepdims=True) / self.V
        return phi * P + (1 - phi) * np.broadcast_to(marg, P.shape)

    def states(self):
        return list(itertools.product(range(self.V), repeat=self.L1))

    def flat(self, t) -> np.ndarray:
        return self.P[t].reshape(-1)

    def stationary(self) -> np.ndarray:
        return np.full(self.n_states, 1.0 / self.n_states)

    def forward_matrix(self, t) -> np.ndarray:
        """``K[new, old]`` for forward step ``t``."""
        S = self.n_states
        K = np.zeros((S, S))
        i, phi = self.table.position(t), self.table.phi(t)
        for old, s in enumerate(self.states()):
            K[old, old] += phi
            for x in range(self.V):
                new = list(s)
                new[i] = x
                K[np.ravel_multi_index(new, self.shape), old] += (1 - phi) / self.V
        return K

    def loo_conditional(self, t) -> np.ndarray:
        """``Q[s]``: probability that ``S^(t)_i = s_i`` given ``S^(t)_{-i} = s_{-i}``, ``i = i_t``.

        Contexts of zero probability get the uniform law.
        """
        i = self.table.position(t)
        P = self.P[t]
        m = P.sum(axis=i, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            Q = np.where(m > 0, P / m, 1.0 / self.V)
        return Q

    def full_conditional(self, t) -> np.ndarray:
        """``R[s, x]``: probability that ``S^(t)_i = x`` given ``S^(t+1) = s``."""
        i, phi = self.table.position(t), self.table.phi(t)
        P = np.moveaxis(self.P[t], i, -1)  # (..., x)
        S = self.n_states
        R = np.zeros((S, self.V))
        for idx, s in enumerate(self.states()):
            ctx = s[:i] + s[i + 1:]
            J = P[ctx]
            w = J * ((1 - phi) / self.V + phi * (np.arange(self.V) == s[i]))
            R[idx] = w / w.sum() if w.sum() > 0 else 1.0 / self.V
        return R

    def binary_probs(self, t) -> np.ndarray:
        """``Y[s_{-i}..., x]``: probability that the draw at ``t`` was ``x`` given ``S^(t+1)_{-i} = s_{-i}``, ``S^(t+1)_i = x``.

        Built by enumerating every old state and every forward draw.  The
        result is indexed like a state tensor with axis ``i`` moved last.
        """
        if t in self._binary:
            return self._binary[t]
        i, phi = self.table.position(t), self.table.phi(t)
        V = self.V
        both = np.zeros(self.shape)   # P(S^(t+1) = s, Z = s_i)
        total = np.zeros(self.shape)  # P(S^(t+1) = s)
        draws = [(None, phi)] + [(x, (1 - phi) / V) for x in range(V)]
        for s in self.states():
            p = self.P[t][s]
            if p == 0:
                continue
            for z, q in draws:
                new = list(s)
                if z is not None:
                    new[i] = z
                new = tuple(new)
                total[new] += p * q
                if z is not None:
                    both[new] += p * q
        with np.errstate(invalid="ignore", divide="ignore"):
            Y = np.where(total > 0, both / total, 1.0 / (1.0 + phi * V / (1 - phi)) if phi < 1 else 0.0)
        Y = np.moveaxis(Y, i, -1)
        self._binary[t] = Y
        return Y

    def reverse_matrix(self, t, context: str = "loo") -> np.ndarray:
        """Kernel ``R[new, old]`` of the ideal reverse step at ``t`` (maps ``s^(t+1)`` to ``s^(t)``)."""
        S = self.n_states
        i = self.table.position(t)
        R = np.zeros((S, S))
        Qm = np.moveaxis(self.loo_conditional(t), i, -1) if context == "loo" else None
        F = self.full_conditional(t) if context == "full" else None
        for old, s in enumerate(self.states()):
            probs = Qm[s[:i] + s[i + 1:]] if context == "loo" else F[old]
            for x in range(self.V):
                new = list(s)
                new[i] = x
                R[np.ravel_multi_index(new, self.shape), old] += probs[x]
        return R

    def composite_reverse(self, context: str = "loo") -> np.ndarray:
        R = np.eye(self.n_states)
        for t in range(self.table.T):
            R = R @ self.reverse_matrix(t, context)
        return R

    def sample_at(self, t, n, gen) -> SequenceBatch:
        return DiscreteTable(self.table.layout, self.P[t]).sample(n, gen)


def enumerate_chain(target: DiscreteTable, table: ScheduleTable) -> ExactChain:
    return ExactChain(target, table)


class EnumerationDenoiser:
    """Ideal discrete denoiser reading its answers from an :class:`ExactChain`.

    ``flavor="full"`` with ``context="loo"`` returns ``P(S^(t)_i | S^(t+1)_{-i})``;
    ``context="full"`` conditions on all of ``S^(t+1)``.  ``flavor="binary"``
    returns the enumerated fresh-draw probabilities.
    """

    def __init__(self, chain: ExactChain, flavor: str = "full", context: str = "loo"):
        if flavor not in ("full", "binary") or context not in ("loo", "full"):
            raise ValueError("bad flavor/context")
        self.chain, self.flavor, self.context = chain, flavor, context

    def discrete_query(self, batch, i, t):
        tok = batch.tokens
        ctx = tuple(tok[:, j] for j in range(tok.shape[1]) if j != i)
        if self.flavor == "binary":
            return self.chain.binary_probs(t)[ctx]
        if self.context == "loo":
            return np.moveaxis(self.chain.loo_conditional(t), i, -1)[ctx]
        idx = np.ravel_multi_index(tuple(tok.T), self.chain.shape)
        return self.chain.full_conditional(t)[idx]

    def continuous_query(self, batch, i, t, k):
        raise OracleError("enumeration denoiser has no continuous positions")


def ideal_discrete_denoiser(chain: ExactChain, flavor: str = "full", context: str = "loo") -> EnumerationDenoiser:
    return EnumerationDenoiser(chain, flavor, context)


# ---------------------------------------------------------------------------
# closed-form ideal denoiser for mixture targets


class MixtureDenoiser:
    """Ideal denoisers for a :class:`MixtureTarget`, computed through posterior component weights.

    For a state at sequence time ``t`` each component ``c`` explains discrete
    position ``j`` with probability ``(1 - p_j) 1{s_j = y_cj} + p_j / V`` and
    vector ``j`` with ``N(sqrt(a_j) mu_cj, a_j Sigma_cj + (1 - a_j) I)``.
    """

    def __init__(self, target: MixtureTarget, table: ScheduleTable, flavor: str = "full", context: str = "loo"):
        if target.layout != table.layout:
            raise LayoutError("target and schedule layouts differ")
        if flavor not in ("full", "binary") or context not in ("loo", "full"):
            raise ValueError("bad flavor/context")
        self.target, self.table, self.flavor, self.context = target, table, flavor, context
        self.logw = np.log(np.where(target.weights > 0, target.weights, 1e-300))

    def _loglik(self, batch, t, skip: int, signal_override=None):
        """``(N, C)`` log-likelihood of all positions except ``skip`` at time ``t``."""
        tgt, tab, lay = self.target, self.table, self.table.layout
        out = np.broadcast_to(self.logw, (len(batch), tgt.n_components)).copy()
        V = lay.vocab_size
        for j in range(lay.n_discrete):
            if j == skip:
                continue
            p = tab.flip_prob_table[t, j]
            eq = batch.tokens[:, j][:, None] == tgt.tokens[None, :, j]
            with np.errstate(divide="ignore"):
                out += np.log(np.where(eq, 1 - p + p / V, p / V))
        for jj, d in enumerate(lay.dims):
            j = lay.n_discrete + jj
            if j == skip:
                continue
            a = tab.continuous.signal[tab.steps_before[t, j]] if signal_override is None or j != signal_override[0] else signal_override[1]
            cov = a * tgt.covs[jj] + (1 - a) * np.eye(d)
            out += _gauss_logpdf(batch.vectors[jj][:, None, :], math.sqrt(a) * tgt.means[jj][None], cov)
        return out

    def discrete_query(self, batch, i, t):
        tab, tgt = self.table, self.target
        V = tab.layout.vocab_size
        ll = self._loglik(batch, t, skip=i)
        ll -= ll.max(axis=1, keepdims=True)
        r = np.exp(ll)  # (N, C), proportional to component weight given the context
        p = tab.flip_prob_table[t, i]
        onehot = (tgt.tokens[:, i][:, None] == np.arange(V)[None]).astype(float)  # (C, V)
        J = r @ ((1 - p) * onehot + p / V)  # (N, V)
        M = J.sum(axis=1, keepdims=True)
        phi = tab.phi(t)
        if self.flavor == "binary":
            pi_x = (1 - phi) / V
            return pi_x * M / (pi_x * M + phi * J)
        if self.context == "loo":
            return J / M
        cur = batch.tokens[:, i]
        w = J * ((1 - phi) / V + phi * (np.arange(V)[None] == cur[:, None]))
        return w / w.sum(axis=1, keepdims=True)

    def continuous_query(self, batch, i, t, k):
        tab, tgt, lay = self.table, self.target, self.table.layout
        jj = i - lay.n_discrete
        a = float(tab.continuous.signal[tab.steps_before[t, i] + k + 1])
        if 1.0 - a < 1e-15:
            raise OracleError("degenerate noising: alpha_bar is numerically 1")
        ll = self._loglik(batch, t, skip=-1, signal_override=(i, a))
        ll -= ll.max(axis=1, keepdims=True)
        r = np.exp(ll)
        r /= r.sum(axis=1, keepdims=True)
        d = lay.dims[jj]
        cov = a * tgt.covs[jj] + (1 - a) * np.eye(d)
        diff = batch.vectors[jj][:, None, :] - math.sqrt(a) * tgt.means[jj][None]
        g = np.einsum("...ij,...j->...i", np.linalg.inv(cov), diff)
        return math.sqrt(1 - a) * (r[..., None] * g).sum(1)


# ---------------------------------------------------------------------------
# convergence and contraction


def verify_lemma1(chain: ExactChain, threshold: float = 0.01, slack: float = 1e-12) -> Report:
    """TV of ``P_t`` to the uniform product law: non-increasing, and small at the end."""
    rep = Report()
    tab = chain.table
    L = tab.layout.length
    u = chain.stationary()
    per_step = [tv(chain.flat(t), u) for t in range(tab.T + 1)]
    per_round = per_step[::L]
    rep.notes["tv_per_round"] = per_round
    worst = max((b - a for a, b in zip(per_step, per_step[1:])), default=0.0)
    rep.add("lemma1.tv_step_increase", worst, slack)
    if max(tab.discrete.phi_probs) >= 1.0:
        rep.warn("a round has no-flip probability 1; the chain is not guaranteed to mix")
    else:
        rep.add("lemma1.terminal_tv", per_round[-1], threshold, "<")
    return rep


def pair_distance(a: SequenceBatch, b: SequenceBatch) -> np.ndarray:
    """Hamming distance on tokens plus squared Euclidean distance on vectors, per row."""
    d = (a.tokens != b.tokens).sum(axis=1).astype(float)
    for x, y in zip(a.vectors, b.vectors):
        d += ((x - y) ** 2).sum(axis=1)
    return d


def perturb(batch: SequenceBatch, shift: float = 0.5) -> SequenceBatch:
    """Flip the token at position 0 to the next id and shift every vector coordinate by ``shift``."""
    out = batch.copy()
    if out.tokens.shape[1]:
        out.tokens[:, 0] = (out.tokens[:, 0] + 1) % batch.layout.vocab_size
    out.vectors = [v + shift for v in out.vectors]
    return out


def round_alpha(table: ScheduleTable, rnd: int) -> float:
    """Contraction rate of round ``rnd``: the smaller of the discrete flip chance and ``1 - prod(1 - beta)``."""
    lay = table.layout
    alphas = []
    if lay.n_discrete:
        alphas.append(1 - table.discrete.phi(rnd))
    if lay.n_continuous:
        c = table.continuous
        start = sum(c.steps_per_round[:rnd])
        alphas.append(1 - float(np.prod(1 - c.betas[start:start + c.steps_per_round[rnd]])))
    return min(alphas)


def wasserstein_contraction_check(target, table: ScheduleTable, n_pairs: int, rng, shift: float = 0.5) -> Report:
    """Coupled forward runs from a target sample and its perturbed copy, sharing every random draw.

    For each round ``rho`` checks ``mean(D_after - (1 - alpha_rho) D_before) <= 3 * stderr``.
    """
    keyed = as_keyed(rng)
    rep = Report()
    rep.notes["pair"] = f"nu0 = mu0 with token 0 moved to the next id and vectors shifted by {shift}"
    a = target.sample(n_pairs, keyed.generator("pairs"))
    b = perturb(a, shift)
    L = table.layout.length
    for rnd in range(table.order.rounds):
        before = pair_distance(a, b)
        stream = keyed.child("round", rnd)
        a = forward_walk(a, table, rnd * L, (rnd + 1) * L, stream)
        b = forward_walk(b, table, rnd * L, (rnd + 1) * L, stream)
        after = pair_distance(a, b)
        alpha = round_alpha(table, rnd)
        diff = after - (1 - alpha) * before
        se = diff.std(ddof=1) / math.sqrt(n_pairs) if n_pairs > 1 else 0.0
        rep.add(f"contraction.round{rnd}", after.mean(), (1 - alpha) * before.mean() + 3 * se)
        rep.notes[f"round{rnd}"] = {"before": float(before.mean()), "after": float(after.mean()), "alpha": alpha}
    return rep


def continuous_gap_factor(table: ScheduleTable, rnd: int, x0: np.ndarray, y0: np.ndarray, rng) -> tuple[float, float]:
    """Squared-gap ratio after one coupled round for a continuous-only layout, with the predicted product."""
    lay = table.layout
    if lay.n_discrete:
        raise LayoutError("continuous-only layout expected")
    a = SequenceBatch(lay, np.zeros((len(x0), 0), dtype=np.int64), [x0])
    b = SequenceBatch(lay, np.zeros((len(y0), 0), dtype=np.int64), [y0])
    L = lay.length
    keyed = as_keyed(rng)
    a = forward_walk(a, table, rnd * L, (rnd + 1) * L, keyed)
    b = forward_walk(b, table, rnd * L, (rnd + 1) * L, keyed)
    ratio = pair_distance(a, b) / ((x0 - y0) ** 2).sum(axis=1)
    c = table.continuous
    start = sum(c.steps_per_round[:rnd])
    pred = float(np.prod(1 - c.betas[start:start + c.steps_per_round[rnd]]))
    return ratio, pred
