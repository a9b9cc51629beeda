"""Small datasets with built-in constraints, their encodings, and evaluation metrics.

* Tiny 3-SAT: random instances solved by brute force; the clauses are
  conditioning tokens and the assignment is generated.
* Ring: a label token paired with a 2D point near the matching spot on the
  unit circle; a sample is consistent when the point lies in its label's
  sector.
* Tabular: CSV plus a JSON column manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm, wasserstein_distance

from .oracle import MixtureTarget, gauss_legendre
from .state import ElementLayout, LayoutError, Sequence, SequenceBatch

# ---------------------------------------------------------------------------
# 3-SAT


def clause_count(n: int) -> int:
    """Clause count near the satisfiability threshold: ``round(4.258 n + 58.26 n^(-2/3))``."""
    return int(round(4.258 * n + 58.26 * n ** (-2.0 / 3.0)))


@dataclass(frozen=True)
class SatInstance:
    """``clauses`` is ``(m, 3)`` of signed 1-based variable ids; ``assignment`` a satisfying bool vector."""

    n: int
    clauses: np.ndarray
    assignment: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.clauses, dtype=np.int64).reshape(-1, 3)
        a = np.asarray(self.assignment, dtype=bool).reshape(self.n)
        if np.any(c == 0) or np.any(np.abs(c) > self.n):
            raise ValueError("literal outside 1..n")
        if any(len(set(np.abs(row))) != 3 for row in c):
            raise ValueError("every clause needs three distinct variables")
        object.__setattr__(self, "clauses", c)
        object.__setattr__(self, "assignment", a)
        if not check_sat(self, a)[0]:
            raise ValueError("stored assignment does not satisfy the instance")

    @property
    def m(self):
        return self.clauses.shape[0]

    def key(self) -> str:
        return hashlib.sha256(self.clauses.tobytes() + bytes([self.n])).hexdigest()

    def to_dimacs(self) -> str:
        lines = [f"p cnf {self.n} {self.m}"]
        lines += [" ".join(str(int(x)) for x in row) + " 0" for row in self.clauses]
        lines.append("v " + " ".join(str(i + 1 if v else -(i + 1)) for i, v in enumerate(self.assignment)) + " 0")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dimacs(cls, text: str) -> "SatInstance":
        n, clauses, assignment = None, [], None
        for line in text.splitlines():
            parts = line.split()
            if not parts or parts[0] == "c":
                continue
            if parts[0] == "p":
                n = int(parts[2])
            elif parts[0] == "v":
                lits = [int(x) for x in parts[1:] if x != "0"]
                assignment = np.zeros(n, dtype=bool)
                for lit in lits:
                    assignment[abs(lit) - 1] = lit > 0
            else:
                clauses.append([int(x) for x in parts if x != "0"])
        return cls(n, np.array(clauses), assignment)


def _clause_truth(clauses: np.ndarray, assignments: np.ndarray) -> np.ndarray:
    """``(A, m)`` clause truth for a stack of assignments ``(A, n)``."""
    var = np.abs(clauses) - 1
    vals = assignments[:, var]  # (A, m, 3)
    lit = np.where(clauses > 0, vals, ~vals)
    return lit.any(axis=2)


def check_sat(instance, assignment) -> tuple[bool, int]:
    a = np.asarray(assignment, dtype=bool).reshape(1, -1)
    truth = _clause_truth(instance.clauses, a)[0]
    return bool(truth.all()), int(truth.sum())


def all_assignments(n: int) -> np.ndarray:
    return ((np.arange(2**n)[:, None] >> np.arange(n)[None]) & 1).astype(bool)


def brute_force_solutions(n: int, clauses: np.ndarray) -> np.ndarray:
    A = all_assignments(n)
    return A[_clause_truth(np.asarray(clauses), A).all(axis=1)]


def random_clauses(n: int, m: int, gen: np.random.Generator) -> np.ndarray:
    var = np.argsort(gen.random((m, n)), axis=1)[:, :3] + 1
    sign = np.where(gen.random((m, 3)) < 0.5, -1, 1)
    return var * sign


def gen_tiny_sat(n: int, count: int, seed: int, m: int | None = None, max_tries: int | None = None) -> list[SatInstance]:
    """``count`` distinct satisfiable instances with ``n`` variables (unsatisfiable draws are discarded)."""
    if not 3 <= n <= 10:
        raise ValueError("brute force covers 3 <= n <= 10")
    m = clause_count(n) if m is None else m
    gen = np.random.default_rng(seed)
    out, seen = [], set()
    tries = 0
    max_tries = max_tries or 1000 * count + 1000
    while len(out) < count:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("too many unsatisfiable draws")
        clauses = random_clauses(n, m, gen)
        sols = brute_force_solutions(n, clauses)
        if len(sols) == 0:
            continue
        inst = SatInstance(n, clauses, sols[gen.integers(len(sols))])
        if inst.key() in seen:
            continue
        seen.add(inst.key())
        out.append(inst)
    return out


def split_by_hash(instances, test_fraction: float = 0.2):
    """Deterministic split on the instance hash; identical instances always land on the same side."""
    train, test = [], []
    for inst in instances:
        h = int(inst.key()[:8], 16) / 16**8
        (test if h < test_fraction else train).append(inst)
    return train, test


def sat_layout(n: int, m: int | None = None) -> ElementLayout:
    """``3m`` clause tokens then ``n`` assignment tokens; ids 0/1 are false/true, literals start at 2."""
    m = clause_count(n) if m is None else m
    return ElementLayout(3 * m + n, (), 2 * n + 2)


def literal_token(lit: np.ndarray) -> np.ndarray:
    lit = np.asarray(lit)
    return 2 + 2 * (np.abs(lit) - 1) + (lit < 0)


def token_literal(tok: np.ndarray) -> np.ndarray:
    tok = np.asarray(tok) - 2
    return np.where(tok % 2 == 1, -1, 1) * (tok // 2 + 1)


def sat_to_sequence(instance: SatInstance, with_assignment: bool = True) -> Sequence:
    lay = sat_layout(instance.n, instance.m)
    clause_tok = literal_token(instance.clauses).reshape(-1)
    assign = instance.assignment.astype(np.int64) if with_assignment else np.zeros(instance.n, dtype=np.int64)
    cond = np.concatenate([np.ones(clause_tok.size, dtype=bool), np.zeros(instance.n, dtype=bool)])
    return Sequence(lay, np.concatenate([clause_tok, assign]), (), cond)


def sat_batch(instances, with_assignment: bool = True) -> SequenceBatch:
    return SequenceBatch.from_sequences([sat_to_sequence(i, with_assignment) for i in instances])


def decode_sat(seq: Sequence, n: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Clauses and assignment from a sequence; the assignment is ``None`` unless every slot holds 0 or 1."""
    m = (seq.layout.n_discrete - n) // 3
    clauses = token_literal(seq.tokens[:3 * m]).reshape(m, 3)
    tail = seq.tokens[3 * m:]
    assign = tail.astype(bool) if np.all(tail <= 1) else None
    return clauses, assign


def sat_solved_fraction(instances, batch: SequenceBatch) -> float:
    n = instances[0].n
    solved = 0
    for inst, seq in zip(instances, batch):
        _, a = decode_sat(seq, n)
        solved += a is not None and check_sat(inst, a)[0]
    return solved / len(instances)


# ---------------------------------------------------------------------------
# ring


@dataclass(frozen=True)
class RingTask:
    """Label ``c`` in ``0..C-1`` with a 2D Gaussian centred at angle ``2 pi c / C`` on a circle."""

    C: int = 4
    sigma: float = 0.15
    radius: float = 1.0

    @property
    def layout(self) -> ElementLayout:
        return ElementLayout(1, (2,), max(self.C, 2))

    def centers(self) -> np.ndarray:
        ang = 2 * np.pi * np.arange(self.C) / self.C
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def target(self) -> MixtureTarget:
        C, d = self.C, 2
        return MixtureTarget(self.layout, np.full(C, 1.0 / C), np.arange(C)[:, None], [self.centers()],
                             [np.broadcast_to(np.eye(d) * self.sigma**2, (C, d, d))])

    def sample(self, n: int, gen: np.random.Generator) -> SequenceBatch:
        return self.target().sample(n, gen)

    def sector(self, points: np.ndarray) -> np.ndarray:
        ang = np.arctan2(points[:, 1], points[:, 0])
        return np.round(ang / (2 * np.pi / self.C)).astype(np.int64) % self.C

    def constraint_accuracy(self, batch: SequenceBatch) -> float:
        return float(np.mean(self.sector(batch.vectors[0]) == batch.tokens[:, 0]))

    def ideal_accuracy(self, tol: float = 1e-12) -> float:
        """Probability that a target draw lies in its own sector, by one-dimensional quadrature.

        In coordinates aligned with the label's centre the sector is
        ``|y| < x tan(pi / C)``, ``x > 0``; integrating ``y`` out leaves
        ``int N(x; r, s) (2 Phi(x tan(pi/C) / s) - 1) dx`` over ``x > 0``.
        """
        s, r = self.sigma, self.radius
        tn = math.tan(math.pi / self.C)

        def f(x):
            inner = np.where(x > 0, 2 * norm.cdf(x * tn / s) - 1, 0.0)
            return norm.pdf(x, r, s) * inner

        return gauss_legendre(f, max(0.0, r - 8 * s), r + 8 * s, tol)


# ---------------------------------------------------------------------------
# tabular


def logit_transform(x, clip: float = 1e-5):
    """``log(x / (1 - x))`` after clipping ``x`` to ``[clip, 1 - clip]``."""
    x = np.clip(np.asarray(x, dtype=np.float64), clip, 1 - clip)
    return np.log(x) - np.log1p(-x)


def inverse_logit(y):
    return 1.0 / (1.0 + np.exp(-np.asarray(y, dtype=np.float64)))


class UnseenCategoryError(ValueError):
    pass


@dataclass
class TabularDataset:
    """Discrete columns dense-coded, continuous columns standardised and packed into one vector.

    The manifest lists ``{"name", "type": "categorical" | "continuous",
    "logit": bool}`` per column; ``logit`` columns (values in ``[0, 1]``) are
    passed through :func:`logit_transform` before standardisation.
    """

    manifest: list
    categories: dict
    mean: np.ndarray
    std: np.ndarray
    train: SequenceBatch
    test: SequenceBatch

    @property
    def discrete_columns(self):
        return [c["name"] for c in self.manifest if c["type"] == "categorical"]

    @property
    def continuous_columns(self):
        return [c for c in self.manifest if c["type"] == "continuous"]

    @property
    def layout(self) -> ElementLayout:
        return self.train.layout

    @classmethod
    def from_csv(cls, csv_path, manifest_path, test_fraction: float = 0.2, seed: int = 0) -> "TabularDataset":
        manifest = json.loads(Path(manifest_path).read_text())["columns"]
        with open(csv_path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ValueError("empty table")
        gen = np.random.default_rng(seed)
        perm = gen.permutation(len(rows))
        n_test = int(round(test_fraction * len(rows)))
        test_rows = [rows[i] for i in perm[:n_test]]
        train_rows = [rows[i] for i in perm[n_test:]]
        categories = {}
        for c in manifest:
            if c["type"] == "categorical":
                categories[c["name"]] = sorted({r[c["name"]] for r in train_rows})
            elif c["type"] != "continuous":
                raise ValueError(f"unknown column type {c['type']!r}")
        cont = [c for c in manifest if c["type"] == "continuous"]
        raw = cls._raw_continuous(train_rows, cont)
        mean = raw.mean(axis=0) if cont else np.zeros(0)
        std = raw.std(axis=0) if cont else np.zeros(0)
        std = np.where(std > 0, std, 1.0)
        ds = cls(manifest, categories, mean, std, None, None)
        ds.train = ds.encode(train_rows)
        ds.test = ds.encode(test_rows) if test_rows else None
        return ds

    @staticmethod
    def _raw_continuous(rows, cont):
        vals = np.array([[float(r[c["name"]]) for c in cont] for r in rows], dtype=np.float64).reshape(len(rows), len(cont))
        for j, c in enumerate(cont):
            if c.get("logit"):
                vals[:, j] = logit_transform(vals[:, j])
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite continuous value")
        return vals

    def encode(self, rows) -> SequenceBatch:
        disc = self.discrete_columns
        vocab = max([2] + [len(v) for v in self.categories.values()])
        cont = self.continuous_columns
        lay = ElementLayout(len(disc), (len(cont),) if cont else (), vocab)
        tokens = np.zeros((len(rows), len(disc)), dtype=np.int64)
        for j, name in enumerate(disc):
            index = {v: i for i, v in enumerate(self.categories[name])}
            for r, row in enumerate(rows):
                if row[name] not in index:
                    raise UnseenCategoryError(f"column {name!r}: unseen category {row[name]!r}")
                tokens[r, j] = index[row[name]]
        vecs = [(self._raw_continuous(rows, cont) - self.mean) / self.std] if cont else []
        return SequenceBatch(lay, tokens, vecs)

    def decode(self, batch: SequenceBatch) -> list[dict]:
        rows = []
        cont = self.continuous_columns
        vals = batch.vectors[0] * self.std + self.mean if cont else None
        for r in range(len(batch)):
            row = {}
            for j, name in enumerate(self.discrete_columns):
                cats = self.categories[name]
                tok = int(batch.tokens[r, j])
                row[name] = cats[tok] if tok < len(cats) else None
            for j, c in enumerate(cont):
                v = vals[r, j]
                row[c["name"]] = float(inverse_logit(v)) if c.get("logit") else float(v)
            rows.append(row)
        return rows


# ---------------------------------------------------------------------------
# metrics


def metric_w1(a, b) -> float:
    """Exact 1-Wasserstein distance between two 1D samples."""
    return float(wasserstein_distance(np.ravel(a), np.ravel(b)))


def metric_w1_proxy(a, b) -> float:
    """Per-coordinate 1D Wasserstein distances averaged (a proxy for the multivariate distance)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    return float(np.mean([metric_w1(a[:, j], b[:, j]) for j in range(a.shape[1])]))


def metric_tv_hist(a_tokens, b_tokens) -> float:
    """Total variation between the empirical laws of token rows."""
    a_tokens, b_tokens = np.atleast_2d(a_tokens), np.atleast_2d(b_tokens)
    keys = {}
    for rows, w in ((a_tokens, 1.0 / len(a_tokens)), (b_tokens, -1.0 / len(b_tokens))):
        for row in map(tuple, rows):
            keys[row] = keys.get(row, 0.0) + w
    return 0.5 * float(sum(abs(v) for v in keys.values()))


def metric_constraint_acc(task, samples, instances=None) -> float:
    if isinstance(task, RingTask):
        return task.constraint_accuracy(samples)
    if task == "sat":
        if instances is None:
            raise ValueError("SAT accuracy needs the instances")
        return sat_solved_fraction(instances, samples)
    raise ValueError(f"no constraint defined for task {task!r}")


def batch_vectors(batch: SequenceBatch) -> np.ndarray:
    """All vector entries of a batch side by side, ``(N, sum(dims))``."""
    if not batch.vectors:
        raise LayoutError("batch has no continuous positions")
    return np.concatenate(batch.vectors, axis=1)


def sample_sat(n: int, count: int, gen: np.random.Generator, m: int | None = None, exclude_test: float | None = None,
               chunk: int = 4096) -> list[SatInstance]:
    """Draw ``count`` satisfiable instances (vectorised rejection sampling).

    With ``exclude_test`` set, instances whose hash falls in the test region
    of :func:`split_by_hash` are rejected, so training draws never overlap a
    held-out set built with the same fraction.
    """
    m = clause_count(n) if m is None else m
    A = all_assignments(n)
    out = []
    while len(out) < count:
        var = np.argsort(gen.random((chunk, m, n)), axis=2)[:, :, :3] + 1
        clauses = var * np.where(gen.random((chunk, m, 3)) < 0.5, -1, 1)
        vals = A[:, var - 1]  # (A, chunk, m, 3)
        truth = np.where(clauses[None] > 0, vals, ~vals).any(axis=3).all(axis=2)  # (A, chunk)
        for b in np.nonzero(truth.any(axis=0))[0]:
            sols = np.nonzero(truth[:, b])[0]
            inst = SatInstance(n, clauses[b], A[sols[gen.integers(len(sols))]])
            if exclude_test is not None and int(inst.key()[:8], 16) / 16**8 < exclude_test:
                continue
            out.append(inst)
            if len(out) == count:
                break
    return out
