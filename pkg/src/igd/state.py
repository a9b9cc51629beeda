"""Discrete-continuous sequences.

A state is a tuple of ``n_discrete`` tokens from a finite vocabulary followed
by ``len(dims)`` real vectors.  Positions are 0-based throughout the package:
positions ``0 .. n_discrete-1`` hold tokens, the rest hold vectors.

Two containers are provided.  :class:`Sequence` is a single immutable value
and is what the small helper operations act on.  :class:`SequenceBatch` stores
many sequences of one layout as stacked arrays; every sampler in the package
works on batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np


class LayoutError(ValueError):
    """Raised when a value does not fit the layout (wrong kind, shape or id)."""


class ConditioningError(ValueError):
    """Raised on an attempt to modify an element held fixed by conditioning."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ElementLayout:
    """Shape of the state space.

    ``mask_token_id`` (the query mask) and ``phi_token_id`` (the no-flip
    symbol of the forward process) default to the first two ids past the
    vocabulary.  The pad token is an ordinary vocabulary member.
    """

    n_discrete: int
    dims: tuple[int, ...]
    vocab_size: int
    pad_token_id: int = 0
    mask_token_id: int | None = None
    phi_token_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.mask_token_id is None:
            object.__setattr__(self, "mask_token_id", self.vocab_size)
        if self.phi_token_id is None:
            object.__setattr__(self, "phi_token_id", self.vocab_size + 1)
        if self.n_discrete < 0:
            raise LayoutError("n_discrete must be non-negative")
        if self.length < 1:
            raise LayoutError("layout needs at least one position")
        if any(d < 1 for d in self.dims):
            raise LayoutError(f"continuous dimensions must be >= 1, got {self.dims}")
        if self.vocab_size < 2:
            raise LayoutError("vocab_size must be >= 2")
        if not 0 <= self.pad_token_id < self.vocab_size:
            raise LayoutError("pad_token_id must be a vocabulary member")
        if self.mask_token_id < self.vocab_size or self.phi_token_id < self.vocab_size:
            raise LayoutError("mask and phi ids must lie outside the vocabulary")
        if self.mask_token_id == self.phi_token_id:
            raise LayoutError("mask and phi ids must differ")

    @property
    def n_continuous(self) -> int:
        return len(self.dims)

    @property
    def length(self) -> int:
        return self.n_discrete + len(self.dims)

    def is_discrete(self, i: int) -> bool:
        self.check_position(i)
        return i < self.n_discrete

    def vector_index(self, i: int) -> int:
        """Index into ``vectors`` for continuous position ``i``."""
        if self.is_discrete(i):
            raise LayoutError(f"position {i} is discrete")
        return i - self.n_discrete

    def dim(self, i: int) -> int:
        return self.dims[self.vector_index(i)]

    def check_position(self, i: int) -> None:
        if not 0 <= i < self.length:
            raise LayoutError(f"position {i} outside 0..{self.length - 1}")

    def to_dict(self) -> dict:
        return {
            "n_discrete": self.n_discrete,
            "dims": list(self.dims),
            "vocab_size": self.vocab_size,
            "pad_token_id": self.pad_token_id,
            "mask_token_id": self.mask_token_id,
            "phi_token_id": self.phi_token_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElementLayout":
        return cls(
            n_discrete=d["n_discrete"],
            dims=tuple(d["dims"]),
            vocab_size=d["vocab_size"],
            pad_token_id=d.get("pad_token_id", 0),
            mask_token_id=d.get("mask_token_id"),
            phi_token_id=d.get("phi_token_id"),
        )


@dataclass(frozen=True, eq=False)
class Sequence:
    """One state ``s``: tokens, vectors and the conditioning mask.

    ``cond_tokens[i]`` marks token ``i`` as held fixed; ``cond_vectors[j]`` is
    a per-scalar mask for vector ``j``.
    """

    layout: ElementLayout
    tokens: np.ndarray
    vectors: tuple[np.ndarray, ...]
    cond_tokens: np.ndarray = None
    cond_vectors: tuple[np.ndarray, ...] = None

    def __post_init__(self):
        lay = self.layout
        tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if tokens.shape != (lay.n_discrete,):
            raise LayoutError(f"expected {lay.n_discrete} tokens, got {tokens.shape[0]}")
        bad = (tokens < 0) | ((tokens >= lay.vocab_size) & (tokens != lay.mask_token_id))
        if bad.any():
            raise LayoutError(f"token ids out of range: {tokens[bad].tolist()}")
        if len(self.vectors) != lay.n_continuous:
            raise LayoutError(f"expected {lay.n_continuous} vectors, got {len(self.vectors)}")
        vectors = []
        for v, d in zip(self.vectors, lay.dims):
            v = np.asarray(v, dtype=np.float64).reshape(-1)
            if v.shape != (d,):
                raise LayoutError(f"vector of shape {v.shape} does not match dim {d}")
            vectors.append(_frozen(v))
        cond_tokens = self.cond_tokens
        if cond_tokens is None:
            cond_tokens = np.zeros(lay.n_discrete, dtype=bool)
        cond_tokens = np.asarray(cond_tokens, dtype=bool).reshape(-1)
        if cond_tokens.shape != tokens.shape:
            raise LayoutError("cond_tokens shape mismatch")
        cond_vectors = self.cond_vectors
        if cond_vectors is None:
            cond_vectors = tuple(np.zeros(d, dtype=bool) for d in lay.dims)
        cond_vectors = tuple(np.asarray(m, dtype=bool).reshape(-1) for m in cond_vectors)
        if [m.shape[0] for m in cond_vectors] != list(lay.dims):
            raise LayoutError("cond_vectors shape mismatch")
        object.__setattr__(self, "tokens", _frozen(tokens))
        object.__setattr__(self, "vectors", tuple(vectors))
        object.__setattr__(self, "cond_tokens", _frozen(cond_tokens))
        object.__setattr__(self, "cond_vectors", tuple(_frozen(m) for m in cond_vectors))

    def __eq__(self, other):
        if not isinstance(other, Sequence) or other.layout != self.layout:
            return NotImplemented
        return (
            np.array_equal(self.tokens, other.tokens)
            and all(np.array_equal(a, b) for a, b in zip(self.vectors, other.vectors))
            and np.array_equal(self.cond_tokens, other.cond_tokens)
            and all(np.array_equal(a, b) for a, b in zip(self.cond_vectors, other.cond_vectors))
        )

    __hash__ = None

    def element(self, i: int):
        """Token id (int) or a copy of the vector at position ``i``."""
        if self.layout.is_discrete(i):
            return int(self.tokens[i])
        return self.vectors[self.layout.vector_index(i)].copy()

    def is_conditioned(self, i: int) -> bool:
        """True if the element at ``i`` is entirely held fixed."""
        if self.layout.is_discrete(i):
            return bool(self.cond_tokens[i])
        return bool(self.cond_vectors[self.layout.vector_index(i)].all())

    def has_mask_token(self) -> bool:
        return bool((self.tokens == self.layout.mask_token_id).any())

    def _replace(self, tokens=None, vectors=None) -> "Sequence":
        return Sequence(
            self.layout,
            self.tokens if tokens is None else tokens,
            self.vectors if vectors is None else vectors,
            self.cond_tokens,
            self.cond_vectors,
        )


def replace_element(seq: Sequence, i: int, value) -> Sequence:
    """Return a copy of ``seq`` with position ``i`` set to ``value``.

    Conditioned scalars inside a partially conditioned vector keep their old
    values; a fully conditioned element cannot be replaced.
    """
    lay = seq.layout
    if seq.is_conditioned(i):
        raise ConditioningError(f"position {i} is held fixed by conditioning")
    if lay.is_discrete(i):
        if isinstance(value, (np.ndarray, list, tuple)) or isinstance(value, float):
            raise LayoutError(f"position {i} expects a token id")
        value = int(value)
        if not 0 <= value < lay.vocab_size:
            raise LayoutError(f"token {value} outside the vocabulary")
        tokens = seq.tokens.copy()
        tokens[i] = value
        return seq._replace(tokens=tokens)
    j = lay.vector_index(i)
    if np.ndim(value) == 0:
        raise LayoutError(f"position {i} expects a vector of dim {lay.dims[j]}")
    value = np.asarray(value, dtype=np.float64).reshape(-1)
    if value.shape != (lay.dims[j],):
        raise LayoutError(f"position {i} expects dim {lay.dims[j]}, got {value.shape[0]}")
    keep = seq.cond_vectors[j]
    new = np.where(keep, seq.vectors[j], value)
    vectors = list(seq.vectors)
    vectors[j] = new
    return seq._replace(vectors=tuple(vectors))


def masked_view(seq: Sequence, i: int, strict: bool = True) -> Sequence:
    """Copy of ``seq`` with the token at discrete position ``i`` set to the mask id.

    In strict mode an input that already carries a mask token is rejected.
    """
    lay = seq.layout
    if lay.n_discrete == 0:
        raise LayoutError("layout has no discrete positions")
    if not lay.is_discrete(i):
        raise LayoutError(f"position {i} is continuous")
    if strict and seq.has_mask_token():
        raise LayoutError("input already contains a mask token")
    tokens = seq.tokens.copy()
    tokens[i] = lay.mask_token_id
    return seq._replace(tokens=tokens)


@dataclass(eq=False)
class SequenceBatch:
    """``N`` sequences of one layout stored as stacked arrays.

    ``tokens`` is ``(N, n_discrete)``; ``vectors[j]`` is ``(N, dims[j])``;
    the conditioning masks mirror those shapes.  Batches are treated as
    values by the samplers (each step returns a new batch).
    """

    layout: ElementLayout
    tokens: np.ndarray
    vectors: list[np.ndarray]
    cond_tokens: np.ndarray = None
    cond_vectors: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        lay = self.layout
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape[1] != lay.n_discrete:
            raise LayoutError(f"tokens must be (N, {lay.n_discrete}), got {self.tokens.shape}")
        n = self.tokens.shape[0]
        if n == 0:
            raise LayoutError("a batch must be non-empty")
        if len(self.vectors) != lay.n_continuous:
            raise LayoutError(f"expected {lay.n_continuous} vector blocks")
        self.vectors = [np.asarray(v, dtype=np.float64) for v in self.vectors]
        for v, d in zip(self.vectors, lay.dims):
            if v.shape != (n, d):
                raise LayoutError(f"vector block {v.shape} does not match ({n}, {d})")
        if self.cond_tokens is None:
            self.cond_tokens = np.zeros_like(self.tokens, dtype=bool)
        self.cond_tokens = np.asarray(self.cond_tokens, dtype=bool)
        if self.cond_tokens.shape != self.tokens.shape:
            raise LayoutError("cond_tokens shape mismatch")
        if self.cond_vectors is None:
            self.cond_vectors = [np.zeros((n, d), dtype=bool) for d in lay.dims]
        self.cond_vectors = [np.asarray(m, dtype=bool) for m in self.cond_vectors]
        if [m.shape for m in self.cond_vectors] != [v.shape for v in self.vectors]:
            raise LayoutError("cond_vectors shape mismatch")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def __getitem__(self, n: int) -> Sequence:
        return Sequence(
            self.layout,
            self.tokens[n],
            tuple(v[n] for v in self.vectors),
            self.cond_tokens[n],
            tuple(m[n] for m in self.cond_vectors),
        )

    def __iter__(self) -> Iterator[Sequence]:
        for n in range(len(self)):
            yield self[n]

    @classmethod
    def from_sequences(cls, seqs: Iterable[Sequence]) -> "SequenceBatch":
        seqs = list(seqs)
        if not seqs:
            raise LayoutError("a batch must be non-empty")
        lay = seqs[0].layout
        if any(s.layout != lay for s in seqs):
            raise LayoutError("all sequences in a batch must share one layout")
        return cls(
            lay,
            np.stack([s.tokens for s in seqs]).reshape(len(seqs), lay.n_discrete),
            [np.stack([s.vectors[j] for s in seqs]) for j in range(lay.n_continuous)],
            np.stack([s.cond_tokens for s in seqs]).reshape(len(seqs), lay.n_discrete),
            [np.stack([s.cond_vectors[j] for s in seqs]) for j in range(lay.n_continuous)],
        )

    @classmethod
    def repeat(cls, seq: Sequence, n: int) -> "SequenceBatch":
        """``n`` copies of one sequence (e.g. a conditioning template)."""
        lay = seq.layout
        return cls(
            lay,
            np.repeat(seq.tokens[None], n, axis=0),
            [np.repeat(v[None], n, axis=0) for v in seq.vectors],
            np.repeat(seq.cond_tokens[None], n, axis=0),
            [np.repeat(m[None], n, axis=0) for m in seq.cond_vectors],
        )

    def copy(self) -> "SequenceBatch":
        return SequenceBatch(
            self.layout,
            self.tokens.copy(),
            [v.copy() for v in self.vectors],
            self.cond_tokens.copy(),
            [m.copy() for m in self.cond_vectors],
        )

    def select(self, rows) -> "SequenceBatch":
        return SequenceBatch(
            self.layout,
            self.tokens[rows],
            [v[rows] for v in self.vectors],
            self.cond_tokens[rows],
            [m[rows] for m in self.cond_vectors],
        )

    def position_conditioned(self, i: int) -> np.ndarray:
        """Per-row flag: element ``i`` fully held fixed."""
        if self.layout.is_discrete(i):
            return self.cond_tokens[:, i].copy()
        return self.cond_vectors[self.layout.vector_index(i)].all(axis=1)

    def equals(self, other: "SequenceBatch") -> bool:
        """Bit-level equality of contents (masks included)."""
        return (
            self.layout == other.layout
            and np.array_equal(self.tokens, other.tokens)
            and all(np.array_equal(a, b) for a, b in zip(self.vectors, other.vectors))
            and np.array_equal(self.cond_tokens, other.cond_tokens)
            and all(np.array_equal(a, b) for a, b in zip(self.cond_vectors, other.cond_vectors))
        )
