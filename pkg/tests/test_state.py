import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igd.state import (
    ConditioningError,
    ElementLayout,
    LayoutError,
    Sequence,
    SequenceBatch,
    masked_view,
    replace_element,
)

LAY = ElementLayout(2, (1,), 2)


def seq(tokens=(0, 1), vec=(0.0,), cond_tokens=None, cond_vectors=None):
    return Sequence(LAY, np.array(tokens), (np.array(vec),), cond_tokens, cond_vectors)


def test_layout_defaults():
    assert LAY.length == 3
    assert LAY.n_continuous == 1
    assert LAY.mask_token_id == 2 and LAY.phi_token_id == 3
    assert LAY.is_discrete(1) and not LAY.is_discrete(2)
    assert LAY.vector_index(2) == 0


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_discrete=0, dims=(), vocab_size=2),
        dict(n_discrete=1, dims=(0,), vocab_size=2),
        dict(n_discrete=1, dims=(), vocab_size=1),
        dict(n_discrete=1, dims=(), vocab_size=2, pad_token_id=2),
        dict(n_discrete=1, dims=(), vocab_size=2, mask_token_id=1),
        dict(n_discrete=1, dims=(), vocab_size=2, mask_token_id=3, phi_token_id=3),
    ],
)
def test_layout_invalid(kwargs):
    with pytest.raises(LayoutError):
        ElementLayout(**kwargs)


def test_layout_dict_roundtrip():
    assert ElementLayout.from_dict(LAY.to_dict()) == LAY


def test_sequence_shape_checks():
    with pytest.raises(LayoutError):
        Sequence(LAY, np.array([0]), (np.array([0.0]),))
    with pytest.raises(LayoutError):
        Sequence(LAY, np.array([0, 5]), (np.array([0.0]),))
    with pytest.raises(LayoutError):
        Sequence(LAY, np.array([0, 1]), (np.array([0.0, 1.0]),))


def test_replace_token():
    out = replace_element(seq(), 0, 1)
    np.testing.assert_array_equal(out.tokens, [1, 1])
    np.testing.assert_array_equal(out.vectors[0], [0.0])


def test_replace_vector():
    out = replace_element(seq(), 2, [2.5])
    np.testing.assert_array_equal(out.vectors[0], [2.5])
    np.testing.assert_array_equal(out.tokens, [0, 1])


def test_replace_conditioned_raises():
    s = seq(cond_tokens=[True, False])
    with pytest.raises(ConditioningError):
        replace_element(s, 0, 1)


def test_replace_kind_mismatch():
    with pytest.raises(LayoutError):
        replace_element(seq(), 0, [1.0])
    with pytest.raises(LayoutError):
        replace_element(seq(), 2, 1)


def test_replace_partially_conditioned_vector_keeps_fixed_scalars():
    lay = ElementLayout(0, (2,), 2)
    s = Sequence(lay, np.zeros(0, dtype=int), (np.array([1.0, 2.0]),), None, (np.array([True, False]),))
    out = replace_element(s, 0, [5.0, 6.0])
    np.testing.assert_array_equal(out.vectors[0], [1.0, 6.0])


def test_sequences_are_immutable():
    s = seq()
    with pytest.raises(ValueError):
        s.tokens[0] = 1


def test_masked_view():
    s = seq()
    m = masked_view(s, 1)
    np.testing.assert_array_equal(m.tokens, [0, LAY.mask_token_id])
    np.testing.assert_array_equal(s.tokens, [0, 1])


def test_masked_view_strict_rejects_existing_mask():
    m = masked_view(seq(), 0)
    with pytest.raises(LayoutError):
        masked_view(m, 1)
    out = masked_view(m, 1, strict=False)
    assert (out.tokens == LAY.mask_token_id).all()


def test_masked_view_errors():
    with pytest.raises(LayoutError):
        masked_view(seq(), 2)
    lay = ElementLayout(0, (1,), 2)
    s = Sequence(lay, np.zeros(0, dtype=int), (np.array([0.0]),))
    with pytest.raises(LayoutError):
        masked_view(s, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1), st.integers(0, 1), st.floats(-5, 5))
def test_replace_commutes_at_distinct_positions(a, b, x):
    s = seq()
    one = replace_element(replace_element(replace_element(s, 0, a), 1, b), 2, [x])
    two = replace_element(replace_element(replace_element(s, 2, [x]), 1, b), 0, a)
    assert one == two
    assert replace_element(one, 0, a) == one


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1), st.integers(0, 1))
def test_mask_then_fill_has_no_mask(i, tok):
    out = replace_element(masked_view(seq(), i), i, tok)
    assert not out.has_mask_token()


def test_batch_roundtrip():
    seqs = [seq((0, 1), (0.5,)), seq((1, 1), (-1.0,))]
    b = SequenceBatch.from_sequences(seqs)
    assert len(b) == 2
    assert b[1] == seqs[1]
    assert list(b) == seqs
    c = b.copy()
    c.tokens[0, 0] = 1
    assert b.tokens[0, 0] == 0
    assert b.select([1]).equals(SequenceBatch.from_sequences([seqs[1]]))
    r = SequenceBatch.repeat(seqs[0], 3)
    assert len(r) == 3 and r[2] == seqs[0]
