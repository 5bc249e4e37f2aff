import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import P, Q, random_density, random_state
from qtraj.errors import DimensionMismatch, ZeroBranch
from qtraj.model import (
    DensityMatrix,
    KrausFamily,
    ProjectiveState,
    apply_kraus,
    branch_weights,
    channel_apply,
    metric_distance,
    projector_of,
    validate_stochasticity,
    word_product,
)
from qtraj.reference import random_valid_family

E_A = ProjectiveState.basis(2, 0)
E_B = ProjectiveState.basis(2, 1)
E_PLUS = ProjectiveState(np.array([1, 1]) / np.sqrt(2))


def test_keep_switch_is_stochastic(ks_family):
    rep = validate_stochasticity(ks_family)
    assert rep.passed
    assert rep.residual <= 1e-12


def test_identity_family_is_stochastic():
    assert validate_stochasticity(KrausFamily.from_matrices([np.eye(2)])).passed


def test_single_keep_operator_fails_with_residual_q(ks_family):
    rep = validate_stochasticity(KrausFamily.from_matrices([ks_family.operators[0]]))
    assert not rep.passed
    # diag(p, q) - Id = diag(-q, -p): largest entry is q
    assert rep.residual == pytest.approx(Q, abs=1e-12)


def test_mismatched_shapes_rejected():
    with pytest.raises(DimensionMismatch):
        KrausFamily.from_matrices([np.eye(2), np.eye(3)])


def test_apply_swap_to_e_a(ks_family):
    y, w = apply_kraus(ks_family.operators[1], E_A)
    assert y == E_B
    assert w == pytest.approx(Q, abs=1e-15)


def test_apply_identity(rng):
    x = ProjectiveState(random_state(rng, 3))
    y, w = apply_kraus(np.eye(3), x)
    assert y == x and w == pytest.approx(1.0)


def test_apply_keep_to_plus(ks_family):
    _, w = apply_kraus(ks_family.operators[0], E_PLUS)
    assert w == pytest.approx((P + Q) / 2, abs=1e-15)


def test_zero_branch_raises():
    with pytest.raises(ZeroBranch):
        apply_kraus(np.diag([0.0, 1.0]), E_A)


def test_metric_examples(rng):
    assert metric_distance(E_A, E_B) == pytest.approx(1.0)
    assert metric_distance(E_A, E_PLUS) == pytest.approx(1 / np.sqrt(2))
    x = random_state(rng, 3)
    assert metric_distance(ProjectiveState(x), ProjectiveState(np.exp(0.7j) * x)) == pytest.approx(0.0, abs=1e-15)


def test_canonical_phase(rng):
    x = ProjectiveState(np.exp(1.3j) * random_state(rng, 4))
    v = x.vector
    j = int(np.argmax(np.abs(v)))
    assert v[j].imag == 0 and v[j].real > 0
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
    # ties go to the lowest index
    assert ProjectiveState(np.array([1j, 1.0]) / np.sqrt(2)).vector[0] == pytest.approx(1 / np.sqrt(2))


def test_metric_is_projector_operator_norm(rng):
    for _ in range(50):
        x, y = (ProjectiveState(random_state(rng, 3)) for _ in range(2))
        diff = projector_of(x).matrix - projector_of(y).matrix
        assert metric_distance(x, y) == pytest.approx(np.linalg.norm(diff, 2), abs=1e-9)
        assert metric_distance(x, y) == pytest.approx(metric_distance(y, x), abs=1e-15)
        assert 0 <= metric_distance(x, y) <= 1


def test_word_product_examples(ks_family):
    w, s = word_product(ks_family, ())
    assert s == 0 and np.allclose(w, np.eye(2))
    w, s = word_product(ks_family, (2, 2))
    full = w * np.exp(s)
    assert np.allclose(full, np.sqrt(P * Q) * np.eye(2))
    w, s = word_product(ks_family, (1,))
    assert np.allclose(w * np.exp(s), ks_family.operators[0])


def test_word_product_order(ks_family):
    # (1, 2): A_1 applied first, so W = A_2 A_1
    w, s = word_product(ks_family, (1, 2))
    assert np.allclose(w * np.exp(s), ks_family.operators[1] @ ks_family.operators[0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 3), max_size=8), st.lists(st.integers(1, 3), max_size=8), st.integers(0, 99))
def test_word_product_concatenation(w1, w2, seed):
    fam = random_valid_family(2, 3, seed)
    a, sa = word_product(fam, w1)
    b, sb = word_product(fam, w2)
    c, sc = word_product(fam, w1 + w2)
    assert np.allclose(c * np.exp(sc), (b @ a) * np.exp(sa + sb), atol=1e-12)


def test_long_word_does_not_underflow(ks_family):
    w, s = word_product(ks_family, (1,) * 5000)
    assert np.max(np.abs(w)) == pytest.approx(1.0)
    assert s == pytest.approx(5000 * 0.5 * np.log(Q))


def test_channel_examples(ks_family):
    a = 0.8
    out = channel_apply(ks_family, DensityMatrix(np.diag([a, 1 - a])))
    assert np.allclose(out.matrix, np.diag([P, Q]))
    fixed = DensityMatrix(np.diag([P, Q]))
    assert np.allclose(channel_apply(ks_family, fixed).matrix, fixed.matrix)
    ident = KrausFamily.from_matrices([np.eye(2)])
    assert np.allclose(channel_apply(ident, fixed).matrix, fixed.matrix)


def test_channel_preserves_states(rng):
    for seed in range(20):
        fam = random_valid_family(3, 2, seed)
        rho = DensityMatrix(random_density(rng, 3))
        out = channel_apply(fam, rho).matrix
        assert np.trace(out).real == pytest.approx(1.0, abs=1e-10)
        assert np.linalg.eigvalsh(out).min() >= -1e-9


def test_projector_examples(rng):
    assert np.allclose(projector_of(E_A).matrix, np.diag([1, 0]))
    assert np.allclose(projector_of(E_PLUS).matrix, np.full((2, 2), 0.5))
    pi = projector_of(ProjectiveState(random_state(rng, 4))).matrix
    assert np.trace(pi).real == pytest.approx(1.0)
    assert np.allclose(pi @ pi, pi, atol=1e-10)


def test_branch_weights_sum_to_one(rng):
    for seed in range(10):
        fam = random_valid_family(3, 3, seed)
        for _ in range(20):
            assert branch_weights(fam, ProjectiveState(random_state(rng, 3))).sum() == pytest.approx(1.0, abs=1e-9)


def test_json_round_trip_exact(rng):
    fam = random_valid_family(3, 2, 5)
    back = KrausFamily.from_json(fam.to_json())
    assert np.array_equal(back.operators, fam.operators)
    data = json.loads(fam.to_json())
    assert data["dim"] == 3 and len(data["operators"]) == 2
    assert len(data["operators"][0][0][0]) == 2


def test_family_json_rejects_wrong_shape():
    with pytest.raises(DimensionMismatch):
        KrausFamily.from_dict({"dim": 2, "operators": [[[[1, 0]]]]})


def test_density_matrix_validation():
    with pytest.raises(ValueError):
        DensityMatrix(np.diag([1.2, -0.2]))
    with pytest.raises(ValueError):
        DensityMatrix(np.diag([0.5, 0.4]))
