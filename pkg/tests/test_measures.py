import json

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from conftest import P, Q, random_state
from qtraj.engine import TrajectoryConfig, sample_trajectory
from qtraj.errors import InsufficientPoints, SizeLimit
from qtraj.measures import (
    DiscreteMeasure,
    cesaro_pushforward,
    empirical_measure,
    exact_pushforward,
    fit_lambda,
    merge_atoms,
    wasserstein1,
)
from qtraj.model import KrausFamily, ProjectiveState, pairwise_distance

E_A = ProjectiveState.basis(2, 0)
E_B = ProjectiveState.basis(2, 1)
E_PLUS = ProjectiveState(np.array([1, 1]) / np.sqrt(2))


def _assignment_w1(xs, cx, ys, cy):
    """Oracle: replicate atoms by integer counts and solve the assignment problem."""
    a = np.repeat(np.stack(xs), cx, axis=0)
    b = np.repeat(np.stack(ys), cy, axis=0)
    assert a.shape[0] == b.shape[0]
    cost = pairwise_distance(a, b)
    r, c = linear_sum_assignment(cost)
    return cost[r, c].sum() / a.shape[0]


def test_w1_examples():
    ea = DiscreteMeasure.dirac(E_A)
    eb = DiscreteMeasure.dirac(E_B)
    assert wasserstein1(ea, eb) == pytest.approx(1.0)
    assert wasserstein1(ea, ea) == pytest.approx(0.0, abs=1e-15)
    half = DiscreteMeasure.from_atoms([E_A, E_B], [0.5, 0.5])
    inv = DiscreteMeasure.from_atoms([E_A, E_B], [P, Q])
    # move 0.2 of mass from e_a to e_b at distance 1
    assert wasserstein1(half, inv) == pytest.approx(0.2, abs=1e-12)
    assert wasserstein1(DiscreteMeasure.dirac(E_PLUS), inv) == pytest.approx(1 / np.sqrt(2), abs=1e-12)


def test_w1_matches_assignment_oracle(rng):
    for _ in range(15):
        nx, ny = rng.integers(1, 6, size=2)
        xs = [random_state(rng, 2) for _ in range(nx)]
        ys = [random_state(rng, 2) for _ in range(ny)]
        # rational weights with a common denominator of 12
        cx = rng.multinomial(12 - nx, np.ones(nx) / nx) + 1
        cy = rng.multinomial(12 - ny, np.ones(ny) / ny) + 1
        mu = DiscreteMeasure.from_atoms(xs, cx / 12)
        nu = DiscreteMeasure.from_atoms(ys, cy / 12)
        assert wasserstein1(mu, nu) == pytest.approx(_assignment_w1(xs, cx, ys, cy), abs=1e-9)


def test_w1_metric_axioms(rng):
    def rand_measure(k):
        return DiscreteMeasure.from_atoms([random_state(rng, 3) for _ in range(k)], rng.dirichlet(np.ones(k)))

    for _ in range(10):
        a, b, c = rand_measure(4), rand_measure(5), rand_measure(3)
        ab, bc, ac = wasserstein1(a, b), wasserstein1(b, c), wasserstein1(a, c)
        assert ac <= ab + bc + 1e-9
        assert ab == pytest.approx(wasserstein1(b, a), abs=1e-9)
        assert 0 <= ab <= 1 + 1e-12


def test_w1_size_limit(rng):
    big = DiscreteMeasure.from_atoms([random_state(rng, 2) for _ in range(30)])
    with pytest.raises(SizeLimit):
        wasserstein1(big, DiscreteMeasure.dirac(E_A), max_atoms=20)


def test_w1_dimension_mismatch():
    with pytest.raises(ValueError):
        wasserstein1(DiscreteMeasure.dirac(E_A), DiscreteMeasure.dirac(ProjectiveState.basis(3, 0)))


def test_measure_validation():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.stack([E_A.vector, E_B.vector]), np.array([0.5, 0.6]))


def test_merge_atoms_phase_and_rounding():
    v = E_PLUS.vector
    m = merge_atoms(np.stack([v, np.exp(0.9j) * v, v + 1e-12]), np.array([1.0, 1.0, 2.0]))
    assert m.size == 1 and m.weights[0] == pytest.approx(1.0)


def test_measure_json_round_trip(rng):
    mu = DiscreteMeasure.from_atoms([random_state(rng, 2) for _ in range(3)], [0.2, 0.3, 0.5])
    back = DiscreteMeasure.from_dict(json.loads(mu.to_json()))
    # states are renormalized on load, which may move the last bit
    assert np.allclose(back.states, mu.states, rtol=0, atol=1e-15)
    assert np.array_equal(back.weights, mu.weights)


def test_empirical_measure_examples(ks_family):
    ident = KrausFamily.from_matrices([np.eye(2)])
    path = sample_trajectory(TrajectoryConfig(ident, E_PLUS, 40, 0))
    emp = empirical_measure(path)
    assert emp.size == 1 and emp.states[0] == pytest.approx(E_PLUS.vector)
    ks_path = sample_trajectory(TrajectoryConfig(ks_family, E_A, 30, 1))
    last = empirical_measure(ks_path, burn_in=30)
    assert last.size == 1 and ProjectiveState(last.states[0]) == ks_path.state(30)
    with pytest.raises(ValueError):
        empirical_measure(ks_path, burn_in=31)


def test_empirical_measure_keep_switch_mass(ks_family):
    path = sample_trajectory(TrajectoryConfig(ks_family, E_A, 20_000, 2))
    emp = empirical_measure(path, burn_in=100)
    assert emp.size == 2
    assert abs(emp.mass_near(E_A, 1e-6) - P) < 0.02


def test_exact_pushforward_keep_switch(ks_family):
    nu = DiscreteMeasure.dirac(E_A)
    one = exact_pushforward(ks_family, nu, 1)
    assert one.mass_near(E_A, 1e-9) == pytest.approx(P)
    # from any atom, one step already lands on nu_inv
    for n in (2, 5):
        out = exact_pushforward(ks_family, nu, n)
        assert out.size == 2 and out.mass_near(E_A, 1e-9) == pytest.approx(P)


def test_cesaro_pushforward_n_zero(rand_family):
    nu = DiscreteMeasure.from_atoms([E_A, E_PLUS], [0.4, 0.6])
    out = cesaro_pushforward(rand_family, nu, 1, 0, 2000, 3)
    assert wasserstein1(out, nu) <= 3 / np.sqrt(2000)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_cesaro_pushforward_matches_exact(rand_family, n):
    R = 4000
    nu = DiscreteMeasure.dirac(E_PLUS)
    mc = cesaro_pushforward(rand_family, nu, 1, n, R, 5)
    exact = exact_pushforward(rand_family, nu, n)
    assert exact.size == 2**n
    assert wasserstein1(mc, exact) <= 3 / np.sqrt(R)


def test_cesaro_pushforward_period_two():
    cyc = KrausFamily.from_matrices([np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, 0.0]])])
    nu = DiscreteMeasure.dirac(E_A)
    out = cesaro_pushforward(cyc, nu, 2, 3, 50, 0)
    # average of the two phases of the cycle
    assert out.mass_near(E_A, 1e-9) == pytest.approx(0.5)
    assert out.mass_near(E_B, 1e-9) == pytest.approx(0.5)


def test_keep_switch_from_plus_n10_against_exact(ks, ks_family):
    R = 10_000
    nu = DiscreteMeasure.dirac(E_PLUS)
    mc = cesaro_pushforward(ks_family, nu, 1, 10, R, 11)
    exact = exact_pushforward(ks_family, nu, 10)
    assert wasserstein1(mc, exact) <= 3 / np.sqrt(R) * 2
    target = DiscreteMeasure.from_atoms(*ks.invariant_atoms)
    # the exact distance to nu_inv at n=10, from the geometric tail of the lattice
    assert wasserstein1(exact, target) == pytest.approx(0.2388, abs=5e-4)


def test_fit_lambda_keep_switch(ks, ks_family):
    target = DiscreteMeasure.from_atoms(*ks.invariant_atoms)
    fit = fit_lambda(ks_family, DiscreteMeasure.dirac(E_PLUS), 1, [5, 10, 15, 20, 25, 30], 4000, 0, target=target)
    assert fit.decays
    assert 0 < fit.lambda_hat < 1
    assert fit.slope_ci[0] <= fit.slope <= fit.slope_ci[1]
    assert len(fit.w1_stderr) == 6 and all(s >= 0 for s in fit.w1_stderr)


def test_fit_lambda_identity_has_no_decay():
    ident = KrausFamily.from_matrices([np.eye(2)])
    nu = DiscreteMeasure.from_atoms([E_A, E_B], [0.5, 0.5])
    target = DiscreteMeasure.dirac(E_PLUS)
    fit = fit_lambda(ident, nu, 1, [1, 5, 10, 20], 500, 0, target=target)
    assert abs(fit.slope) < 1e-6
    assert not fit.decays


def test_fit_lambda_needs_two_points(ks_family):
    with pytest.raises(InsufficientPoints):
        fit_lambda(ks_family, DiscreteMeasure.dirac(E_PLUS), 1, [10], 100)


def test_fit_lambda_all_below_floor(ks, ks_family):
    target = DiscreteMeasure.from_atoms(*ks.invariant_atoms)
    with pytest.raises(InsufficientPoints):
        fit_lambda(ks_family, DiscreteMeasure.dirac(E_A), 1, [3, 4, 5], 400, 0, target=target)


def test_fit_lambda_csv(tmp_path, ks, ks_family):
    target = DiscreteMeasure.from_atoms(*ks.invariant_atoms)
    fit = fit_lambda(ks_family, DiscreteMeasure.dirac(E_PLUS), 1, [5, 10, 20], 1000, 0, target=target)
    f = tmp_path / "decay.csv"
    fit.write_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "n,W1,stderr" and len(lines) == 4
