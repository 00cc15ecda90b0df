import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcadmm import PrecomputedSpec, ProblemInstance, build_kernel, build_lookup_table
from dcadmm.core import loss_rows
from dcadmm.prox import (kkt_residual, project_simplex_fixing, prox_batch, prox_objective,
                         prox_oracle, prox_oracle_batch, prox_step)

from helpers import LOSSES, random_problem

# root of sigmoid(2b) = 1 - b, from an independent bracketing solve
SOFTMAX_ZERO_TARGET_ROOT = 0.3374158071711997


def test_hinge_margins_met():
    beta, value = prox_step("hinge", 0, [2.0, -2.0], 1.0)
    assert np.allclose(beta, [2.0, -2.0]) and value == 0.0


def test_hinge_zero_target():
    beta, value = prox_step("hinge", 0, [0.0, 0.0], 1.0)
    assert np.allclose(beta, [1.0, -1.0], atol=1e-12)
    assert value == pytest.approx(1.0, abs=1e-12)


def test_hinge_interior_branch():
    beta, value = prox_step("hinge", 0, [-3.0, 0.0], 1.0)
    assert np.allclose(beta, [-2.0, -1.0], atol=1e-12)
    assert value == pytest.approx(4.0, abs=1e-12)


def test_softmax_zero_target():
    beta, _ = prox_step("softmax", 0, [0.0, 0.0], 1.0)
    assert beta[0] == pytest.approx(SOFTMAX_ZERO_TARGET_ROOT, abs=1e-10)
    assert beta[1] == pytest.approx(-SOFTMAX_ZERO_TARGET_ROOT, abs=1e-10)


def test_crammer_singer_slack_margin():
    beta, value = prox_step("crammer_singer", 0, [5.0, 0.0, 0.0], 1.0)
    assert np.allclose(beta, [5.0, 0.0, 0.0]) and value == 0.0


def test_hinge_kink_agrees_with_oracle():
    beta, value = prox_step("hinge", 0, [1.0, -1.0], 1.0)
    _, ref = prox_oracle("hinge", 0, [1.0, -1.0], 1.0)
    assert value == pytest.approx(ref, abs=1e-6)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_rho_must_be_positive():
    with pytest.raises(ValueError):
        prox_step("hinge", 0, [0.0, 0.0], 0.0)


@pytest.mark.parametrize("loss", LOSSES)
def test_randomized_oracle_agreement(loss):
    rng = np.random.default_rng(11)
    for k in (2, 4):
        m = 25
        labels = rng.integers(0, k, m)
        targets = rng.normal(scale=3, size=(m, k))
        rho = 10 ** rng.uniform(-2, 2, m)
        values = np.array([prox_step(loss, labels[i], targets[i], rho[i])[1] for i in range(m)])
        _, ref = prox_oracle_batch(loss, labels, targets, rho, iterations=20_000)
        assert np.max(np.abs(values - ref)) <= 1e-6


@pytest.mark.parametrize("loss", LOSSES)
@given(seed=st.integers(0, 10_000))
def test_prox_minimizer_locally_optimal(loss, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    y = int(rng.integers(0, k))
    t = rng.normal(scale=3, size=k)
    rho = float(10 ** rng.uniform(-2, 2))
    beta, value = prox_step(loss, y, t, rho)
    d = rng.normal(size=(200, k))
    d *= 1e-4 / np.linalg.norm(d, axis=1, keepdims=True)
    trial = prox_objective(loss, np.full(200, y), beta + d, np.tile(t, (200, 1)), rho)
    assert np.all(trial >= value - 1e-12)


@pytest.mark.parametrize("loss", LOSSES)
@given(seed=st.integers(0, 10_000))
def test_prox_nonexpansive(loss, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    y = int(rng.integers(0, k))
    rho = float(10 ** rng.uniform(-1, 1))
    t1, t2 = rng.normal(scale=3, size=(2, k))
    b1, _ = prox_step(loss, y, t1, rho)
    b2, _ = prox_step(loss, y, t2, rho)
    assert np.linalg.norm(b1 - b2) <= np.linalg.norm(t1 - t2) * (1 + 1e-9) + 1e-12


@pytest.mark.parametrize("loss", LOSSES)
@given(seed=st.integers(0, 10_000))
def test_value_nondecreasing_in_rho(loss, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    y = int(rng.integers(0, k))
    t = rng.normal(scale=3, size=k)
    r1 = float(10 ** rng.uniform(-2, 1))
    r2 = r1 * float(rng.uniform(1.01, 10))
    b1, v1 = prox_step(loss, y, t, r1)
    _, v2 = prox_step(loss, y, t, r2)
    if loss_rows(loss, np.array([y]), b1[None])[0] > 0:
        assert v1 <= v2 + 1e-12


@pytest.mark.parametrize("loss", LOSSES)
@given(seed=st.integers(0, 10_000))
def test_prox_satisfies_optimality_condition(loss, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    y = int(rng.integers(0, k))
    t = rng.normal(scale=3, size=k)
    rho = float(10 ** rng.uniform(-2, 2))
    beta, _ = prox_step(loss, y, t, rho)
    assert kkt_residual(loss, y, beta, t, rho) <= 1e-7 * max(1.0, rho)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8))
def test_simplex_projection(values):
    v = np.array(values)[None, :]
    p = project_simplex_fixing(v)[0]
    assert p.min() >= 0 and p.sum() == pytest.approx(1.0, abs=1e-12)
    # projection characterization: <v - p, q - p> <= 0 for every vertex q
    for j in range(len(values)):
        q = np.zeros(len(values))
        q[j] = 1.0
        assert np.dot(v[0] - p, q - p) <= 1e-9


# -- lookup table ---------------------------------------------------------------

def test_table_at_origin_repeats_zero_target_prox():
    inst, _ = random_problem(3, loss="softmax")
    n, k = inst.n_vertices, inst.n_labels
    table = build_lookup_table(inst, np.zeros((n, k)), np.zeros((n, k)), 0.5)
    assert np.all(table.targets == 0.0)
    for c in range(k):
        _, v = prox_step("softmax", c, np.zeros(k), 0.5)
        assert np.allclose(table.u[:, c], v, atol=1e-14)


def test_single_vertex_table_matches_prox_step():
    kernel = build_kernel(None, PrecomputedSpec(np.array([[1.5]])))
    inst = ProblemInstance(kernel, 3, "crammer_singer", nu=0.1)
    alpha = np.array([[0.2, -0.4, 1.0]])
    lam = np.array([[0.1, 0.0, -0.3]])
    table = build_lookup_table(inst, alpha, lam, 2.0)
    target = 1.5 * alpha[0] + lam[0] / 2.0
    for c in range(3):
        b, v = prox_step("crammer_singer", c, target, 2.0)
        assert table.u[0, c] == pytest.approx(v, abs=1e-14)
        assert np.allclose(table.B[0, c], b)


@given(st.integers(0, 10_000))
def test_table_values_recompute_from_minimizers(seed):
    inst, _ = random_problem(seed)
    rng = np.random.default_rng(seed)
    n, k = inst.n_vertices, inst.n_labels
    rho = float(10 ** rng.uniform(-2, 1))
    table = build_lookup_table(inst, rng.normal(size=(n, k)), rng.normal(size=(n, k)), rho)
    for c in range(k):
        labels = np.full(n, c)
        recomputed = prox_objective(inst.loss, labels, table.B[:, c], table.targets, rho)
        assert np.allclose(recomputed, table.u[:, c], rtol=0, atol=1e-10)


@pytest.mark.parametrize("loss", LOSSES)
def test_table_identical_across_thread_counts(loss):
    inst, _ = random_problem(5, n=1200, k=3, loss=loss, cliques=False)
    rng = np.random.default_rng(0)
    a, lam = rng.normal(size=(1200, 3)), rng.normal(size=(1200, 3))
    t1 = build_lookup_table(inst, a, lam, 0.7, threads=1, chunk=100)
    t4 = build_lookup_table(inst, a, lam, 0.7, threads=4, chunk=100)
    assert np.array_equal(t1.u, t4.u) and np.array_equal(t1.B, t4.B)


def test_batch_shape_checked():
    with pytest.raises(ValueError):
        prox_batch("hinge", np.array([0, 1]), np.zeros((3, 2)), 1.0)
