import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcadmm import (BalanceClique, LossKind, PairwisePotts, PrecomputedSpec, ProblemInstance,
                    SolverConfig, SolverState, UnaryClamp, build_kernel, eval_augmented_lagrangian,
                    eval_total_energy)
from dcadmm.core import eval_loss, eval_regularizer

from helpers import LOSSES, random_problem, random_spd


def identity_instance(n, k, loss="hinge", terms=(), nu=0.05):
    return ProblemInstance(build_kernel(None, PrecomputedSpec(np.eye(n))), k, loss, list(terms),
                           nu=nu)


# -- energy terms -------------------------------------------------------------

def test_potts_equal_labels_cost_nothing():
    inst = identity_instance(2, 3, terms=[PairwisePotts(0, 1, 2.5)])
    assert eval_total_energy(inst, [1, 1]) == 0.0


def test_potts_cut_costs_weight():
    inst = identity_instance(2, 3, terms=[PairwisePotts(0, 1, 2.5)])
    assert eval_total_energy(inst, [0, 2]) == 2.5


def test_balance_clique_violation_is_infinite():
    inst = identity_instance(4, 2, terms=[BalanceClique((0, 1, 2, 3), (1, 1), (3, 3))])
    assert eval_total_energy(inst, [0, 0, 0, 0]) == math.inf
    assert eval_total_energy(inst, [0, 1, 0, 0]) == 0.0


def test_clamp_violation_is_infinite():
    inst = identity_instance(3, 2, terms=[UnaryClamp(1, 1)])
    assert eval_total_energy(inst, [0, 0, 0]) == math.inf
    assert eval_total_energy(inst, [0, 1, 0]) == 0.0


@pytest.mark.parametrize("make", [
    lambda: PairwisePotts(0, 0, 1.0),
    lambda: PairwisePotts(0, 1, -1.0),
    lambda: BalanceClique((0, 0), (0, 0), (2, 2)),
    lambda: BalanceClique((0, 1), (2, 2), (2, 2)),
    lambda: identity_instance(3, 2, terms=[UnaryClamp(0, 0), UnaryClamp(0, 1)]),
    lambda: identity_instance(3, 2, terms=[UnaryClamp(5, 0)]),
])
def test_invalid_terms_rejected(make):
    with pytest.raises(ValueError):
        make()


def test_label_out_of_range_rejected():
    inst = identity_instance(2, 2)
    with pytest.raises(ValueError):
        eval_total_energy(inst, [0, 2])


@given(st.integers(0, 10_000))
def test_energy_invariant_under_term_order(seed):
    inst, truth = random_problem(seed, potts=True, clamps=True)
    rng = np.random.default_rng(seed)
    shuffled = list(inst.energies)
    rng.shuffle(shuffled)
    other = ProblemInstance(inst.kernel, inst.n_labels, inst.loss, shuffled, nu=inst.nu)
    for y in (truth, rng.integers(0, inst.n_labels, inst.n_vertices)):
        assert eval_total_energy(inst, y) == eval_total_energy(other, y)


# -- losses -------------------------------------------------------------------

def test_hinge_all_margins_met():
    assert eval_loss("hinge", 0, [2.0, -2.0]) == 0.0


def test_crammer_singer_at_zero():
    assert eval_loss("crammer_singer", 0, [0.0, 0.0]) == 1.0


def test_softmax_uniform():
    assert eval_loss("softmax", 0, [0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-12)


def test_hinge_at_zero_counts_every_label():
    assert eval_loss("hinge", 1, [0.0, 0.0, 0.0]) == 3.0


@pytest.mark.parametrize("loss", LOSSES)
@given(arrays(np.float64, st.integers(2, 5), elements=st.floats(-50, 50)), st.data())
def test_losses_nonnegative(loss, beta, data):
    y = data.draw(st.integers(0, len(beta) - 1))
    assert eval_loss(loss, y, beta) >= 0.0


@given(arrays(np.float64, st.integers(2, 5), elements=st.floats(-1e4, 1e4)))
def test_softmax_finite_for_large_scores(beta):
    value = eval_loss(LossKind.SOFTMAX, 0, beta)
    assert math.isfinite(value)
    ref = np.logaddexp.reduce(beta) - beta[0]
    assert value == pytest.approx(ref, rel=1e-12, abs=1e-9)


def test_loss_aliases():
    assert LossKind.parse("OneVsAllHinge") is LossKind.HINGE
    assert LossKind.parse("CrammerSinger") is LossKind.CRAMMER_SINGER
    with pytest.raises(ValueError):
        LossKind.parse("squared")


# -- regularizer and Lagrangian ----------------------------------------------

def test_regularizer_identity_trace():
    inst = identity_instance(2, 2, nu=1.0)
    assert eval_regularizer(inst, np.eye(2)) == 2.0


def test_regularizer_identity_kernel_is_scaled_frobenius():
    inst = identity_instance(5, 3, nu=0.05)
    a = np.random.default_rng(0).normal(size=(5, 3))
    assert eval_regularizer(inst, a) == pytest.approx(0.05 * np.sum(a * a), rel=1e-12)


def test_regularizer_matches_dense_product():
    rng = np.random.default_rng(1)
    k = random_spd(rng, 4)
    a = rng.normal(size=(4, 3))
    inst = ProblemInstance(build_kernel(None, PrecomputedSpec(k)), 3, "hinge", nu=0.3)
    assert eval_regularizer(inst, a) == pytest.approx(0.3 * np.trace(a.T @ k @ a), abs=1e-12)


def test_lagrangian_at_origin():
    inst = identity_instance(1, 2)
    state = SolverState(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), np.array([0]), 1.0)
    assert eval_augmented_lagrangian(inst, state) == 2.0


def _straight_line_lagrangian(inst, st_):
    # independent evaluator: explicit loops, dense kernel
    K = inst.kernel.to_dense()
    n, k = st_.alpha.shape
    total = 0.0
    for i in range(n):
        b = st_.beta[i]
        y = st_.y[i]
        if inst.loss is LossKind.HINGE:
            total += sum(max(0.0, 1.0 - (b[j] if j == y else -b[j])) for j in range(k))
        elif inst.loss is LossKind.CRAMMER_SINGER:
            total += max(b[j] + (0.0 if j == y else 1.0) for j in range(k)) - b[y]
        else:
            total += math.log(sum(math.exp(b[j]) for j in range(k))) - b[y]
    total += inst.nu * sum(st_.alpha[:, c] @ K @ st_.alpha[:, c] for c in range(k))
    total += eval_total_energy(inst, st_.y)
    r = K @ st_.alpha - st_.beta
    total += float(np.sum(st_.lam * r)) + 0.5 * st_.rho * float(np.sum(r * r))
    return total


@given(st.integers(0, 10_000))
def test_lagrangian_matches_straight_line_evaluator(seed):
    inst, truth = random_problem(seed, potts=True)
    rng = np.random.default_rng(seed)
    n, k = inst.n_vertices, inst.n_labels
    st_ = SolverState(rng.normal(size=(n, k)), rng.normal(size=(n, k)), rng.normal(size=(n, k)),
                      truth, float(rng.uniform(0.01, 10)))
    assert eval_augmented_lagrangian(inst, st_) == pytest.approx(
        _straight_line_lagrangian(inst, st_), rel=1e-10, abs=1e-10)


@given(st.integers(0, 10_000))
def test_lagrangian_at_feasible_point_ignores_multiplier(seed):
    inst, truth = random_problem(seed)
    rng = np.random.default_rng(seed)
    alpha = rng.normal(size=(inst.n_vertices, inst.n_labels))
    beta = inst.kernel.matvec(alpha)
    values = []
    for _ in range(2):
        lam = rng.normal(scale=10, size=alpha.shape)
        values.append(eval_augmented_lagrangian(
            inst, SolverState(alpha, beta, lam, truth, 3.0)))
    assert values[0] == values[1]
    from dcadmm.core import loss_rows
    direct = (loss_rows(inst.loss, truth, beta).sum() + eval_regularizer(inst, alpha)
              + eval_total_energy(inst, truth))
    assert values[0] == pytest.approx(direct, rel=1e-12)


# -- configuration ------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [{"rho0": 0}, {"tau": 1.0}, {"delta": -1e-3},
                                    {"gamma": -0.1}, {"rho_max_override": 0.0},
                                    {"cg_tol": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_negative_nu_rejected():
    with pytest.raises(ValueError):
        identity_instance(2, 2, nu=-1.0)


def test_crammer_singer_exactly_zero_past_margin():
    beta = np.array([-1.0, 7.90661075e-292])
    assert eval_loss(LossKind.CRAMMER_SINGER, 1, beta) == 0.0
