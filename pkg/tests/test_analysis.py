import math

import numpy as np
import pytest

from macura.analysis import (GridSpec, GridStudy, TrueKernelModel, bound_check, bound_constant, controller_policy,
                             grid_study, misalignment)
from macura.dynamics import EnsembleModel
from macura.envs import PendulumParams

PP = PendulumParams()
SMALL = GridSpec(resolution=(12, 9))


class SpreadModel(TrueKernelModel):
    """True kernel with members fanned out in phidot by ``scale * phi**2``."""

    def __init__(self, scale, members=4):
        super().__init__(PP, members)
        self.scale = scale

    def predict(self, states, actions):
        means, variances = super().predict(states, actions)
        states = np.atleast_2d(states)
        offsets = np.linspace(-1, 1, self.members)[:, None] * self.scale * states[None, :, 0] ** 2
        means[:, :, 1] += offsets
        return means, variances


def starts(n=50, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-2, 2, n)])


def test_grid_axes_and_order():
    spec = GridSpec((-1, 1), (-2, 2), (3, 5))
    states = spec.states()
    assert states.shape == (15, 2)
    np.testing.assert_array_equal(states[:5, 0], -1.0)
    np.testing.assert_array_equal(states[:5, 1], [-2, -1, 0, 1, 2])


@pytest.mark.parametrize("kwargs", [dict(phi_range=(-4, 3)), dict(phidot_range=(-16, 17)),
                                    dict(phi_range=(1, 1)), dict(resolution=(0, 5))])
def test_grid_spec_rejects_bad_ranges(kwargs):
    with pytest.raises(ValueError):
        GridSpec(**kwargs)


def test_grid_study_shape_invariant():
    with pytest.raises(ValueError):
        GridStudy(SMALL, np.zeros((12, 9)), np.zeros((9, 12)), np.zeros((12, 9), bool), 1.0)


def test_identical_members_are_certain_everywhere():
    biased = TrueKernelModel(PP, members=5, mean_bias=(0.01, -0.2))
    study = grid_study(biased, controller_policy(), PP, SMALL, kappa=1e-300)
    np.testing.assert_array_equal(study.u_gjs, 0.0)
    assert study.in_E.all()
    assert np.all(study.d > 0)


def test_perfect_model_has_zero_misalignment():
    study = grid_study(TrueKernelModel(PP, members=3), controller_policy(), PP, SMALL, kappa=1.0)
    np.testing.assert_array_equal(study.d, 0.0)


def test_untrained_model_is_rejected():
    model = EnsembleModel(2, 1, ensemble_size=3, hidden_layers=2, hidden_size=8)
    with pytest.raises(RuntimeError):
        grid_study(model, controller_policy(), PP, SMALL, kappa=1.0)


def test_membership_follows_kappa():
    study = grid_study(SpreadModel(0.05), controller_policy(), PP, SMALL, kappa=1.0)
    kappa = float(np.percentile(study.u_gjs, 20))
    again = study.with_kappa(kappa)
    np.testing.assert_array_equal(again.in_E, study.u_gjs < kappa)
    assert 0 < again.in_E.sum() < again.in_E.size
    inside, outside = again.mean_misalignment()
    assert inside < outside
    assert again.spearman() > 0.9


def test_misalignment_single_member_closed_form():
    # one member, 1-D, equal variance: sqrt(2) H with H^2 = 1 - exp(-dmu^2 / (8 var))
    mean = np.array([[[0.3]]])
    var = np.array([[[0.5]]])
    d = misalignment(mean, var, np.array([[0.0]]), np.array([[0.5]]))
    assert d[0] == pytest.approx(math.sqrt(2.0 * (1.0 - math.exp(-0.09 / 4.0))), rel=1e-12)


def test_bound_constant_hand_value():
    # 2 * 2 * 0.1 * (1 + 0.5 * 2 + 0.25 * 3)
    assert bound_constant(2.0, 0.1, 0.5, 2) == pytest.approx(1.1, rel=1e-14)
    assert bound_constant(3.0, 0.2, 0.0, 7) == 2 * 3.0 * 0.2
    assert bound_constant(3.0, 0.2, 0.9, -1) == 0.0


def test_perfect_model_bound():
    rep = bound_check(TrueKernelModel(PP, members=3), controller_policy(), PP, kappa=1.0, gamma=0.9, horizon=15,
                      n_rollouts=400, rng=np.random.default_rng(1), start_states=starts(), spec=SMALL)
    assert rep.delta_p_sup == 0.0 and rep.C == 0.0
    assert rep.gap <= 3 * rep.standard_error
    assert rep.holds
    assert rep.max_stopping_time == 15
    assert rep.r_max > 0 and rep.reward_shift > 0


def test_zero_discount_uses_single_term():
    rep = bound_check(TrueKernelModel(PP, members=3, mean_bias=(0.0, 0.02)), controller_policy(), PP,
                      kappa=math.inf, gamma=0.0, horizon=5, n_rollouts=50, rng=np.random.default_rng(2),
                      start_states=starts(), spec=SMALL)
    assert rep.C == 2.0 * rep.r_max * rep.delta_p_sup
    assert rep.delta_p_sup > 0


def test_corrupted_model_bound_grows_with_horizon():
    corrupt = TrueKernelModel(PP, members=3, mean_bias=(0.0, 0.05))
    reports = [bound_check(corrupt, controller_policy(), PP, math.inf, 0.95, h, 100, np.random.default_rng(3),
                           starts(), spec=SMALL) for h in (2, 5, 10)]
    cs = [r.C for r in reports]
    assert cs[0] < cs[1] < cs[2]
    assert all(r.holds for r in reports)


def test_stopping_times_are_coupled_minimum():
    rep = bound_check(SpreadModel(0.2), controller_policy(), PP, kappa=0.05, gamma=0.9, horizon=20,
                      n_rollouts=200, rng=np.random.default_rng(4), start_states=starts(), spec=SMALL)
    assert np.all(rep.stopping_times <= rep.approx_stopping_times)
    assert np.all(rep.stopping_times >= 0) and np.all(rep.approx_stopping_times <= 20)
    assert rep.C <= rep.C_approx or rep.max_stopping_time == int(rep.approx_stopping_times.max())


def test_no_start_in_set_is_an_error():
    far = np.full((5, 2), [2.5, 0.0])
    with pytest.raises(ValueError, match="start state"):
        bound_check(SpreadModel(1.0), controller_policy(), PP, kappa=1e-3, gamma=0.9, horizon=5, n_rollouts=10,
                    rng=np.random.default_rng(0), start_states=far, spec=SMALL)


def test_visited_states_can_only_raise_the_sup():
    corrupt = SpreadModel(0.05)
    kw = dict(kappa=10.0, gamma=0.9, horizon=5, n_rollouts=20, start_states=starts(), spec=SMALL)
    base = bound_check(corrupt, controller_policy(), PP, rng=np.random.default_rng(5), **kw)
    more = bound_check(corrupt, controller_policy(), PP, rng=np.random.default_rng(5),
                       visited_states=np.array([[2.9, 0.0], [-2.95, 1.0]]), **kw)
    assert more.delta_p_sup >= base.delta_p_sup
    assert more.delta_p_source == "grid+visited"
