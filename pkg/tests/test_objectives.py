import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from p3olab import autodiff as ad
from p3olab.autodiff import Tensor, finite_diff_check
from p3olab.objectives import (
    ObjectiveConfig,
    ObjectiveError,
    clip_space_fraction,
    cpi_objective,
    deon,
    p3o_loss,
    policy_objective,
    ppo_objective,
    precond_factor,
    scopic_objective,
    scopic_terms,
)
from p3olab.policies import Categorical, DiagGaussian, Policy

# mpmath references at 30 digits
SIG2_TIMES_2 = 1.7615941559557649
PRECOND_15_TAU4 = 0.41997434161402607


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# CPI


def test_cpi_examples():
    assert float(cpi_objective(np.ones(3), [2.0, -1.0, 3.0])) == pytest.approx(4 / 3, abs=1e-15)
    assert float(cpi_objective([2.0], [0.5])) == 1.0


def test_cpi_matches_direct_sum():
    rng = np.random.default_rng(0)
    r, a = rng.uniform(0.2, 3.0, 257), rng.normal(size=257)
    ref = sum(float(x) * float(y) for x, y in zip(r, a)) / 257
    assert float(cpi_objective(r, a)) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("fn", [cpi_objective, ppo_objective, scopic_objective])
def test_objectives_reject_bad_input(fn):
    with pytest.raises(ObjectiveError, match="positive"):
        fn([1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ObjectiveError, match="shape"):
        fn([1.0, 1.0], [1.0])
    with pytest.raises(ObjectiveError, match="empty"):
        fn(np.array([]), np.array([]))


# PPO


def test_ppo_examples():
    assert float(ppo_objective([1.5], [1.0], 0.2)) == pytest.approx(1.2, abs=1e-15)
    assert float(ppo_objective([0.5], [-1.0], 0.2)) == pytest.approx(-0.8, abs=1e-15)


def test_ppo_epsilon_range():
    with pytest.raises(ObjectiveError):
        ppo_objective([1.0], [1.0], 1.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0.05, 0.5))
def test_ppo_never_exceeds_cpi(seed, eps):
    rng = np.random.default_rng(seed)
    r, a = np.exp(rng.normal(scale=0.5, size=64)), rng.normal(size=64)
    assert float(ppo_objective(r, a, eps)) <= float(cpi_objective(r, a)) + 1e-12
    inside = rng.uniform(1 - eps, 1 + eps, 64)
    assert float(ppo_objective(inside, a, eps)) == pytest.approx(float(cpi_objective(inside, a)), abs=1e-12)


# Scopic and the preconditioner


def test_scopic_examples():
    assert float(scopic_objective([1.0], [1.0], 2.0)) == 1.0
    assert float(scopic_objective([1.0], [1.0], 4.0)) == 0.5
    assert float(scopic_objective([2.0], [1.0], 2.0)) == pytest.approx(SIG2_TIMES_2, abs=1e-15)


def test_scopic_equals_cpi_on_policy_at_tau_two():
    a = np.random.default_rng(1).normal(size=50)
    assert float(scopic_objective(np.ones(50), a, 2.0)) == pytest.approx(float(cpi_objective(np.ones(50), a)), abs=1e-12)


@pytest.mark.parametrize("tau", [1.0, 2.0, 4.0, 8.0])
def test_scopic_term_range_and_monotonicity(tau):
    r = np.linspace(0.01, 4.0, 400)
    for adv in (0.7, -1.3):
        terms = scopic_terms(r, np.full_like(r, adv), tau).data
        lo, hi = sorted((_sig(-tau) * 4 * adv / tau, 4 * adv / tau))
        assert np.all(terms > lo) and np.all(terms < hi)
        steps = np.diff(terms)
        assert np.all(steps > 0) if adv > 0 else np.all(steps < 0)


@pytest.mark.parametrize("tau", [2.5, 3.0, 4.0, 8.0])
def test_scopic_below_cpi_on_moderate_ratios(tau):
    # the bound is only checked on r in [0.5, 3]; it does not hold near r = 0
    r = np.linspace(0.5, 3.0, 1001)
    assert np.all(scopic_terms(r, np.ones_like(r), tau).data <= r)


def test_scopic_bound_fails_near_zero_ratio():
    assert float(scopic_objective([0.01], [1.0], 4.0)) > 0.01
    # and for tau just above 2 it already fails at r = 0.5
    assert float(scopic_objective([0.5], [1.0], 2.01)) > 0.5


def test_precond_factor_examples():
    for tau in (0.5, 1.0, 4.0, 20.0):
        assert precond_factor(1.0, tau) == 1.0
    assert precond_factor(1.5, 4.0) == pytest.approx(PRECOND_15_TAU4, abs=1e-15)
    assert precond_factor(1e6, 4.0) < 1e-300
    with pytest.raises(ObjectiveError):
        precond_factor(1.0, 0.0)


def test_precond_factor_range():
    r = np.linspace(0.0, 5.0, 5001)
    f = precond_factor(r, 4.0)
    assert np.all(f > 0) and np.all(f <= 1.0)
    assert r[np.argmax(f)] == 1.0


def test_precond_factor_is_ratio_of_gradients():
    rng = np.random.default_rng(3)
    r = Tensor(rng.uniform(0.3, 2.5, 20), requires_grad=True)
    adv = rng.normal(size=20)
    ad.backward(ad.sum_(scopic_terms(r, adv, 4.0)))
    np.testing.assert_allclose(r.grad / adv, precond_factor(r.data, 4.0), rtol=1e-12)


# DEON and clip-space occupancy


def test_deon_examples():
    assert deon([0.9, 1.3, 1.0]) == pytest.approx(0.3, abs=1e-15)
    assert deon(np.ones(10)) == 0.0
    assert deon([0.10001 / 0.00001]) == pytest.approx(10000.0, rel=1e-9)
    with pytest.raises(ObjectiveError):
        deon([])


def test_clip_space_fraction_examples():
    assert clip_space_fraction([1.3, 1.1, 0.7], 0.2) == (1 / 3, 1 / 3)
    assert clip_space_fraction(np.ones(7), 0.2) == (0.0, 0.0)
    with pytest.raises(ObjectiveError):
        clip_space_fraction([], 0.2)


def test_clip_space_fraction_matches_count():
    r = np.exp(np.random.default_rng(4).normal(scale=0.4, size=999))
    above, below = clip_space_fraction(r, 0.2)
    assert above == sum(1 for x in r if x > 1.2) / 999
    assert below == sum(1 for x in r if x < 0.8) / 999


# gradients


@pytest.mark.parametrize("name", ["cpi", "ppo", "scopic"])
def test_objective_gradients_match_finite_differences(name):
    rng = np.random.default_rng(5)
    # ratios kept at least 0.05 from the clip boundaries so finite differences stay on one side
    base = np.array([0.5, 0.7, 0.95, 1.02, 1.1, 1.35, 1.7])
    r = Tensor(base, requires_grad=True)
    adv = rng.normal(size=base.size)
    fns = {
        "cpi": lambda: cpi_objective(r, adv),
        "ppo": lambda: ppo_objective(r, adv, 0.2),
        "scopic": lambda: scopic_objective(r, adv, 4.0),
    }
    assert finite_diff_check(fns[name], r) < 1e-6


def _setup_policy(discrete, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(32, 4))
    if discrete:
        pol = Policy(4, n_actions=3, hidden_sizes=(16,), rng=np.random.default_rng(seed))
    else:
        pol = Policy(4, action_dim=2, hidden_sizes=(16,), rng=np.random.default_rng(seed))
    # widen the output layer so the gradients are not tiny
    pol.net.weights[-1].data *= 50.0
    old = pol.snapshot(obs)
    actions = old.sample(rng)
    old_logp = old.log_prob(actions).data
    adv = rng.normal(size=32)
    return pol, obs, old, actions, old_logp, adv


def _grads(pol, loss):
    ad.zero_grads(pol.params)
    ad.backward(loss)
    return [p.grad.copy() for p in pol.params]


@pytest.mark.parametrize("discrete", [True, False])
@pytest.mark.parametrize("tau", [1.0, 2.0, 4.0, 8.0])
def test_scopic_gradient_equals_cpi_gradient_on_policy(discrete, tau):
    pol, obs, old, actions, old_logp, adv = _setup_policy(discrete, seed=int(tau))
    ratios = lambda: ad.exp(pol.dist(obs).log_prob(actions) - old_logp)
    assert np.all(ratios().data == 1.0)
    g_sc = _grads(pol, scopic_objective(ratios(), adv, tau))
    g_cpi = _grads(pol, cpi_objective(ratios(), adv))
    assert max(np.abs(a - b).max() for a, b in zip(g_sc, g_cpi)) < 1e-8


@pytest.mark.parametrize("discrete", [True, False])
def test_p3o_loss_gradient_on_policy_is_cpi_gradient(discrete):
    pol, obs, old, actions, old_logp, adv = _setup_policy(discrete, seed=7)
    rep = p3o_loss(pol.dist(obs), old, actions, old_logp, adv, ObjectiveConfig("p3o", tau=4.0, beta_kl=1.0))
    g_p3o = _grads(pol, rep.loss)
    g_cpi = _grads(pol, ad.negate(cpi_objective(ad.exp(pol.dist(obs).log_prob(actions) - old_logp), adv)))
    assert max(np.abs(a - b).max() for a, b in zip(g_p3o, g_cpi)) < 1e-8
    assert max(np.abs(g).max() for g in g_cpi) > 1e-3


def test_p3o_loss_value_identity_at_tau_two():
    pol, obs, old, actions, old_logp, adv = _setup_policy(True)
    rep = p3o_loss(pol.dist(obs), old, actions, old_logp, adv, ObjectiveConfig("p3o", tau=2.0, beta_kl=0.0))
    assert rep.loss.item() == pytest.approx(-float(np.mean(adv)), abs=1e-12)
    assert rep.deon == 0.0 and rep.mean_kl == 0.0


def _perturbed_batch(discrete):
    pol, obs, old, actions, old_logp, adv = _setup_policy(discrete, seed=11)
    for p in pol.params:
        p.data = p.data + 0.05 * np.random.default_rng(2).normal(size=p.data.shape)
    return pol, obs, old, actions, old_logp, adv


@pytest.mark.parametrize("discrete", [True, False])
def test_sk_variant_is_exactly_cpi(discrete):
    pol, obs, old, actions, old_logp, adv = _perturbed_batch(discrete)
    rep = p3o_loss(pol.dist(obs), old, actions, old_logp, adv, ObjectiveConfig("p3o_sk"))
    cpi = cpi_objective(ad.exp(pol.dist(obs).log_prob(actions) - old_logp), adv)
    assert rep.loss.item() == -cpi.item()
    assert rep.cpi_value == pytest.approx(cpi.item(), abs=1e-15)


def test_variant_switches():
    pol, obs, old, actions, old_logp, adv = _perturbed_batch(True)
    ratios = ad.exp(pol.dist(obs).log_prob(actions) - old_logp)
    reports = {v: p3o_loss(pol.dist(obs), old, actions, old_logp, adv, ObjectiveConfig(v, tau=4.0, beta_kl=0.5))
               for v in ("cpi", "ppo", "p3o", "p3o_s", "p3o_k", "p3o_sk")}
    kl_term = 0.5 * reports["p3o"].mean_kl
    assert reports["p3o"].mean_kl > 0
    sc = scopic_objective(ratios, adv, 4.0).item()
    cpi = cpi_objective(ratios, adv).item()
    assert reports["p3o"].loss.item() == pytest.approx(-sc + kl_term, abs=1e-12)
    assert reports["p3o_k"].loss.item() == pytest.approx(-sc, abs=1e-12)
    assert reports["p3o_s"].loss.item() == pytest.approx(-cpi + kl_term, abs=1e-12)
    assert reports["p3o_sk"].loss.item() == pytest.approx(-cpi, abs=1e-12)
    assert reports["cpi"].loss.item() == pytest.approx(-cpi, abs=1e-12)
    assert reports["ppo"].loss.item() == pytest.approx(-ppo_objective(ratios, adv, 0.2).item(), abs=1e-12)


def test_beta_s_scales_the_surrogate_term():
    r, a = np.array([0.8, 1.4]), np.array([1.0, -2.0])
    one = policy_objective(ad._wrap(r), a, ObjectiveConfig("p3o_k", beta_s=1.0)).item()
    two = policy_objective(ad._wrap(r), a, ObjectiveConfig("p3o_k", beta_s=2.0)).item()
    assert two == pytest.approx(2 * one, abs=1e-15)


def test_entropy_and_value_terms():
    pol, obs, old, actions, old_logp, adv = _perturbed_batch(True)
    base = p3o_loss(pol.dist(obs), old, actions, old_logp, adv, ObjectiveConfig("p3o_k"))
    cfg = ObjectiveConfig("p3o_k", entropy_coef=0.01, vf_coef=0.5)
    rep = p3o_loss(pol.dist(obs), old, actions, old_logp, adv, cfg, value_loss=Tensor(3.0))
    assert rep.loss.item() == pytest.approx(base.loss.item() - 0.01 * base.mean_entropy + 1.5, abs=1e-12)


def test_report_fields():
    pol, obs, old, actions, old_logp, adv = _perturbed_batch(False)
    rep = p3o_loss(pol.dist(obs), old, actions, old_logp, adv, ObjectiveConfig())
    assert rep.deon == pytest.approx(np.abs(rep.ratios - 1).max())
    assert 0 <= rep.frac_above <= 1 and 0 <= rep.frac_below <= 1 and rep.deon >= 0
    assert (rep.frac_above, rep.frac_below) == clip_space_fraction(rep.ratios, 0.2)


def test_kind_mismatch_is_an_error():
    with pytest.raises(ObjectiveError, match="kind"):
        p3o_loss(Categorical([[0.0, 0.0]]), DiagGaussian([[0.0, 0.0]], [0.0, 0.0]), [0], [0.0], [1.0],
                 ObjectiveConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig("trpo")
    with pytest.raises(ValueError):
        ObjectiveConfig(tau=0.0)
    with pytest.raises(ValueError):
        ObjectiveConfig(beta_kl=-1.0)
    assert ObjectiveConfig("p3o_sk").effective_beta_kl == 0.0 and not ObjectiveConfig("p3o_sk").uses_sigmoid
    assert ObjectiveConfig("p3o_s").effective_beta_kl == 1.0 and not ObjectiveConfig("p3o_s").uses_sigmoid
    assert ObjectiveConfig("p3o_k").effective_beta_kl == 0.0 and ObjectiveConfig("p3o_k").uses_sigmoid
