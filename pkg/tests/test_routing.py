import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentbank import ModelConfig, SteeringPlan, synth_model
from latentbank.errors import ConfigurationError, InvalidArgument
from latentbank.numerics import RotaryOperator
from latentbank.routing import (
    BankSlice, RoutingGains, attend_augmented, attend_baseline, attend_mixture, attend_sidebank, caa_offset,
    contrastive_gates, memory_scores, mixture_slot_biases,
)

ROPE = RotaryOperator(8)


def _bank(rng, m, role="target", d=8, **kw):
    return BankSlice(rng.normal(size=(m, d)), rng.normal(size=(m, d)), role, bank_id=role, **kw)


def _prompt(rng, t, d=8):
    return rng.normal(size=d), rng.normal(size=(t, d)), rng.normal(size=(t, d))


def test_baseline_matches_double_loop(rng):
    for _ in range(20):
        t = int(rng.integers(1, 9))
        q, K, V = _prompt(rng, t)
        scores = [sum(q[i] * K[j, i] for i in range(8)) / math.sqrt(8) for j in range(t)]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        z = sum(w)
        expect = [sum(w[j] / z * V[j, i] for j in range(t)) for i in range(8)]
        np.testing.assert_allclose(attend_baseline(q, K, V), expect, atol=1e-9)


def test_baseline_trivial_cases(rng):
    q, K, V = _prompt(rng, 1)
    assert np.array_equal(attend_baseline(q, K, V), V[0])
    q, K, _ = _prompt(rng, 5)
    v = rng.normal(size=8)
    np.testing.assert_allclose(attend_baseline(q, K, np.tile(v, (5, 1))), v, atol=1e-12)
    with pytest.raises(InvalidArgument):
        attend_baseline(q, np.zeros((0, 8)), np.zeros((0, 8)))
    with pytest.raises(InvalidArgument):
        attend_baseline(q, np.zeros((3, 4)), np.zeros((3, 4)))


def test_augmented_without_banks_is_baseline(rng):
    q, K, V = _prompt(rng, 6)
    out, diag = attend_augmented(q, K, V, [], position=3, rope=ROPE)
    assert np.array_equal(out, attend_baseline(q, K, V))
    assert diag.pi == (1.0,)


def test_augmented_suppressed_banks(rng):
    q, K, V = _prompt(rng, 6)
    banks = [(_bank(rng, 3), -1e6), (_bank(rng, 2, "reference"), -1e6)]
    out, _ = attend_augmented(q, K, V, banks, position=11, rope=ROPE)
    np.testing.assert_allclose(out, attend_baseline(q, K, V), atol=1e-6)


def test_augmented_dimension_mismatch(rng):
    q, K, V = _prompt(rng, 3)
    with pytest.raises(InvalidArgument):
        attend_augmented(q, K, V, [(_bank(rng, 2, d=4), 0.0)], position=0, rope=ROPE)


def test_mixture_vanishing_evidence(rng):
    q, K, V = _prompt(rng, 5)
    # keys along -q_bar score about -1e6
    q_bar = ROPE.unapply(q, 4)
    keys = np.tile(-1e6 * math.sqrt(8) * q_bar / (q_bar @ q_bar), (3, 1))
    bank = BankSlice(keys, rng.normal(size=(3, 8)))
    out, diag = attend_mixture(q, K, V, [bank], RoutingGains(), 0, position=4, rope=ROPE)
    np.testing.assert_allclose(out, attend_baseline(q, K, V), atol=1e-6)
    assert diag.mass("target") < 1e-12


@pytest.mark.parametrize("r", [2, 3, 5])
def test_mixture_duplication_invariance(rng, r):
    q, K, V = _prompt(rng, 4)
    bank = _bank(rng, 3)
    dup = BankSlice(np.repeat(bank.keys, r, axis=0), np.repeat(bank.values, r, axis=0))
    g = RoutingGains(lambda_plus=2.0)
    o1, d1 = attend_mixture(q, K, V, [bank], g, 0, position=7, rope=ROPE)
    o2, d2 = attend_mixture(q, K, V, [dup], g, 0, position=7, rope=ROPE)
    assert abs(d1.beta[1] - d2.beta[1]) < 1e-9
    assert abs(d2.evidence_raw[1] - d1.evidence_raw[1] - math.log(r)) < 1e-9
    np.testing.assert_allclose(o1, o2, atol=1e-9)


def test_mixture_two_bank_toy():
    # prompt of one zero key (beta ln 1); target bank of one key scoring ln 3
    rope = RotaryOperator(4)
    v = np.array([1.0, 2.0, 3.0, 4.0])
    q = np.array([1.0, 0.0, 0.0, 0.0])
    bank = BankSlice(np.array([[2 * math.log(3), 0.0, 0.0, 0.0]]), v[None, :])
    out, diag = attend_mixture(q, np.zeros((1, 4)), v[None, :], [bank], RoutingGains(), 0, position=0, rope=rope)
    np.testing.assert_allclose(diag.beta, [0.0, math.log(3)], atol=1e-12)
    np.testing.assert_allclose(diag.pi, [0.25, 0.75], atol=1e-12)
    np.testing.assert_allclose(out, v, atol=1e-12)


def test_identical_target_and_reference(rng):
    q, K, V = _prompt(rng, 4)
    t = _bank(rng, 3)
    r = BankSlice(t.keys, t.values, "reference", bank_id="r")
    _, diag = attend_mixture(q, K, V, [t, r], RoutingGains(1.0, 1.0, 3.0), 0, position=9, rope=ROPE)
    assert diag.delta == 0.0
    assert diag.g_plus == 0.5 and diag.g_minus == 0.5


def test_gates_without_reference(rng):
    q, K, V = _prompt(rng, 4)
    _, diag = attend_mixture(q, K, V, [_bank(rng, 2)], RoutingGains(lambda_plus=1.0), 0, position=0, rope=ROPE)
    assert (diag.g_plus, diag.g_minus, diag.delta) == (1.0, 0.0, None)
    with pytest.raises(ConfigurationError):
        attend_mixture(q, K, V, [_bank(rng, 2)], RoutingGains(lambda_minus=1.0), 0, position=0, rope=ROPE)
    with pytest.raises(ConfigurationError):
        attend_mixture(q, K, V, [_bank(rng, 2), _bank(rng, 2)], RoutingGains(), 0, position=0, rope=ROPE)


def test_gain_terms_enter_beta(rng):
    q, K, V = _prompt(rng, 4)
    t, r = _bank(rng, 2), _bank(rng, 3, "reference")
    aux = BankSlice(rng.normal(size=(2, 8)), rng.normal(size=(2, 8)), "auxiliary", bank_id="aux")
    base = attend_mixture(q, K, V, [t, r, aux], RoutingGains(), 5, position=2, rope=ROPE)[1]
    g = RoutingGains(1.5, 0.5, 2.0, {5: 0.8}, {"aux": 0.3})
    d = attend_mixture(q, K, V, [t, r, aux], g, 5, position=2, rope=ROPE)[1]
    gp, gm = contrastive_gates(base.beta[1] - base.beta[2], 2.0)
    assert d.beta[1] - base.beta[1] == pytest.approx(0.8 * 1.5 * gp, abs=1e-12)
    assert d.beta[2] - base.beta[2] == pytest.approx(-0.8 * 0.5 * gm, abs=1e-12)
    assert d.beta[3] - base.beta[3] == pytest.approx(0.3, abs=1e-12)
    assert d.beta[0] == base.beta[0]


def test_augmented_matches_mixture(rng):
    for _ in range(50):
        q, K, V = _prompt(rng, int(rng.integers(1, 9)))
        banks = [_bank(rng, int(rng.integers(1, 6))), _bank(rng, int(rng.integers(1, 6)), "reference")]
        g = RoutingGains(2.0, 1.0, 1.5)
        pos = int(rng.integers(0, 100))
        mo, md = attend_mixture(q, K, V, banks, g, 0, position=pos, rope=ROPE)
        biases = mixture_slot_biases(q, banks, g, 0, position=pos, rope=ROPE)
        ao, ad = attend_augmented(q, K, V, list(zip(banks, biases)), position=pos, rope=ROPE)
        np.testing.assert_allclose(ao, mo, atol=1e-6)
        np.testing.assert_allclose(ad.pi, md.pi, atol=1e-9)


def test_sidebank_limits(rng):
    q, K, V = _prompt(rng, 4)
    o_x = rng.normal(size=8)
    bank = _bank(rng, 3)
    out, _ = attend_sidebank(o_x, 1e6, q, [bank], RoutingGains(), 0, position=1, rope=ROPE)
    np.testing.assert_allclose(out, o_x, atol=1e-6)
    out, _ = attend_sidebank(o_x, -1e6, q, [bank], RoutingGains(), 0, position=1, rope=ROPE)
    s = memory_scores(q, 1, bank, ROPE)
    o_bank = np.exp(s - s.max()) / np.exp(s - s.max()).sum() @ bank.values
    np.testing.assert_allclose(out, o_bank, atol=1e-6)


def test_sidebank_consistency(rng):
    q, K, V = _prompt(rng, 6)
    banks = [_bank(rng, 3), _bank(rng, 2, "reference")]
    g = RoutingGains(1.0, 1.0)
    mo, md = attend_mixture(q, K, V, banks, g, 0, position=5, rope=ROPE)
    so, sd = attend_sidebank(attend_baseline(q, K, V), md.beta[0], q, banks, g, 0, position=5, rope=ROPE)
    np.testing.assert_allclose(so, mo, atol=1e-6)


def test_caa_offset():
    h = np.array([0.5, -1.25, 3.0, 0.0])
    d = np.array([0.25, 0.5, -0.75, 2.0])
    assert np.array_equal(caa_offset(h, d, 0.0), h)
    assert np.array_equal(caa_offset(caa_offset(h, d, 1.0), d, -1.0), h)
    assert np.array_equal(caa_offset(h, d, 2.0), h + 2 * d)
    with pytest.raises(InvalidArgument):
        caa_offset(h, d[:3], 1.0)


def test_caa_layer14_scale2_plan(rng):
    cfg = ModelConfig(n_layers=16, d_model=16, n_q_heads=2, n_kv_heads=2, head_dim=8)
    model = synth_model(cfg, seed=0)
    d = rng.normal(size=16)
    plan = SteeringPlan({}, caa={14: d}, caa_scale=2.0)
    plan.validate(model)
    assert plan.layers == (14,)
    h = rng.normal(size=16)
    assert np.array_equal(plan.post_attention(14, h), h + 2.0 * d)
    assert plan.post_attention(13, h) is h


def test_diagnostics_record(rng):
    q, K, V = _prompt(rng, 3)
    banks = [_bank(rng, 2), _bank(rng, 2, "reference")]
    _, diag = attend_mixture(q, K, V, banks, RoutingGains(1.0, 1.0), 0, position=0, rope=ROPE)
    rec = diag.to_record(layer=0, unit=1)
    assert rec["layer"] == 0 and rec["roles"] == ["prompt", "target", "reference"]
    assert set(rec["masses"]) == {"prompt", "target", "reference", "auxiliary"}
    assert rec["masses"]["auxiliary"] == 0.0
    assert abs(sum(rec["pi"]) - 1) < 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lp=st.floats(0, 20), bump=st.floats(0, 20), pos=st.integers(0, 4096))
def test_target_mass_monotone_in_lambda_plus(seed, lp, bump, pos):
    rng = np.random.default_rng(seed)
    q, K, V = _prompt(rng, 4)
    banks = [_bank(rng, 3), _bank(rng, 2, "reference")]
    lo = attend_mixture(q, K, V, banks, RoutingGains(lp, 1.0), 0, position=pos, rope=ROPE)[1]
    hi = attend_mixture(q, K, V, banks, RoutingGains(lp + bump, 1.0), 0, position=pos, rope=ROPE)[1]
    assert hi.mass("target") >= lo.mass("target") - 1e-15
    assert abs(sum(hi.pi) - 1) < 1e-9
    assert all(0 <= p <= 1 for p in hi.pi)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t1=st.integers(0, 10**5), t2=st.integers(0, 10**5))
def test_memory_scores_position_invariant(seed, t1, t2):
    rng = np.random.default_rng(seed)
    q_bar = rng.normal(size=8)
    bank = _bank(rng, 4)
    s1 = memory_scores(ROPE.apply(q_bar, t1), t1, bank, ROPE)
    s2 = memory_scores(ROPE.apply(q_bar, t2), t2, bank, ROPE)
    np.testing.assert_allclose(s1, s2, atol=1e-9)
