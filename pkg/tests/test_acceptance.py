"""Acceptance criteria, one test each. Every test reports a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` (lines are also written to the
terminal reporter without ``-s``).
"""
import math
import time

import numpy as np
import pytest

from latentbank import (
    BankSpec, ModelConfig, SelectorConfig, SteeringPlan, build_bank, calibrate, expand_groups, generate,
    load_artifact, load_bank, load_model, save_artifact, save_bank, save_model, synth_model,
)
from latentbank.budget import BudgetInputs, kv_ratio
from latentbank.errors import CompatibilityError
from latentbank.harness import (
    MarkerTask, build_marker_bank, check_mixture_equivalence, plant_aligned_unit, random_instance,
    run_marker_experiment,
)
from latentbank.model import StepTrace, decode_step, forward, prefill
from latentbank.numerics import RotaryOperator, sigmoid_pair
from latentbank.routing import BankSlice, RoutingGains, attend_mixture, memory_scores
from latentbank.selector import SelectorArtifact


@pytest.fixture
def report(request):
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(n, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {name}" + (f" ({detail})" if detail else "")
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
        assert ok, line

    return emit


def _rotation_matrix(d_h, angle_scale, theta=10000.0):
    """Block-diagonal RoPE matrix built from scratch for one relative position."""
    R = np.zeros((d_h, d_h))
    for i in range(d_h // 2):
        a = angle_scale * theta ** (-2.0 * i / d_h)
        c, s = math.cos(a), math.sin(a)
        R[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[c, -s], [s, c]]
    return R


def test_mixture_equivalence(report):
    rng = np.random.default_rng(20240611)
    start = time.perf_counter()
    n, failures = 0, []
    for d_h in (4, 8, 16):
        for _ in range(70):
            bad = check_mixture_equivalence(random_instance(rng, d_h))
            n += 1
            if bad is not None:
                failures.append(bad)
    elapsed = time.perf_counter() - start
    report(1, "mixture == augmented == oracle within 1e-6", not failures and n >= 200 and elapsed < 5.0,
           f"{n} instances, {len(failures)} failures, {elapsed:.2f}s")


def test_rope_invariance(report):
    rng = np.random.default_rng(2)
    worst_inv, worst_phase = 0.0, 0.0
    for d_h in (4, 8, 16):
        rope = RotaryOperator(d_h)
        for _ in range(30):
            q_bar = rng.normal(size=d_h)
            keys = rng.normal(size=(5, d_h))
            bank = BankSlice(keys, keys)
            scores = [memory_scores(rope.apply(q_bar, t), t, bank, rope) for t in (0, 1, 17, 1024)]
            worst_inv = max(worst_inv, max(np.abs(s - scores[0]).max() for s in scores))
            phases = rng.integers(-40, 41, size=5)
            phased = BankSlice(keys, keys, phases=phases)
            for t in (0, 1, 17, 1024):
                got = memory_scores(rope.apply(q_bar, t), t, phased, rope)
                want = np.array([q_bar @ (_rotation_matrix(d_h, int(p)) @ k) for p, k in zip(phases, keys)])
                want /= math.sqrt(d_h)
                worst_phase = max(worst_phase, np.abs(got - want).max())
    report(2, "memory scores position-invariant; phased scores match direct rotation",
           worst_inv <= 1e-6 and worst_phase <= 1e-6, f"max dev {worst_inv:.1e} / {worst_phase:.1e}")


def test_size_normalization(report):
    rng = np.random.default_rng(3)
    rope = RotaryOperator(8)
    worst = 0.0
    for r in (2, 3, 5):
        for _ in range(30):
            q, K, V = rng.normal(size=8), rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
            t = BankSlice(rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), prior=0.3, bank_id="t")
            ref = BankSlice(rng.normal(size=(2, 8)), rng.normal(size=(2, 8)), "reference", bank_id="r")
            t_dup = BankSlice(np.repeat(t.keys, r, 0), np.repeat(t.values, r, 0), prior=0.3, bank_id="t")
            g = RoutingGains(3.0, 1.0, 2.0)
            pos = int(rng.integers(0, 500))
            o1, d1 = attend_mixture(q, K, V, [t, ref], g, 0, position=pos, rope=rope)
            o2, d2 = attend_mixture(q, K, V, [t_dup, ref], g, 0, position=pos, rope=rope)
            worst = max(worst,
                        abs(d2.evidence_raw[1] - d1.evidence_raw[1] - math.log(r)),
                        abs(d2.beta[1] - d1.beta[1]),
                        float(np.abs(o2 - o1).max()))
    report(3, "slot duplication shifts raw evidence by ln r, leaves beta and output", worst <= 1e-9,
           f"max dev {worst:.1e}")


def test_gate_identity(report):
    eps = np.finfo(float).eps
    worst = 0.0
    for gamma in (0.1, 1.0, 10.0):
        for delta in np.linspace(-50, 50, 20001):
            gp, gm = sigmoid_pair(gamma * delta)
            worst = max(worst, abs(gp + gm - 1.0))
    half = sigmoid_pair(0.0)
    report(4, "g+ + g- = 1 within eps; delta=0 gives 0.5 exactly",
           worst <= eps and half == (0.5, 0.5), f"max |g+ + g- - 1| = {worst:.1e}")


def test_kv_ratio_anchor(report):
    ratio = kv_ratio(BudgetInputs(L=48, L_ctrl=5, T_prompt=256, S_bank=256))
    report(5, "kv_ratio(L=48, L_ctrl=5, equal content) == 9.6", ratio == 9.6, f"got {ratio!r}")


def test_selector_recovery(report):
    cfg = ModelConfig(n_layers=4, d_model=64, n_q_heads=8, n_kv_heads=4, head_dim=8)
    prompts = [list(b"hello there"), list(b"a b c"), list(b"steer")]
    sites = [(l, u) for l in range(cfg.n_layers) for u in range(cfg.n_kv_heads)]
    spec = BankSpec("t", "target", "be kind and brief")
    hits, budget_ok, misses = 0, True, []
    for seed in range(20):
        planted = (seed % cfg.n_layers, (seed * 3 + 1) % cfg.n_kv_heads)
        model = plant_aligned_unit(synth_model(cfg, seed), *planted, seed=seed)
        bank = build_bank(model, spec, sites)
        art = calibrate(model, prompts, bank, None, SelectorConfig(k=1, m=1, steps=4))
        budget_ok &= len(art.layers) <= 1 and all(len(us) <= 1 for us in art.units.values())
        got = [(l, u) for l in art.layers for u in art.units[l]]
        if got == [planted]:
            hits += 1
        else:
            misses.append((seed, planted, got))
    report(6, "planted aligned unit recovered with k=1, m=1", hits == 20 and budget_ok,
           f"{hits}/20 seeds" + (f", misses {misses}" if misses else ""))


def test_gqa_expansion(report):
    cfg = ModelConfig(n_layers=1, d_model=32 * 8, n_q_heads=32, n_kv_heads=4, head_dim=8)
    heads = {g: expand_groups(SelectorArtifact((0,), {0: (g,)}, {0: 1.0}), cfg)[0] for g in range(4)}
    exact = all(heads[g] == list(range(8 * g, 8 * g + 8)) for g in range(4))
    union = sorted(h for hs in heads.values() for h in hs)
    report(7, "32q/4kv group g -> heads [8g, 8g+8), partitioning all heads", exact and union == list(range(32)))


def test_locality_and_noop(report):
    ok, checked, changed = True, 0, 0
    for cfg, seed in ((ModelConfig(n_layers=4, d_model=32, n_q_heads=4, n_kv_heads=4, head_dim=8), 1),
                      (ModelConfig(n_layers=5, d_model=64, n_q_heads=8, n_kv_heads=2, head_dim=8), 2)):
        model = synth_model(cfg, seed)
        prompt = list(b"locality check")
        plain_tokens, plain_logits = generate(model, prompt, 6)
        full = forward(model, prompt + plain_tokens[:-1])[len(prompt) - 1:]
        ok &= np.allclose(plain_logits, full, atol=1e-9)
        for plan_layers in ((2,), (1, 3), (cfg.n_layers - 1,)):
            sites = [(l, 0) for l in plan_layers]
            bank = build_bank(model, BankSpec("b", "target", "focus"), sites)
            empty = SteeringPlan({l: (0,) for l in plan_layers})
            steered = SteeringPlan({l: (0,) for l in plan_layers}, (bank,), RoutingGains(lambda_plus=4.0))
            t0, l0 = generate(model, prompt, 6, None)
            t1, l1 = generate(model, prompt, 6, empty)
            ok &= t0 == t1 and np.array_equal(l0, l1)
            r_plain = []
            toks, plain_rows = generate(model, prompt, 6, None, r_plain)
            state = prefill(model, prompt[:-1])[0]
            for tok, rp, row in zip([prompt[-1]] + toks[:-1], r_plain, plain_rows):
                rs = StepTrace()
                logits = decode_step(model, state, tok, steered, rs)
                # hidden[l] is the residual entering layer l, so the first steered layer's input counts too
                for l in range(min(plan_layers) + 1):
                    ok &= np.array_equal(rp.hidden[l], rs.hidden[l])
                changed += not np.array_equal(logits, row)
                checked += 1
    # a plan that never moved the logits would make the locality check vacuous
    report(8, "no plan / empty-bank plan bit-identical; layers below the plan untouched",
           bool(ok) and changed == checked, f"{checked} steered steps checked, {changed} with moved logits")


def test_marker_direction(report):
    cfg = ModelConfig(n_layers=4, d_model=64, n_q_heads=8, n_kv_heads=2, head_dim=8)
    model = synth_model(cfg, 5)
    rng = np.random.default_rng(9)
    prompts = tuple(tuple(int(x) for x in rng.integers(32, 127, size=int(rng.integers(4, 12)))) for _ in range(10))
    task = MarkerTask(ord("Z"), BankSpec("z", "target", "Always answer with the letter Z."), prompts, steps=8)
    top = cfg.n_layers - 1
    bank = build_marker_bank(model, task, [(top, u) for u in range(cfg.n_kv_heads)])
    plan = SteeringPlan({top: tuple(range(cfg.n_kv_heads))}, (bank,), RoutingGains(lambda_plus=4.0))
    res = run_marker_experiment(model, plan, task)
    positive = sum(d > 0 for d in res.mean_deltas)
    report(9, "marker bank with lambda+=4 raises the marker logit", positive >= 8,
           f"{positive}/10 prompts positive, mean delta {res.mean_delta:+.3f}")


def test_format_round_trips(report, tmp_path):
    cfg = ModelConfig(n_layers=3, d_model=32, n_q_heads=4, n_kv_heads=2, head_dim=8, qk_norm_enabled=True)
    model = synth_model(cfg, 4)
    other = synth_model(cfg, 40)
    ok = True
    save_model(model, tmp_path / "a.miw")
    back = load_model(tmp_path / "a.miw")
    save_model(back, tmp_path / "b.miw")
    ok &= (tmp_path / "a.miw").read_bytes() == (tmp_path / "b.miw").read_bytes()
    ok &= back.fingerprint == model.fingerprint and back.config == model.config
    ok &= all(np.array_equal(back.tensors[k], model.tensors[k]) for k in model.tensors)

    sites = [(l, u) for l in range(3) for u in range(2)]
    bank = build_bank(model, BankSpec("w", "target", "warm", ("direct", "hidden-steering-note")), sites)
    ref = build_bank(model, BankSpec("c", "reference", "cold"), sites)
    save_bank(bank, tmp_path / "a.mib")
    bank_back = load_bank(tmp_path / "a.mib", model)
    save_bank(bank_back, tmp_path / "b.mib")
    ok &= bank_back == bank and (tmp_path / "a.mib").read_bytes() == (tmp_path / "b.mib").read_bytes()

    art = calibrate(model, [list(b"hi")], bank, ref, SelectorConfig(k=1, m=2, steps=2))
    save_artifact(art, tmp_path / "a.json")
    art_back = load_artifact(tmp_path / "a.json", model)
    save_artifact(art_back, tmp_path / "b.json")
    ok &= art_back == art and (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    rejected = 0
    for fn in (lambda: load_bank(tmp_path / "a.mib", other), lambda: load_artifact(tmp_path / "a.json", other)):
        try:
            fn()
        except CompatibilityError:
            rejected += 1
    report(10, "MIW1 / MIB1 / selector artifact bit-exact; foreign fingerprints rejected",
           bool(ok) and rejected == 2, f"{rejected}/2 mismatches rejected")
