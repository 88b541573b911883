import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from latentbank import (
    BankSpec, ByteTokenizer, StepTrace, build_bank, decode_step, kv_project, load_bank, new_state, save_bank,
    synth_model, tokenize, wrap_descriptor,
)
from latentbank.banks import TEMPLATES, kept_positions
from latentbank.errors import CompatibilityError, EmptyBankError, FormatError, InvalidArgument
from latentbank.routing import memory_scores


def test_tokenize_examples():
    assert tokenize("") == ([], [])
    assert tokenize("AB") == ([65, 66], [(0, 1), (1, 2)])


@given(st.binary())
def test_byte_tokenizer_round_trip(data):
    tok = ByteTokenizer()
    assert tok.decode_bytes(list(data)) == data


@given(st.text())
def test_tokenize_text_round_trip(text):
    ids, spans = tokenize(text)
    assert ByteTokenizer().decode(ids) == text
    assert spans == [(i, i + 1) for i in range(len(ids))]


def test_wrap_descriptor_templates():
    spec = BankSpec("b", "target", "stay calm", tuple(TEMPLATES))
    wrapped = {}
    for t in TEMPLATES:
        text, (a, b) = wrap_descriptor(spec, t)
        assert "stay calm" in text
        assert text.encode()[a:b].decode() == spec.source_text
        wrapped[t] = text
    assert len(set(wrapped.values())) == len(TEMPLATES)
    with pytest.raises(InvalidArgument):
        wrap_descriptor(BankSpec("b", "target", "x"), "internal-principles")
    with pytest.raises(InvalidArgument):
        wrap_descriptor(spec, "nope")


def test_wrap_descriptor_non_ascii_span():
    spec = BankSpec("b", "target", "héllo ✓", ("hidden-steering-note",))
    text, (a, b) = wrap_descriptor(spec, "hidden-steering-note")
    assert text.encode()[a:b] == spec.source_text.encode()


def test_bank_spec_validation():
    with pytest.raises(InvalidArgument):
        BankSpec("p", "prompt-sentinel", "x")
    with pytest.raises(InvalidArgument):
        BankSpec("b", "target", "x", ())
    with pytest.raises(InvalidArgument):
        BankSpec("b", "target", "x", keep_policy="some")


def test_slot_counts(gqa_model, warm_spec):
    n = len(warm_spec.source_text.encode())
    one = build_bank(gqa_model, BankSpec("a", "target", warm_spec.source_text), [(1, 0)])
    assert one.slot_count == n
    two = build_bank(gqa_model, warm_spec, [(1, 0), (2, 1)])
    assert two.slot_count == 2 * n
    full = build_bank(gqa_model, BankSpec("f", "target", "ab", ("internal-principles",), "full-wrapped"), [(0, 0)])
    assert full.slot_count == len(wrap_descriptor(BankSpec("f", "target", "ab", ("internal-principles",)),
                                                  "internal-principles")[0].encode())


def test_kept_positions():
    spans = [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert kept_positions(spans, (1, 3), "descriptor-span-only") == [1, 2]
    assert kept_positions(spans, (1, 3), "full-wrapped") == [0, 1, 2, 3]
    assert kept_positions([(0, 3), (3, 6)], (2, 4), "descriptor-span-only") == [0, 1]


def test_empty_descriptor_raises(gqa_model):
    with pytest.raises(EmptyBankError):
        build_bank(gqa_model, BankSpec("e", "target", ""), [(0, 0)])


def test_slots_match_decode_trace(gqa_model, warm_spec):
    """Slots equal kv_project of hidden states recorded by token-by-token decoding."""
    sites = [(1, 0), (3, 1)]
    bank = build_bank(gqa_model, warm_spec, sites)
    n = len(warm_spec.source_text.encode())
    text, (a, b) = wrap_descriptor(warm_spec, "internal-principles")
    ids = list(text.encode())
    state = new_state(gqa_model)
    hidden = []
    for t in ids:
        rec = StepTrace()
        decode_step(gqa_model, state, t, None, rec)
        hidden.append(rec.hidden)
    for site in sites:
        l, u = site
        for j, p in enumerate(range(a, b)):
            k, v = kv_project(gqa_model, l, u, hidden[p][l])
            np.testing.assert_allclose(bank.keys[site][n + j], k, atol=1e-6)
            np.testing.assert_allclose(bank.values[site][n + j], v, atol=1e-6)


def test_bank_is_deterministic_and_frozen(gqa_model, warm_spec):
    a = build_bank(gqa_model, warm_spec, [(1, 0)])
    b = build_bank(gqa_model, warm_spec, [(1, 0)])
    assert a == b
    with pytest.raises(ValueError):
        a.keys[(1, 0)][0, 0] = 0.0


def test_bank_position_independence(gqa_model, warm_spec, rng):
    """Same wrapped text traced at a different absolute offset scores identically."""
    sites = [(2, 1)]
    at0 = build_bank(gqa_model, warm_spec, sites)
    at37 = build_bank(gqa_model, warm_spec, sites, position_offset=37)
    q_bar = rng.normal(size=8)
    for t in (0, 5, 400):
        q = gqa_model.rope.apply(q_bar, t)
        s0 = memory_scores(q, t, at0.slice(2, 1), gqa_model.rope)
        s1 = memory_scores(q, t, at37.slice(2, 1), gqa_model.rope)
        np.testing.assert_allclose(s0, s1, atol=1e-6)


def test_bank_file_round_trip(tmp_path, gqa_model, warm_spec):
    bank = build_bank(gqa_model, BankSpec(**{**warm_spec.__dict__, "prior": 0.25}), [(1, 0), (2, 1)])
    p = tmp_path / "b.mib"
    save_bank(bank, p)
    back = load_bank(p, gqa_model)
    assert back == bank
    assert back.prior == 0.25
    save_bank(back, tmp_path / "c.mib")
    assert p.read_bytes() == (tmp_path / "c.mib").read_bytes()


def test_bank_file_phases_round_trip(tmp_path, gqa_model):
    spec = BankSpec("ph", "auxiliary", "abc", phases=(0, -3, 9))
    bank = build_bank(gqa_model, spec, [(0, 0)])
    save_bank(bank, tmp_path / "p.mib")
    back = load_bank(tmp_path / "p.mib", gqa_model)
    assert back.phases.tolist() == [0, -3, 9]
    assert back.slice(0, 0).phases.tolist() == [0, -3, 9]


def test_bank_fingerprint_mismatch(tmp_path, gqa_config, gqa_model, warm_spec):
    p = tmp_path / "b.mib"
    save_bank(build_bank(gqa_model, warm_spec, [(1, 0)]), p)
    other = synth_model(gqa_config, seed=99)
    with pytest.raises(CompatibilityError):
        load_bank(p, other)
    assert load_bank(p, other, override=True).fingerprint == gqa_model.fingerprint


def test_bank_file_corrupted_slot_count(tmp_path, gqa_model, warm_spec):
    bank = build_bank(gqa_model, warm_spec, [(1, 0)])
    p = tmp_path / "b.mib"
    save_bank(bank, p)
    data = bytearray(p.read_bytes())
    # slot count sits right after the site table
    at = 8 + sum(4 + len(s.encode()) for s in (bank.bank_id, bank.role, bank.fingerprint)) + 4 + 8
    assert struct.unpack_from("<I", data, at)[0] == bank.slot_count
    struct.pack_into("<I", data, at, bank.slot_count + 1)
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_bank(p)
    p.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(FormatError):
        load_bank(p)
