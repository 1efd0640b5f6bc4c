import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clvs.engine import AttentionSnapshot, TokenLayout, generate
from clvs.errors import ConfigError, InputError, InvariantError, ProtocolError
from clvs.harness.synth import gen_model, random_prompt
from clvs.smoothing import (
    ClvsConfig,
    ClvsSession,
    VisionMemory,
    default_gate_start,
    init_memory,
    renormalize,
    smooth,
    uncertainty,
    unified_positions,
    update_memory,
)

unit = st.floats(0, 1, allow_nan=False)


# -- unified positions --------------------------------------------------------


@pytest.mark.parametrize(
    "layout, expected",
    [
        (TokenLayout(3, 4, 2), [0, 1, 2, 3, 3, 3, 3, 4, 5]),
        (TokenLayout(0, 1, 0), [0]),
        (TokenLayout(2, 3, 3), [0, 1, 2, 2, 2, 3, 4, 5]),
    ],
)
def test_unified_positions(layout, expected):
    assert unified_positions(layout) == expected


@given(st.integers(0, 20), st.integers(1, 30), st.integers(0, 20), st.integers(0, 10))
def test_unified_positions_contiguous(ns, nv, ni, gen):
    pos = unified_positions(TokenLayout(ns, nv, ni, gen))
    assert len(pos) == ns + nv + ni + gen
    assert max(pos) == ns + ni + gen
    assert sorted(set(pos)) == list(range(ns + ni + gen + 1))


# -- memory init / smoothing / renormalization / update ------------------------


def test_init_memory_examples():
    np.testing.assert_array_equal(init_memory(np.array([[0.1, 0.4], [0.3, 0.2]])).values, [0.3, 0.4])
    np.testing.assert_array_equal(init_memory(np.array([[0.2, 0.8]])).values, [0.2, 0.8])
    v = np.array([0.25, 0.5, 0.25])
    np.testing.assert_array_equal(init_memory(np.stack([v, v, v])).values, v)


def test_init_memory_needs_heads():
    with pytest.raises(ConfigError):
        init_memory(np.zeros((0, 3)))


def test_smooth_examples():
    np.testing.assert_allclose(smooth([0.5, 0.5], [1.0, 0.0], 0.8), [0.6, 0.4], atol=1e-15)
    lam, m = np.array([0.3, 0.1]), np.array([0.9, 0.0])
    np.testing.assert_array_equal(smooth(lam, m, 1.0), lam)
    np.testing.assert_array_equal(smooth(lam, m, 0.0), m)


def test_smooth_length_mismatch():
    with pytest.raises(InputError):
        smooth([0.1, 0.2], [0.3], 0.5)


@given(arrays(float, 6, elements=unit), arrays(float, 6, elements=unit), unit)
def test_smooth_is_convex(lam, m, beta):
    out = smooth(lam, m, beta)
    assert np.all(out >= np.minimum(lam, m) - 1e-15)
    assert np.all(out <= np.maximum(lam, m) + 1e-15)


def test_renormalize_examples():
    np.testing.assert_allclose(renormalize([0.2, 0.2, 0.1]), [0.4, 0.4, 0.2], atol=1e-15)
    row = np.array([0.5, 0.25, 0.25])
    np.testing.assert_allclose(renormalize(row), row, atol=1e-12)
    np.testing.assert_array_equal(renormalize([0.3]), [1.0])


def test_renormalize_zero_row():
    with pytest.raises(InvariantError):
        renormalize([0.0, 0.0])


@given(arrays(float, 7, elements=st.floats(1e-6, 1)))
def test_renormalize_sums_to_one(row):
    out = renormalize(row)
    assert abs(out.sum() - 1) <= 1e-9
    np.testing.assert_allclose(out / out[0], row / row[0], rtol=1e-12)


def test_update_memory_examples():
    mem = VisionMemory(np.array([0.5, 0.2]), 1)
    cur = np.array([[0.1, 0.3], [0.4, 0.0]])
    np.testing.assert_array_equal(update_memory(mem, cur, 1.0).values, mem.values)
    np.testing.assert_array_equal(update_memory(mem, cur, 0.0).values, [0.4, 0.3])
    out = update_memory(VisionMemory(np.array([0.5]), 1), np.array([[0.0]]), 0.8)
    assert out.values[0] == pytest.approx(0.4, abs=1e-15)
    assert out.layer_of_last_update == 2


def test_update_memory_length_mismatch():
    with pytest.raises(InputError):
        update_memory(VisionMemory(np.zeros(2), 1), np.zeros((1, 3)), 0.5)


# -- uncertainty ---------------------------------------------------------------


def _entropy_oracle(p, k):
    top = sorted(p, reverse=True)[:k]
    s = math.fsum(top)
    return -math.fsum((x / s) * math.log(x / s) for x in top if x > 0) / math.log(k)


def test_uncertainty_examples():
    assert uncertainty(np.full(10, 0.1)) == pytest.approx(1.0, abs=1e-12)
    one_hot = np.zeros(20)
    one_hot[4] = 1.0
    assert uncertainty(one_hot) == 0.0
    two = np.zeros(20)
    two[[1, 7]] = 0.5
    assert uncertainty(two) == pytest.approx(math.log(2) / math.log(10), abs=1e-9)
    assert _entropy_oracle(two.tolist(), 10) == pytest.approx(0.30103, abs=1e-5)


def test_uncertainty_topk_one_and_bounds():
    assert uncertainty(np.full(10, 0.1), topk=1) == 0.0
    with pytest.raises(InputError):
        uncertainty(np.full(5, 0.2), topk=10)


@given(arrays(float, 30, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 0), st.integers(2, 30))
@settings(max_examples=200)
def test_uncertainty_matches_oracle(raw, k):
    p = raw / raw.sum()
    u = uncertainty(p, k)
    assert 0 <= u <= 1
    assert u == pytest.approx(min(max(_entropy_oracle(p.tolist(), k), 0), 1), abs=1e-12)


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize("L, gate", [(2, 2), (4, 3), (5, 3), (6, 4), (32, 17), (33, 17)])
def test_default_gate(L, gate):
    assert default_gate_start(L) == gate == math.ceil((L + 1) / 2)


@pytest.mark.parametrize("field", ["beta", "gamma", "delta"])
def test_config_ranges(field):
    with pytest.raises(ConfigError):
        ClvsConfig(**{field: 1.5})


def test_config_gate_must_fit():
    with pytest.raises(ConfigError):
        ClvsConfig(gate_start_layer=9).gate_for(6)


# -- session ----------------------------------------------------------------------


@pytest.fixture
def session_setup():
    model = gen_model(3, {"n_layers": 6, "n_heads": 2, "head_dim": 8, "vocab": 32, "logit_scale": 4.0})
    layout = TokenLayout(2, 5, 3)
    return model, layout, random_prompt(3, layout.prompt_len, 32)


def test_session_rejects_out_of_order_layers(session_setup):
    model, layout, _ = session_setup
    s = ClvsSession(model, layout)
    s.begin_step(0)
    rows = np.full((2, 10), 0.1)
    with pytest.raises(ProtocolError):
        s.attention(AttentionSnapshot(2, rows, (2, 7)))


def test_session_layer1_untouched_and_beta1_identity(session_setup):
    model, layout, prompt = session_setup
    s = ClvsSession(model, layout, ClvsConfig(beta=1.0, delta=0.0))
    gen = generate(model, prompt, layout, max_new=3, intervention=s)
    for out in gen.steps:
        np.testing.assert_array_equal(out.post[0].rows, out.pre[0].rows)
        for pre, post in zip(out.pre, out.post):
            np.testing.assert_allclose(post.rows, pre.rows, atol=1e-12)


def test_session_gamma1_keeps_initial_memory(session_setup):
    model, layout, prompt = session_setup
    s = ClvsSession(model, layout, ClvsConfig(gamma=1.0, delta=0.0))
    gen = generate(model, prompt, layout, max_new=2, intervention=s)
    for group in [gen.records[i : i + 6] for i in range(0, len(gen.records), 6)]:
        for r in group:
            assert r.memory == group[0].memory


def test_session_memory_resets_every_step(session_setup):
    model, layout, prompt = session_setup
    s = ClvsSession(model, layout)
    gen = generate(model, prompt, layout, max_new=3, intervention=s)
    for step, out in enumerate(gen.steps):
        layer1 = out.pre[0].visual
        np.testing.assert_array_equal(gen.records[step * 6].memory, layer1.max(axis=0))


def test_session_matches_straight_line_oracle_on_trace(session_setup):
    # recompute smoothing, renormalization and memory from recorded pre-attention only
    model, layout, prompt = session_setup
    cfg = ClvsConfig(beta=0.8, gamma=0.8, delta=0.0)
    gen = generate(model, prompt, layout, max_new=4, intervention=ClvsSession(model, layout, cfg))
    for s in range(4):
        group = gen.records[s * 6 : (s + 1) * 6]
        pre = [np.array(r.pre_visual_attention) for r in group]
        mem = pre[0].max(axis=0)
        assert np.array_equal(np.array(group[0].memory), mem)
        for l in range(1, 6):
            lam = pre[l]
            sm = 0.8 * lam + 0.2 * mem
            z = (1 - lam.sum(axis=1, keepdims=True)) + sm.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(np.array(group[l].post_visual_attention), sm / z, atol=1e-12)
            mem = 0.8 * mem + 0.2 * lam.max(axis=0)
            np.testing.assert_allclose(group[l].memory, mem, atol=1e-12)


def test_termination_freezes_later_layers(session_setup):
    model, layout, prompt = session_setup
    s = ClvsSession(model, layout, ClvsConfig(delta=1.0))
    gen = generate(model, prompt, layout, max_new=3, intervention=s)
    gate = default_gate_start(6)
    for out in gen.steps:
        # delta = 1 fires at the first gated layer unless u is exactly 1
        assert out.termination_layer == gate
        for l in range(gate, 6):
            np.testing.assert_array_equal(out.post[l].rows, out.pre[l].rows)
        np.testing.assert_raises(AssertionError, np.testing.assert_array_equal, out.post[1].rows, out.pre[1].rows)
