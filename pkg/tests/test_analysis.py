import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clvs.analysis import (
    ObjectOverlap,
    build_report,
    convergence_layer,
    key_object_attention,
    logistic_fit,
    peak_layer,
    point_biserial,
    relative_increase,
    uncertainty_convergence_pairs,
    write_report,
)
from clvs.errors import InputError, NonConvergenceError, UndefinedStatisticError
from clvs.harness.synth import box_overlap, planted_convergence_trace
from clvs.tracing import TraceRecord


def obj(values):
    return ObjectOverlap("o", values)


def test_key_object_attention_examples():
    assert key_object_attention([0.1, 0.2, 0.7], obj([1.0, 0.5, 0.0])) == pytest.approx(0.2, abs=1e-15)
    assert key_object_attention([0.1, 0.2, 0.7], obj([0, 0, 0])) == 0
    assert key_object_attention([0.1, 0.2, 0.3], obj([1, 1, 1])) == pytest.approx(0.6)


def test_key_object_attention_length_mismatch():
    with pytest.raises(InputError):
        key_object_attention([0.1, 0.2], obj([1.0]))


@given(arrays(float, 5, elements=st.floats(0, 1)), arrays(float, 5, elements=st.floats(0, 1)),
       arrays(float, 5, elements=st.floats(0, 1)), st.floats(0, 3))
def test_key_object_attention_linear_and_monotone(a, b, ov, c):
    o = obj(ov)
    lhs = key_object_attention(a + c * b, o)
    assert lhs == pytest.approx(key_object_attention(a, o) + c * key_object_attention(b, o), abs=1e-12)
    bigger = obj(np.minimum(ov + 0.1, 1.0))
    assert key_object_attention(a, bigger) >= key_object_attention(a, o) - 1e-15


def test_overlap_bounds():
    with pytest.raises(InputError):
        obj([1.2])


def test_peak_layer_examples():
    assert peak_layer([0.1, 0.5, 0.2]) == 2
    assert peak_layer([0.3, 0.3, 0.3]) == 1
    assert peak_layer([0.0, 0.0, 0.3]) == 3


def test_relative_increase_examples():
    assert relative_increase([0.2], [0.1], 100) == [100.0]
    assert relative_increase([0.4, 0.1], [0.4, 0.1], 100) == [0.0, 0.0]
    assert relative_increase([0.12], [0.10], 100) == [pytest.approx(20.0)]
    assert relative_increase([0.1, 0.0], [0.0, 0.0], 50) == [50.0, 0.0]


@given(arrays(float, 6, elements=st.floats(0, 1)), arrays(float, 6, elements=st.floats(0, 1)), st.floats(1, 500))
def test_relative_increase_bounded(c, v, clip):
    out = relative_increase(c, v, clip)
    assert all(x <= clip for x in out)
    assert all(x == 0 for x, a, b in zip(out, c, v) if a == b)


def _pb_oracle(u, flags):
    # Pearson correlation against the 0/1 labels
    return float(np.corrcoef(np.asarray(u, float), np.asarray(flags, float))[0, 1])


def test_point_biserial_fixture():
    r = point_biserial([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
    # (0.15 - 0.85) / sqrt(0.125) * 0.5
    assert r == pytest.approx(-0.7 / np.sqrt(0.125) * 0.5, abs=1e-12)
    assert r == pytest.approx(-0.990, abs=1e-3)
    assert r == pytest.approx(_pb_oracle([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]), abs=1e-12)


def test_point_biserial_degenerate():
    with pytest.raises(UndefinedStatisticError):
        point_biserial([0.5, 0.5, 0.5], [1, 0, 1])
    with pytest.raises(UndefinedStatisticError):
        point_biserial([0.1, 0.2], [1, 1])


@given(arrays(float, 12, elements=st.floats(0, 1)), arrays(bool, 12), st.floats(0.1, 10), st.floats(-5, 5))
def test_point_biserial_properties(u, flags, a, b):
    assume(0 < flags.sum() < flags.size and np.std(u) > 1e-6)
    r = point_biserial(u, flags)
    assert -1 - 1e-12 <= r <= 1 + 1e-12
    assert r == pytest.approx(_pb_oracle(u, flags), abs=1e-9)
    assert point_biserial(a * u + b, flags) == pytest.approx(r, abs=1e-9)
    assert point_biserial(u, ~flags) == pytest.approx(-r, abs=1e-12)


def _loglik(b0, b1, x, y):
    z = b0 + b1 * x
    return np.sum(y * z - np.logaddexp(0, z), axis=-1)


def grid_oracle(x, y, half=20.0, n=81, rounds=30):
    """Maximize the likelihood on a shrinking 2-D grid."""
    c0 = c1 = 0.0
    for _ in range(rounds):
        g0 = np.linspace(c0 - half, c0 + half, n)
        g1 = np.linspace(c1 - half, c1 + half, n)
        B0, B1 = np.meshgrid(g0, g1, indexing="ij")
        ll = _loglik(B0[..., None], B1[..., None], x, y)
        i, j = np.unravel_index(np.argmax(ll), ll.shape)
        c0, c1 = g0[i], g1[j]
        half /= 4
    return c0, c1


def fixture_n20():
    rng = np.random.default_rng(20)
    u = rng.uniform(0, 1, 20)
    flags = rng.uniform(0, 1, 20) < 1 / (1 + np.exp(-(2.0 - 5.0 * u)))
    return u, flags


def test_logistic_matches_grid_oracle():
    u, flags = fixture_n20()
    b0, b1 = logistic_fit(u, flags)
    o0, o1 = grid_oracle(u, flags.astype(float))
    assert b0 == pytest.approx(o0, abs=1e-4)
    assert b1 == pytest.approx(o1, abs=1e-4)


def test_logistic_no_signal():
    b0, b1 = logistic_fit([0.4] * 6, [1, 0, 1, 1, 0, 1])
    assert abs(b1) <= 1e-6
    assert b0 == pytest.approx(np.log(4 / 2), abs=1e-8)


def test_logistic_sign_symmetry():
    u, flags = fixture_n20()
    b0, b1 = logistic_fit(u, flags)
    n0, n1 = logistic_fit(-u, flags)
    assert n1 == -b1
    assert n0 == b0


def test_logistic_separation_error():
    with pytest.raises(NonConvergenceError, match="separation"):
        logistic_fit([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])


@given(arrays(float, 15, elements=st.floats(0, 1)), arrays(bool, 15))
def test_logistic_sign_matches_mean_difference(u, flags):
    assume(0 < flags.sum() < flags.size)
    pos, neg = u[flags], u[~flags]
    assume(not (pos.min() > neg.max() or pos.max() < neg.min()))
    diff = pos.mean() - neg.mean()
    assume(abs(diff) > 1e-3)
    _, b1 = logistic_fit(u, flags)
    assert np.sign(b1) == np.sign(diff)


def _records(tokens):
    return [TraceRecord(0, l + 1, [[0.5]], [[0.5]], [0.0], None, False, t) for l, t in enumerate(tokens)]


def test_convergence_layer_examples():
    assert convergence_layer(_records([3, 3, 3, 3])).convergence_layer == 1
    assert convergence_layer(_records([1, 2, 1, 3])).convergence_layer == 4
    prof = convergence_layer(_records([5, 9, 9, 9]))
    assert prof.convergence_layer == 2 and prof.final_token == 9


def test_planted_traces_show_negative_association():
    trace = planted_convergence_trace(1)
    u, flags = uncertainty_convergence_pairs(trace)
    assert point_biserial(u, flags) < 0
    assert logistic_fit(u, flags)[1] < 0


def test_box_overlap_area():
    ov = box_overlap(2, 2, (0.5, 0.5, 1.5, 2.0))
    assert ov == [0.25, 0.25, 0.5, 0.5]


def test_report_and_csv(tmp_path):
    trace = planted_convergence_trace(3, n_steps=5, n_layers=6, n_vis=4)
    scene = {"objects": [ObjectOverlap("cat", [1.0, 0.5, 0.0, 0.0])]}
    report = build_report(trace, trace, scene)
    assert report["objects"][0]["relative_increase"] == [0.0] * 6
    json_path, csv_path = write_report(report, tmp_path)
    assert json_path.name == "report.json"
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "layer,a_obj_vanilla,a_obj_clvs,relative_increase"
    assert len(lines) == 7
