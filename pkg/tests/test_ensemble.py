import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bimanual_iace.ensemble import EnsembleBuffer, EnsembleError, ensemble_action, push_chunk


def brute_force(history, t, k, m):
    """Scalar re-computation from the full push history, no buffer involved."""
    num = None
    den = 0.0
    for issue, chunk in history:
        age = t - issue
        if 0 <= age <= k - 1:
            w = math.exp(-m * age)
            row = [w * v for v in chunk[age]]
            num = row if num is None else [a + b for a, b in zip(num, row)]
            den += w
    return np.array([v / den for v in num])


def test_single_push_size():
    buf = EnsembleBuffer(20)
    push_chunk(buf, 0, np.zeros((20, 8)))
    assert len(buf) == 1


def test_eviction_after_many_pushes():
    buf = EnsembleBuffer(20)
    for t in range(25):
        buf.push(t, np.zeros((20, 8)))
    assert len(buf) == 20


def test_eviction_boundary():
    k, t = 5, 12
    buf = EnsembleBuffer(k)
    for s in range(t + 1):
        buf.push(s, np.zeros((k, 2)))
    issues = [issue for issue, _ in buf.records]
    assert t - k not in issues
    assert t - k + 1 in issues


def test_non_monotone_push_rejected():
    buf = EnsembleBuffer(3)
    buf.push(4, np.zeros((3, 2)))
    with pytest.raises(EnsembleError):
        buf.push(4, np.zeros((3, 2)))
    with pytest.raises(EnsembleError):
        buf.push(2, np.zeros((3, 2)))


def test_empty_buffer_has_no_action():
    with pytest.raises(EnsembleError):
        ensemble_action(EnsembleBuffer(3), 0)


def test_identical_chunks_return_their_row():
    chunk = np.random.default_rng(0).normal(size=(6, 4))
    buf = EnsembleBuffer(6, decay=0.3)
    for t in range(4):
        # every chunk lines up with absolute time so row t - issue is the same vector
        buf.push(t, np.roll(chunk, -t, axis=0))
    assert np.array_equal(buf.action(3), chunk[3])


def test_zero_decay_is_plain_average():
    rng = np.random.default_rng(1)
    buf = EnsembleBuffer(4, decay=0.0)
    chunks = [rng.normal(size=(4, 3)) for _ in range(4)]
    for t, c in enumerate(chunks):
        buf.push(t, c)
    rows = [chunks[i][3 - i] for i in range(4)]
    assert np.allclose(buf.action(3), np.mean(rows, axis=0), atol=1e-15)


def test_hand_built_example():
    k, m = 3, 0.5
    chunks = [np.array([[1.0], [2.0], [3.0]]), np.array([[10.0], [20.0], [30.0]]), np.array([[-1.0], [-2.0], [-3.0]])]
    buf = EnsembleBuffer(k, m)
    for t, c in enumerate(chunks):
        buf.push(t, c)
    w = [math.exp(-m * 2), math.exp(-m * 1), math.exp(0.0)]
    expected = (w[0] * 3.0 + w[1] * 20.0 + w[2] * -1.0) / sum(w)
    assert abs(buf.action(2)[0] - expected) < 1e-12


def random_history(rng, k, D, pushes):
    t, history = 0, []
    for _ in range(pushes):
        t += int(rng.integers(1, 3))
        history.append((t, rng.normal(size=(k, D))))
    return history


def test_thousand_random_states_match_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        k = int(rng.integers(1, 25))
        m = float(rng.uniform(0, 1))
        history = random_history(rng, k, 8, int(rng.integers(1, 40)))
        buf = EnsembleBuffer(k, m)
        for issue, chunk in history:
            buf.push(issue, chunk)
        t = history[-1][0]
        assert np.allclose(buf.action(t), brute_force(history, t, k, m), atol=1e-12, rtol=0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 20), m=st.floats(0, 2))
def test_output_is_convex_combination(seed, k, m):
    rng = np.random.default_rng(seed)
    history = random_history(rng, k, 5, int(rng.integers(1, 30)))
    buf = EnsembleBuffer(k, m)
    for issue, chunk in history:
        buf.push(issue, chunk)
    t = history[-1][0]
    w, rows = buf.weights(t)
    assert abs(w.sum() - 1) < 1e-12
    assert np.all(w > 0)
    out = buf.action(t)
    assert np.all(out >= rows.min(0) - 1e-12) and np.all(out <= rows.max(0) + 1e-12)
    for issue, _ in buf.records:
        assert t - k + 1 <= issue <= t


def test_push_every_k_is_open_loop_playback():
    k = 5
    rng = np.random.default_rng(3)
    buf = EnsembleBuffer(k, decay=0.01)
    played, expected = [], []
    for t in range(20):
        if t % k == 0:
            chunk = rng.normal(size=(k, 2))
            buf.push(t, chunk)
        played.append(buf.action(t))
        expected.append(chunk[t % k])
    assert np.array_equal(np.array(played), np.array(expected))


def test_bad_arguments():
    with pytest.raises(ValueError):
        EnsembleBuffer(0)
    with pytest.raises(ValueError):
        EnsembleBuffer(3, decay=-1)
    with pytest.raises(ValueError):
        EnsembleBuffer(3).push(0, np.zeros((2, 4)))
