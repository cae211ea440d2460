from collections import deque

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from hvtrack import geometry as geo
from hvtrack.config import Config
from hvtrack.errors import DegenerateDataset, DegenerateQuad, QuadOutOfFrame, ShapeMismatch
from hvtrack.synthbench import builtin_corpus, make_sequence, metric_ae
from hvtrack.tracking import (ConfidenceHead, Model, TrackState, _confidence_backward, _confidence_logits,
                              confidence_label, confidence_loss, confidence_score, init_confidence_head,
                              init_track, reboot_policy, track_frame, track_sequence, train_confidence)

MEAN_PEAK_120 = 10  # index of the full-resolution mean peak score in the statistics vector


def peak_head(threshold=0.85, width=0.02):
    """Hand-set confidence head: reliable when the full-resolution mean peak exceeds ``threshold``."""
    head = init_confidence_head(zero=True)
    head.params["w1"][MEAN_PEAK_120, 0] = 1.0
    head.params["w2"][0, 0] = 1.0
    head.params["mean"][MEAN_PEAK_120] = threshold
    head.params["std"][MEAN_PEAK_120] = width
    return head


@pytest.fixture(scope="module")
def source():
    return builtin_corpus()[0][1]


# ---------------------------------------------------------------- confidence

def test_zero_head_scores_half():
    head = init_confidence_head(zero=True)
    assert confidence_score(np.random.default_rng(0).normal(size=15), head) == 0.5
    with pytest.raises(ShapeMismatch):
        confidence_score(np.zeros(14), head)


def test_label_rule_and_loss():
    assert confidence_label(6.0) == 0.0
    assert confidence_label(4.0) == 1.0
    assert confidence_label(np.array([4.0, 5.0, 5.1])).tolist() == [1.0, 1.0, 0.0]
    assert confidence_loss(np.array([1.0]), np.array([1.0])) < 1e-6


def test_confidence_gradients():
    rng = np.random.default_rng(1)
    head = init_confidence_head(seed=2)
    x = rng.normal(size=(6, 15))
    gz = rng.normal(size=6)
    _, cache = _confidence_logits(x, head.params)
    grads = _confidence_backward(gz, cache)
    for k in ("w1", "b1", "w2", "b2"):
        num = numeric_grad(lambda: float((_confidence_logits(x, head.params)[0] * gz).sum()), head.params[k])
        assert rel_error(grads[k], num) < 1e-6


def test_train_confidence_separable():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 15))
    y = (x[:, 2] - 0.5 * x[:, 7] > 0).astype(float)
    head = train_confidence(x, y, epochs=200, seed=0)
    acc = np.mean((confidence_score(x, head) >= 0.5) == (y > 0.5))
    assert acc > 0.99
    with pytest.raises(DegenerateDataset):
        train_confidence(x, np.ones(400))


# ---------------------------------------------------------------- initialisation

def test_init_track_full_frame(source):
    frame = source[:180, :240] if source.ndim == 2 else source[:180, :240, 0]
    quad = geo.template_corners((240, 180))
    st = init_track(frame, quad)
    np.testing.assert_allclose(st.h_in, geo.scaling(119 / 239, 119 / 179), atol=1e-12)
    assert sorted(st.reference.templates) == [30, 60, 120]
    np.testing.assert_array_equal(st.h_jn, st.h_in)


def test_init_track_errors():
    frame = np.random.default_rng(4).random((100, 100))
    with pytest.raises(QuadOutOfFrame):
        init_track(frame, np.array([[-5, 0], [50, 0], [50, 50], [0, 50]], dtype=float))
    with pytest.raises(DegenerateQuad):
        init_track(frame, np.array([[0, 0], [50, 50], [50, 0], [0, 50]], dtype=float))


# ---------------------------------------------------------------- tracking

def test_self_tracking(source):
    seq = make_sequence(source, [geo.identity()] * 2)
    res = track_sequence(seq.frames, seq.quads[0])
    assert metric_ae(res[1].quad, seq.quads[1]) < 0.1
    assert np.abs(res[1].h_ij / res[1].h_ij[2, 2] - np.eye(3)).max() < 1e-2


def test_self_tracking_confident_with_peak_head(source):
    seq = make_sequence(source, [geo.identity()] * 2)
    model = Model.from_config(Config(), confidence=peak_head())
    res = track_sequence(seq.frames, seq.quads[0], model=model)
    assert res[1].confidence > 0.9 and not res[1].lost


def test_translation_sequence(source):
    rng = np.random.default_rng(5)
    steps = rng.uniform(-12, 12, (8, 2))
    motions = [geo.identity()]
    pos = np.zeros(2)
    for s in steps:
        pos = pos + s
        motions.append(geo.translation(*pos))
    seq = make_sequence(source, motions)
    res = track_sequence(seq.frames, seq.quads[0])
    for r, q in zip(res[1:], seq.quads[1:]):
        assert metric_ae(r.quad, q) < 1.0
        # surrogate invariant: h_ij maps frame j to the reference frame, so the reference quad
        # pulled through its inverse is the reported quad
        np.testing.assert_allclose(r.quad, geo.apply(geo.invert(r.h_ij), seq.quads[0]), atol=1e-6)


def test_full_occlusion_sets_lost_and_carries(source):
    motions = [geo.identity(), geo.translation(3, -2), geo.translation(5, -3)]
    seq = make_sequence(source, motions, occluded=(2,))
    model = Model.from_config(Config(), confidence=peak_head())
    res = track_sequence(seq.frames, seq.quads[0], model=model)
    assert not res[1].lost
    assert res[2].confidence < 0.5
    assert res[2].reboot_count >= 1
    assert res[2].lost
    np.testing.assert_allclose(res[2].h_ij, res[1].h_ij, atol=1e-12)
    assert not res[2].vis.any()


def test_recovers_after_transient_occlusion(source):
    motions = [geo.translation(2.0 * j, 1.0 * j) for j in range(14)]
    occluded = tuple(range(4, 9))
    seq = make_sequence(source, motions, occluded=occluded)
    model = Model.from_config(Config(), confidence=peak_head())
    res = track_sequence(seq.frames, seq.quads[0], model=model)
    assert all(res[j].lost for j in occluded)
    recovered = [j for j in range(9, 12) if metric_ae(res[j].quad, seq.quads[j]) < 2.0]
    assert recovered, [metric_ae(res[j].quad, seq.quads[j]) for j in range(9, 14)]


def test_determinism(source):
    motions = [geo.identity(), geo.translation(4, 1), geo.translation(7, 3)]
    seq = make_sequence(source, motions)
    a = track_sequence(seq.frames, seq.quads[0], model=Model.from_config(Config(), confidence=peak_head()))
    b = track_sequence(seq.frames, seq.quads[0], model=Model.from_config(Config(), confidence=peak_head()))
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.h_ij, rb.h_ij)
        np.testing.assert_array_equal(ra.vis, rb.vis)
        assert ra.confidence == rb.confidence


def test_ring_buffer_only_confident(source):
    motions = [geo.translation(1.5 * j, 0) for j in range(8)]
    seq = make_sequence(source, motions, occluded=(3, 4))
    model = Model.from_config(Config(), confidence=peak_head())
    st = init_track(seq.frames[0], seq.quads[0], model=model)
    for f in seq.frames[1:]:
        track_frame(st, f)
        assert all(c >= 0.5 for _, _, c in st.ring)
        idx = [i for i, _, _ in st.ring]
        assert idx == sorted(idx)
    assert {3, 4}.isdisjoint(i for i, _, _ in st.ring)


# ---------------------------------------------------------------- reboot policy

def state_with_history(indices, capacity=60):
    ring = deque(((i, geo.translation(i, 0), 0.9) for i in indices), maxlen=capacity)
    return TrackState(None, geo.identity(), geo.identity(), ring, max(indices), None, Config())


def test_reboot_single_entry():
    st = state_with_history([7])
    cands = reboot_policy(st)
    assert len(cands) == 1 and cands[0][0] == 7


def test_reboot_schedule_from_long_history():
    st = state_with_history(range(1, 101))  # capacity keeps the last 60 frames (41..100)
    assert len(st.ring) == 60
    st.ring = deque(((i, geo.translation(i, 0), 0.9) for i in range(1, 101)), maxlen=100)
    cands = reboot_policy(st, 101)
    ages = [101 - i for i, _ in cands]
    assert ages == [2, 4, 8, 16, 32, 60]


def test_reboot_dedups_and_orders_oldest_last():
    st = state_with_history([90, 95, 99])
    cands = reboot_policy(st, 101)
    ages = [101 - i for i, _ in cands]
    assert ages == sorted(ages) and len(set(ages)) == len(ages)
    assert ages == [2, 6, 11]
