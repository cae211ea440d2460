import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hvtrack import geometry as geo
from hvtrack.config import Config
from hvtrack.errors import DegenerateDataset, LengthMismatch, ParseError
from hvtrack.estimation import gt_visibility
from hvtrack.synthbench import (SequenceAnnotation, builtin_corpus, evaluate_results, generate_pair,
                                generate_samples, make_sequence, metric_ae, metric_hd, pair_from_sample,
                                precision_curve, read_annotations, read_results, read_split, roc_auc, success_curve,
                                success_rate_at5, write_annotations, write_curve, write_dataset, write_results)
from hvtrack.tracking import FrameResult


@pytest.fixture(scope="module")
def corpus():
    return builtin_corpus()


# ---------------------------------------------------------------- generation

def test_zero_perturbation(corpus):
    s = generate_pair(corpus[0][1], Config(perturbation=0.0, augment=False, max_occluders=0), seed=3)
    np.testing.assert_allclose(s.gt_disp, 0.0, atol=1e-9)
    for lv in (30, 60, 120):
        np.testing.assert_allclose(s.ref_templates[lv].image, s.trk_templates[lv].image, atol=1e-12)
        assert s.gt_vis[lv].all()


def test_displacement_range_and_ground_truth(corpus):
    cfg = Config()
    for s in generate_samples(corpus, cfg, 40, seed=4):
        assert np.abs(s.gt_disp).max() <= 32.0 + 1e-9
        assert np.abs(s.quad_init - s.quad_ref).max() <= 32.0
        # the increment maps the tracked window's corners onto the reference window
        h_s = geo.four_point_to_homography(s.gt_disp, (120, 120))
        h_jn = geo.normalization_homography(s.quad_init, (120, 120))
        h_in = geo.normalization_homography(s.quad_ref, (120, 120))
        np.testing.assert_allclose(geo.compose(h_s, h_jn) / geo.compose(h_s, h_jn)[2, 2],
                                   h_in / h_in[2, 2], atol=1e-9)
        for lv in (30, 60, 120):
            np.testing.assert_array_equal(s.gt_vis[lv],
                                          gt_visibility(s.quad_ref, (240, 240), s.occluders, h_jn, lv))


def test_generation_is_deterministic(corpus):
    a = generate_pair(corpus[2][1], Config(), seed=17, texture_pool=corpus, source_id=corpus[2][0])
    b = generate_pair(corpus[2][1], Config(), seed=17, texture_pool=corpus, source_id=corpus[2][0])
    np.testing.assert_array_equal(a.trk_frame, b.trk_frame)
    np.testing.assert_array_equal(a.gt_disp, b.gt_disp)
    assert a.provenance == b.provenance
    c = generate_pair(corpus[2][1], Config(), seed=18, texture_pool=corpus, source_id=corpus[2][0])
    assert not np.array_equal(a.gt_disp, c.gt_disp)


def test_occluder_calibration(corpus):
    # the perturbation is switched off so the measured invisibility is the occluder's alone
    cfg = Config(occluder_fraction=0.25, perturbation=0.0)
    inv = [1.0 - s.gt_vis[120].mean() for s in generate_samples(corpus, cfg, 1000, seed=21)]
    assert 0.15 <= np.mean(inv) <= 0.35


def test_occluder_texture_differs_from_source(corpus):
    for seed in range(10):
        s = generate_pair(corpus[0][1], Config(max_occluders=3), seed=seed, texture_pool=corpus,
                          source_id=corpus[0][0])
        assert corpus[0][0] not in s.provenance["textures"]


def test_dataset_on_disk_round_trip(tmp_path, corpus):
    cfg = Config(split=(2, 1, 1))
    write_dataset(tmp_path, corpus[:3], cfg, count=8, seed=2)
    train = read_split(tmp_path / "train")
    test = read_split(tmp_path / "test")
    assert len(train) == 4 and len(test) == 2
    again = [pair_from_sample(s) for s in generate_samples(corpus[:3], cfg, 8, seed=2)]
    np.testing.assert_allclose(train[0].gt_disp, again[0].gt_disp, atol=1e-9)
    np.testing.assert_allclose(train[0].quad_init, again[0].quad_init, atol=1e-9)
    assert np.abs(train[0].trk_frame - again[0].trk_frame).max() <= 0.5 / 255 + 1e-12


def test_sequence_ground_truth(corpus):
    motions = [geo.identity(), geo.translation(5, -3)]
    seq = make_sequence(corpus[1][1], motions)
    np.testing.assert_allclose(seq.quads[1], seq.quads[0] - [5, -3], atol=1e-9)
    np.testing.assert_allclose(geo.apply(seq.homographies[1], seq.quads[0]), seq.quads[1], atol=1e-9)


# ---------------------------------------------------------------- metrics

def test_ae_values():
    q = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    assert metric_ae(q, q) == 0
    assert metric_ae(q + [3, 4], q) == pytest.approx(5.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(0, 20, (4, 2)), rng.normal(0, 20, (4, 2))
        s = 0.0
        for k in range(4):
            s += (a[k, 0] - b[k, 0]) ** 2 + (a[k, 1] - b[k, 1]) ** 2
        assert abs(metric_ae(a, b) - np.sqrt(s / 4)) < 1e-12


def test_hd_values():
    q = np.array([[20, 30], [120, 25], [130, 140], [15, 120]], dtype=float)
    rng = np.random.default_rng(1)
    h = geo.solve_homography(q, q + rng.uniform(-10, 10, (4, 2)))
    assert metric_hd(h, h, q) == 0
    assert metric_hd(geo.compose(geo.translation(2, 0), h), h, q) == pytest.approx(2.0)
    for _ in range(20):
        a = geo.solve_homography(q, q + rng.uniform(-10, 10, (4, 2)))
        b = geo.solve_homography(q, q + rng.uniform(-10, 10, (4, 2)))
        s = 0.0
        for x, y in q:
            pa, pb = a @ [x, y, 1.0], b @ [x, y, 1.0]
            s += np.hypot(pa[0] / pa[2] - pb[0] / pb[2], pa[1] / pa[2] - pb[1] / pb[2])
        assert abs(metric_hd(a, b, q) - s / 4) < 1e-12


def empirical_cdf(errors, t):
    """Reference: count, frame by frame, the present errors within the threshold."""
    present = [e for e in errors if e == e]
    return sum(1 for e in present if e <= t) / len(present)


def test_curves_equal_empirical_cdf():
    rng = np.random.default_rng(2)
    errors = np.concatenate([rng.exponential(4, 300), rng.uniform(20, 60, 50), [np.nan] * 10, [5.0, 10.0]])
    ts = np.linspace(0, 50, 101)
    prec = precision_curve(errors, ts)
    for t, p in zip(ts, prec):
        assert abs(p - empirical_cdf(errors, t)) < 1e-12
    assert np.all(np.diff(prec) >= 0)
    np.testing.assert_array_equal(success_curve(errors, ts), prec)
    present = errors[~np.isnan(errors)]
    assert success_rate_at5(errors) == pytest.approx(np.mean(present < 5))


def test_curves_trivial_cases():
    ts = np.arange(0, 21)
    np.testing.assert_array_equal(precision_curve(np.zeros(10), ts), 1.0)
    step = precision_curve(np.full(10, 10.0), ts)
    assert (step[ts < 10] == 0).all() and (step[ts >= 10] == 1).all()


def test_evaluate_results():
    q = np.array([[10, 10], [110, 10], [110, 110], [10, 110]], dtype=float)
    gts = [q, q + [2, 1], None, q + [4, 0]]
    ann = SequenceAnnotation(list(enumerate(gts)))
    results = [(j, geo.identity() if g is None else geo.solve_homography(g, q)) for j, g in enumerate(gts)]
    ae, hd = evaluate_results(results, ann)
    np.testing.assert_allclose(ae[[0, 1, 3]], 0.0, atol=1e-9)
    np.testing.assert_allclose(hd[[0, 1, 3]], 0.0, atol=1e-9)
    assert np.isnan(ae[2]) and np.isnan(hd[2])
    results[3] = (3, geo.solve_homography(q + [4, 3], q))
    ae, _ = evaluate_results(results, ann)
    assert ae[3] == pytest.approx(3.0)
    with pytest.raises(LengthMismatch):
        evaluate_results(results[:3], ann)


def pairwise_auc(scores, labels):
    """Reference: fraction of positive/negative pairs ordered correctly, ties counting half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_roc_auc_matches_pair_counting():
    rng = np.random.default_rng(6)
    for _ in range(10):
        labels = rng.random(60) < 0.4
        scores = np.round(rng.normal(labels * 0.8, 1.0), 1)  # rounding creates ties
        assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-12
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0 and roc_auc([0.9, 0.1], [0, 1]) == 0.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(DegenerateDataset):
        roc_auc([0.1, 0.2], [1, 1])


# ---------------------------------------------------------------- file formats

def test_annotation_examples(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("")
    assert read_annotations(p).frames == []
    p.write_text("0 10 10 110 10 110 110 10 110\n")
    ann = read_annotations(p)
    assert ann.frames[0][0] == 0
    np.testing.assert_array_equal(ann.frames[0][1], [[10, 10], [110, 10], [110, 110], [10, 110]])


def test_annotation_parse_errors(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("0 10 10 110 10 110 110 10 110\n1 1 2 3\n")
    with pytest.raises(ParseError) as err:
        read_annotations(p)
    assert err.value.line == 2
    p.write_text("0 10 10 110 10 110 110 10 110\n1 1 2 3 4 5 6 7 x\n")
    with pytest.raises(ParseError) as err:
        read_annotations(p)
    assert err.value.line == 2
    p.write_text("0 -\n2 -\n")
    with pytest.raises(ParseError):
        read_annotations(p)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.one_of(st.none(), st.lists(st.floats(-1e4, 1e4), min_size=8, max_size=8)), max_size=12))
def test_annotation_round_trip(tmp_path_factory, quads):
    p = tmp_path_factory.mktemp("ann") / "a.txt"
    frames = [(i, None if q is None else np.array(q).reshape(4, 2)) for i, q in enumerate(quads)]
    write_annotations(p, SequenceAnnotation(frames))
    back = read_annotations(p).frames
    assert len(back) == len(frames)
    for (i, a), (j, b) in zip(frames, back):
        assert i == j
        if a is None:
            assert b is None
        else:
            np.testing.assert_array_equal(a, b)


def test_results_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    res = [FrameResult(j, rng.normal(size=(3, 3)), None, None, float(rng.random()), 0, bool(j % 2))
           for j in range(5)]
    write_results(tmp_path / "r.txt", res)
    back = read_results(tmp_path / "r.txt")
    for a, b in zip(res, back):
        assert a.frame_index == b.frame_index and a.lost == b.lost and a.confidence == b.confidence
        np.testing.assert_array_equal(a.h_ij, b.h_ij)
    (tmp_path / "bad.txt").write_text("0 1 2\n")
    with pytest.raises(ParseError):
        read_results(tmp_path / "bad.txt")


def test_curve_csv(tmp_path):
    write_curve(tmp_path / "c.csv", [0, 1.5], [0.25, 1.0])
    assert (tmp_path / "c.csv").read_text() == "threshold,fraction\n0.0,0.25\n1.5,1.0\n"
