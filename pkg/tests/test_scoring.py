import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config, tiny_features
from vqflow.data import FeatureSample
from vqflow.exceptions import ContractError
from vqflow.model import build_model, desk_config
from vqflow.scoring import (
    EvalReport,
    anomaly_map,
    anomaly_maps,
    auroc,
    branch_nll_maps,
    evaluate,
    image_score,
    pixel_auroc,
    resample_nearest,
    upsample_bilinear,
)
from vqflow.training import TrainConfig, train


def pairwise_auroc(scores, labels):
    """Direct count over every positive/negative pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def loop_bilinear(m, size):
    """Per-pixel half-pixel bilinear resize, written out independently."""
    H, W = m.shape
    out = np.empty(size)
    for a in range(size[0]):
        for b in range(size[1]):
            y = min(max((a + 0.5) * H / size[0] - 0.5, 0.0), H - 1)
            x = min(max((b + 0.5) * W / size[1] - 0.5, 0.0), W - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            fy, fx = y - y0, x - x0
            out[a, b] = ((1 - fy) * (1 - fx) * m[y0, x0] + (1 - fy) * fx * m[y0, x1]
                         + fy * (1 - fx) * m[y1, x0] + fy * fx * m[y1, x1])
    return out


def channels_first(feats):
    return [np.moveaxis(f, -1, 1) for f in feats]


# ---------------------------------------------------------------- AUROC


@pytest.mark.parametrize("scores,labels,expected", [
    ([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 1.0),
    ([0.5, 0.5, 0.5, 0.5], [1, 1, 0, 0], 0.5),
    ([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0], 0.75),
])
def test_auroc_worked_examples(scores, labels, expected):
    assert auroc(scores, labels) == expected


def test_auroc_single_class_rejected():
    with pytest.raises(ContractError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_length_mismatch():
    with pytest.raises(ContractError):
        auroc([0.1, 0.2, 0.3], [1, 0])


auroc_sets = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 6).map(lambda v: v / 3), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


@given(auroc_sets)
def test_auroc_matches_pairwise_count(data):
    scores, labels = data
    assert auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)


@given(auroc_sets)
def test_auroc_invariant_to_monotone_transform(data):
    scores, labels = data
    s = np.asarray(scores)
    assert auroc(np.exp(3 * s) + 7, labels) == pytest.approx(auroc(s, labels), abs=1e-12)


@given(auroc_sets)
def test_auroc_negated_scores_complement(data):
    scores, labels = data
    total = auroc(scores, labels) + auroc(-np.asarray(scores), labels)
    assert total == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- pixel AUROC


def test_pixel_auroc_perfect_and_inverted(rng):
    masks = (rng.random((4, 8, 8)) < 0.2).astype(np.uint8)
    masks[0, 0, 0] = 1
    masks[0, 0, 1] = 0
    assert pixel_auroc(masks.astype(float), masks) == 1.0
    assert pixel_auroc(1.0 - masks, masks) == 0.0


def test_pixel_auroc_random_map_near_half(rng):
    masks = (rng.random((20, 32, 32)) < 0.3).astype(np.uint8)
    assert abs(pixel_auroc(rng.random(masks.shape), masks) - 0.5) < 0.05


def test_pixel_auroc_needs_anomalous_position():
    with pytest.raises(ContractError, match="no anomalous"):
        pixel_auroc(np.ones((2, 4, 4)), np.zeros((2, 4, 4), dtype=np.uint8))


def test_pixel_auroc_resamples_mask_to_map():
    mask = np.zeros((1, 8, 8), dtype=np.uint8)
    mask[0, :4, :4] = 1
    amap = np.zeros((1, 4, 4))
    amap[0, :2, :2] = 1.0
    assert pixel_auroc(amap, mask) == 1.0


def test_resample_nearest_block_copy():
    m = np.arange(4).reshape(2, 2)
    np.testing.assert_array_equal(resample_nearest(m, (4, 4)), np.kron(m, np.ones((2, 2), dtype=int)))


# ---------------------------------------------------------------- image scores


def test_image_score_modes():
    amap = np.array([[1.0, 2.0], [3.0, 10.0]])
    assert image_score(amap, "max") == 10.0
    assert image_score(amap, "mean") == 4.0
    np.testing.assert_array_equal(image_score(np.stack([amap, amap + 1]), "max"), [10.0, 11.0])


def test_image_score_rejects_unknown_mode_and_empty():
    with pytest.raises(ContractError):
        image_score(np.ones((2, 2)), "median")
    with pytest.raises(ContractError):
        image_score(np.ones((0, 0)))


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
def test_max_score_dominates_mean(vals):
    amap = np.array(vals).reshape(2, 2)
    assert image_score(amap, "max") >= image_score(amap, "mean")


# ---------------------------------------------------------------- upsampling


def test_upsample_matches_pixel_loop(rng):
    m = rng.normal(size=(3, 5))
    np.testing.assert_allclose(upsample_bilinear(m, (6, 10)), loop_bilinear(m, (6, 10)), atol=1e-12)


def test_upsample_identity_and_constant(rng):
    m = rng.normal(size=(4, 4))
    assert upsample_bilinear(m, (4, 4)) is m
    np.testing.assert_allclose(upsample_bilinear(np.full((2, 2), 3.5), (8, 8)), 3.5)


# ---------------------------------------------------------------- anomaly maps


def test_anomaly_map_closed_form():
    cfg = tiny_config()
    model = build_model(cfg)
    feats = tiny_features(3, seed=1, config=cfg)
    maps = anomaly_maps(model, channels_first(feats))
    per_branch = branch_nll_maps(model, feats)
    for n in range(3):
        expected = per_branch[0][n] + loop_bilinear(per_branch[1][n], (4, 4))
        np.testing.assert_allclose(maps[n], expected, atol=1e-10)


def test_anomaly_map_single_branch_is_branch_nll():
    cfg = tiny_config(branches=(1,))
    model = build_model(cfg)
    feats = tiny_features(2, seed=2, config=cfg)
    maps = anomaly_maps(model, channels_first(feats))
    assert maps.shape == (2, 2, 2)
    np.testing.assert_array_equal(maps, branch_nll_maps(model, feats)[0])


def test_anomaly_map_deterministic_and_batch_independent():
    cfg = tiny_config()
    model = build_model(cfg)
    x = channels_first(tiny_features(5, seed=3, config=cfg))
    a = anomaly_maps(model, x, batch_size=2)
    b = anomaly_maps(model, x, batch_size=5)
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_array_equal(a, anomaly_maps(model, x, batch_size=2))


def test_anomaly_map_accepts_feature_samples():
    cfg = tiny_config()
    model = build_model(cfg)
    x = channels_first(tiny_features(1, seed=4, config=cfg))
    sample = FeatureSample(0, 0, [f[0].astype(np.float32) for f in x])
    np.testing.assert_allclose(anomaly_map(model, sample), anomaly_maps(model, x)[0], atol=1e-5)


def test_anomaly_map_rejects_wrong_channels():
    model = build_model(tiny_config())
    bad = channels_first(tiny_features(1, config=tiny_config(in_channels=(4, 5))))
    with pytest.raises(ContractError, match="channels"):
        anomaly_maps(model, bad)


def test_mixture_nll_within_log_k_of_dedicated():
    cfg = tiny_config()
    model = build_model(cfg)
    x = channels_first(tiny_features(4, seed=5, config=cfg))
    dedicated = anomaly_maps(model, x, "dedicated")
    mixture = anomaly_maps(model, x, "mixture")
    n_branches = len(cfg.branch_scales)
    assert np.all(mixture <= dedicated + n_branches * math.log(cfg.k_cp) + 1e-9)


def test_mixture_needs_codebook_and_heads():
    cfg = tiny_config(cpc=False)
    model = build_model(cfg)
    with pytest.raises(ContractError):
        anomaly_maps(model, channels_first(tiny_features(1, config=cfg)), "mixture")


def test_unknown_density_mode():
    model = build_model(tiny_config())
    with pytest.raises(ContractError):
        anomaly_maps(model, channels_first(tiny_features(1)), "kde")


# ---------------------------------------------------------------- trained toy


@pytest.fixture(scope="module")
def trained(toy_spec, toy_data):
    train_set, test_set = toy_data
    cfg = desk_config(in_channels=toy_spec.channels, spatial=toy_spec.spatial, n_blocks=2, d_cp=8,
                      d_pe=4, k_cp=2, k_csp=16, cpc_hidden=16, head_hidden=16, seed=1)
    model = build_model(cfg)
    train(model, train_set, TrainConfig(epochs=15, lr=3e-3, batch_size=8, seed=1))
    return model, test_set


def test_evaluate_report_fields(trained):
    model, test_set = trained
    report = evaluate(model, test_set)
    assert 0.0 <= report.det_auroc <= 1.0
    assert report.loc_auroc is not None and 0.0 <= report.loc_auroc <= 1.0
    assert report.sample_ids == [s.sample_id for s in test_set]
    assert set(report.codebook_usage) == {"cpc", "cspc0", "cspc1"}
    assert sum(report.codebook_usage["cpc"]) == len(test_set)


def test_evaluate_leaves_usage_counters_alone(trained):
    model, test_set = trained
    before = {k: cb.usage_counts.copy() for k, cb in model.codebooks().items()}
    evaluate(model, test_set)
    for k, cb in model.codebooks().items():
        np.testing.assert_array_equal(cb.usage_counts, before[k])


def test_anomalous_samples_score_higher(trained):
    model, test_set = trained
    report, maps = evaluate(model, test_set, return_maps=True)
    scores = np.array(report.scores)
    labels = np.array(report.labels)
    assert scores[labels == 1].mean() > scores[labels == 0].mean()
    assert report.det_auroc > 0.5


def test_perturbed_map_exceeds_normal_inside_patch(trained):
    model, test_set = trained
    anomalous = [s for s in test_set if s.label == 1]
    _, maps = evaluate(model, test_set, return_maps=True)
    inside, outside = [], []
    for k, s in enumerate(test_set):
        if s.label == 1:
            m = resample_nearest(s.mask, maps.shape[1:]).astype(bool)
            inside.append(maps[k][m].mean())
            outside.append(maps[k][~m].mean())
    assert anomalous and np.mean(inside) > np.mean(outside)


def test_max_mode_report_scores_dominate_mean(trained):
    model, test_set = trained
    hi = evaluate(model, test_set, score_mode="max").scores
    lo = evaluate(model, test_set, score_mode="mean").scores
    assert all(a >= b for a, b in zip(hi, lo))


def test_evaluate_needs_both_labels(trained):
    model, test_set = trained
    with pytest.raises(ContractError):
        evaluate(model, [s for s in test_set if s.label == 0])


def test_report_json_round_trip(trained):
    model, test_set = trained
    report = evaluate(model, test_set, density_mode="mixture")
    again = EvalReport.from_json(report.to_json())
    assert again == report
    assert json.loads(report.to_json())["density_mode"] == "mixture"


def test_report_validate_rejects_out_of_range():
    with pytest.raises(ContractError):
        EvalReport(det_auroc=1.2, loc_auroc=None, sample_ids=[], labels=[], scores=[]).validate()
    with pytest.raises(ContractError):
        EvalReport(det_auroc=0.5, loc_auroc=None, sample_ids=[1], labels=[], scores=[]).validate()
