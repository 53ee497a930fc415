import json
import math

import numpy as np
import pytest

from strokepred.core import DegenerateRoiError
from strokepred.explain import (ContrastChoice, Explanation,
                                PerturbationRecord, RoiRanking, apply_mask,
                                aggregate_importance, counterfactuals,
                                explain_one, explanation_json,
                                explanation_report, fit_surrogate,
                                gen_perturbations, roi_pixel_sets,
                                select_contrast, select_roi_count)

ROIS = (1, 2, 3, 4)


def _layout():
    """12x12 label image: 4 quadrant ROIs inside a zero border."""
    labels = np.zeros((12, 12), dtype=np.int64)
    labels[1:6, 1:6] = 1
    labels[1:6, 6:11] = 2
    labels[6:11, 1:6] = 3
    labels[6:11, 6:11] = 4
    rng = np.random.default_rng(0)
    original = rng.random((12, 12))
    contrast = original + 1.0  # differs on every pixel
    return labels, original, contrast


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1 + math.exp(z))


def _double(labels, original, b, coefs):
    """Classifier that is exactly logistic in the retained-ROI mask bits."""
    sets = roi_pixel_sets(labels, ROIS)
    orig = original.ravel()

    def classifier(batch):
        out = []
        for img in np.asarray(batch):
            flat = img.ravel()
            z = b
            for j, roi in enumerate(ROIS):
                idx = sets[roi]
                z += coefs[j] * float(np.array_equal(flat[idx], orig[idx]))
            out.append(_sigmoid(z))
        return np.array(out)

    return classifier


# ---------------------------------------------------------------------------
# contrast selection


def test_select_contrast_matches_exhaustive_argmin():
    rng = np.random.default_rng(1)
    pool = {f"im{i:02d}": rng.random((6, 6)) for i in range(50)}

    def classifier(batch):
        return np.clip(np.asarray(batch).mean(axis=(1, 2)), 0, 1)

    choice = select_contrast(pool, classifier)
    probs = {i: float(np.clip(pool[i].mean(), 0, 1)) for i in pool}
    want = min(sorted(pool), key=lambda i: (probs[i], i))
    assert choice.image_id == want
    assert choice.probability == pytest.approx(probs[want])
    assert not choice.self_contrast


def test_select_contrast_tie_prefers_lowest_id():
    img = np.full((4, 4), 0.2)
    pool = {"b": img.copy(), "a": img.copy(), "c": img + 0.5}
    choice = select_contrast(pool, lambda b: np.asarray(b).mean(axis=(1, 2)))
    assert choice.image_id == "a"


def test_select_contrast_flags_self_contrast_and_pool_of_one():
    pool = {"only": np.full((4, 4), 0.3)}
    choice = select_contrast(pool, lambda b: np.asarray(b).mean(axis=(1, 2)),
                             explained_id="only")
    assert choice.image_id == "only" and choice.self_contrast
    with pytest.raises(ValueError):
        select_contrast({}, lambda b: np.zeros(len(b)))


# ---------------------------------------------------------------------------
# perturbations


def test_gen_perturbations_row_structure_and_reproducibility():
    labels, original, contrast = _layout()
    classifier = _double(labels, original, 0.0, (1.0, 1.0, 1.0, 1.0))
    recs = gen_perturbations(original, contrast, labels, classifier,
                             rois=ROIS, n=40, seed=5)
    assert len(recs) == 40
    assert recs[0].mask == (1, 1, 1, 1)
    for j in range(4):
        want = tuple(0 if i == j else 1 for i in range(4))
        assert recs[1 + j].mask == want
    again = gen_perturbations(original, contrast, labels, classifier,
                              rois=ROIS, n=40, seed=5)
    assert [r.mask for r in again] == [r.mask for r in recs]
    other = gen_perturbations(original, contrast, labels, classifier,
                              rois=ROIS, n=40, seed=6)
    assert [r.mask for r in other[5:]] != [r.mask for r in recs[5:]]


def test_gen_perturbations_with_self_contrast_is_constant():
    labels, original, _ = _layout()
    classifier = _double(labels, original, -0.4, (2.0, 1.0, 0.5, 0.25))
    recs = gen_perturbations(original, original.copy(), labels, classifier,
                             rois=ROIS, n=20, seed=1)
    base = recs[0].probability
    assert all(r.probability == base for r in recs)


def test_apply_mask_zero_mask_copies_contrast_on_roi_pixels_only():
    labels, original, contrast = _layout()
    sets = roi_pixel_sets(labels, ROIS)
    out = apply_mask(original, contrast, sets, ROIS, (0, 0, 0, 0))
    roi_pixels = labels > 0
    assert np.array_equal(out[roi_pixels], contrast[roi_pixels])
    assert np.array_equal(out[~roi_pixels], original[~roi_pixels])


def test_apply_mask_locality_single_bit_difference():
    labels, original, contrast = _layout()
    sets = roi_pixel_sets(labels, ROIS)
    a = apply_mask(original, contrast, sets, ROIS, (1, 0, 1, 1))
    b = apply_mask(original, contrast, sets, ROIS, (1, 0, 0, 1))
    changed = a != b  # masks differ only in ROI 3
    assert changed.any()
    assert np.array_equal(changed, labels == 3)


def test_gen_perturbations_validation():
    labels, original, contrast = _layout()
    classifier = _double(labels, original, 0.0, (1.0, 1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        gen_perturbations(original, contrast, labels, classifier,
                          rois=ROIS, n=5)  # needs > ROIs + 1
    with pytest.raises(DegenerateRoiError):
        gen_perturbations(original, contrast, labels, classifier,
                          rois=(1, 99), n=20)
    with pytest.raises(ValueError):
        gen_perturbations(original[:6], contrast, labels, classifier, n=20)


def test_perturbation_record_validation():
    with pytest.raises(ValueError):
        PerturbationRecord(mask=(1, 0), probability=1.2)
    with pytest.raises(ValueError):
        PerturbationRecord(mask=(1, 2), probability=0.5)


# ---------------------------------------------------------------------------
# surrogate fit


def test_fit_surrogate_recovers_analytic_coefficients():
    labels, original, contrast = _layout()
    b, coefs = -0.8, (2.0, -1.0, 0.5, 1.5)
    classifier = _double(labels, original, b, coefs)
    recs = gen_perturbations(original, contrast, labels, classifier,
                             rois=ROIS, n=300, seed=2)
    model = fit_surrogate(recs, rois=ROIS)
    assert abs(model.intercept - b) <= 1e-3
    for got, want in zip(model.coefs, coefs):
        assert abs(got - want) <= 1e-3
    assert model.r2 is not None and model.r2 >= 0.999
    assert model.rois == ROIS


def test_fit_surrogate_constant_classifier_gives_zero_coefs():
    recs = [PerturbationRecord(mask=(1, 1), probability=0.7),
            PerturbationRecord(mask=(0, 1), probability=0.7),
            PerturbationRecord(mask=(1, 0), probability=0.7),
            PerturbationRecord(mask=(0, 0), probability=0.7)]
    model = fit_surrogate(recs)
    assert all(abs(c) <= 1e-9 for c in model.coefs)
    assert model.intercept == pytest.approx(math.log(0.7 / 0.3), abs=1e-9)
    assert model.r2 is None
    assert "constant_response" in model.flags


def test_fit_surrogate_validation():
    recs = [PerturbationRecord(mask=(1, 1, 1), probability=0.5)] * 2
    with pytest.raises(ValueError):
        fit_surrogate(recs)  # too few rows for 3 ROIs
    bad = [PerturbationRecord(mask=(1, 1), probability=0.5),
           PerturbationRecord(mask=(1, 1, 0), probability=0.5)]
    with pytest.raises(ValueError):
        fit_surrogate(bad)
    with pytest.raises(ValueError):
        fit_surrogate([PerturbationRecord(mask=(1,), probability=0.5)] * 3,
                      ridge=0.0)


def test_fit_surrogate_clamps_extreme_probabilities():
    recs = [PerturbationRecord(mask=(1,), probability=1.0),
            PerturbationRecord(mask=(0,), probability=0.0),
            PerturbationRecord(mask=(1,), probability=1.0),
            PerturbationRecord(mask=(0,), probability=0.0)]
    model = fit_surrogate(recs)
    assert math.isfinite(model.intercept) and math.isfinite(model.coefs[0])


# ---------------------------------------------------------------------------
# counterfactuals


def _fitted_double(b, coefs, n=300, seed=3):
    labels, original, contrast = _layout()
    classifier = _double(labels, original, b, coefs)
    recs = gen_perturbations(original, contrast, labels, classifier,
                             rois=ROIS, n=n, seed=seed)
    model = fit_surrogate(recs, rois=ROIS)
    return labels, original, contrast, classifier, model


def test_counterfactuals_match_brute_force_and_fidelity_bound():
    b, coefs = -3.2, (2.0, 1.0, 0.5, 1.5)  # all-ones logit 1.8 -> p 0.86
    labels, original, contrast, classifier, model = _fitted_double(b, coefs)
    rows = counterfactuals(original, contrast, labels, classifier, model,
                           rois=ROIS)
    # brute force: every <=2-ROI replacement, keep those crossing 0.5
    want = []
    sets = roi_pixel_sets(labels, ROIS)
    from itertools import combinations
    for k in (1, 2):
        for combo in combinations(range(4), k):
            mask = tuple(0 if j in combo else 1 for j in range(4))
            img = apply_mask(original, contrast, sets, ROIS, mask)
            p = float(classifier(img[None])[0])
            if p < 0.5:
                want.append((tuple(ROIS[j] for j in combo), p))
    assert [(r.replaced, pytest.approx(r.classifier_prob)) for r in rows] \
        == sorted(want, key=lambda t: (len(t[0]), t[1], t[0]))
    assert rows  # the double was built so something crosses
    for row in rows:
        assert row.fidelity_error == abs(row.classifier_prob - row.surrogate_prob)
        assert row.fidelity_error <= 1e-3


def test_surrogate_faithful_on_every_two_roi_mask():
    b, coefs = -1.0, (1.2, 0.8, 0.4, 1.6)
    labels, original, contrast, classifier, model = _fitted_double(b, coefs)
    sets = roi_pixel_sets(labels, ROIS)
    from itertools import combinations
    worst = 0.0
    for k in (0, 1, 2):
        for combo in combinations(range(4), k):
            mask = tuple(0 if j in combo else 1 for j in range(4))
            img = apply_mask(original, contrast, sets, ROIS, mask)
            p = float(classifier(img[None])[0])
            worst = max(worst, abs(p - model.predict_prob(mask)))
    assert worst <= 1e-3


def test_counterfactuals_empty_when_nothing_crosses():
    b, coefs = 2.0, (0.1, 0.1, 0.1, 0.1)  # prediction stays above 0.5
    labels, original, contrast, classifier, model = _fitted_double(b, coefs)
    assert counterfactuals(original, contrast, labels, classifier, model,
                           rois=ROIS) == []


def test_counterfactuals_require_predicted_positive_base():
    b, coefs = -6.0, (1.0, 1.0, 1.0, 1.0)  # base p well under 0.5
    labels, original, contrast, classifier, model = _fitted_double(b, coefs)
    with pytest.raises(ValueError):
        counterfactuals(original, contrast, labels, classifier, model,
                        rois=ROIS)


# ---------------------------------------------------------------------------
# explanations


def test_explain_one_null_contrast_nullity():
    labels, original, _ = _layout()
    classifier = _double(labels, original, 0.5, (2.0, 1.0, 0.5, 0.25))
    expl = explain_one("img", original, original.copy(), labels, classifier,
                       rois=ROIS, n=50, seed=4)
    assert "self_contrast" in expl.flags
    assert "constant_response" in expl.flags
    assert expl.r2 is None
    assert all(abs(w) <= 1e-9 for w in expl.importance.values())


def test_explain_one_fields_and_json_round_trip():
    b, coefs = -3.2, (2.0, 1.0, 0.5, 1.5)
    labels, original, contrast = _layout()
    classifier = _double(labels, original, b, coefs)
    expl = explain_one("s0007", original, contrast, labels, classifier,
                       rois=ROIS, n=200, seed=5)
    assert expl.image_id == "s0007"
    assert expl.base_probability == pytest.approx(_sigmoid(b + sum(coefs)))
    assert set(expl.importance) == set(ROIS)
    payload = json.loads(json.dumps(explanation_json(expl)))
    assert payload["image_id"] == "s0007"
    assert len(payload["importance"]) == 4
    for row_obj, row in zip(payload["counterfactuals"], expl.counterfactual_rows):
        assert row_obj["fidelity_error"] == row.fidelity_error


def test_explanation_report_mentions_equation_and_counterfactuals():
    b, coefs = -3.2, (2.0, 1.0, 0.5, 1.5)
    labels, original, contrast = _layout()
    classifier = _double(labels, original, b, coefs)
    expl = explain_one("s0007", original, contrast, labels, classifier,
                       rois=ROIS, n=200, seed=5)
    text = explanation_report(expl, roi_names={1: "front_left"})
    assert "logit = " in text
    assert "front_left" in text
    assert "fidelity error" in text


def test_explain_one_flags_non_positive_base():
    b, coefs = -6.0, (1.0, 1.0, 1.0, 1.0)
    labels, original, contrast = _layout()
    classifier = _double(labels, original, b, coefs)
    expl = explain_one("x", original, contrast, labels, classifier,
                       rois=ROIS, n=50, seed=6)
    assert "not_predicted_positive" in expl.flags
    assert expl.counterfactual_rows == ()


# ---------------------------------------------------------------------------
# aggregation and ranking


def _pool_with_positive(n_extra=6):
    labels, original, contrast = _layout()
    b, coefs = -3.2, (2.0, 1.0, 0.5, 1.5)
    classifier = _double(labels, original, b, coefs)
    sets = roi_pixel_sets(labels, ROIS)
    pool = {"im00": original}  # the intact image, p = sigmoid(1.8)
    rng = np.random.default_rng(7)
    for i in range(1, n_extra + 1):
        # partially swapped images score lower; all-zeros mask is the floor
        mask = tuple(int(v) for v in rng.integers(0, 2, size=4))
        pool[f"im{i:02d}"] = apply_mask(original, contrast, sets, ROIS, mask)
    pool["im99"] = apply_mask(original, contrast, sets, ROIS, (0, 0, 0, 0))
    return labels, classifier, pool, coefs


def test_aggregate_importance_recovers_coefficient_order():
    labels, classifier, pool, coefs = _pool_with_positive()
    ranking = aggregate_importance(classifier, pool, labels, rois=ROIS,
                                   n_explain=1, n_perturb=200, seed=0)
    assert ranking.n_explanations == 1
    # true order by coefficient: roi1 (2.0), roi4 (1.5), roi2 (1.0), roi3 (0.5)
    assert ranking.rois == (1, 4, 2, 3)
    assert ranking.top(2) == (1, 4)
    for roi, want in zip(ROIS, coefs):
        assert abs(ranking.mean_importance[roi] - want) <= 5e-3


def test_aggregate_importance_flags_small_pool_and_requires_positive():
    labels, classifier, pool, _ = _pool_with_positive()
    ranking = aggregate_importance(classifier, pool, labels, rois=ROIS,
                                   n_explain=50, n_perturb=120, seed=0)
    assert any(f.startswith("explained_all_") for f in ranking.flags)
    with pytest.raises(ValueError):
        aggregate_importance(classifier,
                             {"a": pool["im99"]}, labels, rois=ROIS)


def test_ranking_stable_across_perturbation_seeds():
    labels, classifier, pool, _ = _pool_with_positive()
    r0 = aggregate_importance(classifier, pool, labels, rois=ROIS,
                              n_explain=2, n_perturb=150, seed=0)
    r1 = aggregate_importance(classifier, pool, labels, rois=ROIS,
                              n_explain=2, n_perturb=150, seed=1)

    def spearman(order_a, order_b):
        ra = {roi: i for i, roi in enumerate(order_a)}
        rb = {roi: i for i, roi in enumerate(order_b)}
        a = np.array([ra[roi] for roi in ROIS], dtype=float)
        b = np.array([rb[roi] for roi in ROIS], dtype=float)
        return float(np.corrcoef(a, b)[0, 1])

    assert spearman(r0.rois, r1.rois) >= 0.8


def test_roi_ranking_tie_breaks_by_label():
    ranking = RoiRanking.from_means({3: 0.5, 1: 0.5, 2: 0.9, 4: -0.1}, 1)
    assert ranking.rois == (2, 1, 3, 4)


# ---------------------------------------------------------------------------
# ROI-count selection


def test_select_roi_count_single_and_monotone():
    ranking = RoiRanking.from_means({i: -i * 0.1 for i in range(1, 13)}, 1)
    one = select_roi_count(ranking, lambda k, rois: (0.5, 0.8), counts=[7])
    assert one.best_k == 7
    # strictly decreasing loss -> pick the largest count
    curve = select_roi_count(ranking, lambda k, rois: (1.0 - 0.05 * k, 0.5),
                             counts=range(3, 13))
    assert curve.best_k == 12
    assert [row[0] for row in curve.rows] == list(range(3, 13))


def test_select_roi_count_tie_prefers_smaller_k_and_passes_top_rois():
    ranking = RoiRanking.from_means({1: 0.9, 2: 0.8, 3: 0.7, 4: 0.6}, 1)
    seen = {}

    def evaluate(k, rois):
        seen[k] = rois
        return (0.25, 0.75)

    curve = select_roi_count(ranking, evaluate, counts=[4, 2, 3])
    assert curve.best_k == 2
    assert seen[3] == (1, 2, 3)


def test_select_roi_count_validation():
    ranking = RoiRanking.from_means({1: 0.9, 2: 0.8}, 1)
    with pytest.raises(ValueError):
        select_roi_count(ranking, lambda k, r: (0.0, 0.0), counts=[3])
    with pytest.raises(ValueError):
        select_roi_count(ranking, lambda k, r: (0.0, 0.0), counts=[])
