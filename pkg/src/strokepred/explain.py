"""Perturbation-based ROI importance for image classifiers.

An explained image is perturbed by swapping whole ROIs (pixel sets taken
from a low-probability contrast image), a ridge regression on the logit of
the classifier output over those perturbations gives per-ROI coefficients,
and counterfactual rows report which small ROI swaps flip the prediction.
Masks use 1 = original content retained, so positive coefficients support
the predicted class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import DegenerateRoiError
from .rng import CounterRng

PROB_CLAMP = 1e-4  # logit() needs probabilities away from {0, 1}
DEFAULT_RIDGE = 1e-3
DEFAULT_N_PERTURB = 1024

Classifier = Callable[[np.ndarray], np.ndarray]  # (m, h, w) -> (m,) probs


def _predict(classifier: Classifier, images: np.ndarray,
             batch_size: int = 128) -> np.ndarray:
    chunks = []
    for i in range(0, len(images), batch_size):
        p = np.atleast_1d(np.asarray(classifier(images[i:i + batch_size]),
                                     dtype=np.float64))
        chunks.append(p)
    probs = np.concatenate(chunks) if chunks else np.zeros(0)
    if probs.shape != (len(images),):
        raise ValueError("classifier returned a wrong-shaped batch")
    if len(probs) and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("classifier probabilities must lie in [0, 1]")
    return probs


@dataclass(frozen=True)
class PerturbationRecord:
    mask: tuple[int, ...]  # bit per ROI, 1 = original retained
    probability: float

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        if any(b not in (0, 1) for b in self.mask):
            raise ValueError("mask bits must be 0 or 1")


@dataclass(frozen=True)
class ContrastChoice:
    image_id: str
    probability: float
    self_contrast: bool = False  # contrast == explained image: null explanation


def select_contrast(pool: Mapping[str, np.ndarray], classifier: Classifier,
                    explained_id: str | None = None,
                    batch_size: int = 128) -> ContrastChoice:
    """Candidate with the lowest predicted probability; ties -> lowest id."""
    if not pool:
        raise ValueError("empty contrast pool")
    ids = sorted(pool)
    probs = _predict(classifier, np.stack([pool[i] for i in ids]), batch_size)
    best = min(range(len(ids)), key=lambda i: (probs[i], ids[i]))
    return ContrastChoice(image_id=ids[best], probability=float(probs[best]),
                          self_contrast=ids[best] == explained_id)


def roi_pixel_sets(label_image: np.ndarray,
                   rois: Sequence[int]) -> dict[int, np.ndarray]:
    flat = np.asarray(label_image).ravel()
    sets = {}
    for roi in rois:
        idx = np.flatnonzero(flat == roi)
        if len(idx) == 0:
            raise DegenerateRoiError(f"ROI {roi} has no pixels in image space")
        sets[int(roi)] = idx
    return sets


def apply_mask(image: np.ndarray, contrast: np.ndarray,
               pixel_sets: Mapping[int, np.ndarray], rois: Sequence[int],
               mask: Sequence[int]) -> np.ndarray:
    """Replace exactly the pixel sets of ROIs whose mask bit is 0."""
    out = np.array(image, dtype=np.float64, copy=True)
    flat = out.ravel()
    cflat = np.asarray(contrast, dtype=np.float64).ravel()
    for bit, roi in zip(mask, rois):
        if bit == 0:
            idx = pixel_sets[roi]
            flat[idx] = cflat[idx]
    return out


def _default_rois(label_image: np.ndarray) -> tuple[int, ...]:
    return tuple(int(v) for v in np.unique(label_image) if v != 0)


def gen_perturbations(image: np.ndarray, contrast: np.ndarray,
                      label_image: np.ndarray, classifier: Classifier,
                      rois: Sequence[int] | None = None,
                      n: int = DEFAULT_N_PERTURB, seed: int = 0,
                      batch_size: int = 128) -> list[PerturbationRecord]:
    """All-ones mask, every single-ROI replacement, then random masks with
    each bit independently 0 with probability 0.5, up to n rows."""
    image = np.asarray(image, dtype=np.float64)
    contrast = np.asarray(contrast, dtype=np.float64)
    if image.shape != contrast.shape or image.shape != np.asarray(label_image).shape:
        raise ValueError("image, contrast, and label image shapes must match")
    if rois is None:
        rois = _default_rois(label_image)
    rois = tuple(int(r) for r in rois)
    r = len(rois)
    if n < r + 2:
        raise ValueError(f"n={n} must exceed number of ROIs + 1 ({r + 1})")
    sets = roi_pixel_sets(label_image, rois)

    masks = [tuple([1] * r)]
    for j in range(r):
        masks.append(tuple(0 if i == j else 1 for i in range(r)))
    rng = CounterRng(seed, "explain", "masks")
    while len(masks) < n:
        masks.append(tuple(int(rng.bernoulli(0.5)) for _ in range(r)))

    records = []
    for start in range(0, n, batch_size):
        chunk = masks[start:start + batch_size]
        batch = np.stack([apply_mask(image, contrast, sets, rois, m)
                          for m in chunk])
        probs = _predict(classifier, batch, batch_size)
        records.extend(PerturbationRecord(mask=m, probability=float(p))
                       for m, p in zip(chunk, probs))
    return records


# ---------------------------------------------------------------------------
# Surrogate model


@dataclass(frozen=True)
class SurrogateModel:
    intercept: float
    coefs: tuple[float, ...]  # aligned with the mask bit order
    ridge: float
    r2: float | None  # on logits; None when the response is constant
    rois: tuple[int, ...] | None = None
    flags: tuple[str, ...] = ()

    def predict_logit(self, mask: Sequence[int]) -> float:
        return self.intercept + float(np.dot(self.coefs, np.asarray(mask, float)))

    def predict_prob(self, mask: Sequence[int]) -> float:
        z = self.predict_logit(mask)
        return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else \
            math.exp(z) / (1.0 + math.exp(z))


def fit_surrogate(records: Sequence[PerturbationRecord],
                  ridge: float = DEFAULT_RIDGE,
                  rois: Sequence[int] | None = None) -> SurrogateModel:
    """Ridge least squares of logit(p) on the mask bits (intercept free)."""
    if not records:
        raise ValueError("no perturbation records")
    r = len(records[0].mask)
    if any(len(rec.mask) != r for rec in records):
        raise ValueError("inconsistent mask lengths")
    if len(records) < r + 1:
        raise ValueError(f"need at least {r + 1} rows for {r} ROIs")
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    x = np.array([rec.mask for rec in records], dtype=np.float64)
    p = np.clip([rec.probability for rec in records],
                PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.log(p / (1.0 - p))
    a = np.hstack([np.ones((len(records), 1)), x])
    penalty = np.diag([0.0] + [ridge] * r)  # intercept unpenalized
    theta = np.linalg.solve(a.T @ a + penalty, a.T @ y)
    if not np.all(np.isfinite(theta)):
        raise ArithmeticError("surrogate solve produced non-finite coefficients")
    resid = y - a @ theta
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    flags = ()
    if np.ptp(y) == 0.0:  # exactly constant response: R^2 is undefined
        r2 = None
        flags = ("constant_response",)
    else:
        r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return SurrogateModel(intercept=float(theta[0]),
                          coefs=tuple(float(c) for c in theta[1:]),
                          ridge=ridge, r2=r2,
                          rois=tuple(int(v) for v in rois) if rois else None,
                          flags=flags)


# ---------------------------------------------------------------------------
# Counterfactuals


@dataclass(frozen=True)
class CounterfactualRow:
    replaced: tuple[int, ...]  # ROI labels swapped to contrast content
    classifier_prob: float
    surrogate_prob: float
    fidelity_error: float  # |classifier_prob - surrogate_prob| by construction


def counterfactuals(image: np.ndarray, contrast: np.ndarray,
                    label_image: np.ndarray, classifier: Classifier,
                    surrogate: SurrogateModel,
                    rois: Sequence[int] | None = None,
                    threshold: float = 0.5,
                    batch_size: int = 128) -> list[CounterfactualRow]:
    """All <=2-ROI replacements whose classifier probability drops below the
    threshold, sorted by fewest ROIs then lowest probability."""
    image = np.asarray(image, dtype=np.float64)
    contrast = np.asarray(contrast, dtype=np.float64)
    if rois is None:
        rois = _default_rois(label_image)
    rois = tuple(int(v) for v in rois)
    r = len(rois)
    sets = roi_pixel_sets(label_image, rois)
    base = float(_predict(classifier, image[None], batch_size)[0])
    if base < threshold:
        raise ValueError(
            f"base probability {base:.3f} below threshold {threshold}; "
            "counterfactuals explain the predicted class")

    combos = [(j,) for j in range(r)] + list(combinations(range(r), 2))
    masks = []
    for combo in combos:
        mask = [1] * r
        for j in combo:
            mask[j] = 0
        masks.append(tuple(mask))
    batch = np.stack([apply_mask(image, contrast, sets, rois, m) for m in masks])
    probs = _predict(classifier, batch, batch_size)

    rows = []
    for combo, mask, prob in zip(combos, masks, probs):
        if prob < threshold:
            sur = surrogate.predict_prob(mask)
            rows.append(CounterfactualRow(
                replaced=tuple(rois[j] for j in combo),
                classifier_prob=float(prob),
                surrogate_prob=float(sur),
                fidelity_error=abs(float(prob) - float(sur))))
    rows.sort(key=lambda row: (len(row.replaced), row.classifier_prob,
                               row.replaced))
    return rows


# ---------------------------------------------------------------------------
# Explanations and aggregation


@dataclass(frozen=True)
class Explanation:
    image_id: str
    base_probability: float
    rois: tuple[int, ...]
    importance: dict[int, float]  # roi label -> surrogate coefficient
    counterfactual_rows: tuple[CounterfactualRow, ...]
    r2: float | None
    intercept: float = 0.0
    flags: tuple[str, ...] = ()


def explain_one(image_id: str, image: np.ndarray, contrast: np.ndarray,
                label_image: np.ndarray, classifier: Classifier,
                rois: Sequence[int] | None = None,
                n: int = DEFAULT_N_PERTURB, seed: int = 0,
                ridge: float = DEFAULT_RIDGE, threshold: float = 0.5,
                with_counterfactuals: bool = True,
                batch_size: int = 128) -> Explanation:
    if rois is None:
        rois = _default_rois(label_image)
    rois = tuple(int(v) for v in rois)
    records = gen_perturbations(image, contrast, label_image, classifier,
                                rois=rois, n=n, seed=seed,
                                batch_size=batch_size)
    surrogate = fit_surrogate(records, ridge=ridge, rois=rois)
    base = records[0].probability  # all-ones mask comes first
    flags = list(surrogate.flags)
    if np.array_equal(np.asarray(image, float), np.asarray(contrast, float)):
        flags.append("self_contrast")
    cf: tuple[CounterfactualRow, ...] = ()
    if with_counterfactuals:
        if base >= threshold:
            cf = tuple(counterfactuals(image, contrast, label_image,
                                       classifier, surrogate, rois=rois,
                                       threshold=threshold,
                                       batch_size=batch_size))
        else:
            flags.append("not_predicted_positive")
    return Explanation(image_id=image_id, base_probability=base, rois=rois,
                       importance={roi: c for roi, c in zip(rois, surrogate.coefs)},
                       counterfactual_rows=cf, r2=surrogate.r2,
                       intercept=surrogate.intercept, flags=tuple(flags))


@dataclass(frozen=True)
class RoiRanking:
    rois: tuple[int, ...]  # descending mean importance, ties -> lower label
    mean_importance: dict[int, float]
    n_explanations: int
    flags: tuple[str, ...] = ()

    @classmethod
    def from_means(cls, means: Mapping[int, float], n_explanations: int,
                   flags: Sequence[str] = ()) -> "RoiRanking":
        order = sorted(means, key=lambda roi: (-means[roi], roi))
        return cls(rois=tuple(order), mean_importance=dict(means),
                   n_explanations=n_explanations, flags=tuple(flags))

    def top(self, k: int) -> tuple[int, ...]:
        return self.rois[:k]


def explain_pool(classifier: Classifier,
                 pool: Mapping[str, np.ndarray],
                 label_image: np.ndarray,
                 rois: Sequence[int] | None = None,
                 n_explain: int = 100,
                 n_perturb: int = DEFAULT_N_PERTURB,
                 seed: int = 0, threshold: float = 0.5,
                 ridge: float = DEFAULT_RIDGE,
                 with_counterfactuals: bool = False,
                 batch_size: int = 128,
                 ) -> tuple[list[Explanation], RoiRanking]:
    """Explain the first n_explain predicted positives (by id); the contrast
    per image is the lowest-probability other image.  Returns the per-image
    explanations and the mean-coefficient ranking over them."""
    if not pool:
        raise ValueError("empty image pool")
    if rois is None:
        rois = _default_rois(label_image)
    rois = tuple(int(v) for v in rois)
    ids = sorted(pool)
    probs = _predict(classifier, np.stack([pool[i] for i in ids]), batch_size)
    prob_of = dict(zip(ids, probs))
    positives = [i for i in ids if prob_of[i] >= threshold]
    if not positives:
        raise ValueError("no predicted-positive images to explain")
    flags = []
    if len(positives) < n_explain:
        flags.append(f"explained_all_{len(positives)}_of_{n_explain}")
    explained = positives[:n_explain]

    out = []
    total = np.zeros(len(rois))
    for idx, eid in enumerate(explained):
        others = [i for i in ids if i != eid]
        contrast_id = min(others, key=lambda i: (prob_of[i], i)) if others else eid
        expl = explain_one(eid, pool[eid], pool[contrast_id], label_image,
                           classifier, rois=rois, n=n_perturb,
                           seed=seed * 1_000_003 + idx, ridge=ridge,
                           threshold=threshold,
                           with_counterfactuals=with_counterfactuals,
                           batch_size=batch_size)
        if "self_contrast" in expl.flags:
            flags.append(f"self_contrast_{eid}")
        total += np.array([expl.importance[roi] for roi in rois])
        out.append(expl)
    means = {roi: float(v / len(explained)) for roi, v in zip(rois, total)}
    return out, RoiRanking.from_means(means, len(explained), flags)


def aggregate_importance(classifier: Classifier,
                         pool: Mapping[str, np.ndarray],
                         label_image: np.ndarray,
                         rois: Sequence[int] | None = None,
                         n_explain: int = 100,
                         n_perturb: int = DEFAULT_N_PERTURB,
                         seed: int = 0, threshold: float = 0.5,
                         ridge: float = DEFAULT_RIDGE,
                         batch_size: int = 128) -> RoiRanking:
    """Mean surrogate coefficient per ROI over explanations of predicted
    positives; counterfactual search is skipped for speed."""
    _, ranking = explain_pool(classifier, pool, label_image, rois=rois,
                              n_explain=n_explain, n_perturb=n_perturb,
                              seed=seed, threshold=threshold, ridge=ridge,
                              with_counterfactuals=False,
                              batch_size=batch_size)
    return ranking


# ---------------------------------------------------------------------------
# ROI-count selection


@dataclass(frozen=True)
class RoiCountCurve:
    rows: tuple[tuple[int, float, float], ...]  # (k, mean val loss, accuracy)
    best_k: int


def select_roi_count(ranking: RoiRanking,
                     evaluate_k: Callable[[int, tuple[int, ...]],
                                          tuple[float, float]],
                     counts: Sequence[int] = tuple(range(3, 13)),
                     ) -> RoiCountCurve:
    """evaluate_k(k, top-k ROI labels) -> (mean balanced validation loss,
    accuracy for the curve); best k minimizes loss, ties -> smaller k."""
    counts = sorted(set(int(k) for k in counts))
    if not counts:
        raise ValueError("empty count grid")
    if counts[0] < 1:
        raise ValueError("counts must be positive")
    if counts[-1] > len(ranking.rois):
        raise ValueError(
            f"count {counts[-1]} exceeds {len(ranking.rois)} ranked ROIs")
    rows = []
    for k in counts:
        loss, acc = evaluate_k(k, ranking.top(k))
        rows.append((k, float(loss), float(acc)))
    best_k = min(rows, key=lambda row: (row[1], row[0]))[0]
    return RoiCountCurve(rows=tuple(rows), best_k=best_k)


# ---------------------------------------------------------------------------
# Emission


def explanation_json(expl: Explanation) -> dict:
    return {
        "image_id": expl.image_id,
        "base_probability": expl.base_probability,
        "intercept": expl.intercept,
        "r2": expl.r2,
        "flags": list(expl.flags),
        "importance": {str(roi): expl.importance[roi] for roi in expl.rois},
        "counterfactuals": [
            {"replaced": list(row.replaced),
             "classifier_prob": row.classifier_prob,
             "surrogate_prob": row.surrogate_prob,
             "fidelity_error": row.fidelity_error}
            for row in expl.counterfactual_rows],
    }


def explanation_report(expl: Explanation,
                       roi_names: Mapping[int, str] | None = None) -> str:
    """Human-readable explanation: regression terms by descending magnitude,
    then the counterfactual table with fidelity errors."""
    def name(roi: int) -> str:
        return roi_names[roi] if roi_names and roi in roi_names else f"roi{roi:02d}"

    lines = [f"image {expl.image_id}: predicted probability "
             f"{expl.base_probability:.2f}"]
    if expl.flags:
        lines.append("flags: " + ", ".join(expl.flags))
    terms = [f"{expl.importance[roi]:+.2f} {name(roi)}"
             for roi in sorted(expl.rois,
                               key=lambda roi: (-abs(expl.importance[roi]), roi))]
    lines.append(f"logit = {expl.intercept:+.2f} " + " ".join(terms))
    if expl.r2 is not None:
        lines.append(f"fit R^2 on logits: {expl.r2:.4f}")
    if expl.counterfactual_rows:
        lines.append("counterfactuals (<= 2 ROIs swapped, prediction flips):")
        for row in expl.counterfactual_rows:
            swapped = "+".join(name(roi) for roi in row.replaced)
            lines.append(f"  {swapped:<24} classifier {row.classifier_prob:.2f}"
                         f"  surrogate {row.surrogate_prob:.2f}"
                         f"  fidelity error {row.fidelity_error:.2f}")
    else:
        lines.append("counterfactuals: none within 2 ROI swaps")
    return "\n".join(lines)
