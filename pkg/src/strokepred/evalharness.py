"""Partitioning, lock-box protocol, cross-validation, calibration, metrics.

The partition is stratified by severity and balanced on score, lesion size,
and recovery time via a serpentine deal plus greedy same-category swaps.
Group 5 is the lock box: a sealed, audited container that hands out its data
only after the single permitted unlock.
"""

from __future__ import annotations

import json
import math
import time as _time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import SEVERITY_CATEGORIES, SubjectRecord

BALANCE_COVARIATES = ("score", "left_lesion_size", "recovery_time")
SWEEP_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))
SUBGROUP_SEVERITIES = ("severe", "moderate")  # hardest-to-predict subjects


class LockBoxError(RuntimeError):
    pass


class LockBoxViolation(LockBoxError):
    """Group-5 data was requested before the unlock."""


class LockBoxProtocolError(LockBoxError):
    """The lock-box protocol itself was misused (e.g. a second unlock)."""


# ---------------------------------------------------------------------------
# Stratified, covariate-balanced partition


@dataclass(frozen=True)
class BalanceReport:
    max_smd: dict[str, float]  # covariate -> max pairwise standardized diff
    severity_counts: dict[str, dict[int, int]]  # category -> group -> count
    objective: float  # J = sum over covariates of max pairwise SMD
    swaps_applied: int
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class SplitPlan:
    assignment: dict[str, int]  # subject id -> group in 1..k
    balance: BalanceReport
    k: int = 5
    lockbox_group: int = 5

    def group_ids(self, group: int) -> list[str]:
        return sorted(i for i, g in self.assignment.items() if g == group)


def _covariate_matrix(records: Sequence[SubjectRecord]) -> np.ndarray:
    return np.array([[r.score, r.left_lesion_size, r.recovery_time]
                     for r in records], dtype=np.float64)


def _balance_stats(x: np.ndarray, sd: np.ndarray,
                   assign: np.ndarray, k: int):
    means = np.zeros((k, x.shape[1]))
    for g in range(k):
        means[g] = x[assign == g].mean(axis=0)
    max_smd = {}
    j = 0.0
    for c, name in enumerate(BALANCE_COVARIATES):
        diffs = [abs(means[a, c] - means[b, c]) / sd[c]
                 for a in range(k) for b in range(a + 1, k)]
        max_smd[name] = max(diffs)
        j += max_smd[name]
    return max_smd, j


def _objective(means: np.ndarray, sd: np.ndarray, k: int) -> float:
    j = 0.0
    for c in range(means.shape[1]):
        worst = 0.0
        for a in range(k):
            for b in range(a + 1, k):
                worst = max(worst, abs(means[a, c] - means[b, c]) / sd[c])
        j += worst
    return j


def stratified_partition(records: Sequence[SubjectRecord], k: int = 5,
                         seed: int = 0, max_swaps: int = 500) -> SplitPlan:
    """Serpentine deal per severity category (sorted by score), then greedy
    same-category swaps that shrink the summed max pairwise SMD."""
    if not records:
        raise ValueError("empty cohort")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    # canonical order: input permutation must not matter
    records = sorted(records, key=lambda r: r.id)
    n = len(records)
    warnings: list[str] = []
    if n < k * len(SEVERITY_CATEGORIES):
        warnings.append(
            f"cohort of {n} is small for {k} groups x "
            f"{len(SEVERITY_CATEGORIES)} severity categories")

    assign = np.full(n, -1, dtype=np.int64)
    category = np.array([SEVERITY_CATEGORIES.index(r.severity)
                         for r in records])
    x = _covariate_matrix(records)
    for ci, cat in enumerate(SEVERITY_CATEGORIES):
        members = [i for i in range(n) if category[i] == ci]
        if not members:
            continue
        if len(members) < k:
            warnings.append(f"category {cat!r} has {len(members)} < {k} members")
        members.sort(key=lambda i: (records[i].score, records[i].id))
        offset = (seed + ci) % k
        # serpentine: k ascending, then k descending, shifted by the offset
        for pos, i in enumerate(members):
            cycle, slot = divmod(pos, k)
            g = slot if cycle % 2 == 0 else k - 1 - slot
            assign[i] = (g + offset) % k

    sd = x.std(axis=0, ddof=1)
    sd = np.where(sd > 0, sd, 1.0)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    for g in range(k):
        sums[g] = x[assign == g].sum(axis=0)

    def best_swap_for_pair(means: np.ndarray, ga: int, gb: int):
        """Best single same-category exchange between groups ga and gb."""
        others = [g for g in range(k) if g not in (ga, gb)]
        best = None  # (new_j, i, j)
        for ci in range(len(SEVERITY_CATEGORIES)):
            ia = np.flatnonzero((assign == ga) & (category == ci))
            ib = np.flatnonzero((assign == gb) & (category == ci))
            if len(ia) == 0 or len(ib) == 0:
                continue
            delta = x[ib][None, :, :] - x[ia][:, None, :]  # (m, p, 3)
            ma = means[ga] + delta / counts[ga]
            mb = means[gb] - delta / counts[gb]
            j_cand = np.zeros(delta.shape[:2])
            for c in range(x.shape[1]):
                fixed = 0.0
                for a in others:
                    for b in others:
                        if a < b:
                            fixed = max(fixed, abs(means[a, c] - means[b, c]))
                cand = np.full(delta.shape[:2], fixed)
                for g in others:
                    cand = np.maximum(cand, np.abs(ma[..., c] - means[g, c]))
                    cand = np.maximum(cand, np.abs(mb[..., c] - means[g, c]))
                cand = np.maximum(cand, np.abs(ma[..., c] - mb[..., c]))
                j_cand += cand / sd[c]
            flat = int(np.argmin(j_cand))
            r, s = divmod(flat, j_cand.shape[1])
            if best is None or j_cand[r, s] < best[0] - 1e-15:
                best = (float(j_cand[r, s]), int(ia[r]), int(ib[s]))
        return best

    swaps = 0
    while swaps < max_swaps:
        means = sums / counts[:, None]
        cur_j = _objective(means, sd, k)
        # group pairs by descending worst-covariate SMD; try the worst first
        pairs = sorted(
            ((max(abs(means[a, c] - means[b, c]) / sd[c]
                  for c in range(x.shape[1])), a, b)
             for a in range(k) for b in range(a + 1, k)),
            key=lambda t: (-t[0], t[1], t[2]))
        applied = False
        for _, ga, gb in pairs:
            best = best_swap_for_pair(means, ga, gb)
            if best is not None and best[0] < cur_j - 1e-12:
                _, i, j = best
                sums[ga] += x[j] - x[i]
                sums[gb] += x[i] - x[j]
                assign[i], assign[j] = gb, ga
                swaps += 1
                applied = True
                break
        if not applied:
            break

    max_smd, j_final = _balance_stats(x, sd, assign, k)
    sev_counts = {cat: {g + 1: 0 for g in range(k)} for cat in SEVERITY_CATEGORIES}
    for i, r in enumerate(records):
        sev_counts[r.severity][int(assign[i]) + 1] += 1
    report = BalanceReport(max_smd=max_smd, severity_counts=sev_counts,
                           objective=j_final, swaps_applied=swaps,
                           warnings=tuple(warnings))
    assignment = {r.id: int(assign[i]) + 1 for i, r in enumerate(records)}
    return SplitPlan(assignment=assignment, balance=report, k=k,
                     lockbox_group=k)


# ---------------------------------------------------------------------------
# Lock box


class LockBox:
    """Sealed container for the held-out group with an append-only audit log.

    Every request and the single unlock are logged with a monotonically
    increasing sequence number; requesting lock-box data before the unlock
    logs a violation entry and raises.
    """

    def __init__(self, plan: SplitPlan, audit_path: str | Path | None = None):
        self.plan = plan
        self.lockbox_group = plan.lockbox_group
        self._unlocked = False
        self._seq = 0
        self.entries: list[dict] = []
        self._audit_path = Path(audit_path) if audit_path else None
        if self._audit_path:
            self._audit_path.write_text("")  # fresh log per seal
        self._log("seal", groups=[self.lockbox_group])

    def _log(self, op: str, **fields):
        self._seq += 1
        entry = {"seq": self._seq, "op": op,
                 "time": f"{_time.time():.6f}", **fields}
        self.entries.append(entry)
        if self._audit_path:
            with self._audit_path.open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    @property
    def unlocked(self) -> bool:
        return self._unlocked

    def unlock(self, reason: str):
        if self._unlocked:
            self._log("violation", detail="second unlock attempt",
                      reason=reason)
            raise LockBoxProtocolError("lock box can be unlocked only once")
        self._unlocked = True
        self._log("unlock", reason=reason)

    def request(self, groups: Sequence[int], caller: str):
        """Record (and police) an access to the given groups' data."""
        gs = sorted(set(int(g) for g in groups))
        if self.lockbox_group in gs and not self._unlocked:
            self._log("violation", groups=gs, caller=caller)
            raise LockBoxViolation(
                f"{caller!r} requested group {self.lockbox_group} before unlock")
        self._log("access", groups=gs, caller=caller)


def lockbox_seal(plan: SplitPlan, audit_path: str | Path | None = None) -> LockBox:
    return LockBox(plan, audit_path)


def lockbox_unlock(box: LockBox, reason: str):
    box.unlock(reason)


def lockbox_guard(box: LockBox, groups: Sequence[int], caller: str):
    box.request(groups, caller)


def audit_scan(entries_or_path) -> dict:
    """Summarize an audit log: unlock count, pre-unlock lock-box accesses."""
    if isinstance(entries_or_path, (str, Path)):
        entries = [json.loads(line)
                   for line in Path(entries_or_path).read_text().splitlines()
                   if line.strip()]
    else:
        entries = list(entries_or_path)
    seqs = [e["seq"] for e in entries]
    if seqs != sorted(seqs) or len(set(seqs)) != len(seqs):
        raise ValueError("audit sequence numbers not strictly increasing")
    unlock_seqs = [e["seq"] for e in entries if e["op"] == "unlock"]
    boxes = {e["groups"][0] for e in entries if e["op"] == "seal"}
    lockbox_group = max(boxes) if boxes else 5
    pre_unlock = [e for e in entries
                  if e["op"] == "access" and lockbox_group in e.get("groups", [])
                  and (not unlock_seqs or e["seq"] < unlock_seqs[0])]
    return {
        "n_unlocks": len(unlock_seqs),
        "n_violations": sum(1 for e in entries if e["op"] == "violation"),
        "pre_unlock_lockbox_accesses": len(pre_unlock),
        "n_entries": len(entries),
    }


# ---------------------------------------------------------------------------
# Cross-validation


def cross_validate(trainer: Callable, folds: Sequence, lrs: Sequence[float],
                   ) -> tuple[float, dict[float, list[float]]]:
    """Leave-one-fold-out CV; returns (lr with minimum mean validation loss,
    per-lr fold losses).  Ties resolve to the smaller lr."""
    if len(folds) < 2:
        raise ValueError("need at least 2 folds")
    if not lrs:
        raise ValueError("empty lr grid")
    losses: dict[float, list[float]] = {}
    for lr in lrs:
        per_fold = []
        for i, val in enumerate(folds):
            train_folds = [f for j, f in enumerate(folds) if j != i]
            per_fold.append(float(trainer(train_folds, val, lr)))
        losses[lr] = per_fold
    best = min(lrs, key=lambda lr: (sum(losses[lr]) / len(losses[lr]), lr))
    return best, losses


# ---------------------------------------------------------------------------
# Calibration


@dataclass(frozen=True)
class Calibrator:
    temperature: float

    def __post_init__(self):
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ValueError("temperature must be finite and positive")

    def apply_logits(self, logits: np.ndarray) -> np.ndarray:
        return np.asarray(logits, dtype=np.float64) / self.temperature

    def apply(self, logits: np.ndarray) -> np.ndarray:
        z = self.apply_logits(logits)
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out


def _nll(logits: np.ndarray, labels: np.ndarray) -> float:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    per = np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(per))


def fit_temperature(logits: np.ndarray, labels: np.ndarray,
                    tol: float = 1e-4) -> Calibrator:
    """Golden-section search for T minimizing NLL(sigma(z/T)) over
    ln T in [ln 0.05, ln 20]; falls back to T=1 if that is no worse."""
    y = np.asarray(labels)
    if len(y) == 0 or y.min() == y.max():
        raise ValueError("calibration needs both classes present")
    z = np.asarray(logits, dtype=np.float64)

    def f(u: float) -> float:
        return _nll(z / math.exp(u), y)

    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = math.log(0.05), math.log(20.0)
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
    t_star = math.exp((a + b) / 2.0)
    if _nll(z, y) <= _nll(z / t_star, y):
        t_star = 1.0  # never worse than the uncalibrated logits
    return Calibrator(temperature=t_star)


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class MetricsRow:
    accuracy: float
    balanced_accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    flags: tuple[str, ...] = ()  # metrics reported as 0 for want of a denominator

    def as_dict(self) -> dict[str, float]:
        return {"accuracy": self.accuracy,
                "balanced_accuracy": self.balanced_accuracy,
                "sensitivity": self.sensitivity,
                "specificity": self.specificity,
                "precision": self.precision,
                "f1": self.f1,
                "auc": self.auc}


def auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks; ties count one half."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(p, kind="stable")
    ranks = np.empty(len(p), dtype=np.float64)
    ranks[order] = np.arange(1, len(p) + 1)
    sorted_p = p[order]
    i = 0
    while i < len(p):
        j = i
        while j + 1 < len(p) and sorted_p[j + 1] == sorted_p[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    rank_sum = float(np.sum(ranks[y == 1]))
    return (rank_sum - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def metrics(probs: np.ndarray, labels: np.ndarray,
            threshold: float = 0.5) -> MetricsRow:
    """Confusion-derived metrics; positive class = aphasic, predicted
    positive iff p >= threshold.  Zero-denominator metrics report 0 and are
    named in ``flags``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if len(p) == 0:
        raise ValueError("empty input")
    if p.min() < 0 or p.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    pred = p >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    sens = ratio(tp, tp + fn, "sensitivity")
    spec = ratio(tn, tn + fp, "specificity")
    prec = ratio(tp, tp + fp, "precision")
    f1 = ratio(2 * prec * sens, prec + sens, "f1")
    if (y == 1).any() and (y == 0).any():
        auc_val = auc(p, y)
    else:
        flags.append("auc")
        auc_val = 0.0
    return MetricsRow(
        accuracy=(tp + tn) / len(p),
        balanced_accuracy=(sens + spec) / 2.0,
        sensitivity=sens, specificity=spec, precision=prec, f1=f1,
        auc=auc_val, tp=tp, fp=fp, tn=tn, fn=fn, threshold=threshold,
        flags=tuple(flags))


def subgroup_metrics(probs: np.ndarray, labels: np.ndarray,
                     severities: Sequence[str],
                     threshold: float = 0.5) -> MetricsRow:
    """Metrics over the severe-or-moderate subjects only."""
    mask = np.array([s in SUBGROUP_SEVERITIES for s in severities])
    if not mask.any():
        raise ValueError("no severe or moderate subjects in the set")
    return metrics(np.asarray(probs)[mask], np.asarray(labels)[mask], threshold)


def threshold_sweep(probs: np.ndarray, labels: np.ndarray,
                    thresholds: Sequence[float] = SWEEP_THRESHOLDS,
                    ) -> list[tuple[float, float]]:
    """(threshold, plain accuracy) rows across the cutoff grid."""
    return [(t, metrics(probs, labels, t).accuracy) for t in thresholds]


def seed_aggregate(rows: Sequence[Mapping[str, float]],
                   ) -> dict[str, tuple[float, float]]:
    """Per-metric (mean, standard error) over seeds; SE = sd(ddof=1)/sqrt(n)."""
    if len(rows) < 2:
        raise ValueError("need at least 2 seeds to aggregate")
    keys = list(rows[0].keys())
    for r in rows[1:]:
        if list(r.keys()) != keys:
            raise ValueError("seed rows disagree on metric names")
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))))
    return out
