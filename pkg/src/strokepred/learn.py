"""Models and training: lightweight CNN, logistic baseline, two fusion kinds.

Everything is plain numpy with hand-written backprop.  The four model kinds
share one parameter container and one forward/backward pair:

* ``lightweight``: blocks of conv3x3 (stride 1, pad 1) -> ReLU -> maxpool 2x2,
  then flatten -> dense -> 1 logit.  Image input only.
* ``logistic``: a linear layer on either the flattened image or the tabular
  vector, fixed at build time by whether ``tabular_dim`` is set.
* ``early_fusion``: lightweight backbone, tabular vector concatenated to the
  flattened features before the dense head.
* ``daft``: lightweight backbone whose final-block feature maps get a
  per-channel affine (gamma, beta) computed from the tabular vector by one
  dense map; gamma=1, beta=0 reproduces ``lightweight`` exactly.

Arrays follow the dtype of the parameter vector (float32 for real training,
float64 in gradient tests), and every reduction has a fixed order, so runs
are bit-reproducible.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FormatError, SEVERITY_CATEGORIES, SubjectRecord
from .rng import CounterRng

MODEL_KINDS = ("lightweight", "logistic", "early_fusion", "daft")
RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8
CKP_MAGIC = b"CKP1"


class NumericAbort(RuntimeError):
    """Training produced a non-finite value; carries diagnostics."""


@dataclass(frozen=True)
class CnnConfig:
    input_hw: tuple[int, int]
    channels: tuple[int, ...] = (4, 8, 16, 32)

    def __post_init__(self):
        h, w = self.input_hw
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError("channels must be positive")
        f = 2 ** len(self.channels)
        if h % f or w % f:
            raise ValueError(
                f"input {h}x{w} not divisible by 2^{len(self.channels)}")

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    @property
    def feature_dim(self) -> int:
        h, w = self.input_hw
        f = 2 ** self.n_blocks
        return self.channels[-1] * (h // f) * (w // f)

    def to_json_dict(self) -> dict:
        return {"input_hw": list(self.input_hw), "channels": list(self.channels)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "CnnConfig":
        return cls(input_hw=tuple(d["input_hw"]), channels=tuple(d["channels"]))


@dataclass(frozen=True)
class TrainConfig:
    lrs: tuple[float, ...] = (1e-4, 5e-4, 1e-5)
    max_epochs: int = 200
    batch_size: int = 16
    optimizer: str = "rmsprop"
    class_weights: tuple[float, float] | None = None  # None: derive from split
    seed: int = 1

    def __post_init__(self):
        if any(lr <= 0 for lr in self.lrs) or not self.lrs:
            raise ValueError("learning rates must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json_dict(self) -> dict:
        return {"lrs": list(self.lrs), "max_epochs": self.max_epochs,
                "batch_size": self.batch_size, "optimizer": self.optimizer,
                "class_weights": (None if self.class_weights is None
                                  else list(self.class_weights)),
                "seed": self.seed}

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        kw["lrs"] = tuple(kw["lrs"])
        if kw.get("class_weights") is not None:
            kw["class_weights"] = tuple(kw["class_weights"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class ModelParams:
    kind: str
    layout: tuple[tuple[str, tuple[int, ...]], ...]
    vector: np.ndarray
    cnn: CnnConfig | None = None
    tabular_dim: int | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if self.vector.shape != (total,):
            raise ValueError(f"vector length {self.vector.shape} != layout {total}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("parameters must be finite")

    def view(self, name: str) -> np.ndarray:
        off = 0
        for n, shape in self.layout:
            size = int(np.prod(shape))
            if n == name:
                return self.vector[off:off + size].reshape(shape)
            off += size
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(kind=self.kind, layout=self.layout,
                           vector=self.vector.copy(), cnn=self.cnn,
                           tabular_dim=self.tabular_dim)


def _layout_for(kind: str, cnn: CnnConfig | None,
                tabular_dim: int | None) -> tuple[tuple[str, tuple[int, ...]], ...]:
    if kind == "logistic":
        if tabular_dim is not None:
            d = tabular_dim
        elif cnn is not None:
            d = cnn.input_hw[0] * cnn.input_hw[1]
        else:
            raise ValueError("logistic needs tabular_dim or cnn.input_hw")
        return (("w", (1, d)), ("b", (1,)))
    if cnn is None:
        raise ValueError(f"{kind} requires a CnnConfig")
    entries: list[tuple[str, tuple[int, ...]]] = []
    c_in = 1
    for i, c_out in enumerate(cnn.channels):
        entries.append((f"conv{i}_w", (c_out, c_in, 3, 3)))
        entries.append((f"conv{i}_b", (c_out,)))
        c_in = c_out
    head_in = cnn.feature_dim
    if kind == "early_fusion":
        if tabular_dim is None:
            raise ValueError("early_fusion requires tabular_dim")
        head_in += tabular_dim
    if kind == "daft":
        if tabular_dim is None:
            raise ValueError("daft requires tabular_dim")
        c_last = cnn.channels[-1]
        entries.append(("film_w", (2 * c_last, tabular_dim)))
        entries.append(("film_b", (2 * c_last,)))
    entries.append(("head_w", (1, head_in)))
    entries.append(("head_b", (1,)))
    return tuple(entries)


def build_params(kind: str, cnn: CnnConfig | None = None,
                 tabular_dim: int | None = None,
                 rng: CounterRng | None = None,
                 dtype=np.float32) -> ModelParams:
    """Allocate parameters; He fan-in init when an rng is given, else zeros.

    DAFT's affine map starts at identity (gamma bias 1) on top of He-random
    fusion weights.
    """
    layout = _layout_for(kind, cnn, tabular_dim)
    total = sum(int(np.prod(s)) for _, s in layout)
    vec = np.zeros(total, dtype=dtype)
    params = ModelParams(kind=kind, layout=layout, vector=vec, cnn=cnn,
                         tabular_dim=tabular_dim)
    if rng is not None:
        for name, shape in layout:
            v = params.view(name)
            if name.endswith("_b") or name == "b":
                if name == "film_b":
                    c_last = shape[0] // 2
                    v[:c_last] = 1.0  # gamma starts at identity
                continue
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            sd = math.sqrt(2.0 / fan_in)
            v[...] = np.asarray(rng.normals(int(np.prod(shape)), 0.0, sd),
                                dtype=dtype).reshape(shape)
    return params


# ---------------------------------------------------------------------------
# Forward / backward


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, w.shape[0]).transpose(0, 3, 1, 2), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray,
                   x_shape: tuple[int, ...]):
    n, c, h, wd = x_shape
    c_out = w.shape[0]
    dout_r = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    dw = (dout_r.T @ cols).reshape(w.shape)
    db = dout_r.sum(axis=0)
    dwin = (dout_r @ w.reshape(c_out, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki:ki + h, kj:kj + wd] += dwin[:, :, :, :, ki, kj].transpose(
                0, 3, 1, 2)
    return dxp[:, :, 1:h + 1, 1:wd + 1], dw, db


def _pool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    xr = np.ascontiguousarray(
        x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)  # ties -> first position, deterministic
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout: np.ndarray, idx: np.ndarray, x_shape: tuple[int, ...]):
    n, c, h, w = x_shape
    dxr = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    return dxr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(
        0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _check_inputs(params: ModelParams, images, tabular):
    needs_tab = params.kind in ("early_fusion", "daft") or (
        params.kind == "logistic" and params.tabular_dim is not None)
    if needs_tab and tabular is None:
        raise ValueError(f"{params.kind} requires a tabular batch")
    if params.kind == "lightweight" and tabular is not None:
        raise ValueError("lightweight takes no tabular input")
    if needs_tab and tabular.shape[1] != params.tabular_dim:
        raise ValueError(
            f"tabular dim {tabular.shape[1]} != expected {params.tabular_dim}")
    if params.kind != "logistic" or params.tabular_dim is None:
        if images is None:
            raise ValueError(f"{params.kind} requires an image batch")
        h, w = params.cnn.input_hw
        if images.ndim != 3 or images.shape[1:] != (h, w):
            raise ValueError(f"image batch {images.shape} != (n, {h}, {w})")


def _run(params: ModelParams, images, tabular, keep_cache: bool):
    """Shared forward pass; cache holds what backward needs."""
    _check_inputs(params, images, tabular)
    dtype = params.vector.dtype
    cache: dict = {}
    if params.kind == "logistic":
        x = (tabular if params.tabular_dim is not None
             else images.reshape(images.shape[0], -1)).astype(dtype, copy=False)
        logits = x @ params.view("w").T + params.view("b")
        cache["x"] = x
        return logits[:, 0], cache
    x = images.astype(dtype, copy=False)[:, None, :, :]  # (n, 1, h, w)
    blocks = []
    for i in range(params.cnn.n_blocks):
        w = params.view(f"conv{i}_w")
        b = params.view(f"conv{i}_b")
        pre, cols = _conv_forward(x, w, b)
        act = np.maximum(pre, 0)
        pooled, idx = _pool_forward(act)
        blocks.append({"x_shape": x.shape, "cols": cols, "pre": pre,
                       "idx": idx, "act_shape": act.shape})
        x = pooled
    if params.kind == "daft":
        tab = tabular.astype(dtype, copy=False)
        c_last = params.cnn.channels[-1]
        film = tab @ params.view("film_w").T + params.view("film_b")
        gamma, beta = film[:, :c_last], film[:, c_last:]
        cache["pre_mod"] = x
        cache["gamma"] = gamma
        x = x * gamma[:, :, None, None] + beta[:, :, None, None]
        cache["tab"] = tab
    feats = x.reshape(x.shape[0], -1)
    cache["maps_shape"] = x.shape
    if params.kind == "early_fusion":
        tab = tabular.astype(dtype, copy=False)
        feats = np.concatenate([feats, tab], axis=1)
        cache["tab"] = tab
    logits = feats @ params.view("head_w").T + params.view("head_b")
    cache["feats"] = feats
    if keep_cache:
        cache["blocks"] = blocks
    return logits[:, 0], cache


def forward(params: ModelParams, images: np.ndarray | None,
            tabular: np.ndarray | None = None) -> np.ndarray:
    """Batch logits, shape (n,)."""
    logits, _ = _run(params, images, tabular, keep_cache=False)
    if not np.all(np.isfinite(logits)):
        raise NumericAbort("non-finite logits in forward pass")
    return logits


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict_proba(params: ModelParams, images, tabular=None) -> np.ndarray:
    return sigmoid(forward(params, images, tabular))


def class_weighted_bce(logits: np.ndarray, labels: np.ndarray,
                       weights: tuple[float, float] = (1.0, 1.0)) -> float:
    """Mean over the batch of w_{y_i} * BCE(sigma(z_i), y_i), stable form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if min(weights) <= 0:
        raise ValueError("class weights must be positive")
    # softplus(z) - y*z, with softplus(z) = max(z,0) + log1p(exp(-|z|))
    per = np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))
    w = np.where(y == 1, weights[1], weights[0])
    return float(np.mean(w * per))


def class_weights_from_labels(labels: np.ndarray) -> tuple[float, float]:
    """w_c = N / (2 * N_c); requires both classes present."""
    n = len(labels)
    n1 = int(np.sum(labels))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("both classes must be present to derive weights")
    return n / (2.0 * n0), n / (2.0 * n1)


def _backprop(params: ModelParams, images, tabular, labels,
              weights: tuple[float, float], want_inputs: bool = False):
    logits, cache = _run(params, images, tabular, keep_cache=True)
    loss = class_weighted_bce(logits, labels, weights)
    y = np.asarray(labels, dtype=np.float64)
    wv = np.where(y == 1, weights[1], weights[0])
    dz = (wv * (sigmoid(logits) - y) / len(y)).astype(params.vector.dtype)

    grad = np.zeros_like(params.vector)
    gview = ModelParams(kind=params.kind, layout=params.layout, vector=grad,
                        cnn=params.cnn, tabular_dim=params.tabular_dim)
    d_images = None
    d_tab = None

    if params.kind == "logistic":
        x = cache["x"]
        gview.view("w")[...] = dz[None, :] @ x
        gview.view("b")[...] = dz.sum()
        if want_inputs:
            dx = dz[:, None] @ params.view("w")
            if params.tabular_dim is not None:
                d_tab = dx
            else:
                d_images = dx.reshape(images.shape)
        return loss, grad, d_images, d_tab

    feats = cache["feats"]
    gview.view("head_w")[...] = dz[None, :] @ feats
    gview.view("head_b")[...] = dz.sum()
    dfeats = dz[:, None] @ params.view("head_w")

    if params.kind == "early_fusion":
        img_f = feats.shape[1] - params.tabular_dim
        d_tab = dfeats[:, img_f:]
        dfeats = dfeats[:, :img_f]

    dmaps = dfeats.reshape(cache["maps_shape"])
    if params.kind == "daft":
        c_last = params.cnn.channels[-1]
        pre_mod = cache["pre_mod"]
        gamma = cache["gamma"]
        tab = cache["tab"]
        dgamma = (dmaps * pre_mod).sum(axis=(2, 3))  # (n, c)
        dbeta = dmaps.sum(axis=(2, 3))
        dmaps = dmaps * gamma[:, :, None, None]
        film_w = params.view("film_w")
        gview.view("film_w")[:c_last] = dgamma.T @ tab
        gview.view("film_w")[c_last:] = dbeta.T @ tab
        gview.view("film_b")[:c_last] = dgamma.sum(axis=0)
        gview.view("film_b")[c_last:] = dbeta.sum(axis=0)
        d_tab = dgamma @ film_w[:c_last] + dbeta @ film_w[c_last:]

    dx = dmaps
    for i in reversed(range(params.cnn.n_blocks)):
        blk = cache["blocks"][i]
        dact = _pool_backward(dx, blk["idx"], blk["act_shape"])
        dpre = dact * (blk["pre"] > 0)
        dx, dw, db = _conv_backward(dpre, blk["cols"], params.view(f"conv{i}_w"),
                                    blk["x_shape"])
        gview.view(f"conv{i}_w")[...] = dw
        gview.view(f"conv{i}_b")[...] = db
    if want_inputs:
        d_images = dx[:, 0, :, :]
    return loss, grad, d_images, d_tab


def backward(params: ModelParams, images, tabular, labels,
             weights: tuple[float, float] = (1.0, 1.0)):
    """(loss, gradient) of the class-weighted BCE over the batch."""
    loss, grad, _, _ = _backprop(params, images, tabular, labels, weights)
    return loss, grad


def input_gradients(params: ModelParams, images, tabular, labels,
                    weights: tuple[float, float] = (1.0, 1.0)):
    """(d_images, d_tabular) of the batch loss; None where not applicable."""
    _, _, di, dt = _backprop(params, images, tabular, labels, weights,
                             want_inputs=True)
    return di, dt


# ---------------------------------------------------------------------------
# Optimizers


def _check_grad_finite(grad: np.ndarray, context: str):
    if not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise NumericAbort(f"{context}: {bad}/{grad.size} non-finite gradient entries")


def sgd_step(vector: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if lr <= 0:
        raise ValueError("lr must be positive")
    _check_grad_finite(grad, "sgd_step")
    return vector - lr * grad


def rmsprop_step(vector: np.ndarray, grad: np.ndarray, state: np.ndarray,
                 lr: float, rho: float = RMSPROP_RHO,
                 eps: float = RMSPROP_EPS):
    if lr <= 0:
        raise ValueError("lr must be positive")
    _check_grad_finite(grad, "rmsprop_step")
    state = rho * state + (1.0 - rho) * grad * grad
    return vector - lr * grad / (np.sqrt(state) + eps), state


# ---------------------------------------------------------------------------
# Datasets and training


@dataclass
class ArrayDataset:
    images: np.ndarray | None
    tabular: np.ndarray | None
    labels: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.labels)
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be binary")
        ns = {a.shape[0] for a in (self.images, self.tabular, self.labels)
              if a is not None}
        if len(ns) != 1:
            raise ValueError("images/tabular/labels lengths disagree")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "ArrayDataset":
        return ArrayDataset(
            images=None if self.images is None else self.images[idx],
            tabular=None if self.tabular is None else self.tabular[idx],
            labels=self.labels[idx])


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


def train(kind: str, train_set: ArrayDataset, val_set: ArrayDataset,
          config: TrainConfig, lr: float,
          cnn: CnnConfig | None = None, tabular_dim: int | None = None,
          ) -> tuple[ModelParams, list[EpochStats]]:
    """Mini-batch training; returns the snapshot from the epoch with minimum
    validation loss (ties -> earliest) plus the per-epoch loss history."""
    if len(val_set) == 0:
        raise ValueError("validation set must be nonempty")
    weights = config.class_weights or class_weights_from_labels(train_set.labels)
    params = build_params(kind, cnn=cnn, tabular_dim=tabular_dim,
                          rng=CounterRng(config.seed, "init", kind))
    shuffle_rng = CounterRng(config.seed, "shuffle", kind)
    opt_state = np.zeros_like(params.vector)
    n = len(train_set)
    best_vec = None
    best_val = math.inf
    history: list[EpochStats] = []
    for epoch in range(1, config.max_epochs + 1):
        order = list(range(n))
        shuffle_rng.shuffle(order)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = train_set.take(idx)
            _, grad = backward(params, batch.images, batch.tabular,
                               batch.labels, weights)
            if config.optimizer == "sgd":
                params.vector = sgd_step(params.vector, grad, lr)
            else:
                params.vector, opt_state = rmsprop_step(
                    params.vector, grad, opt_state, lr)
        train_loss = class_weighted_bce(
            forward(params, train_set.images, train_set.tabular),
            train_set.labels, weights)
        val_loss = class_weighted_bce(
            forward(params, val_set.images, val_set.tabular),
            val_set.labels, weights)
        if math.isnan(val_loss):
            raise NumericAbort(f"validation loss NaN at epoch {epoch}")
        history.append(EpochStats(epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_vec = params.vector.copy()
    best = ModelParams(kind=kind, layout=params.layout, vector=best_vec,
                       cnn=cnn, tabular_dim=tabular_dim)
    return best, history


# ---------------------------------------------------------------------------
# Logistic regression via IRLS (the tabular baseline)


def logistic_fit(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6,
                 max_iter: int = 100, tol: float = 1e-8) -> ModelParams:
    """Ridge-penalized logistic regression; intercept unpenalized.

    IRLS until max |delta coef| < tol or max_iter sweeps.  Deterministic:
    no randomness anywhere.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    n, d = x.shape
    design = np.concatenate([np.ones((n, 1)), x], axis=1)
    beta = np.zeros(d + 1)
    penalty = ridge * np.eye(d + 1)
    penalty[0, 0] = 0.0
    trace = []
    for it in range(max_iter):
        eta = design @ beta
        p = sigmoid(eta)
        w = np.clip(p * (1.0 - p), 1e-10, None)
        z = eta + (y - p) / w
        a = design.T @ (design * w[:, None]) + penalty
        b = design.T @ (w * z)
        try:
            new = np.linalg.solve(a, b)
        except np.linalg.LinAlgError as exc:
            raise NumericAbort(f"IRLS solve failed at iteration {it}: {exc}")
        if not np.all(np.isfinite(new)):
            raise NumericAbort(
                f"IRLS diverged at iteration {it}; trace={trace[-5:]}")
        delta = float(np.max(np.abs(new - beta)))
        trace.append(delta)
        beta = new
        if delta < tol:
            break
    params = build_params("logistic", tabular_dim=d, dtype=np.float64)
    params.view("w")[...] = beta[1:]
    params.view("b")[...] = beta[0]
    return params


# ---------------------------------------------------------------------------
# Tabular encoding


@dataclass(frozen=True)
class TabularEncoding:
    """Severity one-hot (5) + normalized lesion size + normalized log
    recovery time.  References come from training-split statistics."""

    size_ref: float
    time_ref: float

    def __post_init__(self):
        if self.size_ref <= 0 or self.time_ref <= 0:
            raise ValueError("references must be positive")

    @property
    def dim(self) -> int:
        return 7

    def encode(self, record: SubjectRecord) -> np.ndarray:
        return self.design([record])[0]

    def design(self, records: Sequence[SubjectRecord],
               features: tuple[str, ...] = ("severity", "size", "time"),
               ) -> np.ndarray:
        cols = []
        for f in features:
            if f == "severity":
                onehot = np.zeros((len(records), len(SEVERITY_CATEGORIES)))
                for i, r in enumerate(records):
                    onehot[i, SEVERITY_CATEGORIES.index(r.severity)] = 1.0
                cols.append(onehot)
            elif f == "size":
                v = np.array([min(1.0, max(0.0, r.left_lesion_size / self.size_ref))
                              for r in records])
                cols.append(v[:, None])
            elif f == "time":
                ref = math.log1p(self.time_ref)
                v = np.array([min(1.0, max(0.0, math.log1p(r.recovery_time) / ref))
                              for r in records])
                cols.append(v[:, None])
            else:
                raise ValueError(f"unknown feature {f!r}")
        return np.concatenate(cols, axis=1)

    def to_json_dict(self) -> dict:
        return {"size_ref": self.size_ref, "time_ref": self.time_ref}

    @classmethod
    def from_json_dict(cls, d: dict) -> "TabularEncoding":
        return cls(size_ref=float(d["size_ref"]), time_ref=float(d["time_ref"]))


# ---------------------------------------------------------------------------
# Checkpoints (CKP1)


def write_checkpoint(params: ModelParams, path: str | Path) -> None:
    meta = {
        "kind": params.kind,
        "cnn": None if params.cnn is None else params.cnn.to_json_dict(),
        "tabular_dim": params.tabular_dim,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(params.vector, dtype="<f4").tobytes()
    Path(path).write_bytes(CKP_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def read_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("truncated checkpoint", len(raw))
    if raw[:4] != CKP_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    (jlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + jlen:
        raise FormatError("truncated config JSON", 8)
    meta = json.loads(raw[8:8 + jlen].decode("utf-8"))
    cnn = None if meta["cnn"] is None else CnnConfig.from_json_dict(meta["cnn"])
    vec = np.frombuffer(raw, dtype="<f4", offset=8 + jlen).copy()
    layout = _layout_for(meta["kind"], cnn, meta["tabular_dim"])
    total = sum(int(np.prod(s)) for _, s in layout)
    if vec.shape != (total,):
        raise FormatError(f"payload {vec.shape[0]} floats != layout {total}", 8 + jlen)
    return ModelParams(kind=meta["kind"], layout=layout, vector=vec, cnn=cnn,
                       tabular_dim=meta["tabular_dim"])
