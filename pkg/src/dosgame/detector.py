"""Binary attack detectors over :class:`~dosgame.features.FeatureVector` windows.

Two learners are provided: a k-nearest-neighbour vote on z-scored features
and a gradient-boosted ensemble of depth-2 trees with logistic loss.  Both
are frozen once trained; inference never updates them.

Models persist as JSON::

    {"format": "dosgame-detector", "version": 1, "kind": "knn" | "gbdt",
     "threshold": 0.5, "params": {...}}

``params`` holds plain lists of floats.  For ``knn``: ``mean``, ``scale``,
``points`` (z-scored, de-duplicated), ``labels``, ``k``.  For ``gbdt``:
``base_score``, ``learning_rate``, ``trees`` (dict of per-tree arrays, see
:func:`_fit_gbdt`) and ``loss_history``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureVector, featurize

FORMAT_NAME = "dosgame-detector"
FORMAT_VERSION = 1
KINDS = ("knn", "gbdt")
# threshold of a node that does not split; finite so model files stay strict JSON
_NO_SPLIT = 1e300


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    features: FeatureVector
    label: int
    t_end: float = 0.0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


@dataclass(frozen=True)
class DetectorReport:
    accuracy: float
    precision: float
    recall: float
    false_positive_rate: float
    n: int = 0


@dataclass
class DetectorModel:
    kind: str
    params: dict = field(default_factory=dict)
    threshold: float = 0.5
    trained: bool = False
    _arrays: dict | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")

    def score(self, X) -> np.ndarray:
        """Attack probability for each row of ``X``."""
        if not self.trained:
            raise UntrainedModelError("detector has not been trained")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._arrays is None:
            self._arrays = _compile(self.kind, self.params)
        if self.kind == "knn":
            return _knn_score(self._arrays, X)
        return _gbdt_score(self._arrays, X)

    def predict(self, features) -> int:
        x = features.as_array() if isinstance(features, FeatureVector) else features
        return int(self.score(x)[0] >= self.threshold)

    def predict_many(self, X) -> np.ndarray:
        return (self.score(X) >= self.threshold).astype(int)


def _as_xy(examples):
    X = np.array([e.features.as_array() for e in examples], dtype=float)
    y = np.array([e.label for e in examples], dtype=int)
    return X, y


def train(examples, kind: str = "gbdt", hyperparams: dict | None = None, seed: int = 0) -> DetectorModel:
    """Fit a detector.  ``seed`` is accepted for interface symmetry; both
    learners are deterministic."""
    hp = dict(hyperparams or {})
    threshold = hp.pop("threshold", 0.5)
    X, y = _as_xy(examples)
    if len(y) == 0 or len(np.unique(y)) < 2:
        raise ValueError("training set must contain both benign and attack examples")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if kind == "knn":
        params = _fit_knn(X, y, **hp)
    elif kind == "gbdt":
        params = _fit_gbdt(X, y, **hp)
    else:
        raise ValueError(f"unknown detector kind {kind!r}")
    return DetectorModel(kind, params, threshold, trained=True)


def predict(model: DetectorModel, features: FeatureVector) -> int:
    return model.predict(features)


# --- k nearest neighbours -------------------------------------------------

def _fit_knn(X, y, k: int = 5):
    if k < 1:
        raise ValueError("k must be positive")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    # identical (point, label) rows carry no extra weight
    uniq = np.unique(np.column_stack([X, y]), axis=0)
    return {
        "k": int(k),
        "mean": mean.tolist(),
        "scale": scale.tolist(),
        "points": ((uniq[:, :-1] - mean) / scale).tolist(),
        "labels": uniq[:, -1].astype(int).tolist(),
    }


def _compile(kind, params):
    if kind == "knn":
        return {"k": params["k"], "points": np.asarray(params["points"], dtype=float),
                "labels": np.asarray(params["labels"], dtype=float),
                "mean": np.asarray(params["mean"]), "scale": np.asarray(params["scale"])}
    return {"base_score": params["base_score"], "trees": _tree_arrays(params["trees"])}


def _knn_score(arr, X):
    P, lab = arr["points"], arr["labels"]
    Z = (X - arr["mean"]) / arr["scale"]
    d2 = ((Z[:, None, :] - P[None, :, :]) ** 2).sum(axis=2)
    k = min(arr["k"], len(lab))
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return lab[idx].mean(axis=1)


# --- gradient-boosted depth-2 trees ---------------------------------------

def _logloss(F, y):
    # mean of log(1 + exp(F)) - y F, computed stably
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


def _best_split(X, g, h, idx, reg, max_bins):
    """Best Newton-gain split of ``idx``; returns (gain, feature, threshold)."""
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + reg)
    best = (0.0, -1, math.inf)
    for f in range(X.shape[1]):
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        cg = np.cumsum(g[idx][order])
        ch = np.cumsum(h[idx][order])
        cut = np.nonzero(xs[1:] > xs[:-1])[0]  # split after position cut
        if cut.size == 0:
            continue
        if cut.size > max_bins:
            cut = cut[np.linspace(0, cut.size - 1, max_bins).round().astype(int)]
        gl, hl = cg[cut], ch[cut]
        gain = gl**2 / (hl + reg) + (G - gl) ** 2 / (H - hl + reg) - parent
        j = int(np.argmax(gain))
        if gain[j] > best[0] + 1e-12:
            best = (float(gain[j]), f, float(0.5 * (xs[cut[j]] + xs[cut[j] + 1])))
    return best


def _leaf(g, h, idx, reg):
    return float(-g[idx].sum() / (h[idx].sum() + reg)) if idx.size else 0.0


def _fit_tree(X, g, h, reg, max_bins):
    """Depth-2 tree as (root_f, root_t, child_f[2], child_t[2], leaves[4])."""
    all_idx = np.arange(len(g))
    _, rf, rt = _best_split(X, g, h, all_idx, reg, max_bins)
    if rf < 0:
        rf, rt = 0, _NO_SPLIT
    go_left = X[:, rf] <= rt
    cf, ct, leaves = [], [], []
    for side in (all_idx[go_left], all_idx[~go_left]):
        _, f, t = _best_split(X, g, h, side, reg, max_bins) if side.size > 1 else (0.0, -1, _NO_SPLIT)
        if f < 0:
            f, t = 0, _NO_SPLIT
        cf.append(f)
        ct.append(t)
        left = side[X[side, f] <= t]
        right = side[X[side, f] > t]
        leaves += [_leaf(g, h, left, reg), _leaf(g, h, right, reg)]
    return rf, rt, cf, ct, leaves


def _tree_arrays(trees):
    return {"root_f": np.asarray(trees["root_f"], dtype=int), "root_t": np.asarray(trees["root_t"], dtype=float),
            "child_f": np.asarray(trees["child_f"], dtype=int).reshape(-1, 2),
            "child_t": np.asarray(trees["child_t"], dtype=float).reshape(-1, 2),
            "leaves": np.asarray(trees["leaves"], dtype=float).reshape(-1, 4),
            "weight": np.asarray(trees["weight"], dtype=float)}


def _tree_outputs(trees, X):
    """Sum of weighted leaf values of all trees for each row of X."""
    if isinstance(trees["root_f"], list):
        trees = _tree_arrays(trees)
    rf, rt, cf, ct, lv, w = (trees[k] for k in ("root_f", "root_t", "child_f", "child_t", "leaves", "weight"))
    nt = len(rf)
    if nt == 0:
        return np.zeros(len(X))
    ar = np.arange(nt)
    right = (X[:, rf] > rt).astype(int)  # (n, trees)
    f2 = cf[ar, right]
    t2 = ct[ar, right]
    right2 = (np.take_along_axis(X, f2, axis=1) > t2).astype(int)
    vals = lv[ar, 2 * right + right2]
    return vals @ w


def _fit_gbdt(X, y, n_rounds: int = 100, learning_rate: float = 0.3, reg_lambda: float = 1.0, max_bins: int = 64):
    p0 = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    base = float(np.log(p0 / (1 - p0)))
    F = np.full(len(y), base)
    trees = {"root_f": [], "root_t": [], "child_f": [], "child_t": [], "leaves": [], "weight": []}
    history = [_logloss(F, y)]
    for _ in range(n_rounds):
        p = 1.0 / (1.0 + np.exp(-F))
        g, h = p - y, p * (1 - p)
        rf, rt, cf, ct, leaves = _fit_tree(X, g, h, reg_lambda, max_bins)
        one = {"root_f": [rf], "root_t": [rt], "child_f": [cf], "child_t": [ct], "leaves": [leaves], "weight": [1.0]}
        step = _tree_outputs(one, X)
        # backtrack the shrinkage so the training loss never increases
        w = learning_rate
        while w > 1e-6 and _logloss(F + w * step, y) > history[-1]:
            w *= 0.5
        if _logloss(F + w * step, y) > history[-1]:
            w = 0.0
        F = F + w * step
        history.append(_logloss(F, y))
        for key, val in zip(("root_f", "root_t", "child_f", "child_t", "leaves", "weight"), (rf, rt, cf, ct, leaves, w)):
            trees[key].append(val)
    return {"base_score": base, "learning_rate": learning_rate, "trees": trees, "loss_history": history}


def _gbdt_score(arr, X):
    F = arr["base_score"] + _tree_outputs(arr["trees"], X)
    return 1.0 / (1.0 + np.exp(-F))


# --- labelling and evaluation ---------------------------------------------

def label_windows(samples, bursts, window_len: int = 10, interval: float | None = None,
                  stride: int = 1) -> list[LabeledExample]:
    """Featurize every complete window; label 1 iff an attack burst overlaps it.

    A sample stamped ``t`` covers ``(t - interval, t]``.
    """
    if interval is None:
        interval = samples[1].t - samples[0].t if len(samples) > 1 else 0.5
    live = [(b.start, b.end) for b in bursts if b.duration > 0 and b.rate > 0]
    out = []
    for end in range(window_len - 1, len(samples), stride):
        w0 = samples[end - window_len + 1].t - interval
        w1 = samples[end].t
        label = int(any(s < w1 and e > w0 for s, e in live))
        out.append(LabeledExample(featurize(samples[: end + 1], window_len), label, w1))
    return out


def evaluate(model: DetectorModel, examples) -> DetectorReport:
    if not examples:
        raise ValueError("examples must be non-empty")
    X, y = _as_xy(examples)
    pred = model.predict_many(X)
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    n = len(y)
    return DetectorReport(
        accuracy=(tp + tn) / n,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        false_positive_rate=fp / (fp + tn) if fp + tn else 0.0,
        n=n,
    )


# --- optional rule-based extra --------------------------------------------

@dataclass(frozen=True)
class PeriodicityDetector:
    """Flags a window whose aggregate volume has a strong autocorrelation
    peak at some lag >= ``min_lag``.  A heuristic extra, not one of the
    trained detectors."""

    window_len: int = 20
    min_lag: int = 2
    threshold: float = 0.5

    def score_samples(self, samples) -> float:
        if len(samples) < self.window_len:
            raise ValueError(f"need {self.window_len} samples")
        x = np.array([s.v_tcp + s.v_udp for s in samples[-self.window_len:]])
        x = x - x.mean()
        denom = float(x @ x)
        if denom == 0:
            return 0.0
        lags = range(self.min_lag, self.window_len // 2 + 1)
        return max(float(x[:-k] @ x[k:]) / denom for k in lags)

    def predict_samples(self, samples) -> int:
        return int(self.score_samples(samples) >= self.threshold)


# --- persistence ------------------------------------------------------------

def save_model(model: DetectorModel, path) -> None:
    if not model.trained:
        raise UntrainedModelError("refusing to save an untrained detector")
    doc = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": model.kind,
           "threshold": model.threshold, "params": model.params}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, allow_nan=False), encoding="utf-8")


def load_model(path) -> DetectorModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT_NAME or doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a version-{FORMAT_VERSION} detector file")
    return DetectorModel(doc["kind"], doc["params"], doc["threshold"], trained=True)
