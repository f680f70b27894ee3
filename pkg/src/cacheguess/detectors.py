"""Detectors for cache timing channels and the reward terms built on them.

Event trains are lists of bits: 0 when the victim evicts an attacker line,
1 when the attacker evicts a victim line (see ``cache.Conflict``).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .cache import Domain, Latency

DEFAULT_MAX_LAG = 20
DEFAULT_THRESHOLD = 0.75


# -- CC-Hunter --------------------------------------------------------------------
def autocorrelation(train, p: int) -> float:
    """C_p: lag-p covariance over the n-p valid pairs divided by the total
    sum of squares over all n samples. Constant trains give 0 for p >= 1."""
    x = np.asarray(train, dtype=float)
    n = len(x)
    if not 0 <= p < max(n, 1):
        raise ValueError(f"lag {p} out of range for a train of length {n}")
    d = x - x.mean()
    den = float(d @ d)
    if den == 0.0:
        return 1.0 if p == 0 and n else 0.0
    if p == 0:
        return 1.0
    return float(d[: n - p] @ d[p:]) / den


def autocorrelogram(train, max_lag: int = DEFAULT_MAX_LAG):
    """[C_1, ..., C_P] over the lags that exist for this train."""
    n = len(train)
    return [autocorrelation(train, p) for p in range(1, min(max_lag, n - 1) + 1)]


def max_autocorrelation(train, max_lag: int = DEFAULT_MAX_LAG) -> float:
    c = autocorrelogram(train, max_lag)
    return max(c) if c else 0.0


def cc_hunter_detect(train, max_lag: int = DEFAULT_MAX_LAG, threshold: float = DEFAULT_THRESHOLD) -> bool:
    return any(c > threshold for c in autocorrelogram(train, max_lag))


def autocorr_penalty(train, a: float, max_lag: int = DEFAULT_MAX_LAG) -> float:
    """a * mean of C_p^2 over p = 1..P (missing lags count as zero)."""
    if a == 0 or len(train) < 2:
        return 0.0
    c = autocorrelogram(train, max_lag)
    return a * sum(v * v for v in c) / max_lag


class CCHunter:
    """Episode-level detector over the env's event train."""

    def __init__(self, max_lag=DEFAULT_MAX_LAG, threshold=DEFAULT_THRESHOLD):
        self.max_lag = max_lag
        self.threshold = threshold

    def __call__(self, env, outcome=None):
        train = outcome.event_train if outcome is not None else env.event_train
        return cc_hunter_detect(train, self.max_lag, self.threshold)


# -- Cyclone ----------------------------------------------------------------------
def cyclone_features(fill_log, num_lines: int, interval_len: int = 50, num_intervals: int = 4,
                     start: int = 0) -> np.ndarray:
    """Count cross-domain cycles a~>b~>a per cache line and time interval.

    ``fill_log`` holds (access_no, line, domain) for every fill in order. Each
    line remembers the domains of its last two occupants across interval
    boundaries; a fill completes a cycle when it comes from the same domain
    as two fills ago and a different domain than the previous one. The cycle
    is counted in the interval of the completing fill. Fills past the last
    interval are ignored. ``start`` is the access number of the first
    access of the window being measured.
    """
    out = np.zeros((num_lines, num_intervals), dtype=np.int64)
    prev = [None] * num_lines
    prev2 = [None] * num_lines
    for access_no, line, dom in fill_log:
        if not 0 <= line < num_lines:
            raise ValueError(f"line {line} outside 0..{num_lines - 1}")
        if prev2[line] is not None and dom == prev2[line] and dom != prev[line]:
            k = (access_no - start) // interval_len
            if k < num_intervals:
                out[line, k] += 1
        prev2[line], prev[line] = prev[line], dom
    return out


def features_csv(feats: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("line_id,interval,count\n")
    for line in range(feats.shape[0]):
        for k in range(feats.shape[1]):
            buf.write(f"{line},{k},{int(feats[line, k])}\n")
    return buf.getvalue()


def parse_features_csv(text: str) -> np.ndarray:
    rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
    cells = [(int(a), int(b), int(c)) for a, b, c in rows]
    nl = max(c[0] for c in cells) + 1
    ni = max(c[1] for c in cells) + 1
    out = np.zeros((nl, ni), dtype=np.int64)
    for a, b, c in cells:
        out[a, b] = c
    return out


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float = 0.0
    threshold: float = 0.0
    degenerate: bool = False   # classes were indistinguishable during training
    train_accuracy: float = 0.0
    mean: np.ndarray = field(default=None, repr=False)   # feature standardization
    scale: np.ndarray = field(default=None, repr=False)

    def _prep(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x

    def decision(self, x) -> float:
        return float(self.weights @ self._prep(x) + self.bias)

    def classify(self, x) -> bool:
        return self.decision(x) > self.threshold

    def accuracy(self, benign, malicious) -> float:
        ok = sum(not self.classify(x) for x in benign) + sum(self.classify(x) for x in malicious)
        return ok / (len(benign) + len(malicious))


def train_classifier(benign, malicious, epochs: int = 200, lr: float = 0.05, reg: float = 1e-3,
                     seed: int = 0) -> LinearModel:
    """Linear soft-margin classifier (hinge loss, full-batch subgradient
    descent) separating malicious (positive) from benign samples."""
    if not len(benign) or not len(malicious):
        raise ValueError("both classes need at least one sample")
    X = np.array([np.asarray(x, dtype=float).reshape(-1) for x in list(benign) + list(malicious)])
    y = np.array([-1.0] * len(benign) + [1.0] * len(malicious))
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 1e-3, Z.shape[1])
    b = 0.0
    # balance classes so that a skewed corpus does not pull the bias
    cw = np.where(y > 0, len(y) / (2 * len(malicious)), len(y) / (2 * len(benign)))
    for _ in range(epochs):
        margin = y * (Z @ w + b)
        act = margin < 1
        gw = reg * w - ((cw * y)[act, None] * Z[act]).sum(axis=0) / len(y)
        gb = -(cw * y)[act].sum() / len(y)
        w -= lr * gw
        b -= lr * gb
    model = LinearModel(w, b, 0.0, mean=mean, scale=scale)
    bset = {tuple(r) for r in X[y < 0]}
    mset = {tuple(r) for r in X[y > 0]}
    if bset == mset or not np.any(np.abs(w) > 1e-9):
        # nothing separates the classes: fall back to flagging nothing
        model.weights = np.zeros_like(w)
        model.bias = -1.0
        model.degenerate = True
    model.train_accuracy = model.accuracy(list(benign), list(malicious))
    return model


def cross_validate(benign, malicious, k: int = 5, seed: int = 0, **train_kw) -> float:
    """Mean held-out accuracy over k stratified folds."""
    rng = np.random.default_rng(seed)
    bi = rng.permutation(len(benign))
    mi = rng.permutation(len(malicious))
    accs = []
    for f in range(k):
        bt = [benign[i] for j, i in enumerate(bi) if j % k == f]
        mt = [malicious[i] for j, i in enumerate(mi) if j % k == f]
        if not bt and not mt:
            continue
        btr = [benign[i] for j, i in enumerate(bi) if j % k != f]
        mtr = [malicious[i] for j, i in enumerate(mi) if j % k != f]
        model = train_classifier(btr, mtr, seed=seed, **train_kw)
        accs.append(model.accuracy(bt, mt))
    return float(np.mean(accs))


class Cyclone:
    """Episode-level detector: cycle features of the episode's fill log fed
    to a trained LinearModel. The env must have ``track_fills`` enabled."""

    def __init__(self, model: LinearModel, num_lines: int, interval_len: int = 50, num_intervals: int = 4):
        self.model = model
        self.num_lines = num_lines
        self.interval_len = interval_len
        self.num_intervals = num_intervals

    def features(self, env):
        return cyclone_features(env.cache.fill_log or [], self.num_lines, self.interval_len, self.num_intervals,
                                start=getattr(env, "fill_base", 0))

    def __call__(self, env, outcome=None):
        return self.model.classify(self.features(env))


# -- victim misses ----------------------------------------------------------------
def victim_miss_monitor(results, threshold: int = 1):
    """Per victim access, whether the monitor has fired by then. Fires once
    the victim has missed ``threshold`` times."""
    fired = []
    misses = 0
    for r in results:
        if r.domain != Domain.VICTIM:
            continue
        if r.latency == Latency.MISS:
            misses += 1
        fired.append(misses >= threshold)
    return fired


class VictimMissDetector:
    def __init__(self, threshold: int = 1):
        self.threshold = threshold

    def __call__(self, env, outcome=None):
        n = outcome.victim_misses if outcome is not None else env.victim_misses
        return n >= self.threshold
