"""Detector features: GASF moments of aggregate volume, TCP coefficient of
variation and UDP peak count over a sliding window of traffic samples."""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

DEFAULT_WINDOW = 10
DEFAULT_PEAK_SIGMAS = 2.0
_ANGLE_TOL = 1e-9

FEATURE_NAMES = ("m1", "m2", "m3", "tcp_cv", "udp_peaks")


@dataclass(frozen=True)
class FeatureVector:
    m1: float
    m2: float
    m3: float
    tcp_cv: float
    udp_peaks: int

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


def minmax_scale(window) -> np.ndarray:
    """Map a window linearly onto [-1, 1]; a constant window maps to zeros."""
    x = np.asarray(window, dtype=float)
    if x.size == 0:
        raise ValueError("window must be non-empty")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) * 2.0 / (hi - lo) - 1.0


def polar_angle(x_scaled):
    x = np.asarray(x_scaled, dtype=float)
    if np.any(np.abs(x) > 1.0 + _ANGLE_TOL) or not np.all(np.isfinite(x)):
        raise ValueError("polar_angle input must lie in [-1, 1]")
    out = np.arccos(np.clip(x, -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def gasf(window) -> np.ndarray:
    """Gramian angular summation field, ``G[i, j] = cos(phi_i + phi_j)``."""
    phi = polar_angle(minmax_scale(window))
    phi = np.atleast_1d(phi)
    return np.cos(phi[:, None] + phi[None, :])


def gasf_from_scaled(x_scaled) -> np.ndarray:
    phi = np.atleast_1d(polar_angle(x_scaled))
    return np.cos(phi[:, None] + phi[None, :])


def _signed_cbrt(x: float) -> float:
    return float(np.sign(x) * abs(x) ** (1.0 / 3.0))


def gram_moments(g) -> tuple[float, float, float]:
    """Mean of the entries, RMS deviation, and signed cube root of the
    mean cubed deviation."""
    g = np.asarray(g, dtype=float)
    m1 = float(g.mean())
    d = g - m1
    m2 = float(np.sqrt(np.mean(d * d)))
    m3 = _signed_cbrt(float(np.mean(d * d * d)))
    return m1, m2, m3


def tcp_cv(values) -> float:
    v = np.asarray(values, dtype=float)
    mean = v.mean()
    if mean <= 0:
        return 0.0
    return float(v.std() / mean)


def udp_peaks(values, n_sigmas: float = DEFAULT_PEAK_SIGMAS) -> int:
    """Count samples that rise above ``mean + n_sigmas * std`` of the rest of the window.

    Testing each sample against the other samples, rather than against
    statistics that include it, lets a single spike register in short
    windows: with the spike included, no sample of an n-point window can sit
    more than (n-1)/sqrt(n) standard deviations above the mean.
    """
    v = np.asarray(values, dtype=float)
    n = v.size
    if n < 2:
        raise ValueError("udp_peaks needs at least two samples")
    if v.max() == v.min():
        return 0
    rest = np.broadcast_to(v, (n, n))[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    threshold = rest.mean(axis=1) + n_sigmas * rest.std(axis=1)
    return int(np.count_nonzero(v > threshold))


def featurize(samples, window_len: int = DEFAULT_WINDOW, n_sigmas: float = DEFAULT_PEAK_SIGMAS) -> FeatureVector:
    """Features of the most recent ``window_len`` samples."""
    if window_len < 2:
        raise ValueError("window_len must be at least 2")
    if len(samples) < window_len:
        raise ValueError(f"need {window_len} samples, got {len(samples)}")
    win = samples[-window_len:]
    tcp = np.array([s.v_tcp for s in win])
    udp = np.array([s.v_udp for s in win])
    m1, m2, m3 = gram_moments(gasf(tcp + udp))
    return FeatureVector(m1, m2, m3, tcp_cv(tcp), udp_peaks(udp, n_sigmas))


def write_feature_csv(rows, path) -> None:
    """Write ``(FeatureVector, label)`` pairs as ``m1,m2,m3,tcp_cv,udp_peaks,label``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*FEATURE_NAMES, "label"])
        for fv, label in rows:
            w.writerow([f"{fv.m1:.17g}", f"{fv.m2:.17g}", f"{fv.m3:.17g}", f"{fv.tcp_cv:.17g}", fv.udp_peaks, int(label)])


def read_feature_csv(path) -> list[tuple[FeatureVector, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != [*FEATURE_NAMES, "label"]:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            (FeatureVector(float(r["m1"]), float(r["m2"]), float(r["m3"]), float(r["tcp_cv"]), int(r["udp_peaks"])),
             int(r["label"]))
            for r in reader
        ]
