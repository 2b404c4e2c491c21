"""Inlier prior from Lowe ratios.

Class-conditional ratio densities are fitted once per dataset as smoothed
histograms. For each pair the inlier ratio ``alpha`` is estimated by
least-squares fitting the mixture ``alpha f_in + (1 - alpha) f_out`` to the
pair's ratio histogram, and each correspondence gets the posterior
probability of being an inlier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_BINS = 50
SMOOTHING = 1e-6
ALPHA_CLAMP = (0.01, 0.99)
GOLDEN_TOL = 1e-4
POSTERIOR_FLOOR = 1e-12


class PriorError(Exception):
    pass


class InsufficientSamplesError(PriorError):
    pass


class RatioRangeError(PriorError, ValueError):
    pass


@dataclass(frozen=True)
class RatioDensityModel:
    bin_edges: np.ndarray
    f_in_density: np.ndarray
    f_out_density: np.ndarray

    @property
    def widths(self):
        return np.diff(self.bin_edges)

    def bin_index(self, r):
        r = np.asarray(r, dtype=np.float64)
        _check_range(r)
        idx = np.searchsorted(self.bin_edges, r, side="left") - 1
        return np.clip(idx, 0, len(self.widths) - 1)

    def f_in(self, r):
        return self.f_in_density[self.bin_index(r)]

    def f_out(self, r):
        return self.f_out_density[self.bin_index(r)]

    def to_json(self):
        return json.dumps({
            "bin_edges": self.bin_edges.tolist(),
            "f_in_density": self.f_in_density.tolist(),
            "f_out_density": self.f_out_density.tolist(),
        }, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.array(d["bin_edges"], dtype=np.float64),
                   np.array(d["f_in_density"], dtype=np.float64),
                   np.array(d["f_out_density"], dtype=np.float64))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def _check_range(r):
    if np.any(~np.isfinite(r)) or np.any(r <= 0) or np.any(r > 1):
        raise RatioRangeError("Lowe ratios must lie in (0, 1]")


def _density(samples, edges):
    counts, _ = np.histogram(samples, bins=edges)
    counts = counts.astype(np.float64) + SMOOTHING
    return counts / (counts.sum() * np.diff(edges))


def fit_ratio_densities(ratios, labels, bins=DEFAULT_BINS, min_samples=100):
    """Smoothed, normalized histograms of inlier and outlier ratios."""
    ratios = np.asarray(ratios, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    _check_range(ratios)
    n_in, n_out = int(labels.sum()), int((~labels).sum())
    if min(n_in, n_out) < min_samples:
        raise InsufficientSamplesError(
            f"need >= {min_samples} samples per class, got {n_in} inliers / {n_out} outliers")
    edges = np.linspace(0.0, 1.0, bins + 1)
    return RatioDensityModel(edges, _density(ratios[labels], edges),
                             _density(ratios[~labels], edges))


def _golden_section(f, lo, hi, tol):
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def estimate_inlier_ratio(ratios, model, min_samples=32):
    """Mixture weight of ``f_in`` that best fits the ratio histogram."""
    ratios = np.asarray(ratios, dtype=np.float64).reshape(-1)
    if len(ratios) < min_samples:
        raise InsufficientSamplesError(f"need >= {min_samples} ratios, got {len(ratios)}")
    _check_range(ratios)
    counts, _ = np.histogram(ratios, bins=model.bin_edges)
    hist = counts / (len(ratios) * model.widths)
    f_in, f_out = model.f_in_density, model.f_out_density

    def sse(alpha):
        resid = hist - (alpha * f_in + (1.0 - alpha) * f_out)
        return float(np.dot(resid, resid))

    alpha = _golden_section(sse, 0.0, 1.0, GOLDEN_TOL)
    return float(np.clip(alpha, *ALPHA_CLAMP))


def posterior_inlier_probability(r, alpha, model):
    """``f_in(r) alpha / (f_in(r) alpha + f_out(r) (1 - alpha))``."""
    fi = model.f_in(r)
    fo = model.f_out(r)
    num = fi * alpha
    return num / np.maximum(num + fo * (1.0 - alpha), POSTERIOR_FLOOR)


def pair_posteriors(ratios, model):
    """Estimate ``alpha`` for one pair, then the posterior per correspondence."""
    alpha = estimate_inlier_ratio(ratios, model)
    return posterior_inlier_probability(ratios, alpha, model), alpha
