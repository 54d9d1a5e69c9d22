"""Loss and sampling primitives for SDF generator training.

Discriminator scores and feature maps enter as plain arrays; no network is
implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptyInput, GridMismatch, NonPositiveSigma, ShapeMismatch
from .project import SphericalMap

DEFAULT_CLAMP = 0.1
MAX_FEATURE_MAPS = 4


@dataclass(frozen=True)
class LatentState:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if mu.shape != sigma.shape:
            raise DimMismatch(f"mu {mu.shape} vs sigma {sigma.shape}")
        if np.any(~(sigma > 0)):
            raise NonPositiveSigma("sigma must be strictly positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1e-5
    lam: float = 0.5
    clamp_t: float = DEFAULT_CLAMP

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.lam, self.clamp_t)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("loss weights must be finite")
        if self.clamp_t <= 0:
            raise ValueError("clamp threshold must be positive")


def reparameterize(state: LatentState, eps) -> np.ndarray:
    eps = np.atleast_1d(np.asarray(eps, dtype=np.float64))
    if eps.shape != state.mu.shape:
        raise DimMismatch(f"eps {eps.shape} vs latent {state.mu.shape}")
    return state.mu + state.sigma * eps


def _nonempty(*arrays):
    out = [np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in arrays]
    if any(a.size == 0 for a in out):
        raise EmptyInput("loss inputs must be non-empty")
    return out


def clamped_l1(pred, target, T: float = DEFAULT_CLAMP) -> float:
    """Mean ``|clamp(pred) - clamp(target)|`` with both clamped to ``[-T, T]``."""
    return clamped_l1_with_grad(pred, target, T)[0]


def clamped_l1_with_grad(pred, target, T: float = DEFAULT_CLAMP):
    """Loss and its subgradient w.r.t. ``pred`` (0 outside the clamp band)."""
    pred, target = _nonempty(pred, target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    if T <= 0:
        raise ValueError("T must be positive")
    cp = np.clip(pred, -T, T)
    ct = np.clip(target, -T, T)
    diff = cp - ct
    n = pred.size
    grad = np.where(np.abs(pred) <= T, np.sign(diff), 0.0) / n
    return float(np.abs(diff).mean()), grad


def kld_diag_gaussian(state: LatentState) -> float:
    """KL divergence of ``N(mu, diag(sigma^2))`` from the standard normal."""
    mu, s = state.mu, state.sigma
    return float(0.5 * np.sum(mu * mu + s * s - 1.0 - 2.0 * np.log(s)))


def hinge_d_loss(real_scores, fake_scores) -> float:
    real, fake = _nonempty(real_scores, fake_scores)
    return float(np.maximum(0.0, 1.0 - real).mean() + np.maximum(0.0, 1.0 + fake).mean())


def hinge_g_loss(fake_scores) -> float:
    (fake,) = _nonempty(fake_scores)
    return float(-fake.mean())


def feature_matching(real_feats, fake_feats) -> float:
    """Mean over (at most four) feature maps of the mean absolute difference."""
    if len(real_feats) != len(fake_feats):
        raise ShapeMismatch(f"{len(real_feats)} real vs {len(fake_feats)} fake feature maps")
    pairs = list(zip(real_feats, fake_feats))[:MAX_FEATURE_MAPS]
    if not pairs:
        raise EmptyInput("no feature maps given")
    terms = []
    for r, f in pairs:
        r = np.asarray(r, dtype=np.float64)
        f = np.asarray(f, dtype=np.float64)
        if r.shape != f.shape:
            raise ShapeMismatch(f"feature shapes {r.shape} vs {f.shape}")
        terms.append(np.abs(r - f).mean())
    return float(np.mean(terms))


def total_objective(gan: float, sdf: float, kld: float, feat: float, w: LossWeights = LossWeights()) -> float:
    return w.alpha * (gan + w.lam * feat) + w.beta * sdf + w.gamma * kld


def spherical_mse(a: SphericalMap, b: SphericalMap):
    """Pixel-wise MSE over all shared channels' valid pixels.

    Returns ``(loss, adjoints)`` with ``adjoints`` a dict of per-pixel
    ``2 (a - b) / N`` arrays (zero on invalid pixels).
    """
    if not a.grid.same_as(b.grid) or list(a.channels) != list(b.channels):
        raise GridMismatch("spherical maps differ in grid or channel set")
    n = sum(int(np.count_nonzero(a.valid[c])) for c in a.channels)
    total = 0.0
    adj = {}
    for c in a.channels:
        mask = a.valid[c]
        r = np.where(mask, a.channels[c] - b.channels[c], 0.0)
        total += float(np.dot(r, r))
        adj[c] = 2.0 * r / n if n else np.zeros_like(r)
    return (total / n if n else 0.0), adj
