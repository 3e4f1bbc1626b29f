"""Gaussian state-distribution estimates and their metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateDataError, EmptyInputError, FormatError, ShapeError
from .nn import MlpModel, reward_forward

SIGMA_FLOOR = 1e-6
REWARD_CLAMP = 1e-7


@dataclass(frozen=True)
class GaussianEstimate:
    """Diagonal N(mu, sigma^2) or full-covariance N(mu, cov) state estimate."""

    family: str
    mu: np.ndarray
    sigma: np.ndarray | None = None
    cov: np.ndarray | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        if self.family == "diagonal":
            sigma = np.asarray(self.sigma, dtype=np.float64)
            if sigma.shape != mu.shape:
                raise ShapeError("sigma must match mu")
            if np.any(sigma <= 0):
                raise DegenerateDataError("sigma components must be positive")
            object.__setattr__(self, "sigma", sigma)
        elif self.family == "full":
            cov = np.asarray(self.cov, dtype=np.float64)
            if cov.shape != (mu.size, mu.size):
                raise ShapeError("cov must be n x n")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
                raise DegenerateDataError("cov must be symmetric")
            object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        else:
            raise ValueError(f"unknown family {self.family!r}")

    @classmethod
    def diagonal(cls, mu, sigma) -> GaussianEstimate:
        return cls("diagonal", mu, sigma=sigma)

    @classmethod
    def full(cls, mu, cov) -> GaussianEstimate:
        return cls("full", mu, cov=cov)

    @property
    def dim(self):
        return self.mu.size

    @property
    def scales(self) -> np.ndarray:
        """Per-dimension standard deviations."""
        if self.family == "diagonal":
            return self.sigma
        return np.sqrt(np.diag(self.cov))

    def as_full(self) -> GaussianEstimate:
        if self.family == "full":
            return self
        return GaussianEstimate.full(self.mu, np.diag(self.sigma**2))

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.as_full().cov)
        except np.linalg.LinAlgError as exc:
            raise DegenerateDataError("covariance is not positive definite") from exc


def sample(est: GaussianEstimate, count: int, rng) -> np.ndarray:
    """Draw ``count`` i.i.d. states as a (count, n) array.

    ``rng`` is a numpy Generator or an integer seed.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(rng)
    if est.family == "diagonal":
        return est.mu + est.sigma * rng.standard_normal((count, est.dim))
    chol = est.cholesky()
    return est.mu + rng.standard_normal((count, est.dim)) @ chol.T


def kl_diag(p: GaussianEstimate, q: GaussianEstimate) -> float:
    """Mean over dimensions of KL(p_i || q_i) for diagonal Gaussians."""
    if p.dim != q.dim:
        raise ShapeError(f"dimension mismatch {p.dim} vs {q.dim}")
    sp, sq = p.scales, q.scales
    per = np.log(sq / sp) + (sp**2 + (p.mu - q.mu) ** 2) / (2.0 * sq**2) - 0.5
    return float(np.mean(per))


def kl_full(p: GaussianEstimate, q: GaussianEstimate) -> float:
    """Closed-form KL(p || q) for full-covariance Gaussians, divided by n."""
    if p.dim != q.dim:
        raise ShapeError(f"dimension mismatch {p.dim} vs {q.dim}")
    n = p.dim
    lp, lq = p.cholesky(), q.cholesky()
    # tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2, quadratic via a triangular solve
    a = np.linalg.solve(lq, lp)
    y = np.linalg.solve(lq, q.mu - p.mu)
    logdet = 2.0 * (np.log(np.diag(lq)).sum() - np.log(np.diag(lp)).sum())
    kl = 0.5 * (np.sum(a * a) + y @ y - n + logdet)
    return float(kl / n)


def kl(p: GaussianEstimate, q: GaussianEstimate) -> float:
    if p.family == "diagonal" and q.family == "diagonal":
        return kl_diag(p, q)
    return kl_full(p.as_full(), q.as_full())


@dataclass(frozen=True)
class ReferenceStats:
    mu_star: np.ndarray
    sigma_star: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    sample_count: int
    cov_star: np.ndarray | None = None

    @property
    def dim(self):
        return self.mu_star.size

    def estimate(self, family="diagonal") -> GaussianEstimate:
        if family == "diagonal":
            return GaussianEstimate.diagonal(self.mu_star, self.sigma_star)
        if self.cov_star is None:
            raise DegenerateDataError("reference carries no covariance")
        return GaussianEstimate.full(self.mu_star, self.cov_star)


def fit_reference(samples) -> ReferenceStats:
    """Per-dimension mean, population std, min and max (plus full covariance)."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError("samples must be a 2-d array")
    if s.shape[0] < 2:
        raise EmptyInputError("need at least two samples")
    if not np.all(np.isfinite(s)):
        raise DegenerateDataError("samples contain non-finite values")
    mu = s.mean(axis=0)
    sigma = s.std(axis=0)
    if np.any(sigma <= 0):
        raise DegenerateDataError(f"zero variance in dimensions {np.flatnonzero(sigma <= 0).tolist()}")
    centered = s - mu
    cov = centered.T @ centered / s.shape[0]
    return ReferenceStats(mu, sigma, s.min(axis=0), s.max(axis=0), int(s.shape[0]), cov)


def save_reference(ref: ReferenceStats, path) -> None:
    """Plain-text record: one ``key v1 v2 ...`` line per field, floats in repr form."""
    lines = [f"dim {ref.dim}", f"sample_count {ref.sample_count}"]
    for key in ("mu_star", "sigma_star", "lo", "hi"):
        lines.append(key + " " + " ".join(repr(float(v)) for v in getattr(ref, key)))
    if ref.cov_star is not None:
        lines.append("cov_star " + " ".join(repr(float(v)) for v in ref.cov_star.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_reference(path) -> ReferenceStats:
    fields = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, *vals = line.split()
            fields[key] = vals
    try:
        n = int(fields["dim"][0])
        vec = {k: np.array([float(v) for v in fields[k]]) for k in ("mu_star", "sigma_star", "lo", "hi")}
        count = int(fields["sample_count"][0])
        cov = None
        if "cov_star" in fields:
            cov = np.array([float(v) for v in fields["cov_star"]]).reshape(n, n)
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed reference record ({exc})") from exc
    if any(v.shape != (n,) for v in vec.values()):
        raise FormatError(f"{path}: vector length does not match dim {n}")
    return ReferenceStats(vec["mu_star"], vec["sigma_star"], vec["lo"], vec["hi"], count, cov)


def proxy_reward(reward: MlpModel, state, victim_action):
    """-log R(s, a*), with R clamped to [1e-7, 1 - 1e-7]."""
    r = reward_forward(reward, state, victim_action)
    return -np.log(np.clip(r, REWARD_CLAMP, 1.0 - REWARD_CLAMP))


def _weights_ok(states, rewards):
    s = np.asarray(states, dtype=np.float64)
    w = np.asarray(rewards, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError("states must be a 2-d array")
    if s.shape[0] == 0:
        raise EmptyInputError("no states to refine on")
    if w.shape != (s.shape[0],):
        raise ShapeError("one reward per state is required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DegenerateDataError("rewards must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise DegenerateDataError("reward weights sum to zero")
    if s.shape[0] < 2:
        raise DegenerateDataError("a single state cannot define a spread")
    return s, w, total


def dist_refine(states, rewards, sigma_floor=SIGMA_FLOOR):
    """Reward-weighted mean and standard deviation of the states.

    Weighted variance is normalized by the weight sum. Components are
    floored at ``sigma_floor`` so the result stays a valid sampler.
    """
    s, w, total = _weights_ok(states, rewards)
    mu = (w @ s) / total
    var = (w @ (s - mu) ** 2) / total
    return mu, np.maximum(np.sqrt(var), sigma_floor)


def dist_refine_full(states, rewards, sigma_floor=SIGMA_FLOOR):
    """Reward-weighted mean and covariance (diagonal floored at sigma_floor**2)."""
    s, w, total = _weights_ok(states, rewards)
    mu = (w @ s) / total
    c = s - mu
    cov = (c * w[:, None]).T @ c / total
    cov = 0.5 * (cov + cov.T)
    d = np.diag(cov)
    cov[np.diag_indices_from(cov)] = np.maximum(d, sigma_floor**2)
    # a rank-deficient weighted cloud gets a tiny ridge so Cholesky succeeds
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = cov + np.eye(cov.shape[0]) * sigma_floor**2 * 10
    return mu, cov
