"""Closed-form noise predictor for Gaussian data.

For x0 ~ N(0, S) and x = sqrt(ab) x0 + sqrt(1 - ab) eps, the conditional mean
of the noise is E[eps | x] = sqrt(1 - ab) (ab S + (1 - ab) I)^-1 x. It is the
best possible denoiser for data drawn from its own prior, which makes it a
verification oracle for everything that consumes noise predictions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .prompts import PromptEmbedding


def ar1_covariance(n: int, rho: float) -> np.ndarray:
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(np.float64)


@lru_cache(maxsize=64)
def _ar1_eigh(n: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(ar1_covariance(n, rho))
    vals.flags.writeable = False
    vecs.flags.writeable = False
    return vals, vecs


@lru_cache(maxsize=64)
def _ar1_cholesky(n: int, rho: float) -> np.ndarray:
    return np.linalg.cholesky(ar1_covariance(n, rho))


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Covariance of one (rows, cols, channels) slice.

    Either a dense SPD matrix over the flattened slice (`cov` + `geometry`),
    or a separable AR(1) model: correlation `rho_rows` down the rows,
    `rho_cols` across the columns, channels independent with unit variance.
    The AR(1) form applies to any geometry.
    """

    cov: np.ndarray | None = None
    geometry: tuple[int, int, int] | None = None
    rho_rows: float = 0.0
    rho_cols: float = 0.0

    def __post_init__(self):
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=np.float64)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ValueError("covariance must be square")
            if not np.allclose(cov, cov.T, atol=1e-10):
                raise np.linalg.LinAlgError("covariance is not symmetric")
            vals, vecs = np.linalg.eigh(cov)
            if vals.min() <= 0:
                raise np.linalg.LinAlgError("covariance is not positive definite")
            if self.geometry is None:
                object.__setattr__(self, "geometry", (cov.shape[0], 1, 1))
            if int(np.prod(self.geometry)) != cov.shape[0]:
                raise ValueError(f"geometry {self.geometry} does not match a {cov.shape[0]}-dim covariance")
            object.__setattr__(self, "cov", cov)
            object.__setattr__(self, "_eig", (vals, vecs))
        else:
            for r in (self.rho_rows, self.rho_cols):
                if not -1.0 < r < 1.0:
                    raise np.linalg.LinAlgError(f"AR(1) coefficient {r} gives a singular covariance")

    @classmethod
    def ar1(cls, rho_rows: float, rho_cols: float | None = None) -> "GaussianPrior":
        return cls(rho_rows=rho_rows, rho_cols=rho_rows if rho_cols is None else rho_cols)

    @property
    def is_dense(self) -> bool:
        return self.cov is not None

    def matrix(self, geometry: tuple[int, int, int]) -> np.ndarray:
        """Dense covariance over a flattened (rows, cols, c) slice."""
        if self.is_dense:
            self._check(geometry)
            return self.cov
        h, w, c = geometry
        return np.kron(np.kron(ar1_covariance(h, self.rho_rows), ar1_covariance(w, self.rho_cols)), np.eye(c))

    def _check(self, geometry) -> None:
        if self.is_dense and tuple(geometry) != tuple(self.geometry):
            raise ValueError(f"slice geometry {tuple(geometry)} != prior geometry {self.geometry}")

    def eigenvalues(self, geometry: tuple[int, int, int]) -> np.ndarray:
        if self.is_dense:
            self._check(geometry)
            return self._eig[0]
        h, w, c = geometry
        lr, _ = _ar1_eigh(h, self.rho_rows)
        lc, _ = _ar1_eigh(w, self.rho_cols)
        return np.repeat(np.outer(lr, lc).ravel(), c)

    def apply_spectral(self, x: np.ndarray, fn) -> np.ndarray:
        """Apply f(S) to a batch (B, rows, cols, c) through the eigenbasis."""
        B, h, w, c = x.shape
        x64 = x.astype(np.float64)
        if self.is_dense:
            self._check((h, w, c))
            vals, vecs = self._eig
            flat = x64.reshape(B, -1)
            out = ((flat @ vecs) * fn(vals)) @ vecs.T
            return out.reshape(B, h, w, c)
        lr, ur = _ar1_eigh(h, self.rho_rows)
        lc, uc = _ar1_eigh(w, self.rho_cols)
        coef = np.einsum("ai,bajc,jd->bidc", ur, x64, uc)
        coef *= fn(np.outer(lr, lc))[None, :, :, None]
        return np.einsum("ai,bidc,jd->bajc", ur, coef, uc)

    def sample(self, n: int, geometry: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
        white = rng.standard_normal((n,) + tuple(geometry))
        if self.is_dense:
            self._check(geometry)
            L = np.linalg.cholesky(self.cov)
            return (white.reshape(n, -1) @ L.T).reshape((n,) + tuple(geometry))
        h, w, _ = geometry
        Lr = _ar1_cholesky(h, self.rho_rows)
        Lc = _ar1_cholesky(w, self.rho_cols)
        return np.einsum("ai,nijc,bj->nabc", Lr, white, Lc)


def analytic_mmse(prior: GaussianPrior | np.ndarray, x: np.ndarray, alpha_bar: float) -> np.ndarray:
    """E[eps | x_tau = x] for a batch (B, rows, cols, c), a single slice, or a
    flat vector when `prior` is a dense matrix."""
    if not isinstance(prior, GaussianPrior):
        cov = np.asarray(prior, dtype=np.float64)
        flat = np.asarray(x, dtype=np.float64)
        factor = scipy.linalg.cho_factor(alpha_bar * cov + (1.0 - alpha_bar) * np.eye(cov.shape[0]))
        return np.sqrt(1.0 - alpha_bar) * scipy.linalg.cho_solve(factor, flat.reshape(cov.shape[0], -1)).reshape(flat.shape)
    x = np.asarray(x)
    single = x.ndim == 3
    batch = x[None] if single else x
    out = prior.apply_spectral(batch, lambda lam: np.sqrt(1.0 - alpha_bar) / (alpha_bar * lam + (1.0 - alpha_bar)))
    return out[0] if single else out


def expected_mse(prior: GaussianPrior, alpha_bar: float, geometry: tuple[int, int, int]) -> float:
    """Per-dimension MSE of the MMSE prediction: tr(I - (1-ab)(ab S + (1-ab) I)^-1) / dim."""
    lam = prior.eigenvalues(geometry)
    return float(np.mean(1.0 - (1.0 - alpha_bar) / (alpha_bar * lam + (1.0 - alpha_bar))))


def linear_predictor_mse(prior: GaussianPrior, true_cov: np.ndarray, alpha_bar: float, geometry) -> float:
    """Per-dimension MSE of `prior`'s MMSE predictor on data with covariance
    `true_cov` (dense, over the flattened geometry). Equals `expected_mse`
    when the data match the prior."""
    S = prior.matrix(geometry)
    n = S.shape[0]
    eye = np.eye(n)
    W = np.sqrt(1.0 - alpha_bar) * np.linalg.solve(alpha_bar * S + (1.0 - alpha_bar) * eye, eye)
    R = np.sqrt(1.0 - alpha_bar) * W - eye
    return float((alpha_bar * np.trace(W @ true_cov @ W.T) + np.trace(R @ R.T)) / n)


class AnalyticDenoiser:
    """Prompt-blind MMSE noise predictor under a Gaussian prior."""

    kind = "analytic"

    def __init__(self, prior: GaussianPrior):
        self.prior = prior

    @property
    def geometry(self):
        return self.prior.geometry

    def predict(self, x: np.ndarray, alpha_bar: float, prompt: PromptEmbedding | None = None, control=None) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 4:
            raise ValueError(f"expected a (B, rows, cols, c) batch, got {x.shape}")
        return analytic_mmse(self.prior, x, alpha_bar).astype(np.float32)
