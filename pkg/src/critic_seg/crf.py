"""Two-label fully connected CRF with exact mean-field inference.

At 64x64 the dense pairwise matrices (4096^2) are tractable, so messages are
computed by plain matrix products; no permutohedral-lattice approximation is
needed at this scale. Unary potentials come from a probability mask, pairwise
potentials are the usual Gaussian appearance (position + color) and
smoothness (position) kernels with a Potts label compatibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericFaultError

_PROB_EPS = 1e-6


@dataclass
class CrfSpec:
    iterations: int = 5
    sigma_alpha: float = 12.0  # appearance kernel, spatial
    sigma_beta: float = 0.12  # appearance kernel, color
    w_app: float = 3.0
    sigma_gamma: float = 2.0  # smoothness kernel, spatial
    w_smooth: float = 1.0
    unary_scale: float = 1.0

    def validate(self):
        assert self.iterations >= 0
        assert self.sigma_alpha > 0 and self.sigma_beta > 0 and self.sigma_gamma > 0
        assert self.w_app >= 0 and self.w_smooth >= 0


def _pairwise_sq_dists(feats: np.ndarray) -> np.ndarray:
    """Squared euclidean distances between all feature rows via the Gram trick."""
    sq = np.einsum("ij,ij->i", feats, feats)
    d = sq[:, None] + sq[None, :] - 2.0 * (feats @ feats.T)
    np.maximum(d, 0.0, out=d)
    return d


def _gaussian_kernel(d_sq: np.ndarray) -> np.ndarray:
    k = np.exp(-0.5 * d_sq)
    np.fill_diagonal(k, 0.0)  # no self-messages
    return k


_SMOOTH_CACHE: dict = {}


def _smoothness_kernel(h: int, w: int, sigma: float) -> np.ndarray:
    # image-independent, so cache it across frames
    key = (h, w, sigma)
    if key not in _SMOOTH_CACHE:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
        pos = np.stack([xs.ravel(), ys.ravel()], axis=1) / sigma
        _SMOOTH_CACHE.clear()
        _SMOOTH_CACHE[key] = _gaussian_kernel(_pairwise_sq_dists(pos))
    return _SMOOTH_CACHE[key]


def crf_refine(img: np.ndarray, prob: np.ndarray, spec: CrfSpec) -> np.ndarray:
    """Refine a soft object-probability mask against the image.

    Returns the mean-field posterior probability of the object label, same
    shape as prob. With zero iterations or zero pairwise weights this is the
    (clamped) unary posterior, i.e. prob itself.
    """
    spec.validate()
    h, w = prob.shape
    n = h * w
    p = np.clip(prob.astype(np.float64).reshape(n), _PROB_EPS, 1.0 - _PROB_EPS)
    # labels: column 0 = background, column 1 = object
    unary = -np.log(np.stack([1.0 - p, p], axis=1)) * spec.unary_scale

    q = _softmax(-unary)
    if spec.iterations == 0 or (spec.w_app == 0.0 and spec.w_smooth == 0.0):
        # no coupling: the unary posterior is already the fixed point
        return q[:, 1].reshape(h, w)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1)
    rgb = img.reshape(n, 3).astype(np.float32)

    k_app = _gaussian_kernel(
        _pairwise_sq_dists(
            np.concatenate([pos / spec.sigma_alpha, rgb / spec.sigma_beta], axis=1).astype(np.float32)
        )
    )
    k_smooth = _smoothness_kernel(h, w, spec.sigma_gamma)

    for _ in range(spec.iterations):
        msg = spec.w_app * (k_app @ q) + spec.w_smooth * (k_smooth @ q)
        # Potts compatibility: a pixel is penalized by messages of the other label
        pairwise = msg[:, ::-1]
        q = _softmax(-(unary + pairwise))
        if not np.all(np.isfinite(q)):
            raise NumericFaultError("mean-field produced non-finite beliefs")
    return q[:, 1].reshape(h, w)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
