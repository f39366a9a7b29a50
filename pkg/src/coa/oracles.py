"""Brute-force oracles for the test suite.

Nothing here imports the fusion, objective or chain modules: the point is an
independent arithmetic path to compare them against.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

MAX_ORACLE_PIXELS = 12


@dataclass(frozen=True)
class ToyInstance:
    """A fixed-caption attack small enough to enumerate every corner of the eps-box.

    The image embedding is ``matrix @ pixels.ravel()``; the caption embedding
    ``caption_emb`` stays constant.
    """

    clean_pixels: np.ndarray
    matrix: np.ndarray
    clean_img_emb: np.ndarray
    clean_txt_emb: np.ndarray
    target_img_emb: np.ndarray
    target_txt_emb: np.ndarray
    caption_emb: np.ndarray
    alpha: float
    beta: float
    gamma: float
    eps: float

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.clean_pixels.shape))


def _rownorm(m: np.ndarray) -> np.ndarray:
    m = np.atleast_2d(m)
    return m / np.sqrt(np.sum(m * m, axis=-1, keepdims=True))


def _blend(img: np.ndarray, txt: np.ndarray, alpha: float) -> np.ndarray:
    return _rownorm(alpha * _rownorm(img) + (1.0 - alpha) * _rownorm(txt))


def corner_losses(instance: ToyInstance) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-caption loss at every sign corner. Returns (corners, losses)."""
    n = instance.n_pixels
    if n > MAX_ORACLE_PIXELS:
        raise ValueError(f"refusing to enumerate 2^{n} corners (limit is n <= {MAX_ORACLE_PIXELS})")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
    corners = instance.eps * signs
    x = np.clip(instance.clean_pixels.ravel()[None, :] + corners, 0.0, 1.0)
    adv = _blend(x @ instance.matrix.T, np.broadcast_to(instance.caption_emb, (len(x), instance.caption_emb.size)),
                 instance.alpha)
    ref = _blend(instance.target_img_emb, instance.target_txt_emb, instance.alpha)[0]
    cle = _blend(instance.clean_img_emb, instance.clean_txt_emb, instance.alpha)[0]
    raw = np.einsum("kd,d->k", adv, ref) - instance.beta * np.einsum("kd,d->k", adv, cle) + instance.gamma
    return corners, np.maximum(raw, 0.0)


def brute_force_linf_optimum(instance: ToyInstance) -> dict:
    """Maximum fixed-caption loss over all 2^n corners of the eps-box."""
    corners, losses = corner_losses(instance)
    k = int(np.argmax(losses))
    return {"best_delta": corners[k].reshape(instance.clean_pixels.shape), "best_loss": float(losses[k])}


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float], delta: np.ndarray,
                               h: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(delta, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn(x)
        flat[i] = old - h
        down = loss_fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return grad
