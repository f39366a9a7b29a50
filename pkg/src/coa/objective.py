"""Targeted contrastive matching (TCM) loss and its gradient with respect to the perturbation.

The attack *ascends*::

    L = max(sim(F_adv, F_ref) - beta * sim(F_adv, F_clean) + gamma, 0)

where every F is a unit modality-aware embedding and sim is the dot product.
Only the image branch of F_adv depends on the perturbation: the caption of the
adversarial image is discrete, so its text embedding is a constant per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coa.core import ImageTensor, Perturbation
from coa.errors import CapabilityError, DegenerateFusionError, ShapeError
from coa.fusion import ModalityAwareEmbedding, fuse_modalities, unit


@dataclass(frozen=True)
class TCMBreakdown:
    loss: float
    sim_target: float
    sim_clean: float
    active: bool


def hinge(sim_target: float, sim_clean: float, beta: float, gamma: float) -> float:
    return max(sim_target - beta * sim_clean + gamma, 0.0)


def tcm_loss(
    f_adv: ModalityAwareEmbedding,
    f_ref: ModalityAwareEmbedding,
    f_clean: ModalityAwareEmbedding,
    beta: float,
    gamma: float,
) -> TCMBreakdown:
    if not f_adv.dim == f_ref.dim == f_clean.dim:
        raise ShapeError(f"embedding dimensions differ: {f_adv.dim}, {f_ref.dim}, {f_clean.dim}")
    # beta = 0 (no repulsion from the clean pair) is allowed here; attack configs require beta > 0
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    s_t = f_adv.dot(f_ref)
    s_c = f_adv.dot(f_clean)
    loss = hinge(s_t, s_c, beta, gamma)
    return TCMBreakdown(loss, s_t, s_c, loss > 0.0)


@dataclass(frozen=True)
class AttackStepContext:
    """Everything the loss needs besides the perturbation itself.

    ``caption_embedding`` is the raw text embedding of the current adversarial
    caption; it is held constant when differentiating.
    """

    clean_image: ImageTensor
    encoder: object
    caption_embedding: np.ndarray
    f_ref: ModalityAwareEmbedding
    f_clean: ModalityAwareEmbedding
    alpha: float
    beta: float
    gamma: float


def _delta_array(delta: Perturbation | np.ndarray) -> np.ndarray:
    return delta.delta if isinstance(delta, Perturbation) else np.asarray(delta, dtype=np.float64)


def tcm_loss_and_gradient(
    delta: Perturbation | np.ndarray, ctx: AttackStepContext
) -> tuple[TCMBreakdown, np.ndarray]:
    """Loss at ``clamp(clean + delta, 0, 1)`` and dL/d delta.

    Pixels pinned at 0 or 1 by the clamp get zero gradient.
    """
    if not hasattr(ctx.encoder, "encode_with_vjp"):
        raise CapabilityError(f"image encoder {getattr(ctx.encoder, 'name', ctx.encoder)!r} "
                              "does not expose gradients (encode_with_vjp)")
    d = _delta_array(delta)
    clean = ctx.clean_image.pixels
    if d.shape != clean.shape:
        raise ShapeError(f"perturbation shape {d.shape} does not match image {clean.shape}")

    raw = clean + d
    inside = (raw > 0.0) & (raw < 1.0)
    x = ImageTensor(np.clip(raw, 0.0, 1.0))
    emb, vjp = ctx.encoder.encode_with_vjp(x)

    f_adv = fuse_modalities(emb, ctx.caption_embedding, ctx.alpha)
    bd = tcm_loss(f_adv, ctx.f_ref, ctx.f_clean, ctx.beta, ctx.gamma)
    if not bd.active or ctx.alpha == 0.0:
        return bd, np.zeros_like(d)

    e_norm = float(np.linalg.norm(emb))
    if e_norm == 0.0:
        raise DegenerateFusionError("image embedding is zero; its direction is undefined")
    img_hat = emb / e_norm
    u = ctx.alpha * img_hat + (1.0 - ctx.alpha) * unit(np.asarray(ctx.caption_embedding, dtype=np.float64))
    u_norm = float(np.linalg.norm(u))
    f = u / u_norm

    # backprop through f = u/|u|, u = alpha*img_hat + const, img_hat = e/|e|
    g_f = ctx.f_ref.values - ctx.beta * ctx.f_clean.values
    g_u = (g_f - f * (f @ g_f)) / u_norm
    g_hat = ctx.alpha * g_u
    g_e = (g_hat - img_hat * (img_hat @ g_hat)) / e_norm
    grad = vjp(g_e) * inside
    return bd, grad


def tcm_gradient(delta: Perturbation | np.ndarray, context: AttackStepContext) -> np.ndarray:
    return tcm_loss_and_gradient(delta, context)[1]
