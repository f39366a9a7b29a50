"""Wrap a differentiable torch module as an image encoder (e.g. a CLIP vision tower).

torch is imported lazily so the rest of the package does not need it.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from coa.backends.base import VJPFn
from coa.core import ImageTensor


class TorchImageEncoder:
    """``module(preprocess(x))`` with x an NCHW float tensor in [0, 1].

    ``preprocess`` must be written in torch ops (resize, normalize) so that
    gradients flow back to pixels.
    """

    def __init__(self, module, dim: int, preprocess: Optional[Callable] = None,
                 device: str = "cpu", name: str = "torch-encoder", max_concurrency: int | None = 1):
        import torch

        self._torch = torch
        self.module = module.to(device).eval()
        self.preprocess = preprocess or (lambda x: x)
        self.device = device
        self.dim = int(dim)
        self.name = name
        self.max_concurrency = max_concurrency

    def _to_tensor(self, image: ImageTensor, requires_grad: bool):
        t = self._torch.as_tensor(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)[None]),
                                  dtype=self._torch.float64, device=self.device)
        return t.requires_grad_(requires_grad)

    def _forward(self, x):
        out = self.module(self.preprocess(x.to(next(self.module.parameters()).dtype)))
        return out.reshape(-1)

    def encode(self, image: ImageTensor) -> np.ndarray:
        with self._torch.no_grad():
            return self._forward(self._to_tensor(image, False)).double().cpu().numpy()

    def encode_with_vjp(self, image: ImageTensor) -> tuple[np.ndarray, VJPFn]:
        x = self._to_tensor(image, True)
        out = self._forward(x)
        emb = out.detach().double().cpu().numpy()

        def vjp(cotangent: np.ndarray) -> np.ndarray:
            c = self._torch.as_tensor(cotangent, dtype=out.dtype, device=self.device)
            (g,) = self._torch.autograd.grad(out, x, grad_outputs=c, retain_graph=True)
            return g[0].permute(1, 2, 0).double().cpu().numpy()

        return emb, vjp
