"""Pixel-domain types, perturbation arithmetic and attack configuration.

All pixel values live in [0, 1]; budgets and step sizes use the same scale,
so the customary "eps = 8" on a 0-255 scale is ``8 / 255`` here.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from coa.errors import ConfigError, ShapeError

# process umask, read once: mkstemp creates files as 0600
_UMASK = os.umask(0)
os.umask(_UMASK)

# one quantization step of an 8-bit image
QUANT_STEP = 1.0 / 255.0

_BOUND_TOL = 1e-12


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """An H x W x C image with values in [0, 1]. The pixel array is read-only."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or min(px.shape) < 1:
            raise ShapeError(f"image must be H x W x C, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image has non-finite pixels")
        if px.min() < -_BOUND_TOL or px.max() > 1 + _BOUND_TOL:
            raise ValueError(f"pixels outside [0, 1]: min={px.min()}, max={px.max()}")
        object.__setattr__(self, "pixels", _frozen(np.clip(px, 0.0, 1.0)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None  # type: ignore[assignment]

    def quantized(self) -> "ImageTensor":
        """Round to the nearest 8-bit level, as saving to PNG would."""
        return ImageTensor(np.round(self.pixels * 255.0) / 255.0)


@dataclass(frozen=True, eq=False)
class Perturbation:
    delta: np.ndarray
    budget_eps: float

    def __post_init__(self):
        if not self.budget_eps >= 0:
            raise ConfigError(f"budget_eps must be >= 0, got {self.budget_eps}")
        d = np.asarray(self.delta, dtype=np.float64)
        if not np.all(np.isfinite(d)):
            raise ValueError("perturbation has non-finite entries")
        if d.size and np.abs(d).max() > self.budget_eps + _BOUND_TOL:
            raise ValueError(
                f"|delta|_inf = {np.abs(d).max()} exceeds budget {self.budget_eps}"
            )
        object.__setattr__(self, "delta", _frozen(d))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.delta.shape

    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not math.isfinite(eps) or eps < 0:
        raise ConfigError(f"eps must be a finite non-negative number, got {eps}")
    return eps


def init_perturbation(shape: tuple[int, ...], eps: float, seed: int) -> Perturbation:
    """Draw delta i.i.d. from Uniform(-eps, eps). eps = 0 gives all zeros."""
    eps = _check_eps(eps)
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-eps, eps, size=tuple(shape))
    return Perturbation(np.clip(delta, -eps, eps), eps)


def project_linf(delta: Perturbation | np.ndarray, eps: float) -> Perturbation:
    """Componentwise clamp onto the L-inf ball of radius eps."""
    eps = _check_eps(eps)
    d = delta.delta if isinstance(delta, Perturbation) else np.asarray(delta, dtype=np.float64)
    return Perturbation(np.clip(d, -eps, eps), eps)


def apply_perturbation(image: ImageTensor, delta: Perturbation | np.ndarray) -> ImageTensor:
    d = delta.delta if isinstance(delta, Perturbation) else np.asarray(delta, dtype=np.float64)
    if d.shape != image.shape:
        raise ShapeError(f"perturbation shape {d.shape} does not match image {image.shape}")
    return ImageTensor(np.clip(image.pixels + d, 0.0, 1.0))


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 8 / 255
    step_size_eta: float = 1 / 255
    pgd_steps: int = 100
    alpha: float = 0.7
    beta: float = 0.7
    # None means 1 - beta
    gamma: float | None = None
    caption_refresh_interval: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        problems = []
        if not (math.isfinite(self.eps) and self.eps >= 0):
            problems.append(f"attack.eps: must be >= 0, got {self.eps}")
        if not (math.isfinite(self.step_size_eta) and self.step_size_eta > 0):
            problems.append(f"attack.step_size_eta: must be > 0, got {self.step_size_eta}")
        elif self.eps > 0 and self.step_size_eta > self.eps + _BOUND_TOL:
            problems.append(
                f"attack.step_size_eta: must not exceed eps ({self.step_size_eta} > {self.eps})"
            )
        if not (isinstance(self.pgd_steps, int) and self.pgd_steps >= 0):
            problems.append(f"attack.pgd_steps: must be a non-negative integer, got {self.pgd_steps}")
        if not 0 <= self.alpha <= 1:
            problems.append(f"attack.alpha: must lie in [0, 1], got {self.alpha}")
        if not 0 < self.beta < 1:
            problems.append(f"attack.beta: must lie in (0, 1), got {self.beta}")
        if self.gamma is not None and not self.gamma >= 0:
            problems.append(f"attack.gamma: must be >= 0, got {self.gamma}")
        if not (isinstance(self.caption_refresh_interval, int) and self.caption_refresh_interval >= 1):
            problems.append(
                "attack.caption_refresh_interval: must be a positive integer, "
                f"got {self.caption_refresh_interval}"
            )
        if problems:
            raise ConfigError(problems)

    @property
    def margin(self) -> float:
        return 1.0 - self.beta if self.gamma is None else float(self.gamma)

    def replace(self, **changes) -> "AttackConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["gamma"] = self.margin
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"attack.{k}: unknown key" for k in unknown])
        return cls(**data)


# --- persistence -----------------------------------------------------------


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def atomic_write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def atomic_write_jsonl(path: str | os.PathLike, rows: list[dict]) -> None:
    text = "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def image_to_png_bytes(image: ImageTensor) -> bytes:
    import io

    px = np.round(image.pixels * 255.0).astype(np.uint8)
    mode = {1: "L", 3: "RGB", 4: "RGBA"}.get(image.channels)
    if mode is None:
        raise ShapeError(f"cannot save a {image.channels}-channel image as PNG")
    arr = px[:, :, 0] if image.channels == 1 else px
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def save_png(image: ImageTensor, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, image_to_png_bytes(image))


def load_image(path: str | os.PathLike, channels: int | None = 3) -> ImageTensor:
    """Load a PNG/JPEG into [0, 1]. ``channels=None`` keeps the file's layout."""
    with Image.open(path) as im:
        if channels == 3:
            im = im.convert("RGB")
        elif channels == 1:
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageTensor(arr)
