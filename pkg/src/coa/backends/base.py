"""Interfaces for every external model the pipeline touches.

Backends are duck-typed; the protocols below document what each role must
provide. A backend that is not safe for concurrent calls sets
``max_concurrency = 1`` and the orchestrators serialize calls to it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, TypeVar, runtime_checkable

import numpy as np

from coa.core import ImageTensor
from coa.errors import BackendError

log = logging.getLogger(__name__)

T = TypeVar("T")

# (embedding, vjp) where vjp(cotangent) = d<encode(image), cotangent>/d pixels
VJPFn = Callable[[np.ndarray], np.ndarray]


@runtime_checkable
class ImageEncoder(Protocol):
    name: str
    dim: int

    def encode(self, image: ImageTensor) -> np.ndarray: ...


@runtime_checkable
class DifferentiableImageEncoder(ImageEncoder, Protocol):
    def encode_with_vjp(self, image: ImageTensor) -> tuple[np.ndarray, VJPFn]: ...


@runtime_checkable
class TextEncoder(Protocol):
    name: str
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


@runtime_checkable
class Captioner(Protocol):
    name: str

    def caption(self, image: ImageTensor) -> str: ...


@runtime_checkable
class TextToImage(Protocol):
    name: str

    def generate(self, text: str, seed: int) -> ImageTensor: ...


@runtime_checkable
class Victim(Protocol):
    name: str

    def respond(self, image: ImageTensor, prompt: str) -> str: ...


@runtime_checkable
class ChatLLM(Protocol):
    """Anything that turns a chat message list into a reply string."""

    name: str

    def chat(self, messages: list[dict[str, str]]) -> str: ...


@runtime_checkable
class Judge(Protocol):
    name: str

    def judge(self, clean_text: str, generated_text: str, target_text: str) -> "JudgeVerdict": ...


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    rationale: str

    ALLOWED = (0.0, 0.5, 1.0)

    def __post_init__(self):
        if float(self.score) not in self.ALLOWED:
            raise ValueError(f"judge score must be one of {self.ALLOWED}, got {self.score}")
        if not self.rationale.strip():
            raise ValueError("judge rationale must be non-empty")
        object.__setattr__(self, "score", float(self.score))


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    base_delay: float = 0.5
    factor: float = 2.0

    def delays(self):
        for i in range(self.attempts - 1):
            yield self.base_delay * self.factor**i


def call_with_retry(
    fn: Callable[[], T],
    *,
    policy: RetryPolicy,
    backend: str,
    retry_on: tuple[type[BaseException], ...] = (Exception,),
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    """Call ``fn`` with exponential backoff; raise BackendError once attempts run out."""
    delays = list(policy.delays())
    last: BaseException | None = None
    for attempt in range(1, policy.attempts + 1):
        try:
            return fn()
        except retry_on as exc:
            last = exc
            if attempt == policy.attempts:
                break
            wait = delays[attempt - 1]
            log.warning("%s: attempt %d/%d failed (%s); retrying in %.2fs",
                        backend, attempt, policy.attempts, exc, wait)
            sleep(wait)
    raise BackendError(
        f"{backend}: failed after {policy.attempts} attempts: {last}",
        backend=backend,
        attempts=policy.attempts,
        retryable=True,
    ) from last


def max_concurrency(*backends: object) -> Optional[int]:
    """Smallest declared ``max_concurrency`` among backends, or None if unbounded."""
    caps = [getattr(b, "max_concurrency", None) for b in backends if b is not None]
    caps = [c for c in caps if c is not None]
    return min(caps) if caps else None


@dataclass
class ModelSet:
    """The bundle of backends a pipeline stage needs. Unused roles may be None."""

    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    captioner: Captioner
    text_to_image: Optional[TextToImage] = None
    extractor: Optional[ChatLLM] = None
    victim: Optional[Victim] = None
    judge: Optional[Judge] = None
    eval_encoders: tuple[TextEncoder, ...] = ()

    def concurrency_cap(self) -> Optional[int]:
        return max_concurrency(
            self.image_encoder, self.text_encoder, self.captioner, self.text_to_image,
            self.extractor, self.victim, self.judge, *self.eval_encoders,
        )
