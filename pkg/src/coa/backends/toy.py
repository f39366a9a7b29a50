"""Deterministic toy backends.

These are shipped implementations, not test doubles: with them the whole
pipeline runs offline, bit-for-bit reproducibly, on a laptop. They form a
small consistent world:

* images are rendered from text by summing one fixed random pattern per
  content word (``ToyTextToImage``), so texts sharing words give similar images;
* the image encoder is a seeded linear map. Its rows have a shared positive
  mean, so every natural image embeds near one common direction (as CLIP
  embeddings do) while ``encode(a * x) == a * encode(x)`` still holds;
* the captioner answers with the codebook caption whose rendered image is
  closest in encoder space, which is what makes attacks against the encoder
  transfer to captions;
* the text encoder is a signed feature-hashing bag of words.
"""

from __future__ import annotations

import re
import threading
from typing import Iterable, Sequence

import numpy as np

from coa.backends.base import JudgeVerdict, VJPFn
from coa.backends.judging import LLMJudge
from coa.core import ImageTensor
from coa.errors import InputError, ShapeError
from coa.textutil import content_tokens, derive_seed, normalize_text, stable_hash, tokens


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class ToyLinearImageEncoder:
    """``encode(x) = W @ x.ravel()`` with W seeded per input size.

    ``common`` sets the shared row component: the all-ones image encodes to
    ``common * c`` for a fixed unit direction ``c``.
    """

    max_concurrency = None

    def __init__(self, dim: int = 64, seed: int = 0, common: float = 0.0, name: str | None = None):
        self.dim = int(dim)
        self.seed = int(seed)
        self.common = float(common)
        self.name = name or f"toy-linear(d={dim},seed={seed},common={common:g})"
        self._cache: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def matrix(self, n_pixels: int) -> np.ndarray:
        with self._lock:
            w = self._cache.get(n_pixels)
            if w is None:
                rng = np.random.default_rng(derive_seed(self.seed, "toy-linear", self.dim, n_pixels))
                w = rng.standard_normal((self.dim, n_pixels))
                w -= w.mean(axis=1, keepdims=True)
                w /= np.sqrt(n_pixels)
                if self.common:
                    rng_c = np.random.default_rng(derive_seed(self.seed, "toy-linear-common", self.dim))
                    w += self.common * _unit(rng_c.standard_normal(self.dim))[:, None] / n_pixels
                w.setflags(write=False)
                self._cache[n_pixels] = w
            return w

    def encode(self, image: ImageTensor) -> np.ndarray:
        x = image.pixels.ravel()
        return self.matrix(x.size) @ x

    def encode_with_vjp(self, image: ImageTensor) -> tuple[np.ndarray, VJPFn]:
        x = image.pixels.ravel()
        w = self.matrix(x.size)
        shape = image.shape

        def vjp(cotangent: np.ndarray) -> np.ndarray:
            return (w.T @ np.asarray(cotangent, dtype=np.float64)).reshape(shape)

        return w @ x, vjp


class ToyTanhImageEncoder:
    """Two-layer ``W2 @ tanh(W1 @ x)``; a non-linear encoder for gradient checks."""

    max_concurrency = None

    def __init__(self, dim: int = 32, hidden: int = 48, seed: int = 0):
        self.dim = int(dim)
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.name = f"toy-tanh(d={dim},h={hidden},seed={seed})"
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._lock = threading.Lock()

    def _weights(self, n: int):
        with self._lock:
            if n not in self._cache:
                rng = np.random.default_rng(derive_seed(self.seed, "toy-tanh", n))
                w1 = rng.standard_normal((self.hidden, n)) * (2.0 / np.sqrt(n))
                b1 = rng.standard_normal(self.hidden) * 0.1 - w1.sum(axis=1) * 0.5
                w2 = rng.standard_normal((self.dim, self.hidden)) / np.sqrt(self.hidden)
                self._cache[n] = (w1, b1, w2)
            return self._cache[n]

    def encode(self, image: ImageTensor) -> np.ndarray:
        return self.encode_with_vjp(image)[0]

    def encode_with_vjp(self, image: ImageTensor) -> tuple[np.ndarray, VJPFn]:
        x = image.pixels.ravel()
        w1, b1, w2 = self._weights(x.size)
        h = np.tanh(w1 @ x + b1)
        shape = image.shape

        def vjp(cotangent: np.ndarray) -> np.ndarray:
            g_h = w2.T @ np.asarray(cotangent, dtype=np.float64)
            return (w1.T @ (g_h * (1.0 - h * h))).reshape(shape)

        return w2 @ h, vjp


class ToyHashTextEncoder:
    """Signed feature hashing over lowercase word tokens.

    Each token adds +/-1 to one bucket chosen by a salted hash, so texts whose
    tokens land in disjoint buckets are exactly orthogonal. A non-zero
    ``common`` adds ``common * |bag|`` along a fixed salted direction, which
    gives unrelated texts a positive baseline similarity.
    """

    max_concurrency = None

    def __init__(self, dim: int = 64, salt: str = "toy", common: float = 0.0, name: str | None = None):
        self.dim = int(dim)
        self.salt = str(salt)
        self.common = float(common)
        self.name = name or f"toy-hash(d={dim},salt={salt},common={common:g})"
        rng = np.random.default_rng(derive_seed(0, "toy-hash-common", self.salt, self.dim))
        self._common_dir = _unit(rng.standard_normal(self.dim))

    def bucket(self, token: str) -> tuple[int, float]:
        h = stable_hash("toy-hash", self.salt, token)
        return h % self.dim, (1.0 if (h >> 32) & 1 else -1.0)

    def encode(self, text: str) -> np.ndarray:
        toks = tokens(normalize_text(text or ""))
        if not toks:
            raise InputError(f"{self.name}: text must contain at least one word, got {text!r}")
        v = np.zeros(self.dim)
        for t in toks:
            idx, sign = self.bucket(t)
            v[idx] += sign
        if self.common:
            v = v + self.common * np.linalg.norm(v) * self._common_dir
        return v


class ToyTextToImage:
    """Render text as ``0.5 + amplitude * sum(pattern(word)) / sqrt(k)`` plus seeded noise.

    Only content words contribute patterns; the noise term is keyed by the full
    normalized text and the seed, so distinct texts give distinct images.
    """

    max_concurrency = None

    def __init__(self, height: int = 32, width: int = 32, channels: int = 3,
                 amplitude: float = 0.3, noise: float = 0.02):
        self.shape = (int(height), int(width), int(channels))
        self.amplitude = float(amplitude)
        self.noise = float(noise)
        self.name = f"toy-t2i({height}x{width}x{channels})"

    def _pattern(self, word: str) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(0, "toy-t2i-word", word))
        return rng.uniform(-1.0, 1.0, size=self.shape)

    def generate(self, text: str, seed: int = 0) -> ImageTensor:
        norm = normalize_text(text or "")
        words = content_tokens(norm)
        if not words:
            raise InputError(f"{self.name}: text must contain at least one word, got {text!r}")
        acc = sum(self._pattern(w) for w in words) / np.sqrt(len(words))
        rng = np.random.default_rng(derive_seed(seed, "toy-t2i-noise", norm))
        px = 0.5 + self.amplitude * acc + self.noise * rng.standard_normal(self.shape)
        return ImageTensor(np.clip(px, 0.0, 1.0))


class ToyCodebookCaptioner:
    """Answer with the codebook caption whose rendered image embeds closest (cosine)."""

    max_concurrency = None

    def __init__(self, encoder, codebook: Sequence[str], generator: ToyTextToImage,
                 name: str | None = None):
        codebook = [c.strip() for c in codebook if c and c.strip()]
        if not codebook:
            raise InputError("toy captioner needs a non-empty codebook")
        self.encoder = encoder
        self.codebook = list(dict.fromkeys(codebook))
        self.generator = generator
        self.name = name or f"toy-codebook(k={len(self.codebook)})"
        anchors = np.stack([_unit(encoder.encode(generator.generate(c, seed=0))) for c in self.codebook])
        anchors.setflags(write=False)
        self.anchors = anchors

    def scores(self, image: ImageTensor) -> np.ndarray:
        if image.shape != self.generator.shape:
            raise ShapeError(f"{self.name}: expects images of shape {self.generator.shape}, got {image.shape}")
        return self.anchors @ _unit(self.encoder.encode(image))

    def nearest(self, image: ImageTensor) -> int:
        return int(np.argmax(self.scores(image)))

    def caption(self, image: ImageTensor) -> str:
        return self.codebook[self.nearest(image)]


class ToyVictim:
    """A black-box victim that answers with its captioner's caption.

    Every prompt is recorded verbatim in ``calls``.
    """

    max_concurrency = None

    def __init__(self, captioner, name: str | None = None):
        self.captioner = captioner
        self.name = name or f"toy-victim[{captioner.name}]"
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def respond(self, image: ImageTensor, prompt: str) -> str:
        with self._lock:
            self.calls.append(prompt)
        return self.captioner.caption(image)


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


_FIELD = re.compile(r"^(CLEAN|GENERATED|TARGET):\s*(.*)$", re.MULTILINE)


class ToyRuleJudgeLLM:
    """Chat backend that judges by content-word overlap and writes a ``SCORE:`` reply.

    It reads the CLEAN/GENERATED/TARGET lines of the judge prompt, so wrapping it
    in :class:`LLMJudge` exercises the same prompt and parsing path as a real LLM.
    """

    max_concurrency = None

    def __init__(self, match_threshold: float = 0.5, related_threshold: float = 0.3):
        self.match_threshold = match_threshold
        self.related_threshold = related_threshold
        self.name = f"toy-rule-judge(match={match_threshold},related={related_threshold})"

    def chat(self, messages: list[dict[str, str]]) -> str:
        fields = dict(_FIELD.findall(messages[-1]["content"]))
        clean = content_tokens(fields.get("CLEAN", ""))
        gen = content_tokens(fields.get("GENERATED", ""))
        target = content_tokens(fields.get("TARGET", ""))
        s_target = jaccard(gen, target)
        s_clean = jaccard(gen, clean)
        lines = [
            f"Step 1: content-word overlap between the generated text and the target is {s_target:.2f}.",
            f"Step 2: content-word overlap between the generated text and the clean text is {s_clean:.2f}.",
        ]
        if s_target >= self.match_threshold:
            lines.append("The generated text closely matches the target text.")
            score = "1"
        elif s_clean >= self.related_threshold:
            lines.append("The generated text still describes the clean image content.")
            score = "0"
        else:
            lines.append("The generated text is unrelated to the original text but also "
                         "does not closely match the target text.")
            score = "0.5"
        return "\n".join(lines + [f"SCORE: {score}"])


def toy_rule_judge(match_threshold: float = 0.5, related_threshold: float = 0.3) -> LLMJudge:
    return LLMJudge(ToyRuleJudgeLLM(match_threshold, related_threshold), parse_retries=0)


_SENTENCE = re.compile(r"\(save verbs and objects\):\s*(.*)$", re.DOTALL)


class ToyKeywordLLM:
    """Key-information extractor that drops stopwords from the sentence in the prompt."""

    max_concurrency = None
    name = "toy-keywords"

    def chat(self, messages: list[dict[str, str]]) -> str:
        content = messages[-1]["content"]
        m = _SENTENCE.search(content)
        sentence = m.group(1) if m else content
        sentence = sentence.strip()
        if sentence.endswith("."):
            sentence = sentence[:-1]
        return " ".join(content_tokens(sentence))


__all__ = [
    "JudgeVerdict",
    "ToyCodebookCaptioner",
    "ToyHashTextEncoder",
    "ToyKeywordLLM",
    "ToyLinearImageEncoder",
    "ToyRuleJudgeLLM",
    "ToyTanhImageEncoder",
    "ToyTextToImage",
    "ToyVictim",
    "jaccard",
    "toy_rule_judge",
]
