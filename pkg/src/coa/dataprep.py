"""Build (clean image, clean text, target text, refined target text, target image) records.

Every backend result is cached on disk, keyed by a hash of its inputs, the
backend name and the prompt version, so a rerun with a warm cache makes no
backend calls at all.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from coa.backends.base import ChatLLM, ModelSet
from coa.core import ImageTensor, atomic_write_bytes, atomic_write_json, image_to_png_bytes, load_image
from coa.errors import BackendError, CoAError, InputError
from coa.textutil import derive_seed

log = logging.getLogger(__name__)

KEY_INFO_PROMPT = "Extract the keywords/information from the following sentence (save verbs and objects): {text}."
KEY_INFO_PROMPT_VERSION = "keyinfo-v1"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

_QUOTES = "\"'`“”‘’"


@dataclass(frozen=True)
class ExampleRecord:
    id: str
    clean_image_path: str
    clean_text: str
    target_text_raw: str
    target_text_refined: str
    target_image_path: str
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExampleRecord":
        return cls(**d)

    def resolve(self, base_dir: str | os.PathLike, which: str) -> Path:
        """Absolute path of ``clean_image_path`` or ``target_image_path``."""
        p = Path(getattr(self, which))
        return p if p.is_absolute() else Path(base_dir) / p


class JsonCache:
    """Content-addressed JSON (and PNG) entries under one directory.

    Writes go through temp-file + rename, so concurrent workers never see a
    partial entry.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(*parts: object) -> str:
        blob = json.dumps(parts, sort_keys=True, ensure_ascii=False, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str) -> Optional[dict]:
        path = self.root / f"{key}.json"
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, key: str, value: dict) -> None:
        atomic_write_json(self.root / f"{key}.json", value)

    def png_path(self, key: str) -> Path:
        return self.root / f"{key}.png"


def read_caption_pool(path: str | os.PathLike) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def list_images(path: str | os.PathLike) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def sample_target(pool: Sequence[str], rng_seed: int) -> str:
    if not pool:
        raise InputError("target caption pool is empty")
    rng = np.random.default_rng(rng_seed)
    return pool[int(rng.integers(len(pool)))]


def _clean_reply(reply: str) -> str:
    text = (reply or "").strip()
    while len(text) >= 1 and (text[0] in _QUOTES or text[-1] in _QUOTES):
        text = text.strip(_QUOTES).strip()
    return text


def _extract(text: str, llm: ChatLLM, cache: Optional[JsonCache]) -> tuple[str, bool]:
    """Returns (refined text, fell_back_to_raw)."""
    if not text or not text.strip():
        raise InputError("key-info extraction needs non-empty text")
    key = JsonCache.key("keyinfo", llm.name, KEY_INFO_PROMPT_VERSION, text)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit["text"], hit["fallback"]
    prompt = KEY_INFO_PROMPT.format(text=text)
    try:
        refined = _clean_reply(llm.chat([{"role": "user", "content": prompt}]))
    except BackendError as exc:
        log.warning("key-info extraction failed (%s); using the raw text", exc)
        return text, True
    fallback = not refined
    if fallback:
        log.warning("key-info extraction returned nothing for %r; using the raw text", text)
        refined = text
    if cache is not None:
        cache.put(key, {"text": refined, "fallback": fallback})
    return refined, fallback


def extract_key_info(text: str, llm: ChatLLM, cache: Optional[JsonCache] = None) -> str:
    """Distill a caption to its verbs and objects with an LLM.

    Backend failures fall back to the raw text; ``prepare_examples`` records
    that in the record's provenance.
    """
    return _extract(text, llm, cache)[0]


def _image_digest(image: ImageTensor) -> str:
    return hashlib.sha256(np.ascontiguousarray(image.pixels).tobytes()
                          + repr(image.shape).encode()).hexdigest()


def cached_caption(image: ImageTensor, captioner, cache: Optional[JsonCache]) -> str:
    key = JsonCache.key("caption", captioner.name, _image_digest(image))
    if cache is not None and (hit := cache.get(key)) is not None:
        return hit["text"]
    text = captioner.caption(image)
    if not text or not text.strip():
        raise BackendError(f"{captioner.name} returned an empty caption", backend=captioner.name)
    if cache is not None:
        cache.put(key, {"text": text})
    return text


def cached_generate(text: str, seed: int, generator, cache: Optional[JsonCache]) -> bytes:
    """PNG bytes of ``generator.generate(text, seed)``."""
    key = JsonCache.key("t2i", generator.name, text, int(seed))
    if cache is not None:
        png = cache.png_path(key)
        if png.exists():
            return png.read_bytes()
    data = image_to_png_bytes(generator.generate(text, seed))
    if cache is not None:
        atomic_write_bytes(cache.png_path(key), data)
    return data


@dataclass
class Manifest:
    records: list[ExampleRecord] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def prepare_examples(
    clean_images: Sequence[str | os.PathLike],
    target_pool: Sequence[str],
    backends: ModelSet,
    cache_dir: str | os.PathLike,
    seed: int,
    *,
    out_dir: str | os.PathLike | None = None,
    workers: int = 1,
) -> Manifest:
    """Caption each clean image, sample and refine a target, render its target image.

    Target images are written to ``out_dir/targets/<id>.png`` and recorded
    relative to ``out_dir`` (default: the parent of ``cache_dir``).
    """
    if backends.text_to_image is None or backends.extractor is None:
        raise InputError("prepare_examples needs text_to_image and extractor backends")
    paths = [Path(p) for p in clean_images]
    if not paths:
        return Manifest()
    if not target_pool:
        raise InputError("target caption pool is empty")
    ids = [p.stem for p in paths]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise InputError(f"clean images must have unique file stems; duplicates: {dupes}")

    cache = JsonCache(cache_dir)
    out_dir = Path(out_dir) if out_dir is not None else Path(cache_dir).parent
    t2i, llm, cap = backends.text_to_image, backends.extractor, backends.captioner

    def one(path: Path) -> ExampleRecord:
        ex_id = path.stem
        image = load_image(path)
        clean_text = cached_caption(image, cap, cache)
        target_seed = derive_seed(seed, ex_id, "target")
        raw = sample_target(target_pool, target_seed)
        refined, fallback = _extract(raw, llm, cache)
        t2i_seed = derive_seed(seed, ex_id, "t2i")
        rel = Path("targets") / f"{ex_id}.png"
        atomic_write_bytes(out_dir / rel, cached_generate(refined, t2i_seed, t2i, cache))
        return ExampleRecord(
            id=ex_id,
            clean_image_path=str(path.resolve()),
            clean_text=clean_text,
            target_text_raw=raw,
            target_text_refined=refined,
            target_image_path=rel.as_posix(),
            provenance={
                "clean_text": {"generator": cap.name, "seed": None},
                "target_text_raw": {"generator": "uniform-pool-sample", "seed": target_seed,
                                    "pool_size": len(target_pool)},
                "target_text_refined": {"generator": llm.name, "seed": None,
                                        "prompt_version": KEY_INFO_PROMPT_VERSION, "fallback_to_raw": fallback},
                "target_image": {"generator": t2i.name, "seed": t2i_seed},
            },
        )

    def guarded(path: Path):
        try:
            return one(path), None
        except (CoAError, OSError, ValueError) as exc:
            log.error("preparing %s failed: %s", path, exc)
            return None, f"{type(exc).__name__}: {exc}"

    cap_width = backends.concurrency_cap()
    width = max(1, min(workers, cap_width) if cap_width else workers)
    if width == 1:
        results = [guarded(p) for p in paths]
    else:
        with ThreadPoolExecutor(max_workers=width) as pool:
            results = list(pool.map(guarded, paths))

    manifest = Manifest()
    for path, (rec, err) in zip(paths, results):
        if rec is not None:
            manifest.records.append(rec)
        else:
            manifest.failures[path.stem] = err
    return manifest
