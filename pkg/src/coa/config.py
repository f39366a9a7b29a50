"""Hierarchical JSON run configuration and backend construction.

Sections: ``data``, ``backends``, ``attack``, ``eval``, ``sweep``. Relative
paths are resolved against the config file's directory. Validation collects
every problem before raising, so one run reports all offending keys.
"""

from __future__ import annotations

import copy
import importlib
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from coa.backends.base import ModelSet, RetryPolicy
from coa.backends.judging import LLMJudge
from coa.backends.remote import ChatCompletionsClient
from coa.backends.toy import (
    ToyCodebookCaptioner,
    ToyHashTextEncoder,
    ToyKeywordLLM,
    ToyLinearImageEncoder,
    ToyTanhImageEncoder,
    ToyTextToImage,
    ToyVictim,
    toy_rule_judge,
)
from coa.core import AttackConfig
from coa.dataprep import read_caption_pool
from coa.errors import ConfigError
from coa.evaluation import DEFAULT_PROMPT

FIXTURE_ALIAS = "@fixture"
SECTIONS = ("data", "backends", "attack", "eval", "sweep")
TOP_LEVEL = {"run_id", "seed", "workers", *SECTIONS}

_DEFAULT_EVAL = {
    "prompt": DEFAULT_PROMPT,
    "clean_baseline": True,
    "target_field": "target_text_raw",
    "noise": {"stds": [], "seeds": 20},
}


def fixture_config_path() -> Path:
    """The bundled 10-image toy fixture configuration."""
    return Path(str(resources.files("coa") / "data" / "fixture" / "config.json"))


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def workers(self) -> int:
        return int(self.raw.get("workers", 1))

    @property
    def run_id(self) -> str:
        return str(self.raw.get("run_id", "run"))

    @property
    def data(self) -> dict:
        return self.raw.get("data", {})

    @property
    def eval(self) -> dict:
        merged = copy.deepcopy(_DEFAULT_EVAL)
        merged.update(self.raw.get("eval", {}))
        return merged

    @property
    def sweep(self) -> list[dict]:
        return list(self.raw.get("sweep", []))

    def path(self, value: str | None) -> Optional[Path]:
        if value is None:
            return None
        p = Path(os.path.expanduser(value))
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    def attack_config(self, overrides: dict | None = None) -> AttackConfig:
        attack = dict(self.raw.get("attack", {}))
        attack.setdefault("rng_seed", self.seed)
        for key, value in (overrides or {}).items():
            attack[key.split(".", 1)[1]] = value
        return AttackConfig.from_dict(attack)

    def snapshot(self) -> dict:
        """Fully resolved configuration: absolute paths, defaults filled in."""
        snap = copy.deepcopy(self.raw)
        snap["seed"] = self.seed
        snap["workers"] = self.workers
        snap["run_id"] = self.run_id
        data = snap.setdefault("data", {})
        for key in ("images", "caption_pool", "cache_dir"):
            if data.get(key) is not None:
                data[key] = str(self.path(data[key]))
        for spec in _iter_backend_specs(snap):
            if spec.get("codebook") and isinstance(spec["codebook"], str):
                spec["codebook"] = str(self.path(spec["codebook"]))
        snap["attack"] = self.attack_config().to_dict()
        snap["eval"] = self.eval
        snap.setdefault("sweep", [])
        return snap


def _iter_backend_specs(raw: dict):
    for spec in raw.get("backends", {}).values():
        if isinstance(spec, dict):
            yield spec
    ev = raw.get("eval", {})
    for key in ("victim", "judge"):
        if isinstance(ev.get(key), dict):
            yield ev[key]
    for spec in ev.get("encoders", []) or []:
        if isinstance(spec, dict):
            yield spec


def load_config(path: str | os.PathLike, *, seed: int | None = None, workers: int | None = None) -> RunConfig:
    if str(path) == FIXTURE_ALIAS:
        path = fixture_config_path()
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config: file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    if seed is not None:
        raw["seed"] = int(seed)
    if workers is not None:
        raw["workers"] = int(workers)
    return RunConfig(raw, path.parent.resolve())


# --- validation ---------------------------------------------------------------

_IMAGE_ENCODERS = {"toy_linear", "toy_tanh", "python"}
_TEXT_ENCODERS = {"toy_hash", "python"}
_CAPTIONERS = {"toy_codebook", "python"}
_T2I = {"toy", "python"}
_LLMS = {"toy_keywords", "chat", "python"}
_JUDGES = {"toy_rule", "chat", "python"}
_VICTIMS = {"toy_codebook", "python"}


def _check_kind(problems: list[str], where: str, spec: Any, kinds: set[str]) -> None:
    if not isinstance(spec, dict):
        problems.append(f"{where}: must be an object with a 'kind'")
        return
    kind = spec.get("kind")
    if kind not in kinds:
        problems.append(f"{where}.kind: expected one of {sorted(kinds)}, got {kind!r}")
        return
    if kind == "chat":
        for k in ("base_url", "model"):
            if not spec.get(k):
                problems.append(f"{where}.{k}: required for chat backends")
    if kind == "python" and ":" not in str(spec.get("factory", "")):
        problems.append(f"{where}.factory: expected 'module:callable'")
    if kind == "toy_codebook" and spec.get("codebook") is None:
        problems.append(f"{where}.codebook: required for toy_codebook backends")


def validate(cfg: RunConfig, stages: tuple[str, ...] = ("prepare", "attack", "evaluate")) -> None:
    """Raise ConfigError listing every problem relevant to ``stages``."""
    raw, problems = cfg.raw, []
    for key in sorted(set(raw) - TOP_LEVEL):
        problems.append(f"{key}: unknown top-level key")
    if not isinstance(raw.get("seed", 0), int):
        problems.append("seed: must be an integer")
    if not isinstance(raw.get("workers", 1), int) or raw.get("workers", 1) < 1:
        problems.append("workers: must be a positive integer")

    data = raw.get("data", {})
    if "prepare" in stages:
        for key in ("images", "caption_pool"):
            if not data.get(key):
                problems.append(f"data.{key}: missing")
            elif not cfg.path(data[key]).exists():
                problems.append(f"data.{key}: path does not exist: {cfg.path(data[key])}")

    b = raw.get("backends", {})
    _check_kind(problems, "backends.image_encoder", b.get("image_encoder"), _IMAGE_ENCODERS)
    _check_kind(problems, "backends.text_encoder", b.get("text_encoder"), _TEXT_ENCODERS)
    _check_kind(problems, "backends.captioner", b.get("captioner"), _CAPTIONERS)
    if "prepare" in stages:
        _check_kind(problems, "backends.text_to_image", b.get("text_to_image"), _T2I)
        _check_kind(problems, "backends.extractor", b.get("extractor"), _LLMS)
    for name, spec in b.items():
        if name not in ("image_encoder", "text_encoder", "captioner", "text_to_image", "extractor"):
            problems.append(f"backends.{name}: unknown backend role")
        elif isinstance(spec, dict) and isinstance(spec.get("codebook"), str) \
                and not cfg.path(spec["codebook"]).exists():
            problems.append(f"backends.{name}.codebook: path does not exist")

    try:
        cfg.attack_config()
    except ConfigError as exc:
        problems.extend(exc.problems)
    except TypeError as exc:
        problems.append(f"attack: {exc}")

    if "evaluate" in stages:
        ev = raw.get("eval", {})
        _check_kind(problems, "eval.victim", ev.get("victim"), _VICTIMS)
        _check_kind(problems, "eval.judge", ev.get("judge"), _JUDGES)
        encs = ev.get("encoders")
        if not encs:
            problems.append("eval.encoders: at least one text encoder is required")
        else:
            names = []
            for i, spec in enumerate(encs):
                _check_kind(problems, f"eval.encoders[{i}]", spec, _TEXT_ENCODERS)
                names.append(spec.get("name") if isinstance(spec, dict) else None)
            if len(set(names)) != len(names):
                problems.append("eval.encoders: names must be unique")
        if ev.get("target_field", "target_text_raw") not in ("target_text_raw", "target_text_refined"):
            problems.append("eval.target_field: must be target_text_raw or target_text_refined")
        noise = ev.get("noise", {})
        if any((not isinstance(s, (int, float))) or s < 0 for s in noise.get("stds", [])):
            problems.append("eval.noise.stds: must be non-negative numbers")

    for i, entry in enumerate(raw.get("sweep", []) or []):
        if not isinstance(entry, dict):
            problems.append(f"sweep[{i}]: must be an object of overrides")
            continue
        for key in entry:
            if key != "name" and not key.startswith("attack."):
                problems.append(f"sweep[{i}].{key}: only attack.* keys can be swept")
        try:
            cfg.attack_config({k: v for k, v in entry.items() if k != "name"})
        except (ConfigError, TypeError) as exc:
            problems.append(f"sweep[{i}]: {exc}")

    if problems:
        raise ConfigError(problems)


def sweep_variants(cfg: RunConfig) -> list[tuple[str, dict]]:
    """(label, overrides) per sweep entry; labels are filesystem-safe and unique."""
    out, seen = [], set()
    for i, entry in enumerate(cfg.sweep):
        overrides = {k: v for k, v in entry.items() if k != "name"}
        label = entry.get("name") or "_".join(f"{k.split('.', 1)[1]}={v:.6g}" if isinstance(v, float)
                                              else f"{k.split('.', 1)[1]}={v}" for k, v in sorted(overrides.items()))
        label = "".join(c if c.isalnum() or c in "-_=." else "_" for c in label) or f"variant{i}"
        if label in seen:
            label = f"{label}_{i}"
        seen.add(label)
        out.append((label, overrides))
    return out


# --- backend construction -----------------------------------------------------


def _python_factory(spec: dict, **extra):
    module, _, attr = spec["factory"].partition(":")
    fn = getattr(importlib.import_module(module), attr)
    return fn(**spec.get("args", {}), **extra)


def _chat_client(spec: dict, log_dir: Optional[Path]) -> ChatCompletionsClient:
    retry = spec.get("retry", {})
    return ChatCompletionsClient(
        spec["base_url"], spec["model"],
        api_key_env=spec.get("api_key_env", "COA_API_KEY"),
        temperature=spec.get("temperature", 0.0),
        timeout=spec.get("timeout", 60.0),
        retry=RetryPolicy(retry.get("attempts", 3), retry.get("base_delay", 0.5)),
        max_concurrency=spec.get("max_concurrency", 4),
        log_dir=log_dir,
    )


def _image_encoder(spec: dict):
    kind = spec["kind"]
    if kind == "toy_linear":
        return ToyLinearImageEncoder(spec.get("dim", 64), spec.get("seed", 0), spec.get("common", 0.0))
    if kind == "toy_tanh":
        return ToyTanhImageEncoder(spec.get("dim", 32), spec.get("hidden", 48), spec.get("seed", 0))
    return _python_factory(spec)


def _text_encoder(spec: dict):
    if spec["kind"] == "toy_hash":
        return ToyHashTextEncoder(spec.get("dim", 64), spec.get("salt", "toy"), spec.get("common", 0.0),
                                  name=spec.get("name"))
    return _python_factory(spec)


def _t2i(spec: dict):
    if spec["kind"] == "toy":
        return ToyTextToImage(spec.get("height", 64), spec.get("width", 64), spec.get("channels", 3),
                              spec.get("amplitude", 0.3), spec.get("noise", 0.02))
    return _python_factory(spec)


def _codebook(cfg: RunConfig, spec: dict) -> list[str]:
    book = spec["codebook"]
    return list(book) if isinstance(book, list) else read_caption_pool(cfg.path(book))


def build_models(cfg: RunConfig, *, log_dir: str | os.PathLike | None = None,
                 include_eval: bool = True) -> ModelSet:
    b = cfg.raw.get("backends", {})
    log_dir = Path(log_dir) if log_dir else None
    enc = _image_encoder(b["image_encoder"])
    txt = _text_encoder(b["text_encoder"])
    t2i = _t2i(b["text_to_image"]) if b.get("text_to_image") else None

    def captioner(spec: dict, encoder):
        if spec["kind"] == "toy_codebook":
            gen = t2i if t2i is not None else ToyTextToImage()
            return ToyCodebookCaptioner(encoder, _codebook(cfg, spec), gen)
        return _python_factory(spec)

    cap = captioner(b["captioner"], enc)

    extractor = None
    if b.get("extractor"):
        spec = b["extractor"]
        extractor = {"toy_keywords": lambda: ToyKeywordLLM(), "chat": lambda: _chat_client(spec, log_dir),
                     "python": lambda: _python_factory(spec)}[spec["kind"]]()

    models = ModelSet(enc, txt, cap, t2i, extractor)
    if not include_eval:
        return models

    ev = cfg.raw.get("eval", {})
    if ev.get("victim"):
        spec = ev["victim"]
        if spec["kind"] == "toy_codebook":
            venc = _image_encoder(spec["encoder"]) if spec.get("encoder") else enc
            models.victim = ToyVictim(captioner(spec, venc))
        else:
            models.victim = _python_factory(spec)
    if ev.get("judge"):
        spec = ev["judge"]
        if spec["kind"] == "toy_rule":
            models.judge = toy_rule_judge(spec.get("match_threshold", 0.5), spec.get("related_threshold", 0.3))
        elif spec["kind"] == "chat":
            models.judge = LLMJudge(_chat_client(spec, log_dir), spec.get("parse_retries", 2))
        else:
            models.judge = _python_factory(spec)
    models.eval_encoders = tuple(_text_encoder(s) for s in ev.get("encoders", []))
    return models
