"""The attack loop: caption the current adversarial image, re-fuse, take a sign step, project.

One chain is strictly sequential. ``run_batch`` runs independent examples in
a thread pool and isolates failures per example.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from coa.backends.base import ModelSet
from coa.core import (
    AttackConfig,
    ImageTensor,
    apply_perturbation,
    atomic_write_json,
    atomic_write_jsonl,
    init_perturbation,
    load_image,
    save_png,
)
from coa.errors import CoAError
from coa.fusion import fuse_modalities
from coa.objective import AttackStepContext, TCMBreakdown, tcm_loss, tcm_loss_and_gradient
from coa.textutil import derive_seed

log = logging.getLogger(__name__)

TRACE_KEYS = ("step", "caption", "loss", "sim_target", "sim_clean", "delta_linf")


@dataclass(frozen=True)
class ChainStepRecord:
    step: int
    caption: str
    loss: float
    sim_target: float
    sim_clean: float
    delta_linf: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialArtifact:
    adv_image: ImageTensor
    final_caption: str
    trace: list[ChainStepRecord]
    config: AttackConfig
    clean_ref: str = ""
    target_ref: str = ""
    final: Optional[TCMBreakdown] = None
    delta: Optional[np.ndarray] = None

    @property
    def final_loss(self) -> float:
        return self.final.loss if self.final else float("nan")


class ChainAborted(CoAError):
    """A backend failed mid-chain. ``trace`` holds the steps completed so far."""

    def __init__(self, message: str, trace: list[ChainStepRecord]):
        super().__init__(message)
        self.trace = trace


class _CaptionState:
    def __init__(self, captioner, text_encoder, fallback: str):
        self.captioner = captioner
        self.text_encoder = text_encoder
        self.caption = fallback
        self._embeddings: dict[str, np.ndarray] = {}

    def refresh(self, image: ImageTensor, step: int) -> None:
        new = self.captioner.caption(image)
        if new and new.strip():
            self.caption = new
        else:
            log.warning("step %d: captioner returned an empty caption; keeping %r", step, self.caption)

    def embedding(self) -> np.ndarray:
        emb = self._embeddings.get(self.caption)
        if emb is None:
            emb = np.asarray(self.text_encoder.encode(self.caption), dtype=np.float64)
            self._embeddings[self.caption] = emb
        return emb


def run_chain(
    clean_pair: tuple[ImageTensor, str],
    target_pair: tuple[ImageTensor, str],
    config: AttackConfig,
    backends: ModelSet,
    *,
    clean_ref: str = "",
    target_ref: str = "",
    on_step: Optional[Callable[[ChainStepRecord], None]] = None,
) -> AdversarialArtifact:
    clean_image, clean_text = clean_pair
    target_image, target_text = target_pair
    enc, txt = backends.image_encoder, backends.text_encoder
    eps, eta, alpha = config.eps, config.step_size_eta, config.alpha
    beta, gamma = config.beta, config.margin

    f_clean = fuse_modalities(enc.encode(clean_image), txt.encode(clean_text), alpha)
    f_ref = fuse_modalities(enc.encode(target_image), txt.encode(target_text), alpha)

    delta = init_perturbation(clean_image.shape, eps, config.rng_seed).delta
    captions = _CaptionState(backends.captioner, txt, fallback=clean_text)
    trace: list[ChainStepRecord] = []

    def context() -> AttackStepContext:
        return AttackStepContext(clean_image, enc, captions.embedding(), f_ref, f_clean, alpha, beta, gamma)

    try:
        for step in range(config.pgd_steps):
            if step % config.caption_refresh_interval == 0:
                captions.refresh(apply_perturbation(clean_image, delta), step)
            bd, grad = tcm_loss_and_gradient(delta, context())
            rec = ChainStepRecord(step, captions.caption, bd.loss, bd.sim_target, bd.sim_clean,
                                  float(np.abs(delta).max()) if delta.size else 0.0)
            trace.append(rec)
            if on_step is not None:
                on_step(rec)
            delta = np.clip(delta + eta * np.sign(grad), -eps, eps)

        adv = apply_perturbation(clean_image, delta)
        if config.pgd_steps % config.caption_refresh_interval == 0:
            captions.refresh(adv, config.pgd_steps)
        f_adv = fuse_modalities(enc.encode(adv), captions.embedding(), alpha)
        final = tcm_loss(f_adv, f_ref, f_clean, beta, gamma)
    except CoAError as exc:
        if isinstance(exc, ChainAborted):
            raise
        raise ChainAborted(f"chain aborted at step {len(trace)}: {exc}", trace) from exc

    return AdversarialArtifact(adv, captions.caption, trace, config, clean_ref, target_ref, final, delta)


# --- batch -----------------------------------------------------------------


@dataclass
class ChainExample:
    """One attack job. Images may be given in memory or as paths (loaded in the worker)."""

    id: str
    clean_image: ImageTensor | str | os.PathLike
    clean_text: str
    target_image: ImageTensor | str | os.PathLike
    target_text: str
    clean_ref: str = ""
    target_ref: str = ""


@dataclass
class BatchSummary:
    succeeded: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        return {"succeeded": len(self.succeeded), "failed": len(self.failed)}

    def to_dict(self) -> dict:
        return {**self.counts, "succeeded_ids": self.succeeded, "failures": self.failed}


def _as_image(x) -> ImageTensor:
    return x if isinstance(x, ImageTensor) else load_image(x)


def artifact_paths(run_dir: str | os.PathLike, example_id: str) -> dict[str, Path]:
    run_dir = Path(run_dir)
    return {
        "png": run_dir / "adv" / f"{example_id}.png",
        "meta": run_dir / "adv" / f"{example_id}.json",
        "trace": run_dir / "traces" / f"{example_id}.jsonl",
    }


def save_artifact(artifact: AdversarialArtifact, run_dir, example_id: str) -> dict[str, Path]:
    paths = artifact_paths(run_dir, example_id)
    cfg = artifact.config
    save_png(artifact.adv_image, paths["png"])
    atomic_write_jsonl(paths["trace"], [r.to_dict() for r in artifact.trace])
    atomic_write_json(paths["meta"], {
        "id": example_id,
        "status": "ok",
        "clean_image_path": artifact.clean_ref,
        "target_image_path": artifact.target_ref,
        "eps": cfg.eps,
        "step_size": cfg.step_size_eta,
        "steps": cfg.pgd_steps,
        "seed": cfg.rng_seed,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "gamma": cfg.margin,
        "caption_refresh_interval": cfg.caption_refresh_interval,
        "final_loss": artifact.final_loss,
        "final_sim_target": artifact.final.sim_target if artifact.final else None,
        "final_sim_clean": artifact.final.sim_clean if artifact.final else None,
        "final_caption": artifact.final_caption,
    })
    return paths


def _save_failure(run_dir, example: ChainExample, cfg: AttackConfig, error: str,
                  trace: Sequence[ChainStepRecord]) -> None:
    paths = artifact_paths(run_dir, example.id)
    atomic_write_jsonl(paths["trace"], [r.to_dict() for r in trace])
    atomic_write_json(paths["meta"], {
        "id": example.id,
        "status": "failed",
        "error": error,
        "clean_image_path": example.clean_ref,
        "eps": cfg.eps,
        "step_size": cfg.step_size_eta,
        "steps": cfg.pgd_steps,
        "seed": cfg.rng_seed,
        "final_loss": None,
        "completed_steps": len(trace),
    })


def ensure_writable(run_dir: str | os.PathLike) -> Path:
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"run directory {run_dir} cannot be created: {exc}") from exc
    if not os.access(run_dir, os.W_OK | os.X_OK):
        raise PermissionError(f"run directory {run_dir} is not writable")
    return run_dir


def run_batch(
    examples: Sequence[ChainExample],
    config: AttackConfig,
    backends: ModelSet,
    run_dir: str | os.PathLike,
    *,
    workers: int = 1,
) -> BatchSummary:
    """Attack every example and persist its artifact under ``run_dir``.

    Each example gets its own seed derived from ``config.rng_seed`` and its id.
    """
    run_dir = ensure_writable(run_dir)
    summary = BatchSummary()
    if not examples:
        return summary
    ids = [e.id for e in examples]
    if len(set(ids)) != len(ids):
        raise ValueError("example ids must be unique within a batch")

    def work(ex: ChainExample) -> tuple[str, Optional[str]]:
        cfg = config.replace(rng_seed=derive_seed(config.rng_seed, ex.id, "attack"))
        trace: list[ChainStepRecord] = []
        try:
            art = run_chain((_as_image(ex.clean_image), ex.clean_text),
                            (_as_image(ex.target_image), ex.target_text),
                            cfg, backends, clean_ref=ex.clean_ref, target_ref=ex.target_ref)
        except ChainAborted as exc:
            trace = exc.trace
            err = str(exc)
        except (CoAError, OSError, ValueError) as exc:
            err = f"{type(exc).__name__}: {exc}"
        else:
            save_artifact(art, run_dir, ex.id)
            return ex.id, None
        log.error("example %s failed: %s", ex.id, err)
        _save_failure(run_dir, ex, cfg, err, trace)
        return ex.id, err

    cap = backends.concurrency_cap()
    width = max(1, min(workers, cap) if cap else workers)
    if width == 1:
        results = [work(ex) for ex in examples]
    else:
        with ThreadPoolExecutor(max_workers=width) as pool:
            results = list(pool.map(work, examples))

    for ex_id, err in results:
        if err is None:
            summary.succeeded.append(ex_id)
        else:
            summary.failed[ex_id] = err
    return summary
