from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest

from coa import cli
from coa.backends.base import ModelSet
from coa.backends.toy import ToyHashTextEncoder, ToyLinearImageEncoder
from coa.chain import run_chain
from coa.core import AttackConfig, ImageTensor
from coa.fusion import fuse_modalities
from coa.objective import AttackStepContext
from coa.oracles import ToyInstance

WORDS = "bird park dog beach boys baseball field cake vase flowers".split()
# Clean caption and target follow the worked caption drift; the three responses are
# built to land in the rubric's three cases.
RUBRIC_CLEAN = "A bird in the park"
RUBRIC_TARGET = "Two young boys playing baseball on a field"
RUBRIC_CASES = [
    ("Two boys playing baseball on a field", 1.0),
    ("A plate of food on a wooden table", 0.5),
    ("A small bird sitting in the park", 0.0),
]

PIPELINE = ("prepare", "attack", "evaluate", "noise-sweep", "report")


class FixedCaptioner:
    name = "fixed"

    def __init__(self, caption: str):
        self.text = caption
        self.calls = 0

    def caption(self, image):
        self.calls += 1
        return self.text


def corner_case(seed: int, steps: int = 100):
    """A 2x2x3 fixed-caption attack and the matching brute-force oracle instance.

    The encoder's large shared component keeps the fused objective close to
    linear inside the eps-box, so sign ascent lands on the best corner.
    """
    rng = np.random.default_rng(seed)
    enc = ToyLinearImageEncoder(dim=8, seed=seed, common=100.0)
    txt = ToyHashTextEncoder(dim=8, salt=f"s{seed}", common=1.0)
    clean = ImageTensor(rng.uniform(0.2, 0.8, (2, 2, 3)))
    target = ImageTensor(rng.uniform(0.2, 0.8, (2, 2, 3)))
    clean_text, target_text, caption = (" ".join(rng.choice(WORDS, 3)) for _ in range(3))
    cfg = AttackConfig(eps=8 / 255, step_size_eta=1 / 255, pgd_steps=steps, alpha=float(rng.uniform(0.3, 0.9)),
                       beta=0.7, caption_refresh_interval=steps + 1, rng_seed=seed)
    art = run_chain((clean, clean_text), (target, target_text), cfg, ModelSet(enc, txt, FixedCaptioner(caption)))
    inst = ToyInstance(clean.pixels, enc.matrix(12), enc.encode(clean), txt.encode(clean_text),
                       enc.encode(target), txt.encode(target_text), txt.encode(caption),
                       cfg.alpha, cfg.beta, cfg.margin, cfg.eps)
    return art, inst


def gradient_case(seed, encoder, text_scale=1.0, alpha=None):
    rng = np.random.default_rng(seed)
    txt = ToyHashTextEncoder(dim=encoder.dim, salt=f"g{seed}", common=1.0)
    words = "bird park dog beach boys baseball field cake vase".split()
    clean = ImageTensor(rng.uniform(0.2, 0.8, (2, 2, 3)))
    target = ImageTensor(rng.uniform(0.2, 0.8, (2, 2, 3)))
    ct, tt, cap = (" ".join(rng.choice(words, 3)) for _ in range(3))
    alpha = float(rng.uniform(0.2, 0.9)) if alpha is None else alpha
    beta = float(rng.uniform(0.3, 0.9))
    ctx = AttackStepContext(
        clean, encoder, text_scale * txt.encode(cap),
        fuse_modalities(encoder.encode(target), text_scale * txt.encode(tt), alpha),
        fuse_modalities(encoder.encode(clean), text_scale * txt.encode(ct), alpha),
        alpha, beta, 1.0 - beta)
    delta = rng.uniform(-8 / 255, 8 / 255, clean.shape)
    return ctx, delta


def reference_loss(ctx, delta):
    x = np.clip(ctx.clean_image.pixels + delta, 0, 1)
    e = ctx.encoder.encode(ImageTensor(x))
    c = ctx.caption_embedding
    u = ctx.alpha * e / np.linalg.norm(e) + (1 - ctx.alpha) * c / np.linalg.norm(c)
    f = u / np.linalg.norm(u)
    return max(f @ ctx.f_ref.values - ctx.beta * f @ ctx.f_clean.values + ctx.gamma, 0.0)


def run_pipeline(run_dir: Path, config: str = "@fixture", stages=PIPELINE, **kw) -> list[int]:
    return [cli.run(stage, config, run_dir, **kw) for stage in stages]


@pytest.fixture(scope="session")
def fixture_run(tmp_path_factory) -> Path:
    """One full toy pipeline run shared by the slower end-to-end tests."""
    run_dir = tmp_path_factory.mktemp("fixture_run")
    codes = run_pipeline(run_dir)
    assert codes == [0] * len(PIPELINE)
    return run_dir


# --- acceptance reporting -------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class Criterion:
    """Records one acceptance criterion's outcome and wall time for the summary."""

    def __init__(self, number: int, title: str, limit_s: float | None = None):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.detail = ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        if exc_type is None and self.limit_s is not None and elapsed >= self.limit_s:
            ACCEPTANCE[self.number] = ("FAIL", self.title, f"took {elapsed:.1f}s, limit {self.limit_s:.0f}s")
            raise AssertionError(f"criterion {self.number} exceeded its {self.limit_s}s budget ({elapsed:.1f}s)")
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        ACCEPTANCE[self.number] = (status, self.title, f"{detail} [{elapsed:.1f}s]".strip())
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {status:<7} {title}: {detail}")
