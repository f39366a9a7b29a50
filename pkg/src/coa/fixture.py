"""The bundled ten-example toy fixture.

``write_fixture`` regenerates every file shipped under ``coa/data/fixture``;
the test suite checks that the shipped copy matches a fresh build byte for byte.
"""

from __future__ import annotations

import os
from pathlib import Path

from coa.backends.toy import ToyTextToImage
from coa.core import atomic_write_bytes, dumps_json, image_to_png_bytes

CLEAN_DESCRIPTIONS = (
    "A bird in the park",
    "A red car parked on the street",
    "A dog running on the beach",
    "A bowl of fresh fruit on a table",
    "A sailboat on a calm lake",
    "A cat sleeping on a sofa",
    "A snowy mountain under a blue sky",
    "A train crossing a bridge",
    "A man riding a horse through the desert",
    "A lighthouse on a rocky coast",
)

TARGET_POOL = (
    "Two young boys playing baseball on a field.",
    "The little girl is taking tennis lesson to learn how to play.",
    "A bunch of people celebrating around a birthday cake.",
    "A close up of a vase with flowers.",
    "A group of chickens foraging in a grassy enclosure.",
    "A pizza with cheese and tomatoes on a plate.",
    "An airplane flying over the city skyline.",
    "A woman holding an umbrella in the rain.",
    "A giraffe eating leaves from a tall tree.",
    "A laptop computer sitting on a wooden desk.",
)

IMAGE_SIZE = 64

EVAL_ENCODER_NAMES = ("RN-50", "RN-101", "ViT-B/16", "ViT-B/32", "ViT-L/14")


def fixture_config() -> dict:
    t2i = {"kind": "toy", "height": IMAGE_SIZE, "width": IMAGE_SIZE, "channels": 3, "amplitude": 0.3, "noise": 0.02}
    return {
        "run_id": "toy-fixture",
        "seed": 0,
        "workers": 1,
        "data": {"images": "images", "caption_pool": "captions.txt"},
        "backends": {
            "image_encoder": {"kind": "toy_linear", "dim": 64, "seed": 0, "common": 8.0},
            "text_encoder": {"kind": "toy_hash", "dim": 64, "salt": "surrogate", "common": 1.0},
            "captioner": {"kind": "toy_codebook", "codebook": "codebook.txt"},
            "text_to_image": t2i,
            "extractor": {"kind": "toy_keywords"},
        },
        "attack": {"eps": 8 / 255, "step_size_eta": 1 / 255, "pgd_steps": 100, "alpha": 0.7, "beta": 0.7,
                   "caption_refresh_interval": 1},
        "eval": {
            "victim": {"kind": "toy_codebook", "codebook": "codebook.txt"},
            "judge": {"kind": "toy_rule", "match_threshold": 0.5, "related_threshold": 0.3},
            "encoders": [{"kind": "toy_hash", "name": name, "dim": 512, "salt": f"eval-{name}", "common": 0.0}
                         for name in EVAL_ENCODER_NAMES],
            "clean_baseline": True,
            "target_field": "target_text_raw",
            "noise": {"stds": [0.0, 0.05, 0.1, 0.2, 0.5], "seeds": 20},
        },
        "sweep": [{"name": f"eps{k}", "attack.eps": k / 255} for k in (2, 8, 32)],
    }


def fixture_files() -> dict[str, bytes]:
    """Relative path -> file content for the whole fixture."""
    gen = ToyTextToImage(IMAGE_SIZE, IMAGE_SIZE, 3)
    files = {f"images/ex{i:02d}.png": image_to_png_bytes(gen.generate(text, seed=i))
             for i, text in enumerate(CLEAN_DESCRIPTIONS)}
    files["captions.txt"] = ("\n".join(TARGET_POOL) + "\n").encode("utf-8")
    files["codebook.txt"] = ("\n".join(CLEAN_DESCRIPTIONS + TARGET_POOL) + "\n").encode("utf-8")
    files["config.json"] = dumps_json(fixture_config()).encode("utf-8")
    return files


def write_fixture(out_dir: str | os.PathLike) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for rel, data in fixture_files().items():
        atomic_write_bytes(out_dir / rel, data)
        written.append(out_dir / rel)
    return written
