import json

import numpy as np
import pytest

from coa.backends.base import ModelSet
from coa.backends.toy import ToyCodebookCaptioner, ToyHashTextEncoder, ToyLinearImageEncoder, ToyTextToImage
from coa.chain import TRACE_KEYS, ChainAborted, ChainExample, artifact_paths, run_batch, run_chain
from coa.core import QUANT_STEP, AttackConfig, ImageTensor, load_image
from coa.errors import BackendError
from coa.oracles import ToyInstance, brute_force_linf_optimum

from conftest import FixedCaptioner, corner_case

CODEBOOK = ["A bird in the park", "A red car parked on the street", "Two young boys playing baseball on a field",
            "A pizza with cheese and tomatoes on a plate"]


def toy_models(size=16):
    gen = ToyTextToImage(size, size, 3)
    enc = ToyLinearImageEncoder(dim=64, seed=0, common=8.0)
    txt = ToyHashTextEncoder(dim=64, salt="surrogate", common=1.0)
    return ModelSet(enc, txt, ToyCodebookCaptioner(enc, CODEBOOK, gen), gen), gen


def pairs(gen, k=0):
    clean = (gen.generate(CODEBOOK[k], seed=5), CODEBOOK[k])
    target_text = "young boys playing baseball field"
    return clean, (gen.generate(target_text, seed=6), target_text)


def test_zero_budget_returns_clean_image():
    models, gen = toy_models()
    clean, target = pairs(gen)
    art = run_chain(clean, target, AttackConfig(eps=0.0, step_size_eta=1 / 255, pgd_steps=5), models)
    assert art.adv_image == clean[0]
    assert all(r.caption == clean[1] for r in art.trace) and art.final_caption == clean[1]


def test_trace_contract():
    models, gen = toy_models()
    clean, target = pairs(gen)
    cfg = AttackConfig(pgd_steps=5)
    art = run_chain(clean, target, cfg, models)
    assert [r.step for r in art.trace] == list(range(5))
    assert all(set(r.to_dict()) == set(TRACE_KEYS) for r in art.trace)
    assert all(r.delta_linf <= cfg.eps for r in art.trace)


@pytest.mark.parametrize("shape", [(1, 1, 1), (1, 1, 3)])
def test_tiny_image_matches_corner_search(shape):
    for seed in range(10):
        enc = ToyLinearImageEncoder(dim=4, seed=seed, common=50.0)
        txt = ToyHashTextEncoder(dim=4, salt="p", common=1.0)
        rng = np.random.default_rng(seed)
        clean, target = ImageTensor(rng.uniform(0.3, 0.7, shape)), ImageTensor(rng.uniform(0.3, 0.7, shape))
        cfg = AttackConfig(eps=4 / 255, step_size_eta=1 / 255, pgd_steps=20, alpha=0.6, caption_refresh_interval=50,
                           rng_seed=seed)
        art = run_chain((clean, "bird park"), (target, "boys baseball"), cfg,
                        ModelSet(enc, txt, FixedCaptioner("boys baseball")))
        n = int(np.prod(shape))
        inst = ToyInstance(clean.pixels, enc.matrix(n), enc.encode(clean), txt.encode("bird park"),
                           enc.encode(target), txt.encode("boys baseball"), txt.encode("boys baseball"),
                           cfg.alpha, cfg.beta, cfg.margin, cfg.eps)
        assert art.final_loss == pytest.approx(brute_force_linf_optimum(inst)["best_loss"], abs=1e-9)


def test_sign_updates_saturate_with_constant_gradient_sign():
    for seed in range(5):
        art, inst = corner_case(seed)
        assert np.all(np.isclose(np.abs(art.delta), inst.eps, atol=1e-15))


def test_corner_optimality_small_instances():
    for seed in range(5):
        art, inst = corner_case(seed)
        assert abs(art.final_loss - brute_force_linf_optimum(inst)["best_loss"]) < 1e-9


def test_caption_refresh_schedule():
    models, gen = toy_models()
    clean, target = pairs(gen)
    calls = []

    class Recording:
        name = "recording"

        def caption(self, image):
            calls.append(1)
            return models.captioner.caption(image)

    cfg = AttackConfig(pgd_steps=10, caption_refresh_interval=4)
    run_chain(clean, target, cfg, ModelSet(models.image_encoder, models.text_encoder, Recording()))
    # steps 0, 4, 8 inside the loop; the final evaluation at step 10 is not a refresh step
    assert len(calls) == 3


def test_empty_caption_keeps_previous(caplog):
    models, gen = toy_models()
    clean, target = pairs(gen)
    replies = iter(["A red car parked on the street"] + [""] * 10)

    class Flaky:
        name = "flaky"

        def caption(self, image):
            return next(replies)

    art = run_chain(clean, target, AttackConfig(pgd_steps=3),
                    ModelSet(models.image_encoder, models.text_encoder, Flaky()))
    assert [r.caption for r in art.trace] == ["A red car parked on the street"] * 3
    assert "empty caption" in caplog.text


def test_backend_failure_aborts_with_partial_trace():
    models, gen = toy_models()
    clean, target = pairs(gen)
    count = iter(range(100))

    class Dying:
        name = "dying"

        def caption(self, image):
            if next(count) == 2:
                raise BackendError("captioner down", backend="dying")
            return CODEBOOK[0]

    with pytest.raises(ChainAborted) as info:
        run_chain(clean, target, AttackConfig(pgd_steps=5), ModelSet(models.image_encoder, models.text_encoder, Dying()))
    assert len(info.value.trace) == 2


def test_toy_attack_moves_toward_target():
    models, gen = toy_models(32)
    clean, target = pairs(gen)
    art = run_chain(clean, target, AttackConfig(pgd_steps=60, eps=16 / 255), models)
    assert art.trace[-1].sim_target > art.trace[0].sim_target
    assert art.final.sim_target > art.trace[0].sim_target


# --- batch --------------------------------------------------------------------


def _examples(gen, n=3):
    out = []
    for k in range(n):
        (ci, ct), (ti, tt) = pairs(gen, k % 2)
        out.append(ChainExample(f"ex{k}", ci, ct, ti, tt, clean_ref=f"clean{k}.png", target_ref=f"t{k}.png"))
    return out


def test_batch_empty_writes_nothing(tmp_path):
    models, _ = toy_models()
    summary = run_batch([], AttackConfig(pgd_steps=2), models, tmp_path / "run")
    assert summary.counts == {"succeeded": 0, "failed": 0}
    assert list((tmp_path / "run").iterdir()) == []


def test_batch_isolates_failures(tmp_path):
    models, gen = toy_models()
    examples = _examples(gen)
    examples[1] = ChainExample("bad", tmp_path / "missing.png", "x", examples[1].target_image, "y")
    summary = run_batch(examples, AttackConfig(pgd_steps=3), models, tmp_path)
    assert summary.succeeded == ["ex0", "ex2"] and list(summary.failed) == ["bad"]
    meta = json.loads(artifact_paths(tmp_path, "bad")["meta"].read_text())
    assert meta["status"] == "failed"
    for ex in ("ex0", "ex2"):
        assert artifact_paths(tmp_path, ex)["png"].exists()


def test_batch_sidecar_and_budget(tmp_path):
    models, gen = toy_models()
    cfg = AttackConfig(pgd_steps=4)
    examples = _examples(gen, 2)
    run_batch(examples, cfg, models, tmp_path)
    for ex in examples:
        paths = artifact_paths(tmp_path, ex.id)
        meta = json.loads(paths["meta"].read_text())
        for key in ("clean_image_path", "eps", "step_size", "steps", "seed", "final_loss"):
            assert key in meta
        assert meta["clean_image_path"] == ex.clean_ref
        adv = load_image(paths["png"])
        assert np.abs(adv.pixels - ex.clean_image.pixels).max() <= cfg.eps + QUANT_STEP


def test_batch_is_deterministic_across_worker_counts(tmp_path):
    models, gen = toy_models()
    cfg = AttackConfig(pgd_steps=4, rng_seed=11)
    run_batch(_examples(gen), cfg, models, tmp_path / "a", workers=1)
    run_batch(_examples(gen), cfg, models, tmp_path / "b", workers=3)
    for sub in ("adv", "traces"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()


def test_batch_rejects_unwritable_dir(tmp_path):
    models, gen = toy_models()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        run_batch(_examples(gen, 1), AttackConfig(pgd_steps=1), models, blocker / "run")
