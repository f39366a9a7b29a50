import ast
from pathlib import Path

import numpy as np
import pytest

import coa.oracles
from coa.oracles import MAX_ORACLE_PIXELS, ToyInstance, brute_force_linf_optimum, corner_losses, finite_difference_gradient


def _instance(n, seed=0, eps=0.05):
    rng = np.random.default_rng(seed)
    d = 6
    m = rng.standard_normal((d, n)) + 3.0
    clean = rng.uniform(0.2, 0.8, n)
    return ToyInstance(clean.reshape(n, 1, 1) if n else clean, m, m @ clean, rng.standard_normal(d) + 2,
                       rng.standard_normal(d) + 3, rng.standard_normal(d) + 2, rng.standard_normal(d) + 2,
                       0.6, 0.7, 0.3, eps)


def test_oracles_share_no_code_with_implementations():
    tree = ast.parse(Path(coa.oracles.__file__).read_text())
    imported = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)}
    imported |= {a.name for n in ast.walk(tree) if isinstance(n, ast.Import) for a in n.names}
    assert not any(m and m.startswith("coa") for m in imported)


def test_single_pixel_is_max_of_two_corners():
    inst = _instance(1)
    corners, losses = corner_losses(inst)
    assert corners.tolist() == [[-inst.eps], [inst.eps]]
    assert brute_force_linf_optimum(inst)["best_loss"] == max(losses)


def test_refuses_large_instances():
    with pytest.raises(ValueError):
        corner_losses(_instance(MAX_ORACLE_PIXELS + 1))


def test_linear_objective_optimum_beats_interior_samples():
    # a strong shared row offset keeps the normalized objective close to linear over the box
    rng = np.random.default_rng(3)
    for seed in range(5):
        inst = _instance(6, seed)
        best = brute_force_linf_optimum(inst)["best_loss"]
        samples = rng.uniform(-inst.eps, inst.eps, (2000, 6))
        x = np.clip(inst.clean_pixels.ravel() + samples, 0, 1) @ inst.matrix.T
        c = inst.caption_emb / np.linalg.norm(inst.caption_emb)

        def blend(i, t):
            u = inst.alpha * i / np.linalg.norm(i, axis=-1, keepdims=True) + (1 - inst.alpha) * t / np.linalg.norm(t)
            return u / np.linalg.norm(u, axis=-1, keepdims=True)

        adv = blend(x, c)
        ref = blend(inst.target_img_emb, inst.target_txt_emb)
        cle = blend(inst.clean_img_emb, inst.clean_txt_emb)
        vals = np.maximum(adv @ ref - inst.beta * adv @ cle + inst.gamma, 0)
        assert vals.max() <= best + 1e-12


def test_finite_differences_on_quadratic():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])

    def f(x):
        return float(x @ a @ x)

    x = np.array([0.3, -0.7])
    assert np.allclose(finite_difference_gradient(f, x, h=1e-5), 2 * a @ x, atol=1e-9)
    with pytest.raises(ValueError):
        finite_difference_gradient(f, x, h=0.0)


def test_finite_difference_error_is_second_order():
    def f(x):
        return float(np.sum(np.sin(3 * x) * np.exp(x)))

    x = np.array([0.2, 0.9, -0.4])
    exact = 3 * np.cos(3 * x) * np.exp(x) + np.sin(3 * x) * np.exp(x)
    e1 = np.abs(finite_difference_gradient(f, x, h=1e-2) - exact).max()
    e2 = np.abs(finite_difference_gradient(f, x, h=5e-3) - exact).max()
    assert 3.5 < e1 / e2 < 4.5
