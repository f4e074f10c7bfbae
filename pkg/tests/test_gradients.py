"""Analytic gradients against central finite differences for every loss.

Each loss is checked on 100 random instances; the relative error between the
autograd gradient and a central-difference estimate (step 1e-5) must stay
within 1e-4. Probabilities are kept away from the simplex boundary so the
finite-difference stencil stays in the loss's smooth region.
"""

import numpy as np
import pytest
import torch

from hmtl.losses import (
    BinScheme,
    ClassWeights,
    HeadLossWeights,
    cat_reg_loss,
    focal_loss,
    hmtl_inpaint_loss,
    hmtl_puzzle_loss,
    hmtl_puzzle_rotation_loss,
    perceptual_decoder_loss,
    pixelwise_rmse,
    weighted_ce,
)

STEP = 1e-5
REL_TOL = 1e-4
N_INSTANCES = 100


def interior_simplex(rng, k):
    raw = rng.random(k) + 0.25
    return raw / raw.sum()


def check_gradient(fn, x0: np.ndarray):
    """Compare autograd and central finite differences at x0."""
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    value = fn(x)
    (analytic,) = torch.autograd.grad(value, x)
    analytic = analytic.detach().numpy()

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += STEP
        minus[i] -= STEP
        f_plus = float(fn(torch.tensor(plus.reshape(x0.shape), dtype=torch.float64)))
        f_minus = float(fn(torch.tensor(minus.reshape(x0.shape), dtype=torch.float64)))
        numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * STEP)

    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    assert np.abs(analytic - numeric).max() / scale <= REL_TOL


class TestLossGradients:
    def test_weighted_ce(self):
        rng = np.random.default_rng(100)
        for _ in range(N_INSTANCES):
            k = int(rng.integers(2, 9))
            label = int(rng.integers(0, k))
            weights = ClassWeights(rng.random(k) + 0.5)
            smoothing = float(rng.choice([0.0, 0.1]))
            check_gradient(lambda p: weighted_ce(p, label, weights, smoothing), interior_simplex(rng, k))

    def test_focal(self):
        rng = np.random.default_rng(101)
        for _ in range(N_INSTANCES):
            k = int(rng.integers(2, 9))
            label = int(rng.integers(0, k))
            alpha = float(rng.uniform(0.5, 2.0))
            gamma = float(rng.choice([0.0, 1.0, 2.0]))
            check_gradient(lambda p: focal_loss(p, label, alpha, gamma), interior_simplex(rng, k))

    def test_perceptual_decoder(self):
        rng = np.random.default_rng(102)
        for _ in range(N_INSTANCES):
            d = int(rng.integers(2, 12))
            orig = torch.tensor(rng.normal(size=d), dtype=torch.float64)
            lam = float(rng.uniform(0.5, 2.0))
            check_gradient(lambda f: perceptual_decoder_loss(f, orig, lam), rng.normal(size=d))

    def test_pixelwise_rmse(self):
        rng = np.random.default_rng(103)
        for _ in range(N_INSTANCES):
            shape = (3, 3, 3)
            orig = torch.tensor(rng.random(shape), dtype=torch.float64)
            check_gradient(lambda r: pixelwise_rmse(r, orig), rng.random(shape) + 0.5)

    def test_cat_reg(self):
        rng = np.random.default_rng(104)
        scheme = BinScheme(10, -1.0, 1.0)
        for _ in range(N_INSTANCES):
            y = float(rng.uniform(-0.99, 0.99))
            alpha = float(rng.uniform(0.5, 2.0))
            check_gradient(lambda p: cat_reg_loss(p, y, scheme, alpha).total, interior_simplex(rng, 10))

    def test_puzzle_total(self):
        # joint gradient over the concatenated (sl, 4 puzzle-head) distributions
        rng = np.random.default_rng(105)
        weights = ClassWeights(rng.random(8) + 0.5)
        hw = HeadLossWeights(sl=0.8, ssh=[0.5, 1.0, 1.5, 2.0])
        for _ in range(N_INSTANCES):
            sl_label = int(rng.integers(0, 8))
            ssh_labels = [int(rng.integers(0, 4)) for _ in range(4)]

            def total(flat, sl_label=sl_label, ssh_labels=ssh_labels):
                sl_p = flat[:8]
                ssh = [(flat[8 + 4 * j : 12 + 4 * j], ssh_labels[j]) for j in range(4)]
                return hmtl_puzzle_loss((sl_p, sl_label, weights), ssh, hw).total

            x0 = np.concatenate([interior_simplex(rng, 8)] + [interior_simplex(rng, 4) for _ in range(4)])
            check_gradient(total, x0)

    def test_puzzle_rotation_total(self):
        rng = np.random.default_rng(106)
        for _ in range(N_INSTANCES):
            sl_label = int(rng.integers(0, 8))
            ssh_labels = [int(rng.integers(0, 4)) for _ in range(4)]
            rot_label = int(rng.integers(0, 8))

            def total(flat):
                sl_p = flat[:8]
                ssh = [(flat[8 + 4 * j : 12 + 4 * j], ssh_labels[j]) for j in range(4)]
                rot = (flat[24:32], rot_label)
                return hmtl_puzzle_rotation_loss((sl_p, sl_label, None), ssh, rot).total

            x0 = np.concatenate(
                [interior_simplex(rng, 8)] + [interior_simplex(rng, 4) for _ in range(4)] + [interior_simplex(rng, 8)]
            )
            check_gradient(total, x0)

    def test_inpaint_total(self):
        # gradient flows through both the classifier probs and the decoder features
        rng = np.random.default_rng(107)
        for _ in range(N_INSTANCES):
            label = int(rng.integers(0, 8))
            orig_feats = torch.tensor(rng.normal(size=6), dtype=torch.float64)

            def total(flat):
                sl_p = flat[:8]
                dec = perceptual_decoder_loss(flat[8:14], orig_feats, 1.3)
                return hmtl_inpaint_loss((sl_p, label, None), dec).total

            x0 = np.concatenate([interior_simplex(rng, 8), rng.normal(size=6)])
            check_gradient(total, x0)


class TestBatchGradients:
    def test_weighted_ce_batch(self):
        rng = np.random.default_rng(108)
        labels = rng.integers(0, 5, size=4)

        def fn(p):
            return weighted_ce(p, labels)

        batch = np.stack([interior_simplex(rng, 5) for _ in range(4)])
        check_gradient(fn, batch)

    def test_cat_reg_batch(self):
        rng = np.random.default_rng(109)
        scheme = BinScheme(8, -1.0, 1.0)
        y = rng.uniform(-0.9, 0.9, size=5)

        def fn(p):
            return cat_reg_loss(p, y, scheme).total

        batch = np.stack([interior_simplex(rng, 8) for _ in range(5)])
        check_gradient(fn, batch)
