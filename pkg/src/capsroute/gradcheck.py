"""Finite-difference verification of model gradients.

Builds the model in float64, computes analytic gradients of the full
training loss via the tape, and compares sampled entries of every parameter
tensor against central differences (f(x+eps) - f(x-eps)) / (2 eps).

A central difference is only a valid derivative estimate when the function
is smooth across the whole segment; entries whose perturbation flips a
relu/clip activation pattern are resampled rather than misreported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import build
from .train import sample_loss


@dataclass
class LayerGradReport:
    name: str
    max_rel_error: float
    checked: int
    skipped_kinks: int = 0

    def passed(self, tolerance):
        return self.max_rel_error <= tolerance


def _loss_value(model, image, mask, kinks=None):
    if kinks is None:
        with T.no_grad():
            total, _, _ = sample_loss(model, image, mask)
        return total.item()
    with T.capture_kink_masks(kinks):
        with T.no_grad():
            total, _, _ = sample_loss(model, image, mask)
    return total.item()


def _central(model, image, mask, p, idx, eps):
    """Central difference plus a flag for relu/clip boundary crossings."""
    original = p.data[idx]
    plus_masks, minus_masks = [], []
    p.data[idx] = original + eps
    plus = _loss_value(model, image, mask, plus_masks)
    p.data[idx] = original - eps
    minus = _loss_value(model, image, mask, minus_masks)
    p.data[idx] = original
    return (plus - minus) / (2.0 * eps), plus_masks != minus_masks


def finite_difference_check(config, seed=0, eps=1e-4, samples_per_tensor=6,
                            tolerance=1e-4):
    """Per-parameter-tensor max relative gradient error on a random input.

    Runs entirely in float64. Entries whose difference segment crosses a
    relu/clip boundary are resampled (the quotient is invalid there, not the
    gradient) and counted per tensor. Returns (reports, all_passed).
    """
    rng = np.random.default_rng(seed)
    with T.using_dtype(np.float64):
        model = build(config, seed=seed)
        h, w = config.height, config.width
        image = rng.random((h, w))
        mask = (rng.random((h, w)) > 0.7).astype(np.float64)
        with T.tape() as tp:
            total, _, _ = sample_loss(model, image, mask)
            T.backward(total, tp)
        reports = []
        for name, p in model.parameters():
            analytic = p.grad
            if analytic is None:
                reports.append(LayerGradReport(name, np.inf, 0))
                continue
            count = min(samples_per_tensor, p.size)
            order = rng.permutation(p.size)
            worst = 0.0
            checked = 0
            skipped = 0
            for fi in order:
                if checked >= count:
                    break
                idx = np.unravel_index(fi, p.shape)
                numeric = None
                for step in (eps, eps / 8.0, eps / 64.0):
                    quotient, crossed = _central(model, image, mask, p, idx, step)
                    if not crossed:
                        numeric = quotient
                        break
                if numeric is None:
                    skipped += 1
                    continue
                checked += 1
                denom = max(abs(analytic[idx]), abs(numeric), 1e-6)
                worst = max(worst, abs(analytic[idx] - numeric) / denom)
            reports.append(LayerGradReport(name, float(worst), checked, skipped))
    all_passed = all(r.passed(tolerance) for r in reports)
    return reports, all_passed
