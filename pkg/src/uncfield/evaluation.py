"""Quantitative evaluation: PSNR, sparsification curves, AUSE, ablations.

AUSE is the trapezoidal area between the uncertainty-ordered and the
error-ordered (oracle) sparsification curves after normalizing both by the
full-image mean error, so it is invariant to error scale and to any
strictly increasing transform of the uncertainties.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .render import render_image
from .ufield import uh_map


def psnr(image, reference, cap: float = 99.0) -> float:
    """-10 log10(MSE) over all pixels and channels; identical images cap at 99 dB."""
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse == 0.0:
        return cap
    return min(-10.0 * np.log10(mse), cap)


@dataclass
class SparsificationCurve:
    fractions: np.ndarray  # ascending removal fractions in [0, 1)
    by_uncertainty: np.ndarray  # mean retained error, highest-uncertainty removed first
    by_error: np.ndarray  # oracle: highest-error removed first


def _removal_order(keys: np.ndarray) -> np.ndarray:
    """Indices sorted by descending key; ties broken by lower pixel index."""
    return np.argsort(-np.asarray(keys, dtype=np.float64), kind="stable")


def sparsification_curve(errors, uncertainties, steps: int = 20) -> SparsificationCurve:
    """Mean retained error as the top-fraction pixels are removed.

    For each fraction f in {0, 1/steps, ..., (steps-1)/steps} the
    ceil(f*n) pixels with the highest key are removed and the mean
    absolute error of the rest recorded; done once keyed by uncertainty
    and once keyed by the true error.
    """
    errors = np.abs(np.asarray(errors, dtype=np.float64).ravel())
    uncertainties = np.asarray(uncertainties, dtype=np.float64).ravel()
    n = len(errors)
    if n == 0:
        raise ValueError("empty input")
    if n != len(uncertainties) or n < steps:
        raise ValueError("need equally many errors/uncertainties, at least `steps`")
    fractions = np.arange(steps) / steps
    curves = []
    for keys in (uncertainties, errors):
        order = _removal_order(keys)
        err_sorted = errors[order]
        # Suffix means: removing the first k leaves err_sorted[k:].
        suffix = np.cumsum(err_sorted[::-1])[::-1]
        vals = np.empty(steps)
        for i, f in enumerate(fractions):
            k = int(np.ceil(f * n))
            vals[i] = suffix[k] / (n - k) if k < n else 0.0
        curves.append(vals)
    return SparsificationCurve(fractions, curves[0], curves[1])


def ause(curve: SparsificationCurve) -> float:
    """Area between the two curves after normalizing by the initial error."""
    base = curve.by_error[0]
    if base <= 0.0:
        return 0.0
    diff = (curve.by_uncertainty - curve.by_error) / base
    return max(float(np.trapezoid(diff, curve.fractions)), 0.0)


def ause_of(errors, uncertainties, steps: int = 20) -> float:
    return ause(sparsification_curve(errors, uncertainties, steps))


def auroc(scores, labels) -> float:
    """Rank-based area under the ROC curve with average-rank tie handling."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ViewEvaluation:
    view_id: int
    psnr: float
    ause_uc: float
    ause_uh: float
    ause_combined: float
    curves: dict = dc_field(default_factory=dict)


@dataclass
class AUSEReport:
    views: list
    mean_psnr: float
    mean_ause_uc: float
    mean_ause_uh: float
    mean_ause_combined: float

    def to_dict(self) -> dict:
        return {
            "mean_psnr": self.mean_psnr,
            "mean_ause_uc": self.mean_ause_uc,
            "mean_ause_uh": self.mean_ause_uh,
            "mean_ause_combined": self.mean_ause_combined,
            "views": [
                {"view_id": v.view_id, "psnr": v.psnr, "ause_uc": v.ause_uc,
                 "ause_uh": v.ause_uh, "ause_combined": v.ause_combined}
                for v in self.views
            ],
        }


def eval_views(field, vh, cameras, gt_images, k_render: int = 16, seed: int = 0,
               step=None, threads: int = 1, sparsification_steps: int = 20,
               keep_curves: bool = False) -> AUSEReport:
    """Per-view PSNR and AUSE under three uncertainty definitions.

    Per pixel: error = mean absolute RGB error of the mean render; the three
    uncertainties are U_C alone, U_H alone, and their sum.  With ``vh``
    None the U_H map is zero and the combined column degenerates to U_C.
    """
    rows = []
    for i, (cam, gt) in enumerate(zip(cameras, gt_images)):
        mean_img, _ = render_image(field, cam, mode="mean", step=step, threads=threads)
        _, u_c = render_image(field, cam, K=k_render, seed=seed + i, mode="stochastic",
                              step=step, threads=threads)
        if vh is not None:
            u_h = uh_map(vh, field, cam, step=step, threads=threads)
        else:
            u_h = np.zeros_like(u_c)
        err = np.mean(np.abs(mean_img - np.asarray(gt, dtype=np.float64)), axis=-1)
        curves = {
            "uc": sparsification_curve(err, u_c, sparsification_steps),
            "uh": sparsification_curve(err, u_h, sparsification_steps),
            "combined": sparsification_curve(err, u_c + u_h, sparsification_steps),
        }
        rows.append(ViewEvaluation(
            i, psnr(mean_img, gt),
            ause(curves["uc"]), ause(curves["uh"]), ause(curves["combined"]),
            curves if keep_curves else {},
        ))
    return AUSEReport(
        rows,
        float(np.mean([v.psnr for v in rows])),
        float(np.mean([v.ause_uc for v in rows])),
        float(np.mean([v.ause_uh for v in rows])),
        float(np.mean([v.ause_combined for v in rows])),
    )
