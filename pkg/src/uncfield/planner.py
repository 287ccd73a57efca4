"""Next-best-view selection driven by the uncertainty field.

One round greedily picks N candidate views: score every candidate by its
summed per-pixel accumulated uncertainty, take the argmax, mark the chosen
view's rays into the uncertainty grid (no retraining), and repeat so the
remaining scores reflect what the new view already covers.  After the
round the field is retrained from scratch on the enlarged train set and
the uncertainty field re-estimated.  The random baseline replaces the
scoring with seeded draws but shares every other step.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .evaluation import psnr
from .field import StochasticRadianceField, init_field
from .render import default_step, render_image
from .train import TrainConfig, TrainDataset, train
from .ufield import UncertaintyGrid, estimate_uncertainty_field, uh_map, update_from_camera


@dataclass
class PlannerConfig:
    n_per_round: int = 10
    rounds: int = 1
    strategy: str = "uncertainty"  # "uncertainty" | "random"
    seed: int = 0
    tau: float = 0.1

    def __post_init__(self):
        if self.n_per_round < 1:
            raise ValueError("n_per_round must be >= 1")
        if self.strategy not in ("uncertainty", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class NBVState:
    train_indices: list
    candidate_indices: list
    field: StochasticRadianceField
    vh: UncertaintyGrid
    history: list = dc_field(default_factory=list)  # (round, index, score)

    def __post_init__(self):
        overlap = set(self.train_indices) & set(self.candidate_indices)
        if overlap:
            raise ValueError(f"train/candidate overlap: {sorted(overlap)}")


def image_uncertainty(camera, vh: UncertaintyGrid, field: StochasticRadianceField,
                      step=None, threads: int = 1) -> float:
    """Image-wise score: sum of normalized per-ray accumulated uncertainty."""
    return float(uh_map(vh, field, camera, step=step, threads=threads).sum())


def select_nbv(scores) -> int:
    """Index of the maximum score; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        raise ValueError("empty candidate set")
    return int(np.argmax(scores))


def mark_view_observed(vh: UncertaintyGrid, field: StochasticRadianceField, camera,
                       step=None) -> None:
    """Clear the uncertainty grid along every pixel ray of the camera.

    Uses the current field's geometry only; repeated marking of the same
    view is a no-op.
    """
    update_from_camera(vh, field, camera, step=step)


def nbv_round(state: NBVState, cameras, images, train_cfg: TrainConfig,
              planner_cfg: PlannerConfig, round_index: int = 0,
              step=None, threads: int = 1) -> NBVState:
    """One selection round followed by retraining from scratch.

    Selection never retrains: the uncertainty strategy re-scores all
    remaining candidates after each marking; the random strategy draws N
    without replacement from one seeded generator.
    """
    if len(state.candidate_indices) < planner_cfg.n_per_round:
        raise ValueError("not enough candidates for the configured round size")
    step = step or default_step(state.field)
    candidates = list(state.candidate_indices)
    chosen = []
    if planner_cfg.strategy == "random":
        rng = np.random.default_rng(planner_cfg.seed + round_index)
        picks = rng.choice(len(candidates), size=planner_cfg.n_per_round, replace=False)
        for p in picks:
            idx = candidates[int(p)]
            chosen.append((idx, float("nan")))
        for idx, _ in chosen:
            mark_view_observed(state.vh, state.field, cameras[idx], step=step)
            candidates.remove(idx)
    else:
        for _ in range(planner_cfg.n_per_round):
            scores = [image_uncertainty(cameras[i], state.vh, state.field,
                                        step=step, threads=threads)
                      for i in candidates]
            pick = select_nbv(scores)
            idx = candidates[pick]
            chosen.append((idx, scores[pick]))
            mark_view_observed(state.vh, state.field, cameras[idx], step=step)
            candidates.remove(idx)
    train_indices = list(state.train_indices) + [idx for idx, _ in chosen]
    dataset = TrainDataset([cameras[i] for i in train_indices],
                           [images[i] for i in train_indices])
    fresh = init_field(state.field.resolution, state.field.bbox, state.field.config)
    result = train(fresh, dataset, train_cfg)
    new_vh = estimate_uncertainty_field(result.field, [cameras[i] for i in train_indices],
                                        tau=planner_cfg.tau, step=step)
    history = list(state.history) + [(round_index, idx, score) for idx, score in chosen]
    return NBVState(train_indices, candidates, result.field, new_vh, history)


def test_psnr(field: StochasticRadianceField, cameras, images, test_indices,
              step=None, threads: int = 1) -> float:
    """Mean PSNR of deterministic renders over a view subset."""
    vals = []
    for i in test_indices:
        img, _ = render_image(field, cameras[i], mode="mean", step=step, threads=threads)
        vals.append(psnr(img, images[i]))
    return float(np.mean(vals))
