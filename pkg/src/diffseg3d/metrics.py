"""Dice, Hungarian label matching, HD95 and per-level evaluation reports."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

HD95_UNIT = "voxel"


def hard_mask(soft: np.ndarray) -> np.ndarray:
    """Argmax over the leading (part) axis; ties go to the lowest index."""
    return np.argmax(np.asarray(soft), axis=0).astype(np.int64)


def _check_extents(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask extents differ: {a.shape} vs {b.shape}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_extents(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class Assignment:
    mapping: dict[int, int]  # predicted label -> ground-truth label
    unassigned: list[int]
    cost: float
    gt_labels: list[int]


TIE_TOL = 1e-12


def _optimal_edges(cost: np.ndarray, best: float) -> np.ndarray:
    """Pairs (i, j) that occur in at least one minimum-cost assignment."""
    k, n = cost.shape
    allowed = np.zeros_like(cost, dtype=bool)
    for i in range(k):
        for j in range(n):
            sub = np.delete(np.delete(cost, i, axis=0), j, axis=1)
            rest = sub[linear_sum_assignment(sub)].sum() if sub.size else 0.0
            allowed[i, j] = cost[i, j] + rest <= best + TIE_TOL
    return allowed


def hungarian_match(pred: np.ndarray, gt: np.ndarray, k: int | None = None,
                    tie_cost: Callable[[np.ndarray, np.ndarray], float] | None = None) -> Assignment:
    """Minimum-cost injective map from predicted to ground-truth labels.

    Pair cost is ``-dice``. ``k`` defaults to ``pred.max() + 1``; predicted
    labels absent from ``pred`` still take part (with Dice 0 everywhere).

    When several assignments reach the optimum, ``tie_cost(pred_mask, gt_mask)``
    picks among them (lowest total wins). Without it the solver's choice
    depends on label order, so scores other than Dice can change when the
    predicted labels are renamed.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_extents(pred, gt)
    if k is None:
        k = int(pred.max()) + 1
    gt_labels = [int(v) for v in np.unique(gt)]
    if len(gt_labels) > k:
        raise ValueError(f"{len(gt_labels)} ground-truth labels cannot be covered by {k} predicted labels")
    cost = np.zeros((k, len(gt_labels)))
    for i in range(k):
        pi = pred == i
        for j, g in enumerate(gt_labels):
            cost[i, j] = -dice(pi, gt == g)
    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    if tie_cost is not None:
        allowed = _optimal_edges(cost, best)
        if allowed.sum() > len(rows):
            secondary = np.full(cost.shape, 1e12)
            for i, j in zip(*np.nonzero(allowed)):
                secondary[i, j] = tie_cost(pred == i, gt == gt_labels[j])
            r2, c2 = linear_sum_assignment(secondary)
            if np.all(allowed[r2, c2]) and cost[r2, c2].sum() <= best + TIE_TOL:
                rows, cols = r2, c2
    mapping = {int(r): gt_labels[c] for r, c in zip(rows, cols)}
    return Assignment(
        mapping=mapping,
        unassigned=[i for i in range(k) if i not in mapping],
        cost=float(cost[rows, cols].sum()),
        gt_labels=gt_labels,
    )


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour or on the volume boundary."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(3, 1))
    return mask & ~interior[1:-1, 1:-1, 1:-1]


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_extents(a, b)
    spacing = np.asarray(spacing, dtype=np.float64)
    if (spacing <= 0).any():
        raise ValueError(f"spacing must be positive, got {spacing}")
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return float(np.linalg.norm(np.asarray(a.shape) * spacing))
    sa, sb = surface(a), surface(b)
    # EDT of the complement gives the distance to the nearest surface voxel.
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    pooled = np.concatenate([dist_to_b[sa], dist_to_a[sb]])
    return float(np.percentile(pooled, 95))


def foreground_labels(level: int, gt_labels: Sequence[int]) -> list[int]:
    """Classes averaged in reports: the cell at Level 1, all non-background otherwise."""
    return [g for g in gt_labels if g != 0]


@dataclass
class VolumeScore:
    name: str
    dice: float
    hd95: float
    per_class_dice: dict[int, float] = field(default_factory=dict)
    per_class_hd95: dict[int, float] = field(default_factory=dict)
    mapping: dict[int, int] = field(default_factory=dict)


@dataclass
class EvalReport:
    level: int
    k: int
    volumes: list[VolumeScore]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    hd95_unit: str = HD95_UNIT
    averaging: str = "foreground classes only (background excluded)"

    @property
    def mean_dice(self) -> float:
        return float(np.mean([v.dice for v in self.volumes])) if self.volumes else float("nan")

    @property
    def mean_hd95(self) -> float:
        return float(np.mean([v.hd95 for v in self.volumes])) if self.volumes else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_dice"] = self.mean_dice
        d["mean_hd95"] = self.mean_hd95
        return d

    def to_table(self) -> str:
        lines = [
            f"# level={self.level} K={self.k} hd95_unit={self.hd95_unit} "
            f"spacing={','.join(str(s) for s in self.spacing)} dice_average={self.averaging}",
            "volume\tdice\thd95",
        ]
        lines += [f"{v.name}\t{v.dice:.6f}\t{v.hd95:.6f}" for v in self.volumes]
        lines.append(f"MEAN\t{self.mean_dice:.6f}\t{self.mean_hd95:.6f}")
        return "\n".join(lines) + "\n"


def score_volume(pred: np.ndarray, gt: np.ndarray, level: int, k: int, name: str = "",
                 spacing=(1.0, 1.0, 1.0)) -> VolumeScore:
    assign = hungarian_match(pred, gt, k, tie_cost=lambda p, g: hd95(p, g, spacing))
    inverse = {g: p for p, g in assign.mapping.items()}
    classes = foreground_labels(level, assign.gt_labels)
    dices, dists = {}, {}
    for g in classes:
        pm = pred == inverse[g]
        gm = gt == g
        dices[g] = dice(pm, gm)
        dists[g] = hd95(pm, gm, spacing)
    return VolumeScore(
        name=name,
        dice=float(np.mean(list(dices.values()))) if dices else 1.0,
        hd95=float(np.mean(list(dists.values()))) if dists else 0.0,
        per_class_dice=dices,
        per_class_hd95=dists,
        mapping=assign.mapping,
    )


def evaluate_level(predict: Callable[[np.ndarray], np.ndarray], volumes, level: int, k: int,
                   spacing=(1.0, 1.0, 1.0)) -> EvalReport:
    """Score ``predict`` (image -> soft mask [K, D, H, W]) on ``volumes``.

    ``volumes`` yields ``(name, image, labels_by_level)`` tuples.
    """
    scores = []
    for name, image, labels in volumes:
        if level not in labels or labels[level] is None:
            raise ValueError(f"volume {name!r} has no level-{level} labels")
        soft = predict(image)
        if soft.shape[0] != k:
            raise ValueError(f"prediction for {name!r} has {soft.shape[0]} parts, expected K={k}")
        scores.append(score_volume(hard_mask(soft), np.asarray(labels[level]), level, k, name, spacing))
    return EvalReport(level=level, k=k, volumes=scores, spacing=tuple(float(s) for s in spacing))


def evaluate_hard(predictions, level: int, k: int, spacing=(1.0, 1.0, 1.0)) -> EvalReport:
    """Like :func:`evaluate_level` for precomputed hard masks ``(name, pred, gt)``."""
    scores = [score_volume(np.asarray(p), np.asarray(g), level, k, name, spacing) for name, p, g in predictions]
    return EvalReport(level=level, k=k, volumes=scores, spacing=tuple(float(s) for s in spacing))
