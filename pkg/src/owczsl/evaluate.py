"""Bias-calibrated seen/unseen evaluation.

A scalar bias is added to every non-seen pair score. A sample switches from
its best seen pair to its best non-seen pair once ``m_u + bias > m_s``, so the
prediction only changes at the critical values ``m_s - m_u``; sweeping one
bias per interval between consecutive critical values covers the whole
(-inf, +inf) range exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import CompositionSpace, Sample
from .errors import ContractError, DegenerateProtocolError
from .feasibility import closed_world_mask
from .slc import MASKED, apply_mask


@dataclass
class EvalCurve:
    points: list[tuple[float, float, float]] = field(default_factory=list, repr=False)  # (bias, seen_acc, unseen_acc) in [0, 1]
    S: float = 0.0
    U: float = 0.0
    HM: float = 0.0
    AUC: float = 0.0

    def summary(self) -> str:
        return f"S {self.S:.4f} U {self.U:.4f} HM {self.HM:.4f} AUC {self.AUC:.4f}"


@dataclass
class Predictions:
    scores: np.ndarray  # [N, P] masked
    seen_best: np.ndarray  # [N]
    unseen_best: np.ndarray  # [N]
    seen_arg: np.ndarray  # [N], -1 when no feasible seen pair
    unseen_arg: np.ndarray  # [N], -1 when no feasible unseen pair


def predict(scores, mask, space: CompositionSpace) -> Predictions:
    """Mask raw pair scores and split them into best-seen / best-unseen candidates.

    ``unseen`` here means every pair outside the seen set, as in the open world.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    mask = np.ones(space.n_pairs, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    masked = apply_mask(scores, mask)
    seen = space.seen_indicator()
    out = []
    for category in (seen & mask, ~seen & mask):
        if not category.any():
            n = scores.shape[0]
            out.append((np.full(n, MASKED), np.full(n, -1)))
            continue
        cols = np.flatnonzero(category)
        sub = masked[:, cols]
        arg = sub.argmax(axis=1)
        out.append((sub[np.arange(len(sub)), arg], cols[arg]))
    (m_s, a_s), (m_u, a_u) = out
    return Predictions(masked, m_s, m_u, a_s, a_u)


def _curve_from_points(points: list[tuple[float, float, float]]) -> EvalCurve:
    seen_acc = np.array([p[1] for p in points])
    unseen_acc = np.array([p[2] for p in points])
    denom = seen_acc + unseen_acc
    hm = np.where(denom > 0, 2 * seen_acc * unseen_acc / np.where(denom > 0, denom, 1.0), 0.0)
    order = np.argsort(unseen_acc, kind="stable")
    auc = float(np.trapezoid(seen_acc[order], unseen_acc[order]))
    return EvalCurve(points, 100 * float(seen_acc.max()), 100 * float(unseen_acc.max()), 100 * float(hm.max()), 100 * auc)


def bias_sweep(predictions: Predictions, labels, space: CompositionSpace) -> EvalCurve:
    """Exact sweep over every distinct prediction state; metrics are reported x100."""
    labels = np.asarray(labels, dtype=np.intp)
    is_seen = np.isin(labels, sorted(space.seen))
    if is_seen.all():
        raise DegenerateProtocolError("no unseen-labeled samples to evaluate")
    crit = predictions.seen_best - predictions.unseen_best
    distinct = np.unique(crit)
    span = max(1.0, float(np.abs(distinct).max()))
    biases = [float(distinct[0]) - span]
    biases += [float(0.5 * (lo + hi)) for lo, hi in zip(distinct[:-1], distinct[1:])]
    biases.append(float(distinct[-1]) + span)
    seen_ok = predictions.seen_arg == labels
    unseen_ok = predictions.unseen_arg == labels
    points = []
    for b in biases:
        correct = np.where(b > crit, unseen_ok, seen_ok)
        s = float(correct[is_seen].mean()) if is_seen.any() else 0.0
        u = float(correct[~is_seen].mean())
        points.append((b, s, u))
    curve = _curve_from_points(points)
    check_monotone(curve)
    return curve


def check_monotone(curve: EvalCurve) -> None:
    s = np.array([p[1] for p in curve.points])
    u = np.array([p[2] for p in curve.points])
    if np.any(np.diff(s) > 1e-12) or np.any(np.diff(u) < -1e-12):
        raise ContractError("bias sweep is not monotone")


def evaluate(model, samples: Sequence[Sample], mask=None, world: str = "open", batch_size: int = 256) -> EvalCurve:
    """Score ``samples`` with ``model`` and sweep the bias.

    With ``world='closed'`` and no explicit mask, the mask keeps exactly the
    dataset's seen and unseen pairs.
    """
    space = model.space
    if mask is None and world == "closed":
        mask = closed_world_mask(space)
    images = np.stack([s.image for s in samples]).astype(model.dtype)
    labels = np.array([s.pair(space) for s in samples])
    preds = predict(model.pair_scores(images, batch_size), mask, space)
    return bias_sweep(preds, labels, space)


# ---------------------------------------------------------------------------
# dumps


def write_curve(path, curve: EvalCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bias\tseen\tunseen\n")
        for b, s, u in curve.points:
            fh.write(f"{b!r}\t{s!r}\t{u!r}\n")


def write_predictions(path, ids: Sequence[str], labels, scores) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, label, row in zip(ids, labels, np.asarray(scores)):
            fh.write(f"{sid}\t{int(label)}\t" + " ".join(repr(float(v)) for v in row) + "\n")
