"""Losses, AdamW with layer-wise learning-rate decay, augmentation and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .backbone import SelectionResult
from .data import CompositionSpace, Sample, Triplet, TripletIndex
from .errors import ContractError, DivergenceError, PartnerNotFoundError
from .model import Model
from .numerics import Tensor
from .slc import PredictionBundle

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha_attr: float = 1.0
    alpha_obj: float = 1.0
    alpha_pair: float = 1.0
    alpha_sel: float = 0.5
    base_lr: float = 3.5e-5
    layer_decay: float = 0.65
    weight_decay: float = 0.1
    warmup_frac: float = 0.2
    final_lr_frac: float = 0.5
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    crop_pad: int = 1
    hflip_prob: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        for name in ("alpha_attr", "alpha_obj", "alpha_pair", "alpha_sel", "weight_decay"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if not 0 <= self.warmup_frac < 1:
            raise ContractError("warmup_frac must lie in [0, 1)")
        if self.base_lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ContractError("base_lr, epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.hflip_prob <= 1 or self.crop_pad < 0:
            raise ContractError("hflip_prob must lie in [0, 1] and crop_pad >= 0")


# ---------------------------------------------------------------------------
# objective


def loss(
    bundle: PredictionBundle,
    selection: SelectionResult | None,
    y_attr,
    y_obj,
    space: CompositionSpace,
    config: TrainConfig,
) -> Tensor:
    """Weighted sum of attribute, object, seen-restricted pair and selector cross-entropies.

    The pair term scores the unmasked final prediction. Terms with zero weight
    are left out of the graph entirely.
    """
    y_attr = np.asarray(y_attr, dtype=np.intp)
    y_obj = np.asarray(y_obj, dtype=np.intp)
    pairs = y_attr * space.n_objs + y_obj
    off = [int(p) for p in pairs if int(p) not in space.seen]
    if off:
        raise ContractError(f"training labels must be seen pairs, got {off}")
    terms = []
    if config.alpha_attr:
        terms.append(nx.scale(nx.cross_entropy(bundle.y_attr, y_attr), config.alpha_attr))
    if config.alpha_obj:
        terms.append(nx.scale(nx.cross_entropy(bundle.y_obj, y_obj), config.alpha_obj))
    if config.alpha_pair:
        terms.append(nx.scale(nx.cross_entropy(bundle.y_final, pairs, class_subset=sorted(space.seen)), config.alpha_pair))
    if config.alpha_sel and selection is not None:
        sel = nx.cross_entropy(selection.attr_scores, y_attr) + nx.cross_entropy(selection.obj_scores, y_obj)
        terms.append(nx.scale(sel, config.alpha_sel))
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ---------------------------------------------------------------------------
# optimisation


def warmup_cosine(step: int, total_steps: int, warmup_frac: float = 0.2, final_frac: float = 0.5) -> float:
    """Multiplier on the peak learning rate.

    Linear ramp from 0 over the warm-up steps, then half a cosine period from
    1 down to ``final_frac`` at ``total_steps``.
    """
    if total_steps <= 0:
        return 1.0
    warm = warmup_frac * total_steps
    if step < warm:
        return step / warm
    if total_steps <= warm:
        return 1.0
    progress = min(1.0, (step - warm) / (total_steps - warm))
    return final_frac + (1.0 - final_frac) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def layer_factor(layer_index: int, depth_total: int, decay: float) -> float:
    return decay ** (depth_total - layer_index)


def adamw_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float | dict[str, float],
    weight_decay: float | dict[str, float] = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update in place.

    ``lr`` and ``weight_decay`` may be scalars or per-parameter dicts.
    """
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step_lr = lr[name] if isinstance(lr, dict) else lr
        wd = weight_decay[name] if isinstance(weight_decay, dict) else weight_decay
        if wd:
            p.data *= 1.0 - step_lr * wd
        p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + eps)


def weight_decays(model: Model, config: TrainConfig) -> dict[str, float]:
    """Decay matrices only; biases and norm gains are left alone."""
    return {name: config.weight_decay if p.data.ndim >= 2 else 0.0 for name, p in model.params.items()}


def learning_rates(model: Model, config: TrainConfig, step: int, total_steps: int) -> dict[str, float]:
    base = config.base_lr * warmup_cosine(step, total_steps, config.warmup_frac, config.final_lr_frac)
    top = model.depth_total
    return {name: base * layer_factor(model.layer_index(name), top, config.layer_decay) for name in model.params}


# ---------------------------------------------------------------------------
# augmentation


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def pad_crop(image: np.ndarray, pad: int, dy: int, dx: int) -> np.ndarray:
    """Zero-pad by ``pad`` on each side and crop the original size at offset (dy, dx)."""
    if pad == 0:
        return image
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    return padded[dy : dy + h, dx : dx + w]


def augment(image: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    pad = config.crop_pad
    dy, dx = rng.integers(0, 2 * pad + 1, size=2) if pad else (0, 0)
    out = pad_crop(image, pad, int(dy), int(dx))
    if rng.random() < config.hflip_prob:
        out = hflip(out)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochLog:
    epoch: int
    loss: float
    S: float
    U: float
    HM: float
    AUC: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.loss:.6f}\t{self.S:.4f}\t{self.U:.4f}\t{self.HM:.4f}\t{self.AUC:.4f}"


METRICS_HEADER = "epoch\tloss\tS\tU\tHM\tAUC"


def train(
    model: Model,
    samples: Sequence[Sample],
    config: TrainConfig,
    mask=None,
    eval_split: str | None = "val",
    triplet_hook: Callable[[list[Triplet], Model], Tensor | None] | None = None,
    max_steps: int | None = None,
) -> list[EpochLog]:
    """Train in place and return one log row per epoch.

    Validation metrics use ``mask`` (all pairs feasible when None) and are NaN
    when the split has no unseen-labeled samples. When ``triplet_hook`` is
    given it receives the batch's triplets and may return an extra loss term.
    """
    from .evaluate import evaluate

    config.validate()
    space = model.space
    train_set = [s for s in samples if s.split == "train"]
    if not train_set:
        raise ContractError("no training samples")
    eval_set = [s for s in samples if s.split == eval_split] if eval_split else []
    rng = np.random.default_rng(config.seed)
    triplet_rng = np.random.default_rng([config.seed, 1])
    triplets = TripletIndex(train_set)
    images = np.stack([s.image for s in train_set]).astype(model.dtype)
    y_attr = np.array([s.y_attr for s in train_set])
    y_obj = np.array([s.y_obj for s in train_set])
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total = steps_per_epoch * config.epochs
    if max_steps is not None:
        total = min(total, max_steps)
    state = AdamState()
    params = model.params
    decays = weight_decays(model, config)
    logs = []
    step = 0
    for epoch in range(config.epochs):
        if step >= total:
            break
        order = rng.permutation(len(train_set))
        running, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            if step >= total:
                break
            idx = order[start : start + config.batch_size]
            batch = np.stack([augment(images[i], rng, config) for i in idx])
            model.zero_grad()
            bundle, sel = model.forward(batch)
            objective = loss(bundle, sel, y_attr[idx], y_obj[idx], space, config)
            batch_triplets = []
            for i in idx:
                try:
                    batch_triplets.append(triplets.sample(train_set[i], triplet_rng))
                except PartnerNotFoundError:
                    continue
            if triplet_hook is not None:
                extra = triplet_hook(batch_triplets, model)
                if extra is not None:
                    objective = objective + extra
            value = float(objective.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at step {step}")
            objective.backward()
            adamw_step(
                params,
                state,
                learning_rates(model, config, step + 1, total),
                decays,
                (config.beta1, config.beta2),
                config.adam_eps,
            )
            running += value * len(idx)
            count += len(idx)
            step += 1
        S = U = HM = AUC = float("nan")
        if eval_set and any(s.pair(space) in space.unseen for s in eval_set):
            curve = evaluate(model, eval_set, mask)
            S, U, HM, AUC = curve.S, curve.U, curve.HM, curve.AUC
        row = EpochLog(epoch, running / max(count, 1), S, U, HM, AUC)
        log.info("epoch %d loss %.4f S %.2f U %.2f HM %.2f AUC %.2f", epoch, row.loss, S, U, HM, AUC)
        logs.append(row)
    return logs


def write_metrics(path, logs: Sequence[EpochLog]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in logs:
            fh.write(row.tsv() + "\n")
