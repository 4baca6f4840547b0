"""Retrain-and-evaluate runners for the TopK and compositor-head ablations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backbone import BackboneConfig
from .data import CompositionSpace, EmbeddingVocab, Sample
from .evaluate import evaluate
from .model import Model
from .slc import SlcConfig, param_count
from .train import TrainConfig, train


@dataclass
class AblationRow:
    label: str
    S: float
    U: float
    HM: float
    AUC: float
    extra: dict = field(default_factory=dict)

    def tsv(self, keys: Sequence[str] = ()) -> str:
        cols = [self.label] + [str(self.extra[k]) for k in keys] + [f"{v:.4f}" for v in (self.S, self.U, self.HM, self.AUC)]
        return "\t".join(cols)


def _run(space, samples, bb, sc, tc, vocab, mask, world, dtype) -> tuple[Model, tuple[float, float, float, float]]:
    model = Model(space, bb, sc, vocab=vocab, seed=tc.seed, dtype=dtype)
    train(model, samples, tc, mask=mask, eval_split=None)
    test = [s for s in samples if s.split == "test"]
    curve = evaluate(model, test, mask, world)
    return model, (curve.S, curve.U, curve.HM, curve.AUC)


def ablate_topk(
    space: CompositionSpace,
    samples: Sequence[Sample],
    backbone: BackboneConfig,
    train_config: TrainConfig,
    k_list: Sequence[int],
    slc: SlcConfig | None = None,
    vocab: EmbeddingVocab | None = None,
    mask=None,
    world: str = "closed",
    dtype=np.float32,
) -> list[AblationRow]:
    """One fresh training run per K, identical seeds otherwise."""
    rows = []
    for k in k_list:
        bb = replace(backbone, k=int(k))
        _, (s, u, hm, auc) = _run(space, samples, bb, slc or SlcConfig(), train_config, vocab, mask, world, dtype)
        rows.append(AblationRow(f"K={k}", s, u, hm, auc, {"k": int(k)}))
    return rows


def ablate_head(
    space: CompositionSpace,
    samples: Sequence[Sample],
    backbone: BackboneConfig,
    train_config: TrainConfig,
    slc: SlcConfig | None = None,
    vocab: EmbeddingVocab | None = None,
    mask=None,
    world: str = "closed",
    dtype=np.float32,
) -> list[AblationRow]:
    """Sparse compositor against the fully connected head, with parameter counts."""
    sparse, dense, ratio = param_count(space.n_attrs, space.n_objs)
    base = slc or SlcConfig()
    rows = []
    for head in ("sparse", "dense"):
        model, (s, u, hm, auc) = _run(space, samples, backbone, replace(base, head=head), train_config, vocab, mask, world, dtype)
        size = model.slc.sparse_layer_size()
        expected = sparse if head == "sparse" else dense
        if size != expected:
            raise AssertionError(f"{head} head holds {size} weights, expected {expected}")
        rows.append(AblationRow(head, s, u, hm, auc, {"params": size, "ratio": ratio}))
    return rows


def write_report(path, rows: Sequence[AblationRow], keys: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["run", *keys, "S", "U", "HM", "AUC"]) + "\n")
        for row in rows:
            fh.write(row.tsv(keys) + "\n")
