"""Full network: backbone encoder feeding the compositor, plus checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .backbone import Backbone, BackboneConfig, SelectionResult
from .data import CompositionSpace, EmbeddingVocab
from .errors import CheckpointError
from .numerics import Tensor, load_archive, save_archive
from .slc import PredictionBundle, Slc, SlcConfig

CHECKPOINT_VERSION = "owczsl-ckpt v1"


class Model:
    def __init__(
        self,
        space: CompositionSpace,
        backbone_config: BackboneConfig | None = None,
        slc_config: SlcConfig | None = None,
        vocab: EmbeddingVocab | None = None,
        seed: int = 0,
        dtype=np.float64,
    ):
        self.space = space
        self.backbone_config = backbone_config or BackboneConfig()
        self.slc_config = slc_config or SlcConfig()
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.backbone = Backbone(self.backbone_config, space, vocab, seed=seed, dtype=dtype)
        self.slc = Slc(self.backbone_config.d_model, space.n_attrs, space.n_objs, self.slc_config, seed=seed + 1, dtype=dtype)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.backbone.params, **self.slc.params}

    @property
    def depth_total(self) -> int:
        """Index of the topmost layer group (the prediction heads)."""
        return self.backbone_config.depth + 2

    def layer_index(self, name: str) -> int:
        if name.startswith("slc."):
            return self.depth_total
        return self.backbone.layer_index(name)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, images: np.ndarray, f_pair=None) -> tuple[PredictionBundle, SelectionResult]:
        (z0, z1, z2), sel = self.backbone.forward(images)
        return self.slc.forward(z0, z1, z2, f_pair), sel

    def pair_scores(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Unmasked final pair scores for a stack of images, computed in chunks without a graph."""
        images = np.asarray(images)
        out = []
        for start in range(0, len(images), batch_size):
            with no_grad(self):
                bundle, _ = self.forward(images[start : start + batch_size])
            out.append(bundle.y_final.data)
        if not out:
            return np.zeros((0, self.space.n_pairs))
        return np.concatenate(out, axis=0)

    # -- persistence ------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "backbone": asdict(self.backbone_config),
            "slc": asdict(self.slc_config),
            "seed": self.seed,
            "dtype": self.dtype.name,
            "space": {
                "attrs": list(self.space.attrs),
                "objs": list(self.space.objs),
                "seen": sorted(self.space.seen),
                "unseen": sorted(self.space.unseen),
            },
        }

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.metadata()
        if extra:
            meta["extra"] = extra
        comments = [
            CHECKPOINT_VERSION,
            "pair_index = attr_index * n_objs + obj_index",
            "meta " + json.dumps(meta, sort_keys=True, separators=(",", ":")),
        ]
        save_archive(path, {k: v.data for k, v in self.params.items()}, comments)

    @classmethod
    def load(cls, path) -> "Model":
        tensors, comments = load_archive(path)
        if not comments or comments[0] != CHECKPOINT_VERSION:
            found = comments[0] if comments else "<none>"
            raise CheckpointError(f"{path}: expected {CHECKPOINT_VERSION!r}, found {found!r}")
        meta_lines = [c for c in comments if c.startswith("meta ")]
        if not meta_lines:
            raise CheckpointError(f"{path}: missing model metadata")
        meta = json.loads(meta_lines[0][5:])
        sp = meta["space"]
        space = CompositionSpace(tuple(sp["attrs"]), tuple(sp["objs"]), frozenset(sp["seen"]), frozenset(sp["unseen"]))
        model = cls(space, BackboneConfig(**meta["backbone"]), SlcConfig(**meta["slc"]), seed=meta["seed"], dtype=np.dtype(meta["dtype"]))
        params = model.params
        if set(tensors) != set(params):
            raise CheckpointError(f"{path}: parameter names do not match the model configuration")
        for name, arr in tensors.items():
            if arr.shape != params[name].shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            params[name].data = arr.astype(model.dtype)
        return model


class no_grad:
    """Temporarily mark every model parameter as constant so forward passes record no graph."""

    def __init__(self, model: Model):
        self.params = list(model.params.values())

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.flags):
            p.requires_grad = flag
