"""Dual-modality transformer encoder.

Input sequence layout per sample::

    [cls_attr, cls_obj, cls_pair] + patch tokens + K attribute tokens + K object tokens

Class and patch tokens carry learned positional embeddings. Text tokens carry
only a type embedding (attribute vs object), so the selected text tokens act
as an unordered set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import CompositionSpace, EmbeddingVocab
from .errors import ContractError, ShapeError
from .numerics import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    d_model: int = 64
    n_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 2
    k: int = 3
    norm_eps: float = 1e-5

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def sequence_length(self) -> int:
        return 3 + self.n_patches + 2 * self.k

    def validate(self, n_attrs: int | None = None, n_objs: int | None = None) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.depth < 0 or self.mlp_ratio <= 0:
            raise ContractError("depth must be >= 0 and mlp_ratio > 0")
        limit = min(n_attrs, n_objs) if n_attrs is not None and n_objs is not None else None
        if self.k < 1 or (limit is not None and self.k > limit):
            raise ContractError(f"K={self.k} must lie in [1, {limit}]")


@dataclass
class SelectionResult:
    attr_scores: Tensor  # [B, |A|]
    obj_scores: Tensor  # [B, |O|]
    attr_topk: np.ndarray  # [B, K]
    obj_topk: np.ndarray  # [B, K]
    attr_tokens: Tensor  # [B, K, d]
    obj_tokens: Tensor  # [B, K, d]


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, best first; ties go to the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def _init(rng, shape, std, dtype):
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


class Backbone:
    """Parameters and forward pieces of the encoder; names start with ``backbone.``."""

    def __init__(
        self,
        config: BackboneConfig,
        space: CompositionSpace,
        vocab: EmbeddingVocab | None = None,
        seed: int = 0,
        dtype=np.float64,
    ):
        config.validate(space.n_attrs, space.n_objs)
        self.config = config
        self.n_attrs, self.n_objs = space.n_attrs, space.n_objs
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d = config.d_model
        patch_dim = config.patch_size**2 * 3
        p: dict[str, Tensor] = {}
        p["backbone.patch.weight"] = _init(rng, (patch_dim, d), 1.0 / math.sqrt(patch_dim), dtype)
        p["backbone.patch.bias"] = _zeros((d,), dtype)
        p["backbone.pos"] = _init(rng, (3 + config.n_patches, d), 0.1, dtype)
        p["backbone.cls"] = _init(rng, (3, d), 0.1, dtype)
        p["backbone.text.table"] = Tensor(self._text_init(space, vocab, rng), requires_grad=True, dtype=dtype)
        p["backbone.text.type"] = _init(rng, (2, d), 0.1, dtype)
        p["backbone.select.query"] = _init(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        p["backbone.select.key"] = _init(rng, (d, d), 1.0 / math.sqrt(d), dtype)
        hidden = config.mlp_ratio * d
        for i in range(config.depth):
            pre = f"backbone.block{i}."
            p[pre + "ln1.gain"] = _ones((d,), dtype)
            p[pre + "ln1.bias"] = _zeros((d,), dtype)
            for name in ("q", "k", "v", "o"):
                p[pre + f"attn.{name}.weight"] = _init(rng, (d, d), 1.0 / math.sqrt(d), dtype)
                p[pre + f"attn.{name}.bias"] = _zeros((d,), dtype)
            p[pre + "ln2.gain"] = _ones((d,), dtype)
            p[pre + "ln2.bias"] = _zeros((d,), dtype)
            p[pre + "mlp.fc1.weight"] = _init(rng, (d, hidden), 1.0 / math.sqrt(d), dtype)
            p[pre + "mlp.fc1.bias"] = _zeros((hidden,), dtype)
            p[pre + "mlp.fc2.weight"] = _init(rng, (hidden, d), 1.0 / math.sqrt(hidden), dtype)
            p[pre + "mlp.fc2.bias"] = _zeros((d,), dtype)
        p["backbone.final_ln.gain"] = _ones((d,), dtype)
        p["backbone.final_ln.bias"] = _zeros((d,), dtype)
        self.params = p

    def _text_init(self, space, vocab, rng) -> np.ndarray:
        d = self.config.d_model
        words = list(space.attrs) + list(space.objs)
        if vocab is None or vocab.missing(words):
            return rng.standard_normal((len(words), d)) * 0.1
        vecs = np.stack([vocab[w] / np.linalg.norm(vocab[w]) for w in words])
        projection = np.random.default_rng(12345).standard_normal((vocab.dim, d)) / math.sqrt(d)
        return vecs @ projection

    def layer_index(self, name: str) -> int:
        """0 for embeddings and the selector, i + 1 for block i, depth + 1 for the final norm."""
        if ".block" in name:
            return int(name.split(".block")[1].split(".")[0]) + 1
        if name.startswith("backbone.final_ln"):
            return self.config.depth + 1
        return 0

    # -- embeddings -------------------------------------------------------

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """[B, H, W, 3] -> [B, n_patches, patch*patch*3], patches in row-major grid order."""
        cfg = self.config
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ShapeError(f"expected images of shape [B, {cfg.image_size}, {cfg.image_size}, 3], got {images.shape}")
        b, ps = images.shape[0], cfg.patch_size
        g = cfg.image_size // ps
        x = images.reshape(b, g, ps, g, ps, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, ps * ps * 3)

    def embed_image(self, images: np.ndarray) -> Tensor:
        p = self.params
        patches = Tensor(self.patchify(images))
        tokens = patches @ p["backbone.patch.weight"] + p["backbone.patch.bias"]
        pos = nx.getitem(p["backbone.pos"], slice(3, None))
        return tokens + pos

    def embed_text(self) -> tuple[Tensor, Tensor]:
        p = self.params
        n_a, n_o = self.n_attrs, self.n_objs
        table, types = p["backbone.text.table"], p["backbone.text.type"]
        attr = nx.embedding(table, np.arange(n_a)) + nx.getitem(types, slice(0, 1))
        obj = nx.embedding(table, np.arange(n_a, n_a + n_o)) + nx.getitem(types, slice(1, 2))
        return attr, obj

    def class_tokens(self, batch: int) -> Tensor:
        p = self.params
        cls = p["backbone.cls"] + nx.getitem(p["backbone.pos"], slice(0, 3))
        return nx.broadcast_to(cls, (batch,) + cls.shape)

    # -- selection --------------------------------------------------------

    def topk_select(self, patch_tokens: Tensor, attr_tokens: Tensor, obj_tokens: Tensor, k: int | None = None) -> SelectionResult:
        """Cross-attention scores of every text token against the image; keep the top K per category.

        The kept tokens are scaled by sigmoid(score) so the selector weights
        receive gradient through the encoder as well as from the auxiliary loss.
        """
        k = self.config.k if k is None else k
        if not 1 <= k <= min(attr_tokens.shape[0], obj_tokens.shape[0]):
            raise ContractError(f"K={k} out of range")
        p = self.params
        d = self.config.d_model
        query = nx.mean(patch_tokens, axis=1) @ p["backbone.select.query"]  # [B, d]
        inv = 1.0 / math.sqrt(d)
        out = []
        for tokens in (attr_tokens, obj_tokens):
            keys = tokens @ p["backbone.select.key"]  # [n, d]
            scores = nx.scale(query @ nx.transpose(keys), inv)  # [B, n]
            idx = topk_indices(scores.data, k)
            rows = np.arange(idx.shape[0])[:, None]
            gate = nx.sigmoid(nx.getitem(scores, (rows, idx)))  # [B, K]
            chosen = nx.embedding(tokens, idx)  # [B, K, d]
            out.append((scores, idx, chosen * nx.reshape(gate, gate.shape + (1,))))
        (a_scores, a_idx, a_tok), (o_scores, o_idx, o_tok) = out
        return SelectionResult(a_scores, o_scores, a_idx, o_idx, a_tok, o_tok)

    # -- encoder ----------------------------------------------------------

    def _attention(self, x: Tensor, pre: str) -> Tensor:
        p = self.params
        b, n, d = x.shape
        h = self.config.n_heads
        dh = d // h

        def heads(name):
            y = x @ p[pre + f"attn.{name}.weight"] + p[pre + f"attn.{name}.bias"]
            return nx.transpose(nx.reshape(y, (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        att = nx.softmax(nx.scale(q @ nx.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh)), axis=-1)
        y = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (b, n, d))
        return y @ p[pre + "attn.o.weight"] + p[pre + "attn.o.bias"]

    def block(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        pre = f"backbone.block{i}."
        eps = self.config.norm_eps
        x = x + self._attention(nx.layernorm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"], eps), pre)
        hmid = nx.layernorm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"], eps)
        hmid = nx.gelu(hmid @ p[pre + "mlp.fc1.weight"] + p[pre + "mlp.fc1.bias"])
        return x + (hmid @ p[pre + "mlp.fc2.weight"] + p[pre + "mlp.fc2.bias"])

    def encode(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Run the pre-norm blocks and final norm; return the three class tokens and the full output."""
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.d_model:
            raise ShapeError(f"expected [B, N, {self.config.d_model}] tokens, got {tokens.shape}")
        x = tokens
        for i in range(self.config.depth):
            x = self.block(x, i)
        p = self.params
        x = nx.layernorm(x, p["backbone.final_ln.gain"], p["backbone.final_ln.bias"], self.config.norm_eps)
        return nx.getitem(x, (slice(None), 0)), nx.getitem(x, (slice(None), 1)), nx.getitem(x, (slice(None), 2)), x

    def build_sequence(self, images: np.ndarray, k: int | None = None) -> tuple[Tensor, SelectionResult]:
        patches = self.embed_image(images)
        attr, obj = self.embed_text()
        sel = self.topk_select(patches, attr, obj, k)
        seq = nx.concat([self.class_tokens(patches.shape[0]), patches, sel.attr_tokens, sel.obj_tokens], axis=1)
        return seq, sel

    def forward(self, images: np.ndarray) -> tuple[tuple[Tensor, Tensor, Tensor], SelectionResult]:
        seq, sel = self.build_sequence(images)
        z0, z1, z2, _ = self.encode(seq)
        return (z0, z1, z2), sel
