"""Sparse Linear Compositor: attribute/object heads, decomposed and composed pair scores.

All pair vectors are attribute-major, ``pair = i * |O| + j``. Functions accept
a leading batch axis (or none) and operate on the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DegenerateInputError, ShapeError
from .numerics import Tensor

MASKED = -1e30


@dataclass
class SlcConfig:
    eta: float = 1.0
    norm_mode: str = "softmax"
    head: str = "sparse"  # or "dense" for the fully connected ablation

    def validate(self):
        if self.norm_mode not in ("softmax", "l2"):
            raise ContractError(f"norm_mode must be softmax or l2, got {self.norm_mode!r}")
        if self.head not in ("sparse", "dense"):
            raise ContractError(f"head must be sparse or dense, got {self.head!r}")


@dataclass
class PredictionBundle:
    y_attr: Tensor
    y_obj: Tensor
    y_decompose: Tensor
    z_pair: Tensor
    z_pair_tilde: Tensor
    y_compose: Tensor
    y_final: Tensor
    y_masked: Tensor | None = None


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, weight) if x.ndim >= 2 else nx.reshape(nx.matmul(nx.reshape(x, (1, -1)), weight), (-1,))
    return y if bias is None else y + bias


def aux_heads(z0: Tensor, z1: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    y_attr = linear(z0, params["slc.mlp_attr.weight"], params["slc.mlp_attr.bias"])
    y_obj = linear(z1, params["slc.mlp_obj.weight"], params["slc.mlp_obj.bias"])
    return y_attr, y_obj


def _l2_normalize(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("l2 normalisation of a zero vector")
    xd = x.data
    out = xd / norms

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return nx.custom_op(out, (x,), backward, "l2_normalize")


def normalize(x: Tensor, mode: str = "softmax") -> Tensor:
    if mode == "softmax":
        return nx.softmax(x, axis=-1)
    if mode == "l2":
        return _l2_normalize(x)
    raise ContractError(f"unknown norm mode {mode!r}")


def decompose(y_attr: Tensor, y_obj: Tensor, norm_mode: str = "softmax") -> Tensor:
    """Flattened outer product of the normalised attribute and object scores."""
    na, no = y_attr.shape[-1], y_obj.shape[-1]
    if y_attr.shape[:-1] != y_obj.shape[:-1]:
        raise ShapeError(f"batch shapes differ: {y_attr.shape} vs {y_obj.shape}")
    lead = y_attr.shape[:-1]
    pa = nx.reshape(normalize(y_attr, norm_mode), lead + (na, 1))
    po = nx.reshape(normalize(y_obj, norm_mode), lead + (1, no))
    return nx.reshape(pa * po, lead + (na * no,))


def pair_fuse(z2: Tensor, y_attr: Tensor, y_obj: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Return ``(z_pair, z_pair_tilde)`` with the attribute segment first."""
    z_pair = linear(z2, params["slc.mlp_pair.weight"], params["slc.mlp_pair.bias"])
    return z_pair, z_pair + nx.concat([y_attr, y_obj], axis=-1)


def sparse_compose(z_tilde: Tensor, w_attr: Tensor, w_obj: Tensor) -> Tensor:
    """y[i*|O|+j] = z[i] * W_a[i, j] + z[|A|+j] * W_o[j, i], with a hand-written backward."""
    na, no = w_attr.shape
    if w_obj.shape != (no, na):
        raise ShapeError(f"W_o must be {(no, na)}, got {w_obj.shape}")
    if z_tilde.shape[-1] != na + no:
        raise ShapeError(f"z_pair_tilde must have {na + no} entries, got {z_tilde.shape[-1]}")
    z = z_tilde.data
    lead = z.shape[:-1]
    za = z[..., :na, None]  # [..., A, 1]
    zo = z[..., na:]  # [..., O]
    wa, wo = w_attr.data, w_obj.data
    out = (za * wa + zo[..., None, :] * wo.T).reshape(lead + (na * no,))

    def backward(g):
        g = g.reshape(lead + (na, no))
        gz = np.empty_like(z)
        gz[..., :na] = (g * wa).sum(axis=-1)
        gz[..., na:] = (g * wo.T).sum(axis=-2)
        flat_g = g.reshape(-1, na, no)
        gwa = (z.reshape(-1, na + no)[:, :na, None] * flat_g).sum(axis=0)
        gwo = (z.reshape(-1, na + no)[:, None, na:] * flat_g).sum(axis=0).T
        return gz, gwa, gwo

    return nx.custom_op(out, (z_tilde, w_attr, w_obj), backward, "sparse_compose")


def dense_head(z_tilde: Tensor, w_dense: Tensor) -> Tensor:
    """Fully connected replacement for the sparse layer: z_tilde @ W_dense."""
    return linear(z_tilde, w_dense)


def embed_sparse_in_dense(w_attr: np.ndarray, w_obj: np.ndarray) -> np.ndarray:
    """The (|A|+|O|) x (|A|*|O|) matrix whose product equals :func:`sparse_compose`."""
    na, no = w_attr.shape
    dense = np.zeros((na + no, na * no), dtype=np.result_type(w_attr, w_obj))
    for i in range(na):
        for j in range(no):
            dense[i, i * no + j] = w_attr[i, j]
            dense[na + j, i * no + j] = w_obj[j, i]
    return dense


def fuse(y_decompose: Tensor, y_compose: Tensor, eta: float) -> Tensor:
    if y_decompose.shape != y_compose.shape:
        raise ShapeError(f"cannot fuse {y_decompose.shape} with {y_compose.shape}")
    return y_decompose + nx.scale(y_compose, eta)


def _check_mask(f_pair) -> np.ndarray:
    f = np.asarray(f_pair)
    if not np.all((f == 0) | (f == 1)):
        raise ContractError("feasibility mask must be binary")
    return f.astype(bool)


def apply_mask(y_final, f_pair):
    """Elementwise product with the mask; masked entries are pushed to -1e30.

    Works on a Tensor (differentiable) or a plain array.
    """
    f = _check_mask(f_pair)
    if isinstance(y_final, Tensor):
        if y_final.shape[-1] != f.shape[-1]:
            raise ShapeError(f"mask has {f.shape[-1]} entries, scores have {y_final.shape[-1]}")
        keep = f.astype(y_final.dtype)
        return y_final * keep + (1.0 - keep) * MASKED
    y = np.asarray(y_final)
    if y.shape[-1] != f.shape[-1]:
        raise ShapeError(f"mask has {f.shape[-1]} entries, scores have {y.shape[-1]}")
    return np.where(f, y * f, MASKED)


def param_count(n_attrs: int, n_objs: int) -> tuple[int, int, float]:
    """(sparse-layer count, fully connected count, sparse/dense ratio)."""
    if n_attrs < 1 or n_objs < 1:
        raise ContractError("sizes must be positive")
    pairs = n_attrs * n_objs
    sparse = 2 * pairs
    dense = (n_attrs + n_objs) * pairs
    return sparse, dense, sparse / dense


class Slc:
    """Parameter container for the compositor; names start with ``slc.``."""

    def __init__(self, d_model: int, n_attrs: int, n_objs: int, config: SlcConfig | None = None, seed: int = 0, dtype=np.float64):
        self.config = config or SlcConfig()
        self.config.validate()
        self.n_attrs, self.n_objs = n_attrs, n_objs
        rng = np.random.default_rng(seed)
        std = 1.0 / math.sqrt(d_model)

        def w(shape):
            return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)

        def const(arr):
            return Tensor(arr, requires_grad=True, dtype=dtype)

        n = n_attrs + n_objs
        p = {
            "slc.mlp_attr.weight": w((d_model, n_attrs)),
            "slc.mlp_attr.bias": const(np.zeros(n_attrs)),
            "slc.mlp_obj.weight": w((d_model, n_objs)),
            "slc.mlp_obj.bias": const(np.zeros(n_objs)),
            "slc.mlp_pair.weight": w((d_model, n)),
            "slc.mlp_pair.bias": const(np.zeros(n)),
        }
        # unit weights start the composed score as attr score + obj score, which
        # is what lets never-trained unseen pairs rank sensibly
        w_attr = np.ones((n_attrs, n_objs))
        w_obj = np.ones((n_objs, n_attrs))
        if self.config.head == "sparse":
            p["slc.w_attr"] = const(w_attr)
            p["slc.w_obj"] = const(w_obj)
        else:
            p["slc.w_dense"] = const(embed_sparse_in_dense(w_attr, w_obj))
        self.params = p

    def sparse_layer_size(self) -> int:
        names = ("slc.w_attr", "slc.w_obj") if self.config.head == "sparse" else ("slc.w_dense",)
        return sum(self.params[n].data.size for n in names)

    def pair_path_size(self) -> int:
        return self.sparse_layer_size() + self.params["slc.mlp_pair.weight"].data.size + self.params["slc.mlp_pair.bias"].data.size

    def compose(self, z_tilde: Tensor) -> Tensor:
        p = self.params
        if self.config.head == "sparse":
            return sparse_compose(z_tilde, p["slc.w_attr"], p["slc.w_obj"])
        return dense_head(z_tilde, p["slc.w_dense"])

    def forward(self, z0: Tensor, z1: Tensor, z2: Tensor, f_pair=None) -> PredictionBundle:
        p = self.params
        y_attr, y_obj = aux_heads(z0, z1, p)
        y_dec = decompose(y_attr, y_obj, self.config.norm_mode)
        z_pair, z_tilde = pair_fuse(z2, y_attr, y_obj, p)
        y_comp = self.compose(z_tilde)
        y_final = fuse(y_dec, y_comp, self.config.eta)
        y_masked = apply_mask(y_final, f_pair) if f_pair is not None else None
        return PredictionBundle(y_attr, y_obj, y_dec, z_pair, z_tilde, y_comp, y_final, y_masked)
