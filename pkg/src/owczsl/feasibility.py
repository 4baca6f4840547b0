"""Word-embedding feasibility scores for compositions and the binary masks built from them.

A pair's object score is the best cosine similarity between its object and any
object seen with its attribute during training; the attribute score mirrors
that. The two are averaged per vocabulary, and the larger of the two
vocabularies' averages is the final score. Seen pairs score 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import CompositionSpace, EmbeddingVocab, Sample
from .errors import ContractError, DegenerateInputError, ParseError, UndefinedSupportError

EPS = 1e-9
MASK_HEADER = "#owczsl-mask v1"
SCORE_HEADER = "#owczsl-scores v1"


@dataclass
class FeasibilityTable:
    scores: np.ndarray  # [|A| * |O|]
    threshold: float
    mask: np.ndarray  # [|A| * |O|] of 0/1
    world: str

    @property
    def n_feasible(self) -> int:
        return int(self.mask.sum())


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def rho_object(a: int, o: int, vocab: EmbeddingVocab, space: CompositionSpace) -> float:
    if space.pair_index(a, o) in space.seen:
        return 1.0
    support = [ob for ob in space.objects_seen_with(a) if ob != o]
    if not support:
        raise UndefinedSupportError(f"attribute {space.attrs[a]!r} has no seen objects")
    target = vocab[space.objs[o]]
    return max(cosine(target, vocab[space.objs[ob]]) for ob in support)


def rho_attr(a: int, o: int, vocab: EmbeddingVocab, space: CompositionSpace) -> float:
    if space.pair_index(a, o) in space.seen:
        return 1.0
    support = [at for at in space.attrs_seen_with(o) if at != a]
    if not support:
        raise UndefinedSupportError(f"object {space.objs[o]!r} has no seen attributes")
    target = vocab[space.attrs[a]]
    return max(cosine(target, vocab[space.attrs[at]]) for at in support)


def rho_combined(a: int, o: int, vocab: EmbeddingVocab, space: CompositionSpace) -> float:
    return 0.5 * (rho_object(a, o, vocab, space) + rho_attr(a, o, vocab, space))


def rho_final(a: int, o: int, vocab1: EmbeddingVocab, vocab2: EmbeddingVocab, space: CompositionSpace) -> float:
    return max(rho_combined(a, o, vocab1, space), rho_combined(a, o, vocab2, space))


def missing_words(space: CompositionSpace, *vocabs: EmbeddingVocab) -> list[str]:
    words = list(space.attrs) + list(space.objs)
    return sorted({w for v in vocabs for w in v.missing(words)})


def score_table(space: CompositionSpace, vocab1: EmbeddingVocab, vocab2: EmbeddingVocab | None = None) -> np.ndarray:
    """Vectorised feasibility score for every pair, attribute-major."""
    vocab2 = vocab1 if vocab2 is None else vocab2
    missing = missing_words(space, vocab1, vocab2)
    if missing:
        raise KeyError(f"no embedding for: {' '.join(missing)}")
    seen = space.seen_indicator().reshape(space.n_attrs, space.n_objs)
    if not seen.any(axis=1).all() or not seen.any(axis=0).all():
        raise UndefinedSupportError("every attribute and object needs at least one seen pair")
    best = None
    for vocab in (vocab1, vocab2):
        obj_sim = _cosine_matrix([vocab[w] for w in space.objs])  # [O, O]
        attr_sim = _cosine_matrix([vocab[w] for w in space.attrs])  # [A, A]
        # rho_o[a, o] = max over ob seen with a of obj_sim[o, ob]
        rho_o = np.where(seen[:, None, :], obj_sim[None, :, :], -np.inf).max(axis=-1)
        # rho_a[a, o] = max over at seen with o of attr_sim[a, at]
        rho_a = np.where(seen.T[None, :, :], attr_sim[:, None, :], -np.inf).max(axis=-1)
        combined = 0.5 * (rho_o + rho_a)
        combined[seen] = 1.0
        best = combined if best is None else np.maximum(best, combined)
    return best.reshape(-1)


def _cosine_matrix(vectors) -> np.ndarray:
    m = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero embedding vector")
    m = m / norms[:, None]
    return np.clip(m @ m.T, -1.0, 1.0)


def validation_unseen_pairs(space: CompositionSpace, samples: Iterable[Sample]) -> list[int]:
    return sorted({s.pair(space) for s in samples if s.split == "val" and s.pair(space) in space.unseen})


def calibrate_threshold(scores, space: CompositionSpace, target_keep_frac: float = 1.0, val_unseen: Iterable[int] | None = None) -> float:
    """Largest threshold that keeps at least ``target_keep_frac`` of the validation unseen pairs.

    A pair stays feasible when its score is strictly above the threshold. With
    no validation unseen pairs the threshold falls back to the
    ``1 - target_keep_frac`` quantile of the seen-pair scores.
    """
    if not 0 < target_keep_frac <= 1:
        raise ContractError("target_keep_frac must lie in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    pairs = sorted(space.unseen) if val_unseen is None else sorted(val_unseen)
    if pairs:
        ref = np.sort(scores[pairs])[::-1]
    else:
        ref = np.sort(scores[sorted(space.seen)])[::-1]
    keep = max(1, math.ceil(target_keep_frac * ref.size - 1e-12))
    return float(ref[keep - 1] - EPS)


def closed_world_mask(space: CompositionSpace) -> np.ndarray:
    mask = np.zeros(space.n_pairs, dtype=np.int8)
    mask[sorted(space.seen | space.unseen)] = 1
    return mask


def build_mask(scores, threshold: float, space: CompositionSpace, world: str = "open") -> FeasibilityTable:
    scores = np.asarray(scores, dtype=np.float64)
    if world == "open":
        mask = ((scores > threshold) | space.seen_indicator()).astype(np.int8)
    elif world == "closed":
        mask = closed_world_mask(space)
    else:
        raise ContractError(f"world must be open or closed, got {world!r}")
    return FeasibilityTable(scores, float(threshold), mask, world)


# ---------------------------------------------------------------------------
# files


def _fmt_threshold(t: float) -> str:
    return repr(float(t))


def write_mask(path, table: FeasibilityTable, space: CompositionSpace) -> None:
    grid = table.mask.reshape(space.n_attrs, space.n_objs)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{MASK_HEADER} {space.n_attrs} {space.n_objs} {table.world} {_fmt_threshold(table.threshold)}\n")
        for row in grid:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def write_scores(path, table: FeasibilityTable, space: CompositionSpace) -> None:
    grid = table.scores.reshape(space.n_attrs, space.n_objs)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{SCORE_HEADER} {space.n_attrs} {space.n_objs} {table.world} {_fmt_threshold(table.threshold)}\n")
        for row in grid:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def _read_grid(path, header, cast):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().rstrip("\n").split("\n")
    head = lines[0].split(" ")
    if " ".join(head[:2]) != header or len(head) != 6:
        raise ParseError(f"expected header '{header} |A| |O| world T'", 1)
    try:
        n_a, n_o = int(head[2]), int(head[3])
        threshold = float(head[5])
    except ValueError:
        raise ParseError("bad header fields", 1) from None
    world = head[4]
    if world not in ("open", "closed"):
        raise ParseError(f"bad world {world!r}", 1)
    rows = lines[1:]
    if len(rows) != n_a:
        raise ParseError(f"expected {n_a} rows, found {len(rows)}")
    grid = []
    for lineno, line in enumerate(rows, start=2):
        vals = line.split(" ")
        if len(vals) != n_o:
            raise ParseError(f"expected {n_o} values", lineno)
        try:
            grid.append([cast(v) for v in vals])
        except ValueError:
            raise ParseError("bad value", lineno) from None
    return np.array(grid).reshape(-1), n_a, n_o, world, threshold


def read_mask(path) -> tuple[np.ndarray, int, int, str, float]:
    """Return ``(mask, n_attrs, n_objs, world, threshold)``."""

    def bit(v):
        if v not in ("0", "1"):
            raise ValueError(v)
        return int(v)

    mask, n_a, n_o, world, t = _read_grid(path, MASK_HEADER, bit)
    return mask.astype(np.int8), n_a, n_o, world, t


def read_scores(path) -> tuple[np.ndarray, int, int, str, float]:
    scores, n_a, n_o, world, t = _read_grid(path, SCORE_HEADER, float)
    return scores.astype(np.float64), n_a, n_o, world, t
