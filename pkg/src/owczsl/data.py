"""Composition space, procedural attribute x object images, and text file formats.

Objects are rendered as distinct silhouettes and attributes as appearance
transforms of the silhouette fill, so every (attribute, object) pair is a
genuinely novel combination of two independently recognisable factors.

Pair indices are attribute-major: ``pair = attr_index * n_objs + obj_index``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, InfeasibleSplitError, ParseError, PartnerNotFoundError

ATTRIBUTE_WORDS = ("red", "blue", "striped", "checkered", "speckled", "dark", "green", "yellow", "blurry", "pale")
OBJECT_WORDS = ("disc", "square", "triangle", "cross", "ring", "bar", "diamond", "column", "frame", "star")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CompositionSpace:
    attrs: tuple[str, ...]
    objs: tuple[str, ...]
    seen: frozenset[int]
    unseen: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "attrs", tuple(self.attrs))
        object.__setattr__(self, "objs", tuple(self.objs))
        object.__setattr__(self, "seen", frozenset(int(p) for p in self.seen))
        object.__setattr__(self, "unseen", frozenset(int(p) for p in self.unseen))
        if len(set(self.attrs)) != len(self.attrs) or len(set(self.objs)) != len(self.objs):
            raise ContractError("duplicate primitive names")
        if self.seen & self.unseen:
            raise ContractError("seen and unseen pairs overlap")
        bad = [p for p in self.seen | self.unseen if not 0 <= p < self.n_pairs]
        if bad:
            raise ContractError(f"pair indices out of range: {sorted(bad)}")

    @property
    def n_attrs(self) -> int:
        return len(self.attrs)

    @property
    def n_objs(self) -> int:
        return len(self.objs)

    @property
    def n_pairs(self) -> int:
        return len(self.attrs) * len(self.objs)

    def pair_index(self, a: int, o: int) -> int:
        return a * len(self.objs) + o

    def pair_of(self, p: int) -> tuple[int, int]:
        return divmod(int(p), len(self.objs))

    def pair_name(self, p: int) -> str:
        a, o = self.pair_of(p)
        return f"{self.attrs[a]} {self.objs[o]}"

    def seen_indicator(self) -> np.ndarray:
        ind = np.zeros(self.n_pairs, dtype=bool)
        ind[sorted(self.seen)] = True
        return ind

    def covers_all_primitives(self) -> bool:
        attrs = {self.pair_of(p)[0] for p in self.seen}
        objs = {self.pair_of(p)[1] for p in self.seen}
        return len(attrs) == self.n_attrs and len(objs) == self.n_objs

    def objects_seen_with(self, a: int) -> list[int]:
        return sorted(o for o in range(self.n_objs) if self.pair_index(a, o) in self.seen)

    def attrs_seen_with(self, o: int) -> list[int]:
        return sorted(a for a in range(self.n_attrs) if self.pair_index(a, o) in self.seen)


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray | None = field(compare=False, repr=False)
    y_attr: int
    y_obj: int
    split: str

    def pair(self, space: CompositionSpace) -> int:
        return space.pair_index(self.y_attr, self.y_obj)


@dataclass(frozen=True)
class Triplet:
    x: Sample
    x_attr: Sample
    x_obj: Sample


@dataclass
class EmbeddingVocab:
    vectors: dict[str, np.ndarray]
    dim: int

    def __contains__(self, word):
        return word in self.vectors

    def __getitem__(self, word):
        return self.vectors[word]

    def __len__(self):
        return len(self.vectors)

    def missing(self, words: Iterable[str]) -> list[str]:
        return [w for w in words if w not in self.vectors]


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(name: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    ax, ay = np.abs(dx), np.abs(dy)
    dist = np.hypot(dx, dy)
    if name == "disc":
        return dist <= r
    if name == "square":
        return np.maximum(ax, ay) <= 0.8 * r
    if name == "triangle":
        # apex up, flat base; mirror symmetric about the vertical axis
        return (dy <= 0.8 * r) & (dy >= -r) & (ax <= 0.5 * (dy + r))
    if name == "cross":
        w = max(0.3 * r, 0.75)
        return ((ax <= w) & (ay <= r)) | ((ay <= w) & (ax <= r))
    if name == "ring":
        return (dist <= r) & (dist >= 0.55 * r)
    if name == "bar":
        return (ay <= max(0.3 * r, 0.75)) & (ax <= r)
    if name == "diamond":
        return ax + ay <= r
    if name == "column":
        return (ax <= max(0.3 * r, 0.75)) & (ay <= r)
    if name == "frame":
        m = np.maximum(ax, ay)
        return (m <= 0.9 * r) & (m >= 0.5 * r)
    if name == "star":
        ang = np.arctan2(dy, dx)
        return dist <= r * (0.55 + 0.45 * np.cos(5 * ang + math.pi / 2)) ** 2 + 0.25 * r
    raise ValueError(f"no renderer for object {name!r}")


_COLORS = {
    "red": (0.9, 0.15, 0.12),
    "blue": (0.15, 0.3, 0.95),
    "green": (0.15, 0.8, 0.2),
    "yellow": (0.95, 0.85, 0.1),
}
_BASE = np.array([0.85, 0.85, 0.85])


def _fill(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Full-canvas texture for an attribute; the object mask cuts it out."""
    yy, xx = np.mgrid[0:size, 0:size]
    jitter = rng.uniform(-0.05, 0.05, size=3)
    if name in _COLORS:
        return np.broadcast_to(np.clip(np.array(_COLORS[name]) + jitter, 0, 1), (size, size, 3)).copy()
    if name == "striped":
        phase = rng.integers(0, 2)
        on = ((yy + phase) % 2 == 0)[..., None]
        return np.where(on, _BASE + jitter, 0.25)
    if name == "checkered":
        phase = rng.integers(0, 2)
        on = (((yy // 2) + (xx // 2) + phase) % 2 == 0)[..., None]
        return np.where(on, _BASE + jitter, 0.25)
    if name == "speckled":
        grain = rng.uniform(0.0, 1.0, size=(size, size, 1))
        return np.where(grain > 0.5, _BASE + jitter, 0.3)
    if name == "dark":
        return np.broadcast_to(0.38 + jitter, (size, size, 3)).copy()
    if name == "pale":
        return np.broadcast_to(np.array([0.95, 0.8, 0.85]) + jitter, (size, size, 3)).copy()
    if name == "blurry":
        return np.broadcast_to(np.array([0.7, 0.9, 0.95]) + jitter, (size, size, 3)).copy()
    raise ValueError(f"no renderer for attribute {name!r}")


def render(attr: str, obj: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One H x W x 3 image in [0, 1] showing ``obj`` with appearance ``attr``."""
    r = size * rng.uniform(0.34, 0.42)
    cx = size / 2 + rng.uniform(-1.0, 1.0)
    cy = size / 2 + rng.uniform(-1.0, 1.0)
    mask = _shape_mask(obj, size, cx, cy, r)[..., None]
    background = 0.08 + 0.04 * rng.standard_normal((size, size, 3))
    img = np.where(mask, _fill(attr, size, rng), background)
    if attr == "blurry":
        img = ndimage.uniform_filter(img, size=(3, 3, 1), mode="nearest")
    img = img + 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset generation


def _names(words: Sequence[str], n: int, kind: str) -> tuple[str, ...]:
    if n > len(words):
        raise ValueError(f"at most {len(words)} {kind} can be rendered, asked for {n}")
    return tuple(words[:n])


def draw_unseen(n_attrs: int, n_objs: int, n_unseen: int, rng: np.random.Generator, max_tries: int = 2000) -> frozenset[int]:
    """Uniform random unseen set that leaves every primitive in some seen pair."""
    n_pairs = n_attrs * n_objs
    if n_unseen == 0:
        return frozenset()
    if n_pairs - n_unseen < max(n_attrs, n_objs):
        raise InfeasibleSplitError(
            f"{n_unseen} unseen of {n_pairs} pairs leaves too few seen pairs to cover {n_attrs} attributes and {n_objs} objects"
        )
    for _ in range(max_tries):
        unseen = rng.choice(n_pairs, size=n_unseen, replace=False)
        seen = np.setdiff1d(np.arange(n_pairs), unseen)
        if len(set(seen // n_objs)) == n_attrs and len(set(seen % n_objs)) == n_objs:
            return frozenset(int(p) for p in unseen)
    # near the feasibility bound rejection rarely succeeds: fix a random edge
    # cover first, then draw the remaining seen pairs uniformly
    a_perm, o_perm = rng.permutation(n_attrs), rng.permutation(n_objs)
    m = max(n_attrs, n_objs)
    cover = {int(a_perm[i % n_attrs]) * n_objs + int(o_perm[i % n_objs]) for i in range(m)}
    rest = np.array(sorted(set(range(n_pairs)) - cover))
    extra = rng.choice(rest, size=n_pairs - n_unseen - len(cover), replace=False)
    seen = cover | {int(p) for p in extra}
    return frozenset(set(range(n_pairs)) - seen)


def generate_dataset(
    n_attrs: int,
    n_objs: int,
    unseen_frac: float,
    samples_per_pair: int,
    image_size: int = 16,
    seed: int = 0,
) -> tuple[CompositionSpace, list[Sample]]:
    """Deterministic synthetic dataset and its seen/unseen split.

    Seen-pair samples go 80/10/10 to train/val/test; unseen-pair samples are
    halved between val and test (test gets the odd one out).
    """
    if n_attrs < 2 or n_objs < 2:
        raise ValueError("need at least 2 attributes and 2 objects")
    if not 0 <= unseen_frac < 1:
        raise ValueError("unseen_frac must lie in [0, 1)")
    if samples_per_pair < 1:
        raise ValueError("samples_per_pair must be positive")
    attrs = _names(ATTRIBUTE_WORDS, n_attrs, "attributes")
    objs = _names(OBJECT_WORDS, n_objs, "objects")
    rng = np.random.default_rng(seed)
    n_unseen = int(round(unseen_frac * n_attrs * n_objs))
    unseen = draw_unseen(n_attrs, n_objs, n_unseen, rng)
    seen = frozenset(range(n_attrs * n_objs)) - unseen
    space = CompositionSpace(attrs, objs, seen, unseen)

    samples = []
    for p in range(space.n_pairs):
        a, o = space.pair_of(p)
        n = samples_per_pair
        if p in unseen:
            n_val = n // 2
            splits = ["val"] * n_val + ["test"] * (n - n_val)
        else:
            n_val = n_test = n // 10
            splits = ["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test
        for k, split in enumerate(splits):
            img = render(attrs[a], objs[o], image_size, rng)
            samples.append(Sample(f"s{p:04d}_{k:03d}", img, a, o, split))
    return space, samples


# ---------------------------------------------------------------------------
# triplets


class TripletIndex:
    """Train samples bucketed by attribute and object for partner lookups."""

    def __init__(self, samples: Sequence[Sample]):
        self.by_attr: dict[int, list[Sample]] = {}
        self.by_obj: dict[int, list[Sample]] = {}
        for s in samples:
            if s.split != "train":
                continue
            self.by_attr.setdefault(s.y_attr, []).append(s)
            self.by_obj.setdefault(s.y_obj, []).append(s)

    def sample(self, anchor: Sample, rng: np.random.Generator) -> Triplet:
        attr_partners = [s for s in self.by_attr.get(anchor.y_attr, ()) if s.y_obj != anchor.y_obj]
        obj_partners = [s for s in self.by_obj.get(anchor.y_obj, ()) if s.y_attr != anchor.y_attr]
        if not attr_partners:
            raise PartnerNotFoundError(f"no train sample shares attribute {anchor.y_attr} with a different object")
        if not obj_partners:
            raise PartnerNotFoundError(f"no train sample shares object {anchor.y_obj} with a different attribute")
        x_attr = attr_partners[int(rng.integers(len(attr_partners)))]
        x_obj = obj_partners[int(rng.integers(len(obj_partners)))]
        return Triplet(anchor, x_attr, x_obj)


def sample_triplet(space: CompositionSpace, samples: Sequence[Sample], anchor: Sample, rng: np.random.Generator) -> Triplet:
    """Pick x_attr (same attribute, other object) and x_obj (same object, other attribute) from train."""
    return TripletIndex(samples).sample(anchor, rng)


# ---------------------------------------------------------------------------
# word embeddings


def load_embeddings(path) -> EmbeddingVocab:
    """Parse a GloVe-style text file: ``word v1 ... vd`` per line."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            word, *fields = line.split(" ")
            if not fields:
                raise ParseError(f"word {word!r} has no vector", lineno)
            try:
                vec = np.array([float(f) for f in fields], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"non-numeric field: {exc}", lineno) from None
            if not np.all(np.isfinite(vec)):
                raise ParseError("non-finite value", lineno)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ParseError(f"expected {dim} values, found {vec.size}", lineno)
            if word in vectors:
                raise ParseError(f"duplicate word {word!r}", lineno)
            if not np.any(vec):
                raise ParseError(f"zero vector for {word!r}", lineno)
            vectors[word] = vec
    if dim is None:
        raise ParseError(f"{path}: no embeddings found")
    return EmbeddingVocab(vectors, dim)


def write_embeddings(path, vocab: EmbeddingVocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for word, vec in vocab.vectors.items():
            fh.write(word + " " + " ".join(repr(float(v)) for v in vec) + "\n")


_WORD_GROUPS = {
    "red": "colour", "blue": "colour", "green": "colour", "yellow": "colour", "pale": "colour",
    "striped": "pattern", "checkered": "pattern", "speckled": "pattern",
    "dark": "tone", "blurry": "tone",
    "disc": "round", "ring": "round", "star": "round",
    "square": "box", "frame": "box", "diamond": "box",
    "triangle": "pointed",
    "cross": "line", "bar": "line", "column": "line",
}


def synthetic_embeddings(words: Sequence[str], dim: int = 16, seed: int = 0, spread: float = 0.6) -> EmbeddingVocab:
    """Small stand-in for pretrained word vectors: words in a semantic group share a centre."""
    rng = np.random.default_rng(seed)
    centres: dict[str, np.ndarray] = {}
    vectors = {}
    for w in words:
        group = _WORD_GROUPS.get(w, w)
        if group not in centres:
            centres[group] = rng.standard_normal(dim)
        vectors[w] = np.round(centres[group] + spread * rng.standard_normal(dim), 6)
    return EmbeddingVocab(vectors, dim)


# ---------------------------------------------------------------------------
# manifest / space / image files

MANIFEST_HEADER = "#owczsl-manifest v1"
SPACE_HEADER = "#owczsl-space v1"


def write_manifest(path, space: CompositionSpace, samples: Sequence[Sample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for s in samples:
            fh.write(f"{s.id}\t{space.attrs[s.y_attr]}\t{space.objs[s.y_obj]}\t{s.split}\n")


def read_manifest(path, space: CompositionSpace) -> list[Sample]:
    attr_ix = {n: i for i, n in enumerate(space.attrs)}
    obj_ix = {n: i for i, n in enumerate(space.objs)}
    samples = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != MANIFEST_HEADER:
            raise ParseError(f"expected header {MANIFEST_HEADER!r}", 1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
            sid, attr, obj, split = parts
            if attr not in attr_ix:
                raise ParseError(f"unknown attribute {attr!r}", lineno)
            if obj not in obj_ix:
                raise ParseError(f"unknown object {obj!r}", lineno)
            if split not in SPLITS:
                raise ParseError(f"bad split token {split!r}", lineno)
            samples.append(Sample(sid, None, attr_ix[attr], obj_ix[obj], split))
    return samples


def write_space(path, space: CompositionSpace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SPACE_HEADER + "\n")
        fh.write("attrs\t" + "\t".join(space.attrs) + "\n")
        fh.write("objs\t" + "\t".join(space.objs) + "\n")
        fh.write("seen\t" + "\t".join(str(p) for p in sorted(space.seen)) + "\n")
        fh.write("unseen\t" + "\t".join(str(p) for p in sorted(space.unseen)) + "\n")


def read_space(path) -> CompositionSpace:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines[0] != SPACE_HEADER:
        raise ParseError(f"expected header {SPACE_HEADER!r}", 1)
    fields = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        key, *vals = line.split("\t")
        if key not in ("attrs", "objs", "seen", "unseen"):
            raise ParseError(f"unknown key {key!r}", lineno)
        fields[key] = [v for v in vals if v != ""]
    try:
        return CompositionSpace(
            tuple(fields["attrs"]),
            tuple(fields["objs"]),
            frozenset(int(p) for p in fields.get("seen", [])),
            frozenset(int(p) for p in fields.get("unseen", [])),
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad space description: {exc}") from None


def write_image(path, image: np.ndarray) -> None:
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    h, w, c = struct.unpack("<3I", raw[:12])
    return np.frombuffer(raw, dtype="<f4", offset=12, count=h * w * c).reshape(h, w, c).astype(np.float32)


def save_dataset(directory, space: CompositionSpace, samples: Sequence[Sample]) -> None:
    """Write ``space.tsv``, ``manifest.tsv`` and one binary image per sample under ``images/``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    write_space(root / "space.tsv", space)
    write_manifest(root / "manifest.tsv", space, samples)
    for s in samples:
        write_image(root / "images" / f"{s.id}.bin", s.image)


def load_dataset(directory) -> tuple[CompositionSpace, list[Sample]]:
    root = Path(directory)
    space = read_space(root / "space.tsv")
    rows = read_manifest(root / "manifest.tsv", space)
    samples = [Sample(s.id, read_image(root / "images" / f"{s.id}.bin"), s.y_attr, s.y_obj, s.split) for s in rows]
    return space, samples


def split_counts(space: CompositionSpace, samples: Sequence[Sample]) -> dict[str, dict[str, int]]:
    counts = {sp: {"seen": 0, "unseen": 0} for sp in SPLITS}
    for s in samples:
        counts[s.split]["seen" if s.pair(space) in space.seen else "unseen"] += 1
    return counts
