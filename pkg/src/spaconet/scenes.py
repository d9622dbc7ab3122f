"""Deterministic generator of confounded toy scene corpora.

The default corpus has four classes built from rectangular "furniture" objects
on a flat background. Two classes share the same objects and layout statistics
and differ only in which color is bound to which object, so occupancy
histograms and translation-invariant pooled image features cannot separate
them. A second class pair shares identical image statistics but distinct
semantic channels, so only the score-tensor branch separates it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .numerics import FLOAT, LABEL

Region = tuple[int, int, int, int]  # r0, c0, r1, c1 (half-open)


@dataclass(frozen=True)
class ExtraPlacement:
    object_id: int
    prob: float
    region: Region
    size_range: tuple[int, int, int, int]  # hmin, hmax, wmin, wmax (inclusive)


@dataclass(frozen=True)
class ClassLayout:
    paired: tuple[int, int]
    extras: tuple[ExtraPlacement, ...] = ()


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int
    num_objects: int
    height: int
    width: int
    seed: int
    score_noise: float
    image_noise: float
    slots: tuple[Region, Region]
    pair_size: tuple[int, int]  # inclusive side-length range shared by a pair
    layouts: tuple[ClassLayout, ...]
    colors: dict  # colors[class][object] = (r, g, b)
    confound_pair: tuple[int, int] = (0, 1)
    alignment: int = 32

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("violated invariant: at least two scene classes required")
        if self.height % self.alignment or self.width % self.alignment:
            raise ConfigError(
                f"violated invariant: grid {self.height}x{self.width} not divisible "
                f"by alignment {self.alignment}")
        if len(self.layouts) != self.num_classes:
            raise ConfigError(
                f"violated invariant: {len(self.layouts)} layouts for "
                f"{self.num_classes} classes")
        if not 0.0 <= self.score_noise < 1.0:
            raise ConfigError(f"violated invariant: score noise {self.score_noise} not in [0, 1)")
        if self.image_noise < 0.0:
            raise ConfigError("violated invariant: image noise must be nonnegative")
        for t, layout in enumerate(self.layouts):
            for o in layout.paired:
                if not 1 <= o < self.num_objects:
                    raise ConfigError(f"violated invariant: object id {o} out of range")
                if o not in self.colors.get(t, {}):
                    raise ConfigError(f"violated invariant: no color for class {t} object {o}")
            if 0 not in self.colors.get(t, {}):
                raise ConfigError(f"violated invariant: no background color for class {t}")
            for extra in layout.extras:
                if extra.object_id >= self.num_objects:
                    raise ConfigError(
                        f"violated invariant: object id {extra.object_id} out of range")
                if extra.object_id not in self.colors.get(t, {}):
                    raise ConfigError(
                        f"violated invariant: no color for class {t} object {extra.object_id}")
        for r0, c0, r1, c1 in self.slots:
            if not (0 <= r0 < r1 <= self.height and 0 <= c0 < c1 <= self.width):
                raise ConfigError("violated invariant: slot region outside the grid")
        smin, smax = self.pair_size
        for r0, c0, r1, c1 in self.slots:
            if smax > r1 - r0 or smax > c1 - c0:
                raise ConfigError("violated invariant: paired object cannot fit its slot")
        if smin < 2:
            raise ConfigError("violated invariant: paired objects must be at least 2x2")
        probs = self.occurrence_probs()
        shared = False
        for o in range(1, self.num_objects):
            high = np.nonzero(probs[:, o] >= 0.9)[0]
            if len(high) >= 2:
                shared = True
        if not shared:
            raise ConfigError(
                "violated invariant: no two classes share a high-probability object")

    def occurrence_probs(self) -> np.ndarray:
        probs = np.zeros((self.num_classes, self.num_objects))
        probs[:, 0] = 1.0  # background fills every uncovered cell
        for t, layout in enumerate(self.layouts):
            for o in layout.paired:
                probs[t, o] = 1.0
            for extra in layout.extras:
                probs[t, extra.object_id] = extra.prob
        return probs

    def permitted_region(self, t: int, o: int) -> np.ndarray:
        """Boolean grid of cells object o may occupy in class t."""
        mask = np.zeros((self.height, self.width), dtype=bool)
        layout = self.layouts[t]
        if o == 0:
            return ~mask  # background may appear anywhere
        if o in layout.paired:
            for r0, c0, r1, c1 in self.slots:
                mask[r0:r1, c0:c1] = True
        for extra in layout.extras:
            if extra.object_id == o:
                r0, c0, r1, c1 = extra.region
                mask[r0:r1, c0:c1] = True
        return mask

    def to_json(self) -> str:
        doc = {
            "num_classes": self.num_classes,
            "num_objects": self.num_objects,
            "height": self.height,
            "width": self.width,
            "seed": self.seed,
            "score_noise": self.score_noise,
            "image_noise": self.image_noise,
            "slots": [list(s) for s in self.slots],
            "pair_size": list(self.pair_size),
            "layouts": [
                {"paired": list(l.paired),
                 "extras": [{"object_id": e.object_id, "prob": e.prob,
                             "region": list(e.region), "size_range": list(e.size_range)}
                            for e in l.extras]}
                for l in self.layouts],
            "colors": {str(t): {str(o): list(rgb) for o, rgb in table.items()}
                       for t, table in self.colors.items()},
            "confound_pair": list(self.confound_pair),
            "alignment": self.alignment,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid scene spec json: {e}") from e
        try:
            spec = SceneSpec(
                num_classes=int(doc["num_classes"]),
                num_objects=int(doc["num_objects"]),
                height=int(doc["height"]),
                width=int(doc["width"]),
                seed=int(doc["seed"]),
                score_noise=float(doc["score_noise"]),
                image_noise=float(doc["image_noise"]),
                slots=tuple(tuple(s) for s in doc["slots"]),
                pair_size=tuple(doc["pair_size"]),
                layouts=tuple(
                    ClassLayout(
                        paired=tuple(l["paired"]),
                        extras=tuple(ExtraPlacement(
                            object_id=int(e["object_id"]), prob=float(e["prob"]),
                            region=tuple(e["region"]), size_range=tuple(e["size_range"]))
                            for e in l["extras"]))
                    for l in doc["layouts"]),
                colors={int(t): {int(o): tuple(rgb) for o, rgb in table.items()}
                        for t, table in doc["colors"].items()},
                confound_pair=tuple(doc["confound_pair"]),
                alignment=int(doc.get("alignment", 32)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid scene spec field: {e}") from e
        spec.validate()
        return spec


@dataclass
class SampleRecord:
    image: np.ndarray   # (H, W, 3)
    scores: np.ndarray  # (H, W, l)
    labels: np.ndarray  # (H, W) ground-truth object ids
    label: int          # scene class


_BG = (0.45, 0.45, 0.45)
_WARM = (0.85, 0.35, 0.15)
_COOL = (0.15, 0.35, 0.85)
_GREEN = (0.20, 0.75, 0.30)
_VIOLET = (0.70, 0.20, 0.80)
_DECOR = (0.95, 0.90, 0.10)


def default_scene_spec(seed: int = 7, height: int = 64, width: int = 64,
                       score_noise: float = 0.25, image_noise: float = 0.15) -> SceneSpec:
    """Four classes, eight object ids, one color-swap confounded pair."""
    decor = ExtraPlacement(object_id=7, prob=0.8, region=(0, 0, 6, width),
                           size_range=(3, 6, 4, 10))
    layouts = (
        ClassLayout(paired=(1, 2), extras=(decor,)),
        ClassLayout(paired=(1, 2), extras=(decor,)),
        ClassLayout(paired=(3, 5), extras=(decor,)),
        ClassLayout(paired=(4, 6), extras=(decor,)),
    )
    colors = {
        0: {0: _BG, 1: _WARM, 2: _COOL, 7: _DECOR},
        1: {0: _BG, 1: _COOL, 2: _WARM, 7: _DECOR},
        2: {0: _BG, 3: _GREEN, 5: _VIOLET, 7: _DECOR},
        3: {0: _BG, 4: _GREEN, 6: _VIOLET, 7: _DECOR},
    }
    spec = SceneSpec(
        num_classes=4, num_objects=8, height=height, width=width, seed=seed,
        score_noise=score_noise, image_noise=image_noise,
        slots=((8, 4, height - 8, 28), (8, 36, height - 8, 60)),
        pair_size=(18, 24),
        layouts=layouts, colors=colors, confound_pair=(0, 1), alignment=32)
    spec.validate()
    return spec


def _paint(labels: np.ndarray, rng: np.random.Generator, obj: int,
           region: Region, h: int, w: int):
    r0, c0, r1, c1 = region
    top = int(rng.integers(r0, r1 - h + 1))
    left = int(rng.integers(c0, c1 - w + 1))
    labels[top : top + h, left : left + w] = obj


def render_sample(spec: SceneSpec, t: int, rng: np.random.Generator) -> SampleRecord:
    """Place objects, fill per-(class, object) colors plus noise, emit scores."""
    if not 0 <= t < spec.num_classes:
        raise ConfigError(f"class {t} out of range [0, {spec.num_classes})")
    h_grid, w_grid, l = spec.height, spec.width, spec.num_objects
    labels = np.zeros((h_grid, w_grid), dtype=np.int64)
    layout = spec.layouts[t]

    smin, smax = spec.pair_size
    rect_h = int(rng.integers(smin, smax + 1))
    rect_w = int(rng.integers(smin, smax + 1))
    order = (0, 1) if rng.random() < 0.5 else (1, 0)
    for obj, slot_idx in zip(layout.paired, order):
        _paint(labels, rng, obj, spec.slots[slot_idx], rect_h, rect_w)
    for extra in layout.extras:
        if rng.random() < extra.prob:
            hmin, hmax, wmin, wmax = extra.size_range
            eh = int(rng.integers(hmin, hmax + 1))
            ew = int(rng.integers(wmin, wmax + 1))
            _paint(labels, rng, extra.object_id, extra.region, eh, ew)

    lut = np.zeros((l, 3), dtype=FLOAT)
    for o, rgb in spec.colors[t].items():
        lut[o] = rgb
    image = lut[labels] + spec.image_noise * rng.standard_normal((h_grid, w_grid, 3))

    scores = np.zeros((h_grid, w_grid, l), dtype=FLOAT)
    rows, cols = np.meshgrid(np.arange(h_grid), np.arange(w_grid), indexing="ij")
    scores[rows, cols, labels] = 1.0
    if spec.score_noise > 0.0:
        confused = rng.random((h_grid, w_grid)) < spec.score_noise
        wrong = (labels + rng.integers(1, l, size=(h_grid, w_grid))) % l
        cr, cc = np.nonzero(confused)
        scores[cr, cc, labels[cr, cc]] = 0.45
        scores[cr, cc, wrong[cr, cc]] = 0.55
    return SampleRecord(image=image, scores=scores, labels=labels, label=t)


def sample_rng(spec_seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec_seed, split, index))))


def generate_dataset(spec: SceneSpec, n_train: int, n_test: int,
                     out_dir) -> tuple[Path, Path]:
    """Write sample tensor files and the two split manifests; returns their paths.

    Deterministic given the spec: per-sample rng streams derive from
    (seed, split, index), classes cycle so per-class counts stay within one.
    """
    from .fileio import write_manifest, write_tensor

    spec.validate()
    out_dir = Path(out_dir)
    sample_dir = out_dir / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scene_spec.json").write_text(spec.to_json())

    manifests = []
    for split_idx, (name, count) in enumerate((("train", n_train), ("test", n_test))):
        entries = []
        for i in range(count):
            t = i % spec.num_classes
            sample = render_sample(spec, t, sample_rng(spec.seed, split_idx, i))
            stem = f"{name}_{i:05d}"
            write_tensor(sample_dir / f"{stem}_image.spc",
                         sample.image.astype(np.float32))
            write_tensor(sample_dir / f"{stem}_scores.spc",
                         sample.scores.astype(np.float32))
            write_tensor(sample_dir / f"{stem}_labels.spc",
                         sample.labels.astype(LABEL))
            entries.append((f"samples/{stem}_image.spc", f"samples/{stem}_scores.spc", t))
        path = out_dir / f"{name}_manifest.txt"
        write_manifest(path, spec.num_classes, spec.num_objects, entries)
        manifests.append(path)
    return manifests[0], manifests[1]
