"""Synthetic multi-class RGB-D scenes with ground truth.

Objects are templates: a constellation of prototype descriptors at fixed
offsets from the object center. Rendering a scene places templates at chosen
centers, scales and depths and emits features directly (the primary path, so
the voting machinery can be exercised without the pixel extractor) and
optionally a raster image plus depth map (the secondary path, exercising the
extractor end to end). Everything is seeded and bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureSet, ImageRGBD


@dataclass(frozen=True)
class TemplatePart:
    descriptor: np.ndarray  # unit norm
    dx: float               # offset of the part from the object center
    dy: float
    scale: float
    mask_patch: np.ndarray


@dataclass(frozen=True)
class ObjectTemplate:
    class_id: int
    parts: tuple[TemplatePart, ...]
    width: float   # canonical footprint at scale 1
    height: float

    def __post_init__(self):
        if len(self.parts) < 4:
            raise ValueError("a template needs at least 4 parts")


@dataclass(frozen=True)
class Placement:
    class_id: int
    center: tuple[float, float]
    scale: float = 1.0
    depth: float = 1.5


@dataclass(frozen=True)
class SceneSpec:
    width: int = 320
    height: int = 240
    placements: tuple[Placement, ...] = ()
    clutter_count: int = 0
    clutter_noise: float = 0.5
    depth_jitter: float = 0.02
    scale_jitter: float = 0.0
    descriptor_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for p in self.placements:
            if p.depth <= 0 or p.scale <= 0:
                raise ValueError("placement depth and scale must be > 0")


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    center: tuple[float, float]
    box: tuple[float, float, float, float]  # x0, y0, x1, y1
    depth: float
    scale: float


@dataclass
class Scene:
    features: FeatureSet
    truths: list[GroundTruth]
    width: int
    height: int
    image: ImageRGBD | None = None
    masks: list[np.ndarray] = field(default_factory=list)  # one per placement


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_templates(n_classes: int, parts_per_class: int, shared_fraction: float,
                   seed: int, dim: int = 32,
                   canonical_size: tuple[float, float] = (64.0, 48.0),
                   ) -> list[ObjectTemplate]:
    """One template per class. A fraction shared_fraction of each class's
    prototypes is drawn from a pool common to all classes (so the classes
    share appearance), the rest are class-specific."""
    if not 0.0 <= shared_fraction <= 1.0:
        raise ValueError("shared_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_shared = int(round(shared_fraction * parts_per_class))
    pool = [_unit(rng.standard_normal(dim)) for _ in range(max(n_shared, 1))]
    w, h = canonical_size
    templates = []
    for cls in range(n_classes):
        parts = []
        for p in range(parts_per_class):
            if p < n_shared:
                proto = pool[p % len(pool)]
            else:
                proto = _unit(rng.standard_normal(dim))
            dx = rng.uniform(-w / 2 * 0.8, w / 2 * 0.8)
            dy = rng.uniform(-h / 2 * 0.8, h / 2 * 0.8)
            scale = rng.uniform(1.5, 3.5)
            side = max(1, int(round(4 * scale)))
            parts.append(TemplatePart(
                descriptor=proto, dx=dx, dy=dy, scale=scale,
                mask_patch=np.ones((side, side), dtype=np.uint8)))
        templates.append(ObjectTemplate(class_id=cls, parts=tuple(parts),
                                        width=w, height=h))
    return templates


def make_aliasing_template(pair_count: int = 3, pair_gap: float = 48.0,
                           seed: int = 0, dim: int = 32, class_id: int = 0,
                           ) -> ObjectTemplate:
    """A single-class template whose prototypes repeat at two horizontal
    positions pair_gap apart (think of the two wheels of a car seen from the
    side). Each repeated word then carries two occurrence offsets, so a
    feature on one copy also votes half the gap away from its own object."""
    rng = np.random.default_rng(seed)
    half = pair_gap / 2.0
    parts = []
    ys = np.linspace(-12.0, 12.0, pair_count)
    for j in range(pair_count):
        proto = _unit(rng.standard_normal(dim))
        for dx in (-half, half):
            parts.append(TemplatePart(
                descriptor=proto, dx=dx, dy=float(ys[j]), scale=2.0,
                mask_patch=np.ones((8, 8), dtype=np.uint8)))
    # one class-unique anchor keeps real centers strictly stronger
    parts.append(TemplatePart(
        descriptor=_unit(rng.standard_normal(dim)), dx=0.0, dy=-16.0,
        scale=2.0, mask_patch=np.ones((8, 8), dtype=np.uint8)))
    return ObjectTemplate(class_id=class_id, parts=tuple(parts),
                          width=pair_gap + 16.0, height=44.0)


def hallucination_scene(template: ObjectTemplate, seed: int,
                        width: int = 400, height: int = 160,
                        depth_near: float = 1.0, depth_far: float = 2.5,
                        clutter: int = 4) -> tuple[SceneSpec, tuple[float, float]]:
    """Two same-class objects whose repeated parts alias a phantom center
    midway between them: with a pair gap g inside the template and the
    objects 2 g apart, the right copies of the left object and the left
    copies of the right object vote for the same (x, y, s) point. Returns the
    scene and the predicted phantom center."""
    rng = np.random.default_rng(seed)
    gap = 2.0 * (template.width - 16.0)  # 2 x the template's pair gap
    cy = float(rng.uniform(60.0, height - 60.0))
    cx_left = float(rng.uniform(70.0, width - gap - 70.0))
    spec = SceneSpec(
        width=width, height=height,
        placements=(
            Placement(template.class_id, (cx_left, cy), 1.0, depth_near),
            Placement(template.class_id, (cx_left + gap, cy), 1.0, depth_far),
        ),
        clutter_count=clutter, clutter_noise=0.8,
        depth_jitter=0.02, seed=int(rng.integers(1 << 31)),
    )
    return spec, (cx_left + gap / 2.0, cy)


def _placement_box(template: ObjectTemplate, placement: Placement,
                   ) -> tuple[float, float, float, float]:
    cx, cy = placement.center
    hw = template.width * placement.scale / 2.0
    hh = template.height * placement.scale / 2.0
    return (cx - hw, cy - hh, cx + hw, cy + hh)


def render_scene(spec: SceneSpec, templates: list[ObjectTemplate],
                 pixel: bool = False) -> Scene:
    """Emit the scene's features, ground truth, per-placement masks, and
    (optionally) a raster image with a registered depth map.

    Object features are the template parts transformed by the placement;
    clutter features sit at random positions and depths with descriptors
    drawn near the prototype pool and perturbed by clutter_noise."""
    by_class = {t.class_id: t for t in templates}
    rng = np.random.default_rng(spec.seed)
    positions, scales, depths, descriptors = [], [], [], []
    truths: list[GroundTruth] = []
    masks: list[np.ndarray] = []

    for placement in spec.placements:
        template = by_class[placement.class_id]
        x0, y0, x1, y1 = _placement_box(template, placement)
        if x0 < 0 or y0 < 0 or x1 > spec.width or y1 > spec.height:
            raise ValueError(f"placement at {placement.center} falls outside the image")
        cx, cy = placement.center
        for part in template.parts:
            positions.append((cx + part.dx * placement.scale,
                              cy + part.dy * placement.scale))
            s = part.scale * placement.scale
            if spec.scale_jitter > 0:
                s *= max(0.05, 1.0 + spec.scale_jitter * rng.standard_normal())
            scales.append(s)
            d = placement.depth
            if spec.depth_jitter > 0:
                d = max(0.05, d + spec.depth_jitter * rng.standard_normal())
            depths.append(d)
            desc = part.descriptor
            if spec.descriptor_jitter > 0:
                desc = _unit(desc + spec.descriptor_jitter
                             * rng.standard_normal(desc.shape))
            descriptors.append(desc)
        truths.append(GroundTruth(
            class_id=placement.class_id, center=placement.center,
            box=(x0, y0, x1, y1), depth=placement.depth,
            scale=placement.scale))
        mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
        mask[int(np.floor(y0)): int(np.ceil(y1)),
             int(np.floor(x0)): int(np.ceil(x1))] = 1
        masks.append(mask)

    all_parts = [p for t in templates for p in t.parts]
    for _ in range(spec.clutter_count):
        positions.append((rng.uniform(0, spec.width - 1),
                          rng.uniform(0, spec.height - 1)))
        scales.append(rng.uniform(1.5, 3.5))
        depths.append(rng.uniform(0.5, 3.5))
        base = all_parts[rng.integers(len(all_parts))].descriptor
        descriptors.append(_unit(base + spec.clutter_noise
                                 * rng.standard_normal(base.shape)))

    if positions:
        features = FeatureSet(positions, scales, depths,
                              np.stack(descriptors)).sorted_by_position()
    else:
        dim = templates[0].parts[0].descriptor.shape[0] if templates else 0
        features = FeatureSet.empty(dim)

    image = _render_pixels(spec, templates, by_class) if pixel else None
    return Scene(features=features, truths=truths, width=spec.width,
                 height=spec.height, image=image, masks=masks)


def _render_pixels(spec: SceneSpec, templates, by_class) -> ImageRGBD:
    """Raster path: a checkerboard blob per part (a strong corner at its
    center) over a plain background, plus a millimeter-faithful depth map."""
    intensity = np.full((spec.height, spec.width), 0.5)
    depth = np.full((spec.height, spec.width), 4.0)
    for placement in spec.placements:
        template = by_class[placement.class_id]
        x0, y0, x1, y1 = _placement_box(template, placement)
        depth[int(np.floor(y0)): int(np.ceil(y1)),
              int(np.floor(x0)): int(np.ceil(x1))] = placement.depth
        cx, cy = placement.center
        for part in template.parts:
            px = int(np.rint(cx + part.dx * placement.scale))
            py = int(np.rint(cy + part.dy * placement.scale))
            r = max(2, int(np.rint(2 * part.scale * placement.scale)))
            # deterministic contrast per prototype so a part looks the same
            # in every scene
            lo = 0.1 + 0.2 * (abs(float(part.descriptor[0])) % 0.2)
            hi = 0.9 - 0.2 * (abs(float(part.descriptor[1])) % 0.2)
            ya, yb = max(0, py - r), min(spec.height, py + r)
            xa, xb = max(0, px - r), min(spec.width, px + r)
            for qy in range(ya, yb):
                for qx in range(xa, xb):
                    quad = (qy >= py) ^ (qx >= px)
                    intensity[qy, qx] = hi if quad else lo
    return ImageRGBD(intensity=intensity, depth=depth)


# ---------------------------------------------------------------------------
# spec and template files (human-editable JSON)


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "width": spec.width,
        "height": spec.height,
        "placements": [
            {"class": p.class_id, "center": list(p.center),
             "scale": p.scale, "depth": p.depth}
            for p in spec.placements
        ],
        "clutter": {"count": spec.clutter_count, "noise": spec.clutter_noise},
        "depth_jitter": spec.depth_jitter,
        "scale_jitter": spec.scale_jitter,
        "descriptor_jitter": spec.descriptor_jitter,
        "seed": spec.seed,
    }


def scene_spec_from_dict(data: dict) -> SceneSpec:
    clutter = data.get("clutter", {})
    return SceneSpec(
        width=int(data["width"]),
        height=int(data["height"]),
        placements=tuple(
            Placement(int(p["class"]), tuple(p["center"]),
                      float(p.get("scale", 1.0)), float(p.get("depth", 1.5)))
            for p in data.get("placements", [])
        ),
        clutter_count=int(clutter.get("count", 0)),
        clutter_noise=float(clutter.get("noise", 0.5)),
        depth_jitter=float(data.get("depth_jitter", 0.02)),
        scale_jitter=float(data.get("scale_jitter", 0.0)),
        descriptor_jitter=float(data.get("descriptor_jitter", 0.0)),
        seed=int(data.get("seed", 0)),
    )


def save_scene_spec(spec: SceneSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene_spec(path) -> SceneSpec:
    with open(path, encoding="utf-8") as fh:
        return scene_spec_from_dict(json.load(fh))


def save_templates(templates: list[ObjectTemplate], path) -> None:
    data = [
        {
            "class": t.class_id,
            "width": t.width,
            "height": t.height,
            "parts": [
                {"descriptor": [repr(float(v)) for v in p.descriptor],
                 "dx": p.dx, "dy": p.dy, "scale": p.scale,
                 "mask": p.mask_patch.astype(int).tolist()}
                for p in t.parts
            ],
        }
        for t in templates
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True)
        fh.write("\n")


def load_templates(path) -> list[ObjectTemplate]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    templates = []
    for t in data:
        parts = tuple(
            TemplatePart(
                descriptor=np.array([float(v) for v in p["descriptor"]]),
                dx=float(p["dx"]), dy=float(p["dy"]), scale=float(p["scale"]),
                mask_patch=np.array(p["mask"], dtype=np.uint8))
            for p in t["parts"]
        )
        templates.append(ObjectTemplate(class_id=int(t["class"]), parts=parts,
                                        width=float(t["width"]),
                                        height=float(t["height"])))
    return templates
