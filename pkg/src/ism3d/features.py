"""Interest points, descriptors, depth attachment, and feature/image file I/O.

The extractor is a self-contained multi-scale Harris detector with an upright
gradient-orientation-histogram descriptor. It is deliberately simple: the rest
of the pipeline only assumes scale-covariant interest points with unit-norm
descriptors, and externally extracted features can be substituted through the
feature-file ingestion path (`read_features`).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage


class FeatureFileError(ValueError):
    """Malformed feature file. `line` is the 1-based offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class ImageRGBD:
    """A luminance image with an optional registered depth map.

    intensity: (H, W) float array, values in [0, 1].
    depth:     (H, W) float array in meters, NaN where the sensor reported
               no return; None if no depth map is available.
    """

    intensity: np.ndarray
    depth: np.ndarray | None = None

    def __post_init__(self):
        inten = np.asarray(self.intensity, dtype=np.float64)
        if inten.ndim != 2 or inten.size == 0:
            raise ValueError("intensity must be a non-empty 2-d array")
        if inten.min() < 0.0 or inten.max() > 1.0:
            raise ValueError("intensity values must lie in [0, 1]")
        object.__setattr__(self, "intensity", inten)
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float64)
            if d.shape != inten.shape:
                raise ValueError(
                    f"depth shape {d.shape} != intensity shape {inten.shape}")
            valid = np.isfinite(d)
            if np.any(d[valid] <= 0.0):
                raise ValueError("valid depths must be > 0")
            object.__setattr__(self, "depth", d)

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


@dataclass(frozen=True)
class Feature:
    """One interest point: position (x, y) in pixels, scale, unit descriptor,
    and an optional depth in meters (None when unknown)."""

    x: float
    y: float
    scale: float
    descriptor: np.ndarray
    depth: float | None = None


class FeatureSet:
    """A column-wise batch of features.

    positions:   (N, 2) float64, columns x, y
    scales:      (N,)   float64, > 0
    depths:      (N,)   float64 meters, NaN where unknown
    descriptors: (N, D) float64, unit-norm rows
    """

    def __init__(self, positions, scales, depths, descriptors):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(-1)
        self.depths = np.asarray(depths, dtype=np.float64).reshape(-1)
        self.descriptors = np.asarray(descriptors, dtype=np.float64)
        n = len(self.positions)
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(n, -1) if n else \
                self.descriptors.reshape(0, 0)
        if not (len(self.scales) == len(self.depths) == len(self.descriptors) == n):
            raise ValueError("feature arrays disagree on length")
        if n and np.any(self.scales <= 0):
            raise ValueError("feature scales must be > 0")

    @classmethod
    def empty(cls, dim: int) -> "FeatureSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, dim)))

    @classmethod
    def from_features(cls, features: list[Feature]) -> "FeatureSet":
        if not features:
            return cls.empty(0)
        pos = [(f.x, f.y) for f in features]
        depths = [np.nan if f.depth is None else f.depth for f in features]
        desc = np.stack([np.asarray(f.descriptor, dtype=np.float64) for f in features])
        return cls(pos, [f.scale for f in features], depths, desc)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, i: int) -> Feature:
        d = self.depths[i]
        return Feature(
            x=float(self.positions[i, 0]),
            y=float(self.positions[i, 1]),
            scale=float(self.scales[i]),
            descriptor=self.descriptors[i],
            depth=None if np.isnan(d) else float(d),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.positions.shape == other.positions.shape
            and self.descriptors.shape == other.descriptors.shape
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.scales, other.scales)
            and np.array_equal(self.depths, other.depths, equal_nan=True)
            and np.array_equal(self.descriptors, other.descriptors)
        )

    def sorted_by_position(self) -> "FeatureSet":
        """Canonical (y, x, scale) ordering used for reproducible output."""
        order = np.lexsort((self.scales, self.positions[:, 0], self.positions[:, 1]))
        return self.take(order)

    def take(self, indices) -> "FeatureSet":
        idx = np.asarray(indices, dtype=np.intp)
        return FeatureSet(
            self.positions[idx], self.scales[idx],
            self.depths[idx], self.descriptors[idx],
        )


@dataclass(frozen=True)
class ExtractionParams:
    """Tunables for the built-in detector/descriptor.

    The descriptor is a grid_cells x grid_cells spatial grid of
    orientation_bins-bin gradient histograms over a square support window of
    side support_factor * scale, so the default dimensionality is
    4 * 4 * 8 = 128.
    """

    n_scales: int = 4
    base_scale: float = 1.5
    scale_step: float = 1.5
    harris_k: float = 0.04
    rel_threshold: float = 0.01
    nms_radius: int = 1
    grid_cells: int = 4
    orientation_bins: int = 8
    support_factor: float = 16.0
    max_features: int = 2000
    depth_window: int = 3

    @property
    def descriptor_dim(self) -> int:
        return self.grid_cells * self.grid_cells * self.orientation_bins


def extract_features(image: ImageRGBD, params: ExtractionParams | None = None) -> FeatureSet:
    """Detect multi-scale Harris corners and describe them.

    Deterministic: the result depends only on the pixel values. Features are
    returned sorted by (y, x, scale). An all-constant image yields an empty
    set. Depths are not filled in here; see `attach_depth`.
    """
    params = params or ExtractionParams()
    image_arr = image.intensity
    responses = []
    gradients = []
    sigmas = []
    for k in range(params.n_scales):
        sigma = params.base_scale * params.scale_step ** k
        smoothed = ndimage.gaussian_filter(image_arr, sigma, mode="reflect")
        gy, gx = np.gradient(smoothed)
        sxx = ndimage.gaussian_filter(gx * gx, 1.5 * sigma, mode="reflect")
        syy = ndimage.gaussian_filter(gy * gy, 1.5 * sigma, mode="reflect")
        sxy = ndimage.gaussian_filter(gx * gy, 1.5 * sigma, mode="reflect")
        det = sxx * syy - sxy * sxy
        trace = sxx + syy
        # sigma^4 normalization keeps responses comparable across scales
        responses.append((det - params.harris_k * trace * trace) * sigma ** 4)
        gradients.append((gx, gy))
        sigmas.append(sigma)

    global_max = max(float(r.max()) for r in responses)
    if global_max <= 1e-12:
        return FeatureSet.empty(params.descriptor_dim)
    threshold = params.rel_threshold * global_max

    rows = []
    size = 2 * params.nms_radius + 1
    for level, resp in enumerate(responses):
        local_max = resp == ndimage.maximum_filter(resp, size=size, mode="constant", cval=-np.inf)
        ys, xs = np.nonzero(local_max & (resp > threshold))
        for y, x in zip(ys, xs):
            rows.append((float(x), float(y), sigmas[level], level, float(resp[y, x])))
    if not rows:
        return FeatureSet.empty(params.descriptor_dim)

    if len(rows) > params.max_features:
        rows.sort(key=lambda r: (-r[4], r[1], r[0], r[2]))
        rows = rows[: params.max_features]
    rows.sort(key=lambda r: (r[1], r[0], r[2]))

    positions, scales, descriptors = [], [], []
    for x, y, sigma, level, _ in rows:
        desc = _describe(gradients[level], x, y, sigma, params)
        if desc is None:
            continue
        positions.append((x, y))
        scales.append(sigma)
        descriptors.append(desc)
    if not positions:
        return FeatureSet.empty(params.descriptor_dim)
    depths = np.full(len(positions), np.nan)
    return FeatureSet(positions, scales, depths, np.stack(descriptors))


def _describe(grads, x, y, scale, params: ExtractionParams):
    """Gradient-orientation histogram over the feature's support window.

    Returns a unit-norm vector, or None when the window has no gradient
    energy (the feature is dropped)."""
    gx, gy = grads
    h, w = gx.shape
    half = params.support_factor * scale / 2.0
    y0 = max(0, int(np.floor(y - half)))
    y1 = min(h, int(np.ceil(y + half)) + 1)
    x0 = max(0, int(np.floor(x - half)))
    x1 = min(w, int(np.ceil(x + half)) + 1)
    if y1 <= y0 or x1 <= x0:
        return None
    wy, wx = np.mgrid[y0:y1, x0:x1]
    sub_gx = gx[y0:y1, x0:x1]
    sub_gy = gy[y0:y1, x0:x1]
    mag = np.hypot(sub_gx, sub_gy)

    # spatial cell and orientation bin per pixel, hard assignment
    g = params.grid_cells
    cell_x = np.clip(((wx - (x - half)) / (2 * half) * g).astype(int), 0, g - 1)
    cell_y = np.clip(((wy - (y - half)) / (2 * half) * g).astype(int), 0, g - 1)
    theta = np.arctan2(sub_gy, sub_gx)
    nbins = params.orientation_bins
    ori = np.clip(((theta + np.pi) / (2 * np.pi) * nbins).astype(int), 0, nbins - 1)

    flat_bin = (cell_y * g + cell_x) * nbins + ori
    hist = np.bincount(flat_bin.ravel(), weights=mag.ravel(),
                       minlength=params.descriptor_dim)
    norm = np.linalg.norm(hist)
    if norm < 1e-12:
        return None
    return hist / norm


def attach_depth(features: FeatureSet, depth: np.ndarray,
                 window: int = 3) -> FeatureSet:
    """Assign each feature the median valid depth in a window x window
    neighborhood of its rounded position; NaN where no valid depth exists.

    Positions, scales and descriptors are passed through untouched."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    r = window // 2
    out = np.full(len(features), np.nan)
    for i in range(len(features)):
        cx = int(np.rint(features.positions[i, 0]))
        cy = int(np.rint(features.positions[i, 1]))
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        patch = depth[max(0, cy - r): cy + r + 1, max(0, cx - r): cx + r + 1]
        valid = patch[np.isfinite(patch) & (patch > 0)]
        if valid.size:
            out[i] = float(np.median(valid))
    return FeatureSet(features.positions, features.scales, out, features.descriptors)


# ---------------------------------------------------------------------------
# feature files
#
# UTF-8 text; header "ismfeat v1 dim=<D>"; one feature per line:
#   x y scale depth d0 d1 ... d{D-1}
# depth = -1 means absent. Floats are written with repr so the round trip
# is lossless.

_HEADER_RE = re.compile(r"^ismfeat v1 dim=(\d+)$")


def write_features(features: FeatureSet, path) -> None:
    lines = [f"ismfeat v1 dim={features.descriptor_dim}"]
    for i in range(len(features)):
        d = features.depths[i]
        depth_s = repr(-1.0) if np.isnan(d) else repr(float(d))
        fields = [
            repr(float(features.positions[i, 0])),
            repr(float(features.positions[i, 1])),
            repr(float(features.scales[i])),
            depth_s,
        ]
        fields.extend(repr(float(v)) for v in features.descriptors[i])
        lines.append(" ".join(fields))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_features(path) -> FeatureSet:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        m = _HEADER_RE.match(header)
        if not m:
            raise FeatureFileError(f"bad header {header!r}", line=1)
        dim = int(m.group(1))
        positions, scales, depths, descriptors = [], [], [], []
        for lineno, raw in enumerate(fh, start=2):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if len(parts) != 4 + dim:
                raise FeatureFileError(
                    f"expected {4 + dim} fields, got {len(parts)}", line=lineno)
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise FeatureFileError(str(exc), line=lineno) from None
            x, y, scale, depth = values[:4]
            if scale <= 0:
                raise FeatureFileError(f"scale must be > 0, got {scale}", line=lineno)
            if depth != -1.0 and depth <= 0:
                raise FeatureFileError(
                    f"depth must be > 0 or -1 for absent, got {depth}", line=lineno)
            desc = np.asarray(values[4:])
            norm = np.linalg.norm(desc)
            if norm < 1e-12:
                raise FeatureFileError("descriptor has zero norm", line=lineno)
            if abs(norm - 1.0) > 1e-6:
                # external extractors may store unnormalized descriptors;
                # matching assumes unit vectors
                desc = desc / norm
            positions.append((x, y))
            scales.append(scale)
            depths.append(np.nan if depth == -1.0 else depth)
            descriptors.append(desc)
    if not positions:
        return FeatureSet.empty(dim)
    return FeatureSet(positions, scales, depths, np.asarray(descriptors))


# ---------------------------------------------------------------------------
# image files
#
# Intensity: 8-bit grayscale. Masks: 8-bit, nonzero = foreground.
# Depth maps: 16-bit single channel, value = millimeters, 0 = invalid
# (Kinect convention).


def read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return arr / 255.0


def write_image(intensity: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(intensity) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def write_mask(mask: np.ndarray, path) -> None:
    arr = (np.asarray(mask) != 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").convert("1").save(path, format="PNG")


def read_depth(path) -> np.ndarray:
    """Load a millimeter depth image as meters with NaN for invalid pixels."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"depth map {path} is not single-channel")
    meters = arr / 1000.0
    meters[arr == 0] = np.nan
    return meters


def write_depth(depth_m: np.ndarray, path) -> None:
    """Save a meter depth map as 16-bit millimeters, NaN/non-positive -> 0."""
    d = np.asarray(depth_m, dtype=np.float64)
    mm = np.where(np.isfinite(d) & (d > 0), np.rint(d * 1000.0), 0.0)
    mm = np.clip(mm, 0, np.iinfo(np.uint16).max).astype(np.uint16)
    Image.fromarray(mm).save(path, format="PNG")
