"""Quantized motion-direction maps that steer blur decomposition.

A guidance map tags every pixel with one of ``num_directions`` direction
labels, or with label 0 for static pixels.  Directions partition the full
circle into equal sectors; label 1 is centered on 315 degrees (right/up in
image coordinates, where x grows rightwards and y grows downwards) and labels
increase clockwise in angle space, i.e. the center of label ``l`` sits at
``315 - (l - 1) * 360 / num_directions`` degrees.  With four directions this
reproduces the usual quadrant numbering I..IV.

Guidance maps come from three routes that all land in the same representation:
quantizing aggregated optical flow, rasterizing a polygon annotation, or
block-matching two adjacent blurry frames of a video.
"""

import dataclasses
import math

import numpy as np
from scipy import ndimage

TWO_PI = 2.0 * math.pi

VALID_DIRECTION_COUNTS = (2, 4, 8, 16)

ANNOTATION_HEADER = "annotation v1"

# Sign table for the four-direction encoding: label l (1..4) maps to the signs
# of (dx, dy) in its quadrant.  Quadrant I is right/up (dx > 0, dy < 0).
_QUADRANT_CODES = {
    1: (1, -1),
    2: (-1, -1),
    3: (-1, 1),
    4: (1, 1),
}


@dataclasses.dataclass
class GuidanceConfig:
    """Quantization settings shared by every guidance producer and consumer."""

    num_directions: int = 4
    static_threshold: float = 1.0

    def __post_init__(self):
        if self.num_directions not in VALID_DIRECTION_COUNTS:
            raise ValueError(
                "num_directions must be one of %s, got %r"
                % (VALID_DIRECTION_COUNTS, self.num_directions)
            )
        if not (self.static_threshold >= 0 and math.isfinite(self.static_threshold)):
            raise ValueError("static_threshold must be finite and non-negative")

    @property
    def bit_width(self):
        """Channels used by the signed binary encoding: log2(num_directions)."""
        return int(round(math.log2(self.num_directions)))

    def to_dict(self):
        return {
            "num_directions": self.num_directions,
            "static_threshold": self.static_threshold,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"num_directions", "static_threshold"}
        if unknown:
            raise ValueError("unknown guidance config keys: %s" % sorted(unknown))
        return cls(**d)


@dataclasses.dataclass
class MotionGuidance:
    """A per-pixel direction label map plus the config it was made under."""

    labels: np.ndarray
    config: GuidanceConfig

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("guidance labels must be a 2-d map, got shape %s" % (labels.shape,))
        if labels.size and (labels.min() < 0 or labels.max() > self.config.num_directions):
            raise ValueError(
                "guidance labels out of range [0, %d]" % self.config.num_directions
            )
        self.labels = labels.astype(np.uint8, copy=False)

    @property
    def shape(self):
        return self.labels.shape

    def copy(self):
        return MotionGuidance(self.labels.copy(), self.config)


@dataclasses.dataclass
class AnnotationRegion:
    """One labelled polygon, vertices as (x, y) in pixel coordinates."""

    label: int
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError("region vertices must be an (n, 2) array of (x, y)")
        self.vertices = v


@dataclasses.dataclass
class AnnotationOverlay:
    """A canvas-sized set of labelled polygons, later regions painting over earlier ones."""

    height: int
    width: int
    regions: list

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("canvas size must be positive")


# ---------------------------------------------------------------------------
# flow aggregation and quantization


def aggregate_flow(flows):
    """Elementwise sum of per-step flow fields into one aggregated field.

    Accepts a sequence of (H, W, 2) arrays or of objects carrying a ``.flow``
    attribute.  The sum is pixel-anchored: each output vector adds the step
    vectors observed at that pixel position, which matches the per-step
    fields' own anchoring and is what quantization consumes.
    """
    arrays = [np.asarray(getattr(f, "flow", f), dtype=np.float64) for f in flows]
    if not arrays:
        raise ValueError("aggregate_flow needs at least one flow field")
    shape = arrays[0].shape
    if len(shape) != 3 or shape[2] != 2:
        raise ValueError("flow fields must have shape (H, W, 2), got %s" % (shape,))
    total = np.zeros(shape, dtype=np.float64)
    for a in arrays:
        if a.shape != shape:
            raise ValueError("flow fields disagree in shape: %s vs %s" % (a.shape, shape))
        total += a
    return total.astype(np.float32)


def _labels_from_vectors(dx, dy, num_directions):
    """Sector label (1..K) for each direction vector; caller handles static pixels.

    A vector on the shared boundary of two sectors gets the sector on its
    counter-clockwise side, i.e. the boundary angle belongs to the sector it
    opens.  Computed in radians; the sector offset for K=4 is exactly 2*pi so
    axis-aligned vectors land deterministically.
    """
    k = num_directions
    theta = np.mod(np.arctan2(dy, dx), TWO_PI)
    offset = TWO_PI * (7.0 / 8.0 + 1.0 / (2.0 * k))
    v = np.mod(theta - offset, TWO_PI)
    idx = np.floor(v * (k / TWO_PI)).astype(np.int64) % k
    return (k - idx).astype(np.uint8)


def quantize(flow, config):
    """Quantize an aggregated flow field into a MotionGuidance map.

    Pixels whose aggregated magnitude is below ``static_threshold`` become
    label 0; the rest get the sector label of their direction.
    """
    arr = np.asarray(getattr(flow, "flow", flow), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError("flow must have shape (H, W, 2), got %s" % (arr.shape,))
    if not np.all(np.isfinite(arr)):
        raise ValueError("flow contains non-finite values")
    dx = arr[..., 0]
    dy = arr[..., 1]
    labels = _labels_from_vectors(dx, dy, config.num_directions)
    static = np.hypot(dx, dy) < config.static_threshold
    labels = np.where(static, 0, labels).astype(np.uint8)
    return MotionGuidance(labels, config)


# ---------------------------------------------------------------------------
# signed binary encoding


def _encoding_table(num_directions):
    """(K+1, bit_width) table of {-1, 0, +1} codes, row index = label.

    Row 0 (static) is all zeros.  Codes are antipodal: the label pointing
    opposite to l carries the negated code of l, so negating a flow field
    negates its encoded guidance.  For four directions the code is literally
    (sign dx, sign dy) of the sector center.
    """
    k = num_directions
    b = int(round(math.log2(k)))
    table = np.zeros((k + 1, b), dtype=np.float32)
    if k == 2:
        table[1, 0] = 1.0
        table[2, 0] = -1.0
    elif k == 4:
        for label, code in _QUADRANT_CODES.items():
            table[label] = code
    else:
        half = k // 2
        for label in range(1, half + 1):
            bits = [(label - 1) >> (b - 2 - i) & 1 for i in range(b - 1)]
            table[label] = [1.0] + [1.0 if bit else -1.0 for bit in bits]
            table[label + half] = -table[label]
    return table


def encode_guidance(guidance):
    """Map labels to an (H, W, bit_width) float field of {-1, 0, +1} channels."""
    table = _encoding_table(guidance.config.num_directions)
    return table[guidance.labels]


def decode_guidance(channels, config):
    """Exact inverse of encode_guidance; unknown code vectors are rejected."""
    arr = np.asarray(channels)
    b = config.bit_width
    if arr.ndim != 3 or arr.shape[2] != b:
        raise ValueError("encoded guidance must have shape (H, W, %d), got %s" % (b, arr.shape))
    table = _encoding_table(config.num_directions)
    # Key each {-1,0,+1} vector by its base-3 digits so lookup is exact.
    powers = 3 ** np.arange(b)
    keys = ((arr.astype(np.int64) + 1) * powers).sum(axis=2)
    table_keys = ((table.astype(np.int64) + 1) * powers).sum(axis=1)
    lookup = np.full(3 ** b, -1, dtype=np.int64)
    lookup[table_keys] = np.arange(config.num_directions + 1)
    if np.any((arr != -1) & (arr != 0) & (arr != 1)):
        raise ValueError("encoded guidance contains values outside {-1, 0, +1}")
    labels = lookup[keys]
    if labels.min() < 0:
        raise ValueError("encoded guidance contains code vectors not in the table")
    return MotionGuidance(labels.astype(np.uint8), config)


# ---------------------------------------------------------------------------
# label geometry: flips and inversion
#
# Sector centers live on an integer lattice when angles are measured in units
# of 360 / (8 K) degrees: center(l) = (7K - 8(l-1)) mod 8K.  Mirrors and the
# 180-degree inversion act exactly on that lattice, so label remap tables are
# computed without any floating point.


def _center_units(label, k):
    return (7 * k - 8 * (label - 1)) % (8 * k)


def _label_of_units(units, k):
    v = (units - (7 * k + 4)) % (8 * k)
    return k - v // 8


def _remap_table(k, transform):
    table = np.zeros(k + 1, dtype=np.uint8)
    for label in range(1, k + 1):
        units = transform(_center_units(label, k)) % (8 * k)
        table[label] = _label_of_units(units, k)
    return table


def invert_labels(guidance):
    """Reverse every direction by 180 degrees; static stays static."""
    k = guidance.config.num_directions
    table = _remap_table(k, lambda c: c + 4 * k)
    return MotionGuidance(table[guidance.labels], guidance.config)


def flip_labels(guidance, axis):
    """Mirror a guidance map spatially and remap labels to match.

    ``axis`` is "horizontal" (mirror left-right, x negates) or "vertical"
    (mirror top-bottom, y negates).  Two-direction configs are rejected:
    their single sector boundary is not mirror-symmetric, so no exact label
    remap exists.
    """
    k = guidance.config.num_directions
    if k == 2:
        raise ValueError("flips are undefined for 2-direction guidance; sector boundaries are not mirror-symmetric")
    if axis == "horizontal":
        table = _remap_table(k, lambda c: 4 * k - c)
        labels = guidance.labels[:, ::-1]
    elif axis == "vertical":
        table = _remap_table(k, lambda c: -c)
        labels = guidance.labels[::-1, :]
    else:
        raise ValueError("axis must be 'horizontal' or 'vertical', got %r" % (axis,))
    return MotionGuidance(table[labels], guidance.config)


def sector_center_degrees(config):
    """Center angle of each label 1..K in degrees, for legends and docs."""
    k = config.num_directions
    return np.array([(315.0 - (l - 1) * 360.0 / k) % 360.0 for l in range(1, k + 1)])


# ---------------------------------------------------------------------------
# polygon annotations


def serialize_annotation(overlay):
    """Write an overlay as the line-based text record understood by the UI."""
    lines = [ANNOTATION_HEADER, "canvas %d %d" % (overlay.width, overlay.height)]
    for region in overlay.regions:
        coords = " ".join(repr(float(c)) for xy in region.vertices for c in xy)
        lines.append("region %d %s" % (region.label, coords))
    return "\n".join(lines) + "\n"


def parse_annotation(text):
    """Parse the text record back into an AnnotationOverlay.

    Grammar, one statement per line (blank lines ignored):
        annotation v1
        canvas <width> <height>
        region <label> <x0> <y0> <x1> <y1> ...
    """
    lines = text.splitlines()
    stripped = [(i + 1, line.strip()) for i, line in enumerate(lines) if line.strip()]
    if not stripped or stripped[0][1] != ANNOTATION_HEADER:
        raise ValueError("annotation record must start with %r" % ANNOTATION_HEADER)
    if len(stripped) < 2 or not stripped[1][1].startswith("canvas "):
        raise ValueError("annotation record missing canvas line")
    canvas_parts = stripped[1][1].split()
    if len(canvas_parts) != 3:
        raise ValueError("line %d: canvas line must be 'canvas <width> <height>'" % stripped[1][0])
    try:
        width, height = int(canvas_parts[1]), int(canvas_parts[2])
    except ValueError:
        raise ValueError("line %d: canvas dimensions must be integers" % stripped[1][0])
    regions = []
    for lineno, line in stripped[2:]:
        parts = line.split()
        if parts[0] != "region":
            raise ValueError("line %d: expected a region line, got %r" % (lineno, parts[0]))
        if len(parts) < 2:
            raise ValueError("line %d: region line missing label" % lineno)
        try:
            label = int(parts[1])
            coords = [float(p) for p in parts[2:]]
        except ValueError:
            raise ValueError("line %d: malformed region numbers" % lineno)
        if len(coords) % 2 != 0:
            raise ValueError("line %d: region has an odd coordinate count" % lineno)
        if len(coords) < 6:
            raise ValueError("line %d: region needs at least 3 vertices" % lineno)
        vertices = np.array(coords, dtype=np.float64).reshape(-1, 2)
        regions.append(AnnotationRegion(label, vertices))
    return AnnotationOverlay(height=height, width=width, regions=regions)


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _segments_properly_cross(p0, p1, q0, q1):
    d1 = _orient(*p0, *p1, *q0)
    d2 = _orient(*p0, *p1, *q1)
    d3 = _orient(*q0, *q1, *p0)
    d4 = _orient(*q0, *q1, *p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0


def _polygon_is_simple(vertices):
    n = len(vertices)
    edges = [(tuple(vertices[i]), tuple(vertices[(i + 1) % n])) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            # Adjacent edges share a vertex; only proper interior crossings count.
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_properly_cross(*edges[i], *edges[j]):
                return False
    return True


def _fill_polygon(vertices, height, width):
    """Even-odd fill sampling pixel centers (x + 0.5, y + 0.5).

    A horizontal scanline at a pixel-center height collects crossings with
    the polygon edges under the half-open rule min(y) <= yc < max(y), which
    handles vertices on scanlines without double counting.
    """
    mask = np.zeros((height, width), dtype=bool)
    n = len(vertices)
    xs = vertices[:, 0]
    ys = vertices[:, 1]
    for row in range(height):
        yc = row + 0.5
        crossings = []
        for i in range(n):
            x0, y0 = xs[i], ys[i]
            x1, y1 = xs[(i + 1) % n], ys[(i + 1) % n]
            if y0 == y1:
                continue
            if min(y0, y1) <= yc < max(y0, y1):
                t = (yc - y0) / (y1 - y0)
                crossings.append(x0 + t * (x1 - x0))
        crossings.sort()
        for a, b in zip(crossings[::2], crossings[1::2]):
            lo = max(0, math.ceil(a - 0.5))
            hi = min(width, math.ceil(b - 0.5))
            if hi > lo:
                mask[row, lo:hi] = True
    return mask


def rasterize_annotation(overlay, config):
    """Rasterize labelled polygons into a MotionGuidance map.

    Regions are painted in order, later ones over earlier ones.  Every
    polygon must be simple, lie within the canvas, and carry a label valid
    under ``config`` (0 is allowed and paints static).
    """
    labels = np.zeros((overlay.height, overlay.width), dtype=np.uint8)
    for idx, region in enumerate(overlay.regions):
        v = region.vertices
        if len(v) < 3:
            raise ValueError("region %d: polygon needs at least 3 vertices" % idx)
        if not np.all(np.isfinite(v)):
            raise ValueError("region %d: non-finite vertex coordinates" % idx)
        if not (0 <= region.label <= config.num_directions):
            raise ValueError(
                "region %d: label %d invalid for %d directions"
                % (idx, region.label, config.num_directions)
            )
        if v[:, 0].min() < 0 or v[:, 0].max() > overlay.width or v[:, 1].min() < 0 or v[:, 1].max() > overlay.height:
            raise ValueError("region %d: vertices leave the canvas" % idx)
        if not _polygon_is_simple(v):
            raise ValueError("region %d: polygon is self-intersecting" % idx)
        mask = _fill_polygon(v, overlay.height, overlay.width)
        labels[mask] = region.label
    return MotionGuidance(labels, config)


# ---------------------------------------------------------------------------
# guidance from adjacent video frames


def estimate_flow_block_matching(prev_frame, next_frame, patch_size=16, search_radius=24):
    """Blockwise translation estimate between two frames by SAD matching.

    The image is tiled into patch_size blocks (edge blocks may be smaller);
    each block scans integer displacements nearest-first (sorted by squared
    length, then dy, then dx) and keeps the first minimum, so ties resolve
    deterministically and a textureless block reports zero motion.  Returns
    an (H, W, 2) float32 field constant within each block.
    """
    a = np.asarray(prev_frame, dtype=np.float64)
    b = np.asarray(next_frame, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("frames disagree in shape: %s vs %s" % (a.shape, b.shape))
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    h, w = a.shape
    span = range(-search_radius, search_radius + 1)
    candidates = sorted(((dy * dy + dx * dx, dy, dx) for dy in span for dx in span))
    flow = np.zeros((h, w, 2), dtype=np.float32)
    for y0 in range(0, h, patch_size):
        y1 = min(y0 + patch_size, h)
        for x0 in range(0, w, patch_size):
            x1 = min(x0 + patch_size, w)
            block = a[y0:y1, x0:x1]
            best = math.inf
            best_d = (0, 0)
            for _, dy, dx in candidates:
                sy0, sy1 = y0 + dy, y1 + dy
                sx0, sx1 = x0 + dx, x1 + dx
                if sy0 < 0 or sy1 > h or sx0 < 0 or sx1 > w:
                    continue
                sad = np.abs(block - b[sy0:sy1, sx0:sx1]).sum()
                if sad < best:
                    best = sad
                    best_d = (dx, dy)
            flow[y0:y1, x0:x1, 0] = best_d[0]
            flow[y0:y1, x0:x1, 1] = best_d[1]
    return flow


def guidance_from_adjacent(prev_blurry, next_blurry, config, estimator=None):
    """Produce guidance for ``prev_blurry`` from the motion towards the next frame.

    The estimated inter-frame displacement approximates the within-exposure
    motion up to scale, which quantization does not care about as long as
    moving content clears the static threshold.
    """
    if estimator is None:
        estimator = estimate_flow_block_matching
    flow = estimator(prev_blurry, next_blurry)
    return quantize(flow, config)


# ---------------------------------------------------------------------------
# guidance perturbations


def perturb_guidance(guidance, mode, radius):
    """Grow or shrink labelled regions by a Chebyshev radius.

    ``dilate`` assigns each static pixel within distance ``radius`` of a
    labelled region the label of the nearest region (chessboard metric, ties
    to the smaller label).  ``erode`` keeps a pixel's label only if the full
    (2r+1) square around it carries that label, with the frame border counted
    as static.  Radius 0 returns an identical copy.
    """
    if mode not in ("dilate", "erode"):
        raise ValueError("mode must be 'dilate' or 'erode', got %r" % (mode,))
    if not isinstance(radius, (int, np.integer)) or radius < 0:
        raise ValueError("radius must be a non-negative integer")
    labels = guidance.labels
    if radius == 0:
        return guidance.copy()
    present = sorted(int(l) for l in np.unique(labels) if l > 0)
    if not present:
        return guidance.copy()
    if mode == "dilate":
        dists = np.stack(
            [ndimage.distance_transform_cdt(labels != l, metric="chessboard") for l in present]
        )
        nearest = np.argmin(dists, axis=0)
        min_dist = np.min(dists, axis=0)
        out = labels.copy()
        grow = (labels == 0) & (min_dist <= radius)
        out[grow] = np.array(present, dtype=np.uint8)[nearest[grow]]
    else:
        structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
        out = np.zeros_like(labels)
        for l in present:
            keep = ndimage.binary_erosion(labels == l, structure=structure, border_value=0)
            out[keep] = l
    return MotionGuidance(out, guidance.config)
