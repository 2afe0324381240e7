"""Synthetic scenes with exact ground truth: frames, flows, blur.

Scenes are stacks of textured sprites translating at constant velocity over a
static textured background.  Because sprite positions are rounded to integer
pixels at every sub-frame, the per-step optical flow is integer-valued and
exactly known, which is what the exact linear-system decomposition and the
guidance quantizer are verified against.

Conventions used throughout the package:
  * images are float32 arrays (H, W, 3) with values in [0, 1], y down, x right;
  * flow vectors are stored as (dx, dy) in the last axis of (H, W, 2) arrays;
  * blur forms in linear intensity space: decode gamma, average, re-encode.
"""

import dataclasses
import math

import numpy as np

from . import guidance as guidance_mod

DEFAULT_GAMMA = 2.2
DEFAULT_SUBFRAMES = 128


class SceneGenerationError(ValueError):
    """A scene config cannot be realized, e.g. a sprite leaves the frame."""


# ---------------------------------------------------------------------------
# core types


@dataclasses.dataclass
class FlowField:
    """Dense displacement field, vectors as (dx, dy) per pixel."""

    flow: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.flow, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError("flow must have shape (H, W, 2), got %s" % (arr.shape,))
        if not np.all(np.isfinite(arr)):
            raise ValueError("flow contains non-finite values")
        self.flow = arr

    @property
    def shape(self):
        return self.flow.shape[:2]

    def negated(self):
        return FlowField(-self.flow)


@dataclasses.dataclass
class SharpSequence:
    """An ordered stack of sharp frames, shape (T, H, W, 3), values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.frames)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValueError("frames must have shape (T, H, W, 3), got %s" % (arr.shape,))
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 + 1e-6):
            raise ValueError("frame values must lie in [0, 1]")
        self.frames = np.clip(arr, 0.0, 1.0)

    def __len__(self):
        return self.frames.shape[0]

    def reversed(self):
        return SharpSequence(self.frames[::-1].copy())


@dataclasses.dataclass
class BlurryImage:
    """A blurry observation plus the formation parameters that made it."""

    image: np.ndarray
    gamma: float = DEFAULT_GAMMA
    source_count: int = DEFAULT_SUBFRAMES

    def __post_init__(self):
        # kept at float64: the exact solver forms its right-hand side from
        # this image, and float32 quantization would dominate its residual
        arr = np.asarray(self.image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError("blurry image must have shape (H, W, 3), got %s" % (arr.shape,))
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 + 1e-6):
            raise ValueError("blurry image values must lie in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.source_count < 1:
            raise ValueError("source_count must be at least 1")
        self.image = np.clip(arr, 0.0, 1.0)

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclasses.dataclass
class TrainingTriplet:
    """One supervised example: blurry input, guidance, sharp targets, true flows."""

    blurry: BlurryImage
    guidance: guidance_mod.MotionGuidance
    sharp: SharpSequence
    flows: list

    def __post_init__(self):
        hw = self.blurry.shape
        if self.guidance.shape != hw:
            raise ValueError("guidance shape %s != image shape %s" % (self.guidance.shape, hw))
        if self.sharp.frames.shape[1:3] != hw:
            raise ValueError("sharp frame shape disagrees with blurry image")
        if len(self.flows) != len(self.sharp) - 1:
            raise ValueError(
                "expected %d flow fields for %d frames, got %d"
                % (len(self.sharp) - 1, len(self.sharp), len(self.flows))
            )
        for f in self.flows:
            if f.shape != hw:
                raise ValueError("flow field shape disagrees with blurry image")


# ---------------------------------------------------------------------------
# gamma handling and blur formation


def gamma_decode(image, gamma=DEFAULT_GAMMA):
    """Display values to linear intensities: x ** gamma."""
    arr = np.asarray(image)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if arr.size and arr.min() < 0:
        raise ValueError("gamma_decode input must be non-negative")
    return arr ** gamma


def gamma_encode(image, gamma=DEFAULT_GAMMA):
    """Linear intensities back to display values: x ** (1 / gamma)."""
    arr = np.asarray(image)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if arr.size and arr.min() < 0:
        raise ValueError("gamma_encode input must be non-negative")
    return arr ** (1.0 / gamma)


def synthesize_blur(frames, gamma=DEFAULT_GAMMA):
    """Average frames in linear space and re-encode, as a long exposure would.

    Frames are summed palindromically: frame i is first paired with frame
    N-1-i, and the pair sums are accumulated in a fixed order.  Addition of
    two floats is commutative, so reversing the frame order produces the
    bit-identical blurry image, matching the direction ambiguity of real
    blur exactly rather than only approximately.
    """
    seq = frames.frames if isinstance(frames, SharpSequence) else np.asarray(frames)
    if seq.ndim != 4:
        raise ValueError("expected frames of shape (N, H, W, C), got %s" % (seq.shape,))
    n = seq.shape[0]
    if n < 1:
        raise ValueError("need at least one frame")
    linear = gamma_decode(seq.astype(np.float64), gamma)
    total = np.zeros(seq.shape[1:], dtype=np.float64)
    for i in range(n // 2):
        total += linear[i] + linear[n - 1 - i]
    if n % 2 == 1:
        total += linear[n // 2]
    blurred = gamma_encode(total / n, gamma)
    return BlurryImage(blurred, gamma=gamma, source_count=n)


# ---------------------------------------------------------------------------
# textures and sprites


def _texture(rng, height, width, cell=6, amplitude=0.5, base=0.5, fine_mix=0.35):
    """Two-scale random RGB texture with values kept inside [0, 1].

    fine_mix sets the share of per-pixel noise; keep it low for scenes that
    are supposed to be recoverable from their blur.
    """
    ch = max(1, math.ceil(height / cell))
    cw = max(1, math.ceil(width / cell))
    coarse = rng.random((ch, cw, 3))
    up = np.kron(coarse, np.ones((cell, cell, 1)))[:height, :width, :]
    fine = rng.random((height, width, 3))
    mix = (1.0 - fine_mix) * up + fine_mix * fine
    return np.clip(base + amplitude * (mix - 0.5) * 2.0, 0.0, 1.0).astype(np.float32)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclasses.dataclass
class SpriteSpec:
    """A textured patch translating at constant velocity (px per sub-frame)."""

    shape: str
    size: int
    velocity: tuple
    start: tuple = None
    texture_seed: int = 0
    contrast: float = 0.45

    def __post_init__(self):
        if self.shape not in ("square", "disk"):
            raise ValueError("sprite shape must be 'square' or 'disk'")
        if self.size < 1:
            raise ValueError("sprite size must be positive")


@dataclasses.dataclass
class SceneConfig:
    """Everything needed to deterministically regenerate one scene."""

    height: int
    width: int
    sprites: list
    background_seed: int = 0
    background_contrast: float = 0.15
    n_frames: int = DEFAULT_SUBFRAMES
    gamma: float = DEFAULT_GAMMA
    boundary_policy: str = "reject"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("scene dimensions must be positive")
        if self.n_frames < 1:
            raise ValueError("n_frames must be at least 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.boundary_policy not in ("reject", "clip"):
            raise ValueError("boundary_policy must be 'reject' or 'clip'")


@dataclasses.dataclass
class SceneRender:
    """Full rendering record: frames, per-step flows, per-frame ownership maps."""

    frames: np.ndarray
    flows: list
    ownership: np.ndarray
    positions: np.ndarray


def _sprite_mask(spec):
    s = spec.size
    if spec.shape == "square":
        return np.ones((s, s), dtype=bool)
    c = (s - 1) / 2.0
    yy, xx = np.mgrid[0:s, 0:s]
    return (yy - c) ** 2 + (xx - c) ** 2 <= (s / 2.0) ** 2


def render_scene(config, seed=0):
    """Render frames, exact integer flows, and ownership maps for a scene.

    Sprite anchor positions are rounded half-up per axis at every sub-frame;
    the flow at a pixel is the integer step of its topmost owner (background
    owns with zero flow).  Under the 'reject' boundary policy any sprite
    whose box would leave the frame raises SceneGenerationError; 'clip'
    draws the visible intersection instead.
    """
    rng = np.random.default_rng(seed)
    h, w, n = config.height, config.width, config.n_frames
    background = _texture(
        np.random.default_rng(config.background_seed),
        h,
        w,
        cell=8,
        amplitude=config.background_contrast,
    )
    sprite_textures = []
    sprite_masks = []
    starts = []
    for spec in config.sprites:
        tex_rng = np.random.default_rng(spec.texture_seed)
        sprite_textures.append(
            _texture(tex_rng, spec.size, spec.size, cell=3, amplitude=spec.contrast)
        )
        sprite_masks.append(_sprite_mask(spec))
        if spec.start is not None:
            starts.append(np.asarray(spec.start, dtype=np.float64))
        else:
            margin = spec.size + 1
            if h <= 2 * margin or w <= 2 * margin:
                start = np.array([w / 2.0 - spec.size / 2.0, h / 2.0 - spec.size / 2.0])
            else:
                start = np.array(
                    [rng.uniform(margin, w - margin - spec.size), rng.uniform(margin, h - margin - spec.size)]
                )
            starts.append(start)

    # positions[s, t] = integer (x, y) anchor of sprite s at sub-frame t
    positions = np.zeros((len(config.sprites), n, 2), dtype=np.int64)
    for s, spec in enumerate(config.sprites):
        v = np.asarray(spec.velocity, dtype=np.float64)
        for t in range(n):
            positions[s, t] = _round_half_up(starts[s] + t * v)
        if config.boundary_policy == "reject":
            x = positions[s, :, 0]
            y = positions[s, :, 1]
            if x.min() < 0 or y.min() < 0 or (x + spec.size).max() > w or (y + spec.size).max() > h:
                raise SceneGenerationError(
                    "sprite %d leaves the %dx%d frame during the exposure" % (s, h, w)
                )

    frames = np.empty((n, h, w, 3), dtype=np.float32)
    ownership = np.full((n, h, w), -1, dtype=np.int8)
    for t in range(n):
        frame = background.copy()
        own = np.full((h, w), -1, dtype=np.int8)
        for s, spec in enumerate(config.sprites):
            px, py = positions[s, t]
            y0, y1 = max(0, py), min(h, py + spec.size)
            x0, x1 = max(0, px), min(w, px + spec.size)
            if y1 <= y0 or x1 <= x0:
                continue
            my0, mx0 = y0 - py, x0 - px
            sub = sprite_masks[s][my0 : my0 + (y1 - y0), mx0 : mx0 + (x1 - x0)]
            frame[y0:y1, x0:x1][sub] = sprite_textures[s][my0 : my0 + (y1 - y0), mx0 : mx0 + (x1 - x0)][sub]
            own[y0:y1, x0:x1][sub] = s
        frames[t] = frame
        ownership[t] = own

    flows = []
    for t in range(n - 1):
        field = np.zeros((h, w, 2), dtype=np.float32)
        for s in range(len(config.sprites)):
            step = positions[s, t + 1] - positions[s, t]
            owned = ownership[t] == s
            field[owned, 0] = step[0]
            field[owned, 1] = step[1]
        flows.append(FlowField(field))
    return SceneRender(frames=frames, flows=flows, ownership=ownership, positions=positions)


def generate_scene(config, seed=0):
    """Render a scene and return (frames, flows) without the bookkeeping."""
    render = render_scene(config, seed=seed)
    return render.frames, render.flows


# ---------------------------------------------------------------------------
# occlusion-free scenes for the exact solver
#
# Whole-frame cyclic rolls and closed conveyor rings have no occlusion and no
# frame boundary, so every pixel chain survives the full exposure.  Their
# blur-formation systems are circulant; when gcd(T, H) = gcd(T, W) = 1 they
# are provably non-singular, which makes them the reference scenes for
# certifying the exact decomposition.


def generate_roll_scene(height, width, shift, n_frames, seed=0, cell=4,
                        fine_mix=0.35):
    """Whole image translating cyclically by integer (dx, dy) per step.

    Returns (frames, flows) where every flow field is the constant (dx, dy);
    content wraps at the borders, so consumers must treat flows with wrap
    semantics. cell and fine_mix control the texture scale; large cells with
    little per-pixel noise make scenes a learned model can plausibly deblur.
    """
    dx, dy = int(shift[0]), int(shift[1])
    base = _texture(np.random.default_rng(seed), height, width, cell=cell,
                    amplitude=0.45, fine_mix=fine_mix)
    frames = np.stack(
        [np.roll(base, shift=(t * dy, t * dx), axis=(0, 1)) for t in range(n_frames)]
    )
    field = np.zeros((height, width, 2), dtype=np.float32)
    field[..., 0] = dx
    field[..., 1] = dy
    flows = [FlowField(field.copy()) for _ in range(n_frames - 1)]
    return frames, flows


def _ring_coordinates(height, width, inset):
    """Clockwise perimeter pixel coordinates of the rectangle at a given inset."""
    y0, y1 = inset, height - 1 - inset
    x0, x1 = inset, width - 1 - inset
    if y1 <= y0 or x1 <= x0:
        raise ValueError("inset leaves no ring")
    coords = []
    coords += [(y0, x) for x in range(x0, x1)]
    coords += [(y, x1) for y in range(y0, y1)]
    coords += [(y1, x) for x in range(x1, x0, -1)]
    coords += [(y, x0) for y in range(y1, y0, -1)]
    return coords


def generate_ring_scene(height, width, inset, advance, n_frames, seed=0):
    """Texture cycling along a closed rectangular ring over a static background.

    Ring content advances ``advance`` slots per step; off-ring pixels are
    static.  Flows are exact and stay on the ring, so no wrap handling is
    needed by consumers.
    """
    rng = np.random.default_rng(seed)
    coords = _ring_coordinates(height, width, inset)
    length = len(coords)
    advance = int(advance) % length
    ring_values = rng.uniform(0.05, 0.95, size=(length, 3)).astype(np.float32)
    background = _texture(rng, height, width, cell=8, amplitude=0.12)
    ys = np.array([c[0] for c in coords])
    xs = np.array([c[1] for c in coords])
    frames = np.empty((n_frames, height, width, 3), dtype=np.float32)
    for t in range(n_frames):
        frame = background.copy()
        frame[ys, xs] = ring_values[(np.arange(length) - t * advance) % length]
        frames[t] = frame
    field = np.zeros((height, width, 2), dtype=np.float32)
    nxt = (np.arange(length) + advance) % length
    field[ys, xs, 0] = xs[nxt] - xs
    field[ys, xs, 1] = ys[nxt] - ys
    flows = [FlowField(field.copy()) for _ in range(n_frames - 1)]
    return frames, flows


def generate_static_scene(height, width, n_frames, seed=0):
    """A static textured scene; every pixel chain is trivially static."""
    base = _texture(np.random.default_rng(seed), height, width, cell=5, amplitude=0.4)
    frames = np.stack([base] * n_frames)
    flows = [FlowField(np.zeros((height, width, 2), dtype=np.float32)) for _ in range(n_frames - 1)]
    return frames, flows


# ---------------------------------------------------------------------------
# flow composition and sampling


def compose_flows(flows, wrap=False):
    """Chain per-step integer flows into one displacement field.

    Follows each pixel's trajectory: the step at the current (integer)
    position is looked up, accumulated, and the position advances by it.
    This is the Lagrangian composition used by the exact solver, distinct
    from the elementwise aggregate used for guidance.  Without wrap,
    positions are clamped to the frame for lookups once a trajectory exits.
    """
    arrays = [np.asarray(getattr(f, "flow", f)) for f in flows]
    if not arrays:
        raise ValueError("compose_flows needs at least one flow field")
    h, w = arrays[0].shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    pos_x = xx.astype(np.int64)
    pos_y = yy.astype(np.int64)
    total = np.zeros((h, w, 2), dtype=np.float64)
    for arr in arrays:
        step = np.rint(arr).astype(np.int64)
        if wrap:
            look_x = pos_x % w
            look_y = pos_y % h
        else:
            look_x = np.clip(pos_x, 0, w - 1)
            look_y = np.clip(pos_y, 0, h - 1)
        dx = step[look_y, look_x, 0]
        dy = step[look_y, look_x, 1]
        total[..., 0] += dx
        total[..., 1] += dy
        pos_x = pos_x + dx
        pos_y = pos_y + dy
    return FlowField(total.astype(np.float32))


def sample_indices(n_frames, t):
    """Evenly spaced sub-frame indices including both endpoints.

    index(i) = round_half_up(i * (n_frames - 1) / (t - 1)).  128 sub-frames
    sampled at t = 7 gives {0, 21, 42, 64, 85, 106, 127}.
    """
    if t < 2:
        raise ValueError("need at least two samples")
    if n_frames < t:
        raise ValueError("cannot sample %d frames from %d" % (t, n_frames))
    return [int(_round_half_up(i * (n_frames - 1) / (t - 1))) for i in range(t)]


def build_triplet(frames, flows, t, guidance_config, gamma=DEFAULT_GAMMA, wrap=False):
    """Assemble the supervised training example for one rendered scene.

    The blurry image averages all sub-frames; sharp targets are ``t`` evenly
    sampled sub-frames (endpoints included); the stored flows are the
    trajectory compositions between consecutive sampled frames; guidance is
    the quantized elementwise aggregate of those sampled-step flows.
    """
    frames = np.asarray(frames)
    n = frames.shape[0]
    idx = sample_indices(n, t)
    blurry = synthesize_blur(frames, gamma=gamma)
    sharp = SharpSequence(frames[idx])
    sampled_flows = []
    for a, b in zip(idx[:-1], idx[1:]):
        sampled_flows.append(compose_flows(flows[a:b], wrap=wrap))
    agg = guidance_mod.aggregate_flow(sampled_flows)
    g = guidance_mod.quantize(agg, guidance_config)
    return TrainingTriplet(blurry=blurry, guidance=g, sharp=sharp, flows=sampled_flows)


def augment_inverse(triplet):
    """The time-reversed twin of a triplet: same blur, opposite direction.

    Frames reverse, flow k becomes the negation of flow T-2-k, and guidance
    is requantized from the negated aggregate.  The blurry image is shared
    unchanged; this is exactly the directional ambiguity of blur.
    """
    inv_sharp = triplet.sharp.reversed()
    inv_flows = [FlowField(-triplet.flows[i].flow) for i in range(len(triplet.flows) - 1, -1, -1)]
    agg = guidance_mod.aggregate_flow(inv_flows)
    g = guidance_mod.quantize(agg, triplet.guidance.config)
    return TrainingTriplet(blurry=triplet.blurry, guidance=g, sharp=inv_sharp, flows=inv_flows)


def warp_with_flow(next_frame, flow, wrap=False):
    """Gather next-frame values at each pixel's flow target.

    Returns (warped, valid) where valid marks targets inside the frame.  For
    exact scenes warped equals the current frame wherever the moved content
    stays visible, which is the photometric consistency the flows promise.
    """
    arr = np.asarray(next_frame)
    f = np.rint(np.asarray(getattr(flow, "flow", flow))).astype(np.int64)
    h, w = arr.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    tx = xx + f[..., 0]
    ty = yy + f[..., 1]
    if wrap:
        valid = np.ones((h, w), dtype=bool)
        tx %= w
        ty %= h
    else:
        valid = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        tx = np.clip(tx, 0, w - 1)
        ty = np.clip(ty, 0, h - 1)
    return arr[ty, tx], valid


# ---------------------------------------------------------------------------
# randomized scene recipes


def random_scene_config(rng, height=64, width=64, n_sprites=1, n_frames=DEFAULT_SUBFRAMES,
                        speed_range=(0.10, 0.22), sprite_sizes=(14, 22), gamma=DEFAULT_GAMMA):
    """Draw a sprite scene config with motion large enough to blur visibly.

    Velocities are sampled in px per sub-frame; over the whole exposure a
    sprite travels roughly speed * n_frames pixels.  Starts are left for
    render_scene to place, which keeps the full trajectory inside the frame.
    """
    sprites = []
    for _ in range(n_sprites):
        speed = rng.uniform(*speed_range)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        shape = "square" if rng.random() < 0.5 else "disk"
        size = int(rng.integers(sprite_sizes[0], sprite_sizes[1] + 1))
        sprites.append(
            SpriteSpec(
                shape=shape,
                size=size,
                velocity=(speed * math.cos(angle), speed * math.sin(angle)),
                texture_seed=int(rng.integers(0, 2**31)),
                contrast=0.45,
            )
        )
    return SceneConfig(
        height=height,
        width=width,
        sprites=sprites,
        background_seed=int(rng.integers(0, 2**31)),
        n_frames=n_frames,
        gamma=gamma,
    )
