"""Color-jitter shift transforms and the standard augmentation pipeline.

All transforms map float HxWx3 images in [0, 1] to the same range and are
deterministic functions of (input, rng state).

Jitter stages run in a fixed order (brightness, contrast, saturation, hue),
each clamping its output to [0, 1]:

  brightness  out = clamp(f_b * img)
  contrast    out = clamp(m + f_c * (img - m)),  m = scalar mean luma of img
  saturation  out = clamp(y + f_s * (img - y)),  y = per-pixel luma
  hue         rotation of the chromatic (I, Q) plane about the luma axis in
              YIQ space by 2*pi*d, which preserves per-pixel luma up to
              clamping; d is drawn in turns from [-hue, hue]

f_b, f_c, f_s are drawn uniformly from [max(0, 1 - mag), 1 + mag].  Factor
draws happen in that order, one per stage, even at zero magnitude, so the rng
stream does not depend on the configured strengths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import BoundingBox, ContractError, _bilinear_sample, clip_box, extract_patch

# ITU-R BT.601 luma; chroma rows complete the YIQ basis.
_RGB_TO_YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)

CJ_RC = "cj-rc"
CJ_RR = "cj-rr"
CJ_WF = "cj-wf"
SHIFT_KINDS = (CJ_RC, CJ_RR, CJ_WF)


@dataclass(frozen=True)
class ColorJitterParams:
    """Maximum perturbation magnitudes for each jitter stage."""

    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1

    def __post_init__(self) -> None:
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} magnitude must be >= 0")
        if not 0 <= self.hue <= 0.5:
            raise ContractError("hue magnitude must be in [0, 0.5]")


@dataclass(frozen=True)
class ShiftVariant:
    """A shift transform: which color-jitter variant, with its region params.

    rect_area_range / rect_aspect_range configure the CJ-RC rectangle (as a
    fraction of image area and a width/height ratio).  rr_points and
    rr_sigma_frac configure the CJ-RR weight map (impulse count and Gaussian
    width as a fraction of the image side).
    """

    kind: str
    params: ColorJitterParams = field(default_factory=ColorJitterParams)
    rect_area_range: tuple[float, float] = (0.1, 0.5)
    rect_aspect_range: tuple[float, float] = (0.5, 2.0)
    rr_points: int = 3
    rr_sigma_frac: float = 1.0 / 8.0

    def __post_init__(self) -> None:
        if self.kind not in SHIFT_KINDS:
            raise ContractError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        lo, hi = self.rect_area_range
        if not (0 < lo <= hi <= 1):
            raise ContractError(f"bad rect_area_range {self.rect_area_range}")
        lo, hi = self.rect_aspect_range
        if not (0 < lo <= hi):
            raise ContractError(f"bad rect_aspect_range {self.rect_aspect_range}")
        if self.rr_points < 0:
            raise ContractError("rr_points must be >= 0")
        if self.rr_sigma_frac <= 0:
            raise ContractError("rr_sigma_frac must be > 0")


@dataclass(frozen=True)
class JitterFactors:
    """One concrete draw of the four jitter stage parameters."""

    brightness: float
    contrast: float
    saturation: float
    hue_turns: float


def luma(image: np.ndarray) -> np.ndarray:
    """Per-pixel BT.601 luma, shape HxW."""
    return image @ _RGB_TO_YIQ[0]


def draw_jitter_factors(params: ColorJitterParams, rng: np.random.Generator) -> JitterFactors:
    fb = rng.uniform(max(0.0, 1.0 - params.brightness), 1.0 + params.brightness)
    fc = rng.uniform(max(0.0, 1.0 - params.contrast), 1.0 + params.contrast)
    fs = rng.uniform(max(0.0, 1.0 - params.saturation), 1.0 + params.saturation)
    hd = rng.uniform(-params.hue, params.hue)
    return JitterFactors(fb, fc, fs, hd)


def apply_jitter_factors(image: np.ndarray, factors: JitterFactors) -> np.ndarray:
    # Each blend is the identity at factor 1; skip it then so zero-magnitude
    # jitter is bit-exact, not merely within rounding error.
    out = image
    if factors.brightness != 1.0:
        out = np.clip(out * factors.brightness, 0.0, 1.0)
    if factors.contrast != 1.0:
        mean = luma(out).mean()
        out = np.clip(mean + factors.contrast * (out - mean), 0.0, 1.0)
    if factors.saturation != 1.0:
        y = luma(out)[..., None]
        out = np.clip(y + factors.saturation * (out - y), 0.0, 1.0)
    out = _rotate_hue(out, factors.hue_turns)
    return out


def _rotate_hue(image: np.ndarray, turns: float) -> np.ndarray:
    if turns == 0.0:
        return image
    angle = 2.0 * math.pi * turns
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    rot = np.array([[1, 0, 0], [0, cos_a, -sin_a], [0, sin_a, cos_a]])
    m = _YIQ_TO_RGB @ rot @ _RGB_TO_YIQ
    return np.clip(image @ m.T, 0.0, 1.0)


def color_jitter(
    image: np.ndarray, params: ColorJitterParams, rng: np.random.Generator
) -> np.ndarray:
    """Whole-image color jitter with per-image random factor draws."""
    return apply_jitter_factors(image, draw_jitter_factors(params, rng))


def draw_rectangle(
    shape: tuple[int, int],
    area_range: tuple[float, float],
    aspect_range: tuple[float, float],
    rng: np.random.Generator,
) -> tuple[int, int, int, int]:
    """Draw an integer (top, left, height, width) rectangle inside shape."""
    h, w = shape
    area = rng.uniform(*area_range) * h * w
    aspect = rng.uniform(*aspect_range)
    rect_w = int(round(math.sqrt(area * aspect)))
    rect_h = int(round(math.sqrt(area / aspect)))
    rect_w = min(max(rect_w, 1), w)
    rect_h = min(max(rect_h, 1), h)
    top = int(rng.integers(0, h - rect_h + 1))
    left = int(rng.integers(0, w - rect_w + 1))
    return top, left, rect_h, rect_w


def cj_rc(image: np.ndarray, variant: ShiftVariant, rng: np.random.Generator) -> np.ndarray:
    """Color jitter restricted to one random rectangle; outside is untouched."""
    top, left, rect_h, rect_w = draw_rectangle(
        image.shape[:2], variant.rect_area_range, variant.rect_aspect_range, rng
    )
    jittered = color_jitter(image, variant.params, rng)
    out = image.copy()
    out[top : top + rect_h, left : left + rect_w] = jittered[
        top : top + rect_h, left : left + rect_w
    ]
    return out


def rr_weight_map(
    shape: tuple[int, int], n_points: int, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Smoothed impulse map rescaled to peak 1 (all-zero if n_points == 0)."""
    weights = np.zeros(shape)
    for _ in range(n_points):
        r = int(rng.integers(0, shape[0]))
        c = int(rng.integers(0, shape[1]))
        weights[r, c] = 1.0
    if n_points == 0:
        return weights
    weights = gaussian_filter(weights, sigma=sigma)
    peak = weights.max()
    if peak > 0:
        weights = weights / peak
    return weights


def cj_rr(image: np.ndarray, variant: ShiftVariant, rng: np.random.Generator) -> np.ndarray:
    """Pixel-wise blend of jittered and original image by a smoothed weight map."""
    sigma = variant.rr_sigma_frac * min(image.shape[:2])
    weights = rr_weight_map(image.shape[:2], variant.rr_points, sigma, rng)[..., None]
    jittered = color_jitter(image, variant.params, rng)
    return weights * jittered + (1.0 - weights) * image


def cj_wf(image: np.ndarray, variant: ShiftVariant, rng: np.random.Generator) -> np.ndarray:
    """Color jitter applied to the whole frame."""
    return color_jitter(image, variant.params, rng)


def apply_shift(image: np.ndarray, variant: ShiftVariant, rng: np.random.Generator) -> np.ndarray:
    if variant.kind == CJ_RC:
        return cj_rc(image, variant, rng)
    if variant.kind == CJ_RR:
        return cj_rr(image, variant, rng)
    return cj_wf(image, variant, rng)


@dataclass(frozen=True)
class PairAugmentParams:
    """Random-resized-crop plus horizontal-flip settings for positive pairs."""

    out_size: tuple[int, int] = (32, 32)
    scale_range: tuple[float, float] = (0.6, 1.0)
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)
    hflip: bool = True
    enabled: bool = True


def resize_image(image: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the full image (identity box crop)."""
    return extract_patch(image, BoundingBox(0.0, 0.0, 1.0, 1.0), out_size)


def random_resized_crop(
    image: np.ndarray, params: PairAugmentParams, rng: np.random.Generator
) -> np.ndarray:
    scale = rng.uniform(*params.scale_range)
    aspect = rng.uniform(*params.aspect_range)
    # Fractional crop size; clamp so the window fits.
    crop_w = min(math.sqrt(scale * aspect), 1.0)
    crop_h = min(math.sqrt(scale / aspect), 1.0)
    left = rng.uniform(0.0, 1.0 - crop_w)
    top = rng.uniform(0.0, 1.0 - crop_h)
    box = clip_box(left, top, left + crop_w, top + crop_h)
    out = extract_patch(image, box, params.out_size)
    if params.hflip and rng.random() < 0.5:
        out = out[:, ::-1].copy()
    return out


def augment_view(
    patch: np.ndarray, params: PairAugmentParams, rng: np.random.Generator
) -> np.ndarray:
    if not params.enabled:
        return resize_image(patch, params.out_size)
    return random_resized_crop(patch, params, rng)


def positive_pair_augment(
    patch: np.ndarray, params: PairAugmentParams, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of the same patch."""
    return augment_view(patch, params, rng), augment_view(patch, params, rng)


def cutout(
    image: np.ndarray,
    rng: np.random.Generator,
    size_frac_range: tuple[float, float] = (0.1, 0.3),
) -> np.ndarray:
    """Zero out one random square patch."""
    h, w = image.shape[:2]
    frac = rng.uniform(*size_frac_range)
    side = max(1, int(round(frac * min(h, w))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = image.copy()
    out[top : top + side, left : left + side] = 0.0
    return out


def _affine_warp(image: np.ndarray, fwd: np.ndarray) -> np.ndarray:
    """Warp image by the forward 2x2 matrix about its center (clamped borders)."""
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inv = np.linalg.inv(fwd)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_y = inv[0, 0] * yy + inv[0, 1] * xx + cy
    src_x = inv[1, 0] * yy + inv[1, 1] * xx + cx
    flat_y = np.clip(src_y, 0, h - 1)
    flat_x = np.clip(src_x, 0, w - 1)
    y0 = np.floor(flat_y).astype(np.intp)
    x0 = np.floor(flat_x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (flat_y - y0)[..., None]
    wx = (flat_x - x0)[..., None]
    img = image.astype(np.float64, copy=False)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(np.float32)


def _transform_box(box: BoundingBox, fwd: np.ndarray, shape: tuple[int, int]) -> BoundingBox | None:
    """Box under the forward map: the center moves, the extents stay.

    Exact for circular objects (the eardrum is round) under rotation and close
    for the small shears used here; a corner hull would systematically inflate
    the regression targets instead.  None when the box leaves the image.
    """
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    by = (box.y_min + box.y_max) / 2.0 * h - 0.5
    bx = (box.x_min + box.x_max) / 2.0 * w - 0.5
    ny = fwd[0, 0] * (by - cy) + fwd[0, 1] * (bx - cx) + cy
    nx = fwd[1, 0] * (by - cy) + fwd[1, 1] * (bx - cx) + cx
    half_w = (box.x_max - box.x_min) / 2.0
    half_h = (box.y_max - box.y_min) / 2.0
    fx = (nx + 0.5) / w
    fy = (ny + 0.5) / h
    try:
        return clip_box(fx - half_w, fy - half_h, fx + half_w, fy + half_h)
    except ContractError:
        return None


def rotate_with_box(
    image: np.ndarray, box: BoundingBox | None, angle_deg: float
) -> tuple[np.ndarray, BoundingBox | None]:
    """Rotate about the image center; the box becomes the rotated hull."""
    a = math.radians(angle_deg)
    fwd = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    out = _affine_warp(image, fwd)
    new_box = _transform_box(box, fwd, image.shape[:2]) if box is not None else None
    return out, new_box


def shear_with_box(
    image: np.ndarray, box: BoundingBox | None, shear_x: float
) -> tuple[np.ndarray, BoundingBox | None]:
    """Horizontal shear about the image center."""
    fwd = np.array([[1.0, 0.0], [shear_x, 1.0]])
    out = _affine_warp(image, fwd)
    new_box = _transform_box(box, fwd, image.shape[:2]) if box is not None else None
    return out, new_box
