"""Augmentation descriptors: sample once, replay byte-identically forever.

A descriptor is a compact parameter record for one augmented view of one
image: crop rectangle, horizontal flip, two scripted-op slots, an erase box,
and optional mixing coordinates (partner id plus a blend weight or a paste
box).  `sample_descriptor` draws a descriptor from a policy and a seeded rng;
`replay` turns (descriptor, source image) back into pixels.  Replay is a pure
function, so the same descriptor always yields the same bytes.

Replay applies stages in a fixed order: crop -> resize -> flip -> scripted
ops -> mix -> erase.  All float parameters are quantized to float32 at sample
time, which makes a descriptor identical before and after a trip through the
serialized store.

Draw order inside `sample_descriptor` (one stream, consumed in sequence);
only blocks enabled by the policy variant consume draws:

1. crop: up to 10 attempts of (area uniform, log-aspect uniform) then, on a
   fit, x offset and y offset integer draws; otherwise a deterministic
   center-crop fallback that draws nothing.
2. flip gate: one uniform.
3. scripted ops (RA/RE variants): one uniform gate, then per slot an op id
   integer draw and a magnitude uniform; erase: one uniform gate, then up to
   10 attempts of (area uniform, log-aspect uniform) plus offsets on fit.
4. mixing (mix variants): one uniform gate, then a mode uniform (blend vs
   cut), a partner integer draw, and the coefficient draws for the mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .rng import SeededRng

FLAG_RRC = 1
FLAG_RARE = 2
FLAG_MIXING = 4
# Store-level flag: records come in coefficient pairs (see store/reinforce).
FLAG_PAIRED = 8

VARIANT_FLAGS = {
    "rrc": FLAG_RRC,
    "rrc-mix": FLAG_RRC | FLAG_MIXING,
    "rrc-ra-re": FLAG_RRC | FLAG_RARE,
    "rrc-ra-re-mix": FLAG_RRC | FLAG_RARE | FLAG_MIXING,
}

NUM_RA_SLOTS = 2

RA_OP_NAMES = (
    "identity",
    "brightness",
    "contrast",
    "posterize",
    "solarize",
    "rotate",
    "translate_x",
    "translate_y",
    "shear_x",
    "shear_y",
)

NO_OP = -1
NO_PARTNER = -1

_f32 = lambda v: float(np.float32(v))


@dataclass(frozen=True)
class AugmentationPolicy:
    """Distribution parameters for drawing descriptors."""

    variant: str = "rrc-ra-re"
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_prob: float = 0.5
    ra_prob: float = 1.0
    ra_magnitude_range: tuple[float, float] = (0.0, 10.0)
    erase_prob: float = 0.25
    erase_scale: tuple[float, float] = (0.02, 0.33)
    erase_ratio: tuple[float, float] = (0.3, 3.3)
    mix_prob: float = 0.5
    mixup_alpha: float = 0.2
    cutmix_alpha: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANT_FLAGS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {sorted(VARIANT_FLAGS)}")

    @property
    def flags(self) -> int:
        return VARIANT_FLAGS[self.variant]


@dataclass(frozen=True)
class AugmentationDescriptor:
    """Replayable parameters for one augmented view.

    crop and boxes are (x, y, w, h) fractions of the source dims; slots with
    op id -1 and boxes with zero width are inactive; at most one of
    mix_partner / cut_partner is >= 0.
    """

    flags: int
    crop: tuple[float, float, float, float]
    flip: bool
    ra_ops: tuple[tuple[int, float], ...] = ((NO_OP, 0.0), (NO_OP, 0.0))
    erase: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    mix_partner: int = NO_PARTNER
    mix_lam: float = 0.0
    cut_partner: int = NO_PARTNER
    cut_box: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mix_partner >= 0 and self.cut_partner >= 0:
            raise ValueError("at most one mixing mode may be active")

    @property
    def partner_id(self) -> int:
        """Active mixing partner id, or -1 when no mixing applies."""
        return self.mix_partner if self.mix_partner >= 0 else self.cut_partner


# ---------------------------------------------------------------------------
# sampling


def _sample_crop(hw: tuple[int, int], policy: AugmentationPolicy, rng: SeededRng):
    h, w = hw
    area = float(h * w)
    log_lo, log_hi = math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(policy.crop_scale[0], policy.crop_scale[1])
        ar = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            cx = rng.integers(0, w - cw + 1)
            cy = rng.integers(0, h - ch + 1)
            return cx, cy, cw, ch
    # Center-crop fallback with the aspect clamped into range.
    in_ratio = w / h
    if in_ratio < policy.crop_ratio[0]:
        cw = w
        ch = min(h, int(round(w / policy.crop_ratio[0])))
    elif in_ratio > policy.crop_ratio[1]:
        ch = h
        cw = min(w, int(round(h * policy.crop_ratio[1])))
    else:
        cw, ch = w, h
    return (w - cw) // 2, (h - ch) // 2, cw, ch


def _sample_erase(hw: tuple[int, int], policy: AugmentationPolicy, rng: SeededRng):
    h, w = hw
    area = float(h * w)
    log_lo, log_hi = math.log(policy.erase_ratio[0]), math.log(policy.erase_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(policy.erase_scale[0], policy.erase_scale[1])
        ar = math.exp(rng.uniform(log_lo, log_hi))
        eh = int(round(math.sqrt(target * ar)))
        ew = int(round(math.sqrt(target / ar)))
        if 0 < ew < w and 0 < eh < h:
            ex = rng.integers(0, w - ew + 1)
            ey = rng.integers(0, h - eh + 1)
            return (_f32(ex / w), _f32(ey / h), _f32(ew / w), _f32(eh / h))
    return (0.0, 0.0, 0.0, 0.0)


def _sample_cut_box(hw: tuple[int, int], alpha: float, rng: SeededRng):
    h, w = hw
    lam = rng.beta(alpha, alpha)
    ratio = math.sqrt(1.0 - lam)
    cw = int(round(w * ratio))
    ch = int(round(h * ratio))
    cx = rng.integers(0, w)
    cy = rng.integers(0, h)
    x0 = min(max(cx - cw // 2, 0), w)
    y0 = min(max(cy - ch // 2, 0), h)
    x1 = min(max(cx + cw // 2, 0), w)
    y1 = min(max(cy + ch // 2, 0), h)
    return (_f32(x0 / w), _f32(y0 / h), _f32((x1 - x0) / w), _f32((y1 - y0) / h))


def sample_descriptor(
    policy: AugmentationPolicy,
    source_hw: tuple[int, int],
    dataset_size: int,
    rng: SeededRng,
    self_id: int | None = None,
) -> AugmentationDescriptor:
    """Draw one descriptor; see the module docstring for the draw order.

    Args:
        source_hw: (height, width) of the source image; crop and box
            parameters are stored as fractions of these dims.
        dataset_size: population for partner draws (mix variants).
        self_id: when given, partner draws exclude this id.
    """
    flags = policy.flags
    h, w = source_hw
    cx, cy, cw, ch = _sample_crop(source_hw, policy, rng)
    crop = (_f32(cx / w), _f32(cy / h), _f32(cw / w), _f32(ch / h))
    flip = rng.random() < policy.flip_prob

    ra_ops = ((NO_OP, 0.0),) * NUM_RA_SLOTS
    erase = (0.0, 0.0, 0.0, 0.0)
    if flags & FLAG_RARE:
        if rng.random() < policy.ra_prob:
            lo, hi = policy.ra_magnitude_range
            ra_ops = tuple(
                (rng.integers(0, len(RA_OP_NAMES)), _f32(rng.uniform(lo, hi)))
                for _ in range(NUM_RA_SLOTS)
            )
        if rng.random() < policy.erase_prob:
            erase = _sample_erase(source_hw, policy, rng)

    mix_partner, mix_lam = NO_PARTNER, 0.0
    cut_partner, cut_box = NO_PARTNER, (0.0, 0.0, 0.0, 0.0)
    if flags & FLAG_MIXING:
        if dataset_size < 2:
            raise ValueError("mixing needs a dataset of at least 2 images")
        if rng.random() < policy.mix_prob:
            use_blend = rng.random() < 0.5
            if self_id is None:
                partner = rng.integers(0, dataset_size)
            else:
                partner = rng.integers(0, dataset_size - 1)
                if partner >= self_id:
                    partner += 1
            if use_blend:
                mix_partner = partner
                mix_lam = _f32(rng.beta(policy.mixup_alpha, policy.mixup_alpha))
            else:
                cut_partner = partner
                cut_box = _sample_cut_box(source_hw, policy.cutmix_alpha, rng)

    return AugmentationDescriptor(
        flags=flags,
        crop=crop,
        flip=flip,
        ra_ops=ra_ops,
        erase=erase,
        mix_partner=mix_partner,
        mix_lam=mix_lam,
        cut_partner=cut_partner,
        cut_box=cut_box,
    )


# ---------------------------------------------------------------------------
# pixel primitives


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    src = img.astype(np.float64)
    top = src[y0c][:, x0c] * (1.0 - wx) + src[y0c][:, x1c] * wx
    bot = src[y1c][:, x0c] * (1.0 - wx) + src[y1c][:, x1c] * wx
    out = top * (1.0 - wy) + bot * wy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _box_to_px(box, h: int, w: int) -> tuple[int, int, int, int]:
    """Fraction box -> (x0, y0, x1, y1) pixel corners, clipped to bounds."""
    x0 = int(round(box[0] * w))
    y0 = int(round(box[1] * h))
    x1 = int(round((box[0] + box[2]) * w))
    y1 = int(round((box[1] + box[3]) * h))
    return max(0, x0), max(0, y0), min(w, x1), min(h, y1)


def crop_resize(img: np.ndarray, crop, out_hw: tuple[int, int]) -> np.ndarray:
    """Cut the fractional crop rectangle and bilinearly resize it to out_hw.

    Degenerate rectangles are clamped to one pixel, never rejected.
    """
    h, w = img.shape[:2]
    cx = int(round(crop[0] * w))
    cy = int(round(crop[1] * h))
    cw = max(1, int(round(crop[2] * w)))
    ch = max(1, int(round(crop[3] * h)))
    cx = min(max(cx, 0), w - cw)
    cy = min(max(cy, 0), h - ch)
    return _resize_bilinear(img[cy : cy + ch, cx : cx + cw], out_hw[0], out_hw[1])


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


_GRID_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _grid(h: int, w: int):
    key = (h, w)
    if key not in _GRID_CACHE:
        ys, xs = np.meshgrid(
            np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
        )
        _GRID_CACHE[key] = (ys, xs)
    return _GRID_CACHE[key]


def _inverse_map(img: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor gather at real-valued source coords, zero outside."""
    h, w = img.shape[:2]
    iy = np.rint(src_y).astype(np.int64)
    ix = np.rint(src_x).astype(np.int64)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(img)
    out[valid] = img[iy[valid], ix[valid]]
    return out


def apply_ra_op(img: np.ndarray, op_id: int, magnitude: float) -> np.ndarray:
    """Apply one scripted op at the given magnitude (0..10).

    Every op is the identity at magnitude 0.  Geometric ops use
    nearest-neighbor sampling with zero fill; photometric ops operate on the
    0..255 range with round-and-clip.
    """
    if not 0.0 <= magnitude <= 10.0:
        raise ValueError(f"magnitude {magnitude} outside [0, 10]")
    m = magnitude / 10.0
    h, w = img.shape[:2]
    name = RA_OP_NAMES[op_id]

    if name == "identity":
        return img.copy()
    if name == "brightness":
        factor = 1.0 + 0.9 * m
        return np.clip(np.rint(img.astype(np.float64) * factor), 0, 255).astype(np.uint8)
    if name == "contrast":
        factor = 1.0 + 0.9 * m
        mu = float(np.rint(img.astype(np.float64).mean()))
        out = mu + factor * (img.astype(np.float64) - mu)
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if name == "posterize":
        bits = 8 - int(round(4 * m))
        mask = 0xFF & ~((1 << (8 - bits)) - 1)
        return (img & mask).astype(np.uint8)
    if name == "solarize":
        threshold = int(round(256 * (1.0 - m)))
        return np.where(img >= threshold, 255 - img, img).astype(np.uint8)

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = _grid(h, w)
    dy, dx = ys - cy, xs - cx
    if name == "rotate":
        theta = math.radians(30.0 * m)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        return _inverse_map(img, cy + (-sin_t * dx + cos_t * dy), cx + (cos_t * dx + sin_t * dy))
    if name == "translate_x":
        shift = int(round(0.3 * w * m))
        out = np.zeros_like(img)
        if shift == 0:
            return img.copy()
        if shift < w:
            out[:, shift:] = img[:, : w - shift]
        return out
    if name == "translate_y":
        shift = int(round(0.3 * h * m))
        out = np.zeros_like(img)
        if shift == 0:
            return img.copy()
        if shift < h:
            out[shift:, :] = img[: h - shift, :]
        return out
    if name == "shear_x":
        s = 0.3 * m
        return _inverse_map(img, ys, xs - s * dy)
    if name == "shear_y":
        s = 0.3 * m
        return _inverse_map(img, ys - s * dx, xs)
    raise ValueError(f"unknown op id {op_id}")


def mixup_blend(primary: np.ndarray, partner: np.ndarray, lam: float) -> np.ndarray:
    """Convex pixel blend lam * primary + (1 - lam) * partner."""
    out = lam * primary.astype(np.float64) + (1.0 - lam) * partner.astype(np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def cutmix_paste(primary: np.ndarray, partner: np.ndarray, box) -> np.ndarray:
    """Paste the partner's box region over the primary image."""
    h, w = primary.shape[:2]
    x0, y0, x1, y1 = _box_to_px(box, h, w)
    out = primary.copy()
    out[y0:y1, x0:x1] = partner[y0:y1, x0:x1]
    return out


def apply_erase(img: np.ndarray, box) -> np.ndarray:
    h, w = img.shape[:2]
    x0, y0, x1, y1 = _box_to_px(box, h, w)
    out = img.copy()
    out[y0:y1, x0:x1] = 0
    return out


# ---------------------------------------------------------------------------
# replay

PartnerProvider = Callable[[int], np.ndarray]


def replay_base(
    desc: AugmentationDescriptor, image: np.ndarray, target_hw: tuple[int, int]
) -> np.ndarray:
    """Replay crop/resize/flip/scripted-op stages only (no mix, no erase).

    This is the transform applied to a mixing partner: partners contribute
    their own geometry and color ops but never recurse into mixing.
    """
    out = crop_resize(image, desc.crop, target_hw)
    if desc.flip:
        out = hflip(out)
    for op_id, magnitude in desc.ra_ops:
        if op_id >= 0:
            out = apply_ra_op(out, op_id, magnitude)
    return out


def replay(
    desc: AugmentationDescriptor,
    image: np.ndarray,
    target_hw: tuple[int, int],
    partner_provider: PartnerProvider | None = None,
) -> np.ndarray:
    """Reconstruct the augmented view described by `desc`.

    Args:
        image: clean source image (H, W, C) uint8.
        target_hw: output dims; the crop is resized to these.
        partner_provider: maps a partner image id to its already-transformed
            image at target_hw; required iff the descriptor mixes.

    Returns:
        uint8 array of shape (*target_hw, C).
    """
    out = replay_base(desc, image, target_hw)
    if desc.partner_id >= 0:
        if partner_provider is None:
            raise ValueError("descriptor mixes but no partner_provider was given")
        partner = partner_provider(desc.partner_id)
        if partner.shape[:2] != tuple(target_hw):
            raise ValueError(
                f"partner image is {partner.shape[:2]}, expected {tuple(target_hw)}"
            )
        if desc.mix_partner >= 0:
            out = mixup_blend(out, partner, desc.mix_lam)
        else:
            out = cutmix_paste(out, partner, desc.cut_box)
    if desc.erase[2] > 0.0:
        out = apply_erase(out, desc.erase)
    return out


# ---------------------------------------------------------------------------
# derived descriptors


def make_self_mix(desc: AugmentationDescriptor, self_id: int) -> AugmentationDescriptor:
    """Point the active mixing partner at the image itself."""
    if desc.mix_partner >= 0:
        return replace(desc, mix_partner=self_id)
    if desc.cut_partner >= 0:
        return replace(desc, cut_partner=self_id)
    return desc


def make_double_mix(
    desc: AugmentationDescriptor, policy: AugmentationPolicy, source_hw: tuple[int, int], rng: SeededRng
) -> tuple[AugmentationDescriptor, AugmentationDescriptor]:
    """Expand one descriptor into a coefficient pair.

    Both descriptors share the crop/flip/op/erase fields and the partner; the
    second redraws only the mixing coefficient (blend weight or paste box).
    Descriptors without an active partner are duplicated unchanged.
    """
    if desc.mix_partner >= 0:
        lam2 = _f32(rng.beta(policy.mixup_alpha, policy.mixup_alpha))
        return desc, replace(desc, mix_lam=lam2)
    if desc.cut_partner >= 0:
        box2 = _sample_cut_box(source_hw, policy.cutmix_alpha, rng)
        return desc, replace(desc, cut_box=box2)
    return desc, desc
