"""Training-time consumption of a reinforcement store.

The loader walks the base dataset once per epoch; for every image it picks
one stored record (one coefficient pair for paired stores), replays the
augmentation, and densifies the stored sparse probabilities into the target
row.  No teacher is ever invoked.

Record choice can follow a curriculum: records within each image group are
sorted easiest (most confident) first, and a schedule maps the epoch to a
percent window [a, b] of that per-image ranking.  Endpoints move from their
start to end values along a half-cosine ramp.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .augment import apply_erase, cutmix_paste, mixup_blend, replay_base
from .dataset import LabeledDataset
from .rng import STREAM_EPOCH_PLAN, SeededRng, derive_stream
from .store import FLAG_PAIRED, ReinforcementStore, decode_record
from .teacher import densify

log = logging.getLogger(__name__)

WINDOW_NAMES = {"easy": (0.0, 10.0), "all": (0.0, 100.0), "hard": (90.0, 100.0)}
MIN_WINDOW_PCT = 1.0


@dataclass(frozen=True)
class CurriculumSchedule:
    """Percent window over per-image confidence ranks, eased across epochs."""

    start: tuple[float, float]
    end: tuple[float, float]
    total_epochs: int

    def __post_init__(self):
        for a, b in (self.start, self.end):
            if not (0.0 <= a < b <= 100.0):
                raise ValueError(f"window ({a}, {b}) must satisfy 0 <= a < b <= 100")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")

    @classmethod
    def preset(cls, name: str, total_epochs: int) -> "CurriculumSchedule":
        """Build e.g. "easy-to-all" from the named start/end windows."""
        try:
            start_name, end_name = name.split("-to-")
            return cls(WINDOW_NAMES[start_name], WINDOW_NAMES[end_name], total_epochs)
        except (ValueError, KeyError):
            raise ValueError(
                f"unknown schedule preset {name!r}; expected '<start>-to-<end>' "
                f"over {sorted(WINDOW_NAMES)}"
            ) from None

    def window_at(self, epoch: int) -> tuple[float, float]:
        """Percent window for this epoch; width is clamped to >= 1 point."""
        if self.total_epochs == 0:
            a, b = self.end
        else:
            t = min(max(epoch, 0), self.total_epochs)
            f = 0.5 * (1.0 - math.cos(math.pi * t / self.total_epochs))
            a = self.start[0] + (self.end[0] - self.start[0]) * f
            b = self.start[1] + (self.end[1] - self.start[1]) * f
        if b - a < MIN_WINDOW_PCT:
            b = a + MIN_WINDOW_PCT
            if b > 100.0:
                a, b = 100.0 - MIN_WINDOW_PCT, 100.0
        return a, b


def index_window(window_pct: tuple[float, float], n: int) -> tuple[int, int]:
    """Map a percent window to [lo, hi) rank indices over n records.

    An empty window after rounding is widened to one index and logged.
    """
    if n < 1:
        raise ValueError("need at least one record per image")
    a, b = window_pct
    lo = math.ceil(a * n / 100.0)
    hi = math.floor(b * n / 100.0)
    if lo >= hi:
        lo = min(max(lo, 0), n - 1)
        hi = lo + 1
        log.info("window %s rounds to nothing over %d records; widened to [%d, %d)", window_pct, n, lo, hi)
    return lo, hi


def epoch_plan(
    num_images: int,
    samples_per_image: int,
    seed: int,
    epoch: int,
    schedule: CurriculumSchedule | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-epoch record choice: (visit order, record slot per image id).

    Slots are drawn uniformly inside the epoch's rank window from a stream
    keyed by (seed, epoch), so the plan is independent of how many workers
    later assemble the batches.
    """
    window = schedule.window_at(epoch) if schedule is not None else (0.0, 100.0)
    lo, hi = index_window(window, samples_per_image)
    rng = SeededRng(seed, derive_stream(STREAM_EPOCH_PLAN, epoch))
    slots = rng.integers(lo, hi, size=num_images)
    order = rng.permutation(num_images)
    return order, slots


class MixLibrary:
    """A small cache of pre-replayed partner images.

    Holds one augmentation per library image (its rank-0 stored record,
    base stages only).  Partner ids resolve to the nearest library id by
    modular distance over the image id circle, ties toward the lower id.
    """

    def __init__(self, store: ReinforcementStore, dataset: LabeledDataset, size: int,
                 target_hw: tuple[int, int]):
        n = store.num_images
        if not 1 <= size <= n:
            raise ValueError(f"library size {size} outside [1, {n}]")
        self.ids = np.unique(np.round(np.linspace(0, n - 1, size)).astype(np.int64))
        self.images = np.stack(
            [
                replay_base(store.descriptor(int(i), 0), dataset.images[int(i)], target_hw)
                for i in self.ids
            ]
        )
        diff = np.abs(np.arange(n)[:, None] - self.ids[None, :])
        dist = np.minimum(diff, n - diff)
        # argmin takes the first minimum, and ids are sorted ascending.
        self._nearest = dist.argmin(axis=1)

    def resolve(self, partner_id: int) -> int:
        return int(self.ids[self._nearest[partner_id]])

    def image(self, partner_id: int) -> np.ndarray:
        return self.images[self._nearest[partner_id]]


def finish_mix_erase(base_img, partner_img, desc):
    """Apply the mix and erase stages on top of an already-based image."""
    out = base_img
    if desc.mix_partner >= 0:
        out = mixup_blend(out, partner_img, desc.mix_lam)
    elif desc.cut_partner >= 0:
        out = cutmix_paste(out, partner_img, desc.cut_box)
    else:
        out = out.copy()
    if desc.erase[2] > 0.0:
        out = apply_erase(out, desc.erase)
    return out


def double_mix_expand(base_img, partner_img, desc_pair):
    """One based image + one partner load -> the pair's two mixed samples."""
    return tuple(finish_mix_erase(base_img, partner_img, d) for d in desc_pair)


class ReinforcedLoader:
    """Iterator over (augmented images, labels, dense targets) batches.

    reset(epoch) plans the epoch; next_batch() returns a batch or None when
    the epoch is exhausted.  Counters track how many partner images were
    materialized from the base dataset (`partner_loads`) versus served from
    an attached MixLibrary (`library_hits`), and how many samples were
    emitted in total.
    """

    def __init__(
        self,
        store: ReinforcementStore,
        dataset: LabeledDataset,
        seed: int = 0,
        schedule: CurriculumSchedule | None = None,
        workers: int = 1,
        mix_library: MixLibrary | None = None,
    ):
        if store.num_images != len(dataset):
            raise ValueError(
                f"store covers {store.num_images} images, dataset has {len(dataset)}"
            )
        if store.header.num_classes != dataset.num_classes:
            raise ValueError("store and dataset disagree on num_classes")
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.store = store
        self.dataset = dataset
        self.seed = seed
        self.schedule = schedule
        self.workers = workers
        self.mix_library = mix_library
        self.paired = bool(store.header.flags & FLAG_PAIRED)
        self.target_hw = dataset.image_shape[:2]
        self.partner_loads = 0
        self.library_hits = 0
        self.samples_emitted = 0
        self._order = None
        self._slots = None
        self._pos = 0
        self._batch_size = None

    @property
    def num_samples(self) -> int:
        """Samples emitted per epoch (paired stores emit two per image)."""
        return len(self.dataset) * (2 if self.paired else 1)

    def reset(self, epoch: int, batch_size: int | None = None) -> None:
        units = self.store.samples_per_image // 2 if self.paired else self.store.samples_per_image
        self._order, self._slots = epoch_plan(
            len(self.dataset), units, self.seed, epoch, self.schedule
        )
        self._pos = 0
        if batch_size is not None:
            if self.paired and batch_size % 2:
                raise ValueError("paired stores need an even batch size")
            self._batch_size = batch_size

    def planned_slots(self) -> np.ndarray:
        return self._slots.copy()

    def planned_order(self) -> np.ndarray:
        return self._order.copy()

    def _partner_image(self, partner_id: int, slot: int) -> np.ndarray:
        if self.mix_library is not None:
            self.library_hits += 1
            return self.mix_library.image(partner_id)
        self.partner_loads += 1
        return replay_base(
            self.store.descriptor(partner_id, slot),
            self.dataset.images[partner_id],
            self.target_hw,
        )

    def _one_sample(self, image_id: int):
        slot = int(self._slots[image_id])
        sp, desc = self.store.record(image_id, slot)
        base = replay_base(desc, self.dataset.images[image_id], self.target_hw)
        partner = None
        if desc.partner_id >= 0:
            if desc.partner_id == image_id:
                partner = base  # self mixing adds no load
            else:
                partner = self._partner_image(desc.partner_id, slot)
        img = finish_mix_erase(base, partner, desc)
        return img, densify(sp, self.store.header.num_classes)

    def _one_pair(self, image_id: int):
        pair_idx = int(self._slots[image_id])
        s0 = 2 * pair_idx
        sp0, d0 = self.store.record(image_id, s0)
        sp1, d1 = self.store.record(image_id, s0 + 1)
        base = replay_base(d0, self.dataset.images[image_id], self.target_hw)
        partner = None
        if d0.partner_id >= 0:
            if d0.partner_id == image_id:
                partner = base
            else:
                partner = self._partner_image(d0.partner_id, s0)
        imgs = double_mix_expand(base, partner, (d0, d1))
        nc = self.store.header.num_classes
        return imgs, (densify(sp0, nc), densify(sp1, nc))

    def next_batch(self):
        """(uint8 images, int labels, float64 target rows) or None at end."""
        if self._order is None:
            raise RuntimeError("call reset(epoch) before next_batch()")
        if self._batch_size is None:
            raise RuntimeError("no batch size set; pass it to reset()")
        n = len(self.dataset)
        if self._pos >= n:
            return None
        per_batch = self._batch_size // 2 if self.paired else self._batch_size
        ids = self._order[self._pos : self._pos + per_batch]
        self._pos += len(ids)
        h, w, c = self.dataset.image_shape
        nc = self.store.header.num_classes
        out_n = len(ids) * (2 if self.paired else 1)
        images = np.empty((out_n, h, w, c), dtype=np.uint8)
        targets = np.empty((out_n, nc), dtype=np.float64)
        labels = np.empty(out_n, dtype=np.int64)

        def fill(k: int) -> None:
            image_id = int(ids[k])
            if self.paired:
                imgs, tgts = self._one_pair(image_id)
                images[2 * k], images[2 * k + 1] = imgs
                targets[2 * k], targets[2 * k + 1] = tgts
                labels[2 * k] = labels[2 * k + 1] = self.dataset.labels[image_id]
            else:
                images[k], targets[k] = self._one_sample(image_id)
                labels[k] = self.dataset.labels[image_id]

        if self.workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                list(pool.map(fill, range(len(ids))))
        else:
            for k in range(len(ids)):
                fill(k)
        self.samples_emitted += out_n
        return images, labels, targets

    def iter_epoch(self, epoch: int, batch_size: int):
        """Batch-source adapter over the reset/next_batch contract."""
        self.reset(epoch, batch_size)
        while True:
            batch = self.next_batch()
            if batch is None:
                return
            yield batch
