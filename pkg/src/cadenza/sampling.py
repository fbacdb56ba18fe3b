"""Planners for segment windows, frame timestamps, crops and contrastive batches.

Plans are instructions for an external extractor; nothing here touches pixels
or samples. Every planner is a pure function of its inputs and seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .dataio import PairedDataset

FRAME_RESOLUTION = (768, 432)
CROP_SIZE = (112, 112)


class UnsatisfiableBatchError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentWindow:
    section_index: int
    start_s: float
    end_s: float

    def to_dict(self) -> dict:
        return {
            "section_index": self.section_index,
            "start_s": round(self.start_s, 6),
            "end_s": round(self.end_s, 6),
        }


@dataclass(frozen=True)
class FramePlan:
    timestamps_s: tuple[float, ...]
    resolution: tuple[int, int] = FRAME_RESOLUTION

    def to_dict(self) -> dict:
        return {
            "timestamps_s": [round(t, 6) for t in self.timestamps_s],
            "resolution": list(self.resolution),
        }


@dataclass(frozen=True)
class CropPlan:
    resize_to: tuple[int, int]
    crop_origin: tuple[int, int]
    crop_size: tuple[int, int] = CROP_SIZE

    def to_dict(self) -> dict:
        return {
            "resize_to": list(self.resize_to),
            "crop_origin": list(self.crop_origin),
            "crop_size": list(self.crop_size),
        }


@dataclass
class BatchPlan:
    batches: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.batches)

    def to_dict(self) -> dict:
        return {"batches": [b.tolist() for b in self.batches]}


def plan_segments(
    duration_s: float, n_sections: int = 6, seg_len_s: float = 5.0, seed: int = 0
) -> list[SegmentWindow]:
    """One random window of ``seg_len_s`` inside each of ``n_sections`` equal sections."""
    if n_sections < 1 or seg_len_s <= 0:
        raise ValueError("n_sections and seg_len_s must be positive")
    minimum = n_sections * seg_len_s
    if duration_s < minimum:
        raise ValueError(
            f"track of {duration_s} s is too short: need at least {minimum} s "
            f"for {n_sections} sections of {seg_len_s} s"
        )
    section = duration_s / n_sections
    slack = max(section - seg_len_s, 0.0)
    offsets = rng_mod.stream(seed, "sampling", 0).uniform(0.0, 1.0, size=n_sections) * slack
    windows = []
    for i in range(n_sections):
        lo = i * section
        start = min(lo + offsets[i], (i + 1) * section - seg_len_s)
        start = max(start, lo)
        windows.append(SegmentWindow(i, start, start + seg_len_s))
    return windows


def plan_frames(
    window: SegmentWindow, n_frames: int = 50, seed: int = 0, phase: float | None = None
) -> FramePlan:
    """Equally spaced timestamps with a random phase in ``[0, spacing)``."""
    if n_frames < 1:
        raise ValueError("n_frames must be positive")
    spacing = (window.end_s - window.start_s) / n_frames
    if phase is None:
        phase = rng_mod.stream(seed, "sampling", 1).uniform(0.0, spacing)
    elif not 0.0 <= phase < spacing:
        raise ValueError(f"phase must lie in [0, {spacing})")
    ts = window.start_s + phase + spacing * np.arange(n_frames)
    return FramePlan(tuple(float(t) for t in ts))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_crop(
    frame_wh: tuple[int, int], seed: int = 0, short_side: int = 128, crop: tuple[int, int] = CROP_SIZE
) -> CropPlan:
    w, h = frame_wh
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate frame dims {frame_wh}")
    if short_side < max(crop):
        raise ValueError(f"resize target {short_side} is smaller than the {crop} crop")
    scale = short_side / min(w, h)
    rw = short_side if w <= h else _round_half_up(w * scale)
    rh = short_side if h <= w else _round_half_up(h * scale)
    gen = rng_mod.stream(seed, "sampling", 2)
    x = int(gen.integers(0, rw - crop[0] + 1))
    y = int(gen.integers(0, rh - crop[1] + 1))
    return CropPlan((rw, rh), (x, y), tuple(crop))


def plan_batches(
    dataset: PairedDataset, batch_size: int, seed: int = 0, split: str | None = "train", epoch: int = 0
) -> BatchPlan:
    """One epoch of batches in which no two rows share a video.

    Each batch draws one pending row from each of the ``batch_size`` videos
    with the most pending rows (random tie-break), which keeps every video
    available until the end, so only the last batch can come up short.
    Row indices refer to ``dataset``; ``split=None`` uses every row.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    rows = np.arange(len(dataset)) if split is None else dataset.rows(split)
    all_vids = dataset.video_ids
    groups: dict[str, list[int]] = {}
    for r in rows:
        groups.setdefault(all_vids[r], []).append(int(r))
    names = sorted(groups)
    if len(names) < batch_size:
        raise UnsatisfiableBatchError(
            f"batch_size={batch_size} needs at least that many distinct videos, "
            f"but the split has {len(names)}"
        )
    gen = rng_mod.stream(seed, "batch", epoch)
    pending = [list(np.asarray(groups[v])[gen.permutation(len(groups[v]))]) for v in names]
    remaining = np.array([len(p) for p in pending])
    total = int(remaining.sum())

    batches = []
    while total:
        active = np.flatnonzero(remaining)
        take = min(batch_size, active.size)
        if take < batch_size and total > take:
            raise UnsatisfiableBatchError(
                f"batch_size={batch_size}: only {active.size} distinct videos left "
                f"with {total} rows pending; one video holds too many segments"
            )
        tie = gen.random(active.size)
        chosen = active[np.lexsort((tie, -remaining[active]))[:take]]
        batch = np.array([pending[v].pop() for v in chosen], dtype=np.int64)
        remaining[chosen] -= 1
        total -= take
        batches.append(batch[gen.permutation(take)])
    return BatchPlan(batches)


def plans_to_json(plans: dict) -> str:
    """Serialize a mapping of name -> plan (or list of plans) for external tools."""

    def convert(obj):
        if hasattr(obj, "to_dict"):
            return obj.to_dict()
        if isinstance(obj, (list, tuple)):
            return [convert(o) for o in obj]
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        return obj

    return json.dumps(convert(plans), indent=2)
