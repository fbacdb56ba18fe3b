import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cadenza.dataio import EmbeddingTable, Manifest, ManifestEntry, PairedDataset, SynthSpec, generate_synthetic
from cadenza.sampling import (
    SegmentWindow,
    UnsatisfiableBatchError,
    plan_batches,
    plan_crop,
    plan_frames,
    plan_segments,
    plans_to_json,
)


def test_segments_180s():
    windows = plan_segments(180.0, 6, 5.0, seed=1)
    assert len(windows) == 6
    for i, w in enumerate(windows):
        assert 30 * i <= w.start_s <= 30 * i + 25
        assert w.end_s - w.start_s == pytest.approx(5.0, abs=1e-9)


def test_segments_zero_slack():
    windows = plan_segments(30.0, 6, 5.0, seed=9)
    assert [w.start_s for w in windows] == [0.0, 5.0, 10.0, 15.0, 20.0, 25.0]


def test_segments_too_short():
    with pytest.raises(ValueError, match="at least 30"):
        plan_segments(29.0)


@settings(max_examples=200, deadline=None)
@given(duration=st.floats(30.0, 900.0), seed=st.integers(0, 2**63))
def test_segments_in_section_and_disjoint(duration, seed):
    windows = plan_segments(duration, seed=seed)
    section = duration / 6
    for i, w in enumerate(windows):
        assert i * section - 1e-9 <= w.start_s and w.end_s <= (i + 1) * section + 1e-9
    for a, b in zip(windows, windows[1:]):
        assert a.end_s <= b.start_s + 1e-9


def test_segments_deterministic():
    assert plan_segments(200.0, seed=4) == plan_segments(200.0, seed=4)
    assert plan_segments(200.0, seed=4) != plan_segments(200.0, seed=5)


def test_frames_phase_zero():
    plan = plan_frames(SegmentWindow(0, 0.0, 5.0), 50, phase=0.0)
    assert plan.resolution == (768, 432)
    np.testing.assert_allclose(plan.timestamps_s, np.arange(50) * 0.1, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(start=st.floats(0, 500), length=st.floats(0.5, 10), n=st.integers(1, 80), seed=st.integers(0, 2**32))
def test_frames_spacing_and_bounds(start, length, n, seed):
    w = SegmentWindow(0, start, start + length)
    ts = np.array(plan_frames(w, n, seed=seed).timestamps_s)
    assert ts[0] >= w.start_s and ts[-1] < w.end_s
    if n > 1:
        assert np.ptp(np.diff(ts)) < 1e-9
        assert np.all(np.diff(ts) > 0)


def test_single_frame_is_start_plus_phase():
    plan = plan_frames(SegmentWindow(0, 10.0, 15.0), 1, phase=2.5)
    assert plan.timestamps_s == (12.5,)


def test_crop_768x432():
    for seed in range(50):
        plan = plan_crop((768, 432), seed=seed)
        assert plan.resize_to == (228, 128)
        x, y = plan.crop_origin
        assert 0 <= x <= 116 and 0 <= y <= 16
        assert plan.crop_size == (112, 112)


def test_crop_already_minimal():
    assert plan_crop((112, 112), seed=3, short_side=112).crop_origin == (0, 0)


def test_crop_upscales_small_frame():
    plan = plan_crop((100, 100), seed=0)
    assert plan.resize_to == (128, 128)
    x, y = plan.crop_origin
    assert 0 <= x <= 16 and 0 <= y <= 16


def test_crop_degenerate():
    with pytest.raises(ValueError):
        plan_crop((0, 10))


def test_plans_json_six_decimals():
    out = json.loads(plans_to_json({"windows": plan_segments(123.456789, seed=2)}))
    for w in out["windows"]:
        assert round(w["start_s"], 6) == w["start_s"]


def _dataset(n_videos, per_video, split="train"):
    entries = [ManifestEntry(f"v{i:04d}", s, split) for i in range(n_videos) for s in range(per_video)]
    ids = [e.id for e in entries]
    data = np.ones((len(ids), 1), np.float32)
    return PairedDataset(EmbeddingTable(data, ids), EmbeddingTable(data, list(ids)), Manifest(entries))


def _check_plan(ds, plan, rows):
    vids = ds.video_ids
    flat = np.concatenate(plan.batches)
    assert sorted(flat.tolist()) == sorted(rows.tolist())
    for b in plan.batches:
        assert len({vids[i] for i in b}) == len(b)
    assert all(len(b) == len(plan.batches[0]) for b in plan.batches[:-1])


def test_batches_full_scale():
    ds = _dataset(1000, 6)
    plan = plan_batches(ds, 1000, seed=0)
    assert len(plan) == 6
    _check_plan(ds, plan, ds.rows("train"))
    assert all(len(b) == 1000 for b in plan.batches)


def test_batches_unsatisfiable():
    with pytest.raises(UnsatisfiableBatchError, match="batch_size=3.*has 2"):
        plan_batches(_dataset(2, 3), 3)


def test_batches_only_train_rows(small_ds):
    plan = plan_batches(small_ds, 8, seed=1)
    _check_plan(small_ds, plan, small_ds.rows("train"))


def test_batches_deterministic(small_ds):
    a = plan_batches(small_ds, 8, seed=3, epoch=2)
    b = plan_batches(small_ds, 8, seed=3, epoch=2)
    c = plan_batches(small_ds, 8, seed=3, epoch=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.batches, b.batches))
    assert not all(np.array_equal(x, y) for x, y in zip(a.batches, c.batches))


def test_batches_uneven_segment_counts():
    entries = []
    for i in range(30):
        entries += [ManifestEntry(f"v{i}", s, "train") for s in range(1 + i % 6)]
    ids = [e.id for e in entries]
    data = np.ones((len(ids), 1), np.float32)
    ds = PairedDataset(EmbeddingTable(data, ids), EmbeddingTable(data, list(ids)), Manifest(entries))
    for seed in range(20):
        _check_plan(ds, plan_batches(ds, 7, seed=seed), ds.rows("train"))


def test_batches_random_exhaustive_scan():
    ds = generate_synthetic(SynthSpec(n_videos=60, segments_per_video=6, audio_dim=2, video_dim=2, seed=4))
    rows = ds.rows("train")
    for epoch in range(50):
        _check_plan(ds, plan_batches(ds, 16, seed=8, epoch=epoch), rows)
