import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cadenza.dataio import (
    BadMagicError,
    EmbeddingTable,
    HeaderOverflowError,
    Manifest,
    ManifestEntry,
    PairingError,
    SplitConsistencyError,
    SynthSpec,
    TrailingDataError,
    TruncatedError,
    ValidationError,
    VersionMismatchError,
    assemble_dataset,
    generate_synthetic,
    read_embeddings,
    select_top_tags,
    write_embeddings,
)


def _table(count, dim, seed=0):
    rng = np.random.default_rng(seed)
    ids = [(f"vid{i // 3}", i % 3) for i in range(count)]
    return EmbeddingTable(rng.standard_normal((count, dim)).astype(np.float32), ids)


def test_empty_table_is_header_only(tmp_path):
    path = tmp_path / "e.mveb"
    write_embeddings(EmbeddingTable(np.zeros((0, 4), np.float32), []), path)
    raw = path.read_bytes()
    assert len(raw) == 24
    assert struct.unpack("<4sIQII", raw) == (b"MVEB", 1, 0, 4, 0)
    assert read_embeddings(path).count == 0


def test_header_layout(tmp_path):
    path = tmp_path / "t.mveb"
    t = _table(5, 3)
    write_embeddings(t, path)
    raw = path.read_bytes()
    assert raw[:4] == b"MVEB"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    assert struct.unpack_from("<Q", raw, 8)[0] == 5
    assert struct.unpack_from("<I", raw, 16)[0] == 3
    assert np.array_equal(np.frombuffer(raw[24:], "<f4").reshape(5, 3), t.data)
    assert (tmp_path / "t.mveb.ids").read_text().splitlines()[4] == "vid1\t1"


@settings(max_examples=50, deadline=None)
@given(count=st.integers(0, 30), dim=st.integers(1, 17), seed=st.integers(0, 2**32 - 1))
def test_round_trip_bit_exact(tmp_path_factory, count, dim, seed):
    path = tmp_path_factory.mktemp("rt") / "x.mveb"
    t = _table(count, dim, seed)
    t.data[::2] *= np.float32(1e30)  # extreme but finite magnitudes
    write_embeddings(t, path)
    back = read_embeddings(path)
    assert back == t
    assert back.data.tobytes() == t.data.tobytes()


def test_nan_row_rejected_with_index(tmp_path):
    t = _table(6, 2)
    t.data[4, 1] = np.nan
    with pytest.raises(ValidationError, match="row 4"):
        write_embeddings(t, tmp_path / "n.mveb")


def test_duplicate_ids_rejected(tmp_path):
    t = EmbeddingTable(np.zeros((2, 2), np.float32) + 1, [("a", 0), ("a", 0)])
    with pytest.raises(ValidationError, match="duplicate"):
        write_embeddings(t, tmp_path / "d.mveb")


@pytest.fixture()
def good_file(tmp_path):
    path = tmp_path / "g.mveb"
    write_embeddings(_table(4, 3), path)
    return path


def test_bad_magic(good_file):
    raw = bytearray(good_file.read_bytes())
    raw[:4] = b"XXXX"
    good_file.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_embeddings(good_file)


def test_version_mismatch(good_file):
    raw = bytearray(good_file.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    good_file.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_embeddings(good_file)


def test_truncated_payload(good_file):
    good_file.write_bytes(good_file.read_bytes()[:-5])
    with pytest.raises(TruncatedError):
        read_embeddings(good_file)


def test_truncated_header(good_file):
    good_file.write_bytes(good_file.read_bytes()[:10])
    with pytest.raises(TruncatedError):
        read_embeddings(good_file)


def test_count_overflow(good_file):
    raw = bytearray(good_file.read_bytes())
    raw[8:16] = struct.pack("<Q", 2**62)
    good_file.write_bytes(bytes(raw))
    with pytest.raises(HeaderOverflowError):
        read_embeddings(good_file)


def test_zero_dim_is_overflow_kind(good_file):
    raw = bytearray(good_file.read_bytes())
    raw[16:20] = struct.pack("<I", 0)
    good_file.write_bytes(bytes(raw))
    with pytest.raises(HeaderOverflowError):
        read_embeddings(good_file)


def test_trailing_bytes(good_file):
    good_file.write_bytes(good_file.read_bytes() + b"\0\0\0\0")
    with pytest.raises(TrailingDataError):
        read_embeddings(good_file)


def _write_triplet(tmp_path, ds, shuffle_seed=None, drop_video_row=None, drop_manifest=None):
    audio, video = ds.audio, ds.video
    if shuffle_seed is not None:
        perm = np.random.default_rng(shuffle_seed).permutation(audio.count)
        audio = audio.take(perm)
        video = video.take(np.random.default_rng(shuffle_seed + 1).permutation(video.count))
    if drop_video_row is not None:
        video = video.take([i for i in range(video.count) if i != drop_video_row])
    entries = [e for e in ds.manifest.entries if e.id != drop_manifest]
    write_embeddings(audio, tmp_path / "a.mveb")
    write_embeddings(video, tmp_path / "v.mveb")
    Manifest(entries).write(tmp_path / "m.jsonl")
    return tmp_path / "a.mveb", tmp_path / "v.mveb", tmp_path / "m.jsonl"


def test_assemble_aligns_shuffled_rows(tmp_path, small_ds):
    paths = _write_triplet(tmp_path, small_ds, shuffle_seed=3)
    ds = assemble_dataset(*paths)
    assert ds.audio.ids == ds.video.ids == [e.id for e in ds.manifest.entries]
    assert ds == small_ds


def test_assemble_lists_missing_video_segment(tmp_path, small_ds):
    missing = small_ds.video.ids[5]
    paths = _write_triplet(tmp_path, small_ds, drop_video_row=5)
    with pytest.raises(PairingError) as exc:
        assemble_dataset(*paths)
    assert exc.value.missing == [missing]
    assert str(missing) in str(exc.value)


def test_assemble_manifest_missing_id(tmp_path, small_ds):
    sid = small_ds.audio.ids[2]
    paths = _write_triplet(tmp_path, small_ds, drop_manifest=sid)
    with pytest.raises(PairingError, match=str(sid[0])):
        assemble_dataset(*paths)


def test_split_consistency_violation(tmp_path):
    m = Manifest([ManifestEntry("a", 0, "train"), ManifestEntry("a", 1, "test")])
    m.write(tmp_path / "m.jsonl")
    with pytest.raises(SplitConsistencyError):
        Manifest.read(tmp_path / "m.jsonl")


def test_split_integrity(small_ds):
    split_of = {}
    for e in small_ds.manifest.entries:
        assert split_of.setdefault(e.video_id, e.split) == e.split


def test_default_split_proportions():
    ds = generate_synthetic(SynthSpec(n_videos=200, segments_per_video=1, audio_dim=3, video_dim=3, seed=1))
    counts = Counter(e.split for e in ds.manifest.entries)
    assert counts == {"train": 160, "val": 20, "test": 20}


def _tag_manifest(tag_counts):
    entries = []
    i = 0
    for tag, n in tag_counts.items():
        for _ in range(n):
            entries.append(ManifestEntry(f"v{i}", 0, "train", tags=[tag]))
            i += 1
    return Manifest(entries)


def test_top_tags_simple():
    assert select_top_tags(_tag_manifest({"a": 5, "b": 3, "c": 1}), 2) == ["a", "b"]


def test_top_tags_tie_is_lexicographic():
    assert select_top_tags(_tag_manifest({"b": 3, "a": 3}), 1) == ["a"]


def test_top_tags_too_few():
    with pytest.raises(ValidationError, match="only 3"):
        select_top_tags(_tag_manifest({"a": 1, "b": 1, "c": 1}), 10)


def test_top_tags_counts_videos_in_train_only():
    entries = [ManifestEntry("v0", s, "train", tags=["x"]) for s in range(6)]
    entries += [ManifestEntry("v1", 0, "train", tags=["y"]), ManifestEntry("v2", 0, "train", tags=["y"])]
    entries += [ManifestEntry(f"t{i}", 0, "test", tags=["x"]) for i in range(5)]
    assert select_top_tags(Manifest(entries), 1) == ["y"]


def test_top_ten_of_twelve_matches_independent_count():
    ds = generate_synthetic(SynthSpec(n_videos=300, segments_per_video=2, audio_dim=4, video_dim=4, n_tags=12, seed=5))
    # independent pass: count each train video once
    seen, counts = set(), {}
    for e in ds.manifest.entries:
        if e.split != "train" or e.video_id in seen:
            continue
        seen.add(e.video_id)
        for t in e.tags:
            counts[t] = counts.get(t, 0) + 1
    expected = [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:10]
    assert len(counts) == 12
    assert select_top_tags(ds.manifest, 10) == expected


def test_synthetic_deterministic():
    spec = SynthSpec(n_videos=20, audio_dim=9, video_dim=5, seed=11)
    assert generate_synthetic(spec) == generate_synthetic(spec)
    other = generate_synthetic(SynthSpec(n_videos=20, audio_dim=9, video_dim=5, seed=12))
    assert other != generate_synthetic(spec)


def test_synthetic_rho_one_is_shared_latent():
    # audio = A z and video = B z exactly, so video is a linear function of audio:
    # a map fitted on half of the rows predicts the other half.
    spec = SynthSpec(n_videos=100, segments_per_video=2, latent_dim=6, audio_dim=20, video_dim=10,
                     cross_modal_correlation=1.0, noise_sigma=0.0, seed=3)
    ds = generate_synthetic(spec)
    a, v = ds.audio.data.astype(np.float64), ds.video.data.astype(np.float64)
    W, *_ = np.linalg.lstsq(a[:100], v[:100], rcond=None)
    resid = np.abs(a[100:] @ W - v[100:]).max()
    assert resid < 1e-4 * np.abs(v).max()
    assert np.linalg.matrix_rank(np.hstack([a, v]), tol=1e-3) == 6


def test_synthetic_rho_half_is_not_linear():
    spec = SynthSpec(n_videos=100, segments_per_video=2, latent_dim=6, audio_dim=20, video_dim=10,
                     cross_modal_correlation=0.5, noise_sigma=0.0, seed=3)
    ds = generate_synthetic(spec)
    a, v = ds.audio.data.astype(np.float64), ds.video.data.astype(np.float64)
    W, *_ = np.linalg.lstsq(a[:100], v[:100], rcond=None)
    assert np.abs(a[100:] @ W - v[100:]).max() > 0.1


def test_synthetic_rho_zero_uncorrelated():
    spec = SynthSpec(n_videos=5000, segments_per_video=1, latent_dim=8, audio_dim=8, video_dim=8,
                     cross_modal_correlation=0.0, noise_sigma=0.1, seed=2)
    ds = generate_synthetic(spec)
    for c in range(8):
        r = np.corrcoef(ds.audio.data[:, c], ds.video.data[:, c])[0, 1]
        assert abs(r) < 0.05


@pytest.mark.parametrize("bad", [{"cross_modal_correlation": 1.5}, {"cross_modal_correlation": -0.1},
                                 {"n_videos": 0}, {"noise_sigma": -1.0}])
def test_synth_spec_validation(bad):
    with pytest.raises(ValidationError):
        SynthSpec.from_dict(bad)
