"""On-disk formats, dataset assembly and the synthetic paired-feature generator.

Embedding files are little-endian::

    0-3    magic  b"MVEB"
    4-7    u32    format version (1)
    8-15   u64    row count
    16-19  u32    dim
    20-23  u32    reserved (0)
    24-    f32    count x dim, row-major

A sidecar ``<path>.ids`` lists ``video_id<TAB>segment_index`` per row. The
manifest is JSON-lines, one segment per line.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rng_mod

log = logging.getLogger(__name__)

MAGIC = b"MVEB"
VERSION = 1
HEADER = struct.Struct("<4sIQII")
HEADER_SIZE = HEADER.size  # 24
MAX_PAYLOAD_BYTES = 1 << 40

SPLITS = ("train", "val", "test")

SegmentId = tuple[str, int]


class FormatError(ValueError):
    """Base class for malformed embedding files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class HeaderOverflowError(FormatError):
    """count/dim in the header describe an impossible payload."""


class TrailingDataError(FormatError):
    pass


class ValidationError(ValueError):
    pass


class PairingError(ValidationError):
    def __init__(self, message: str, missing: Sequence[SegmentId] = ()):
        super().__init__(message)
        self.missing = list(missing)


class SplitConsistencyError(ValidationError):
    pass


@dataclass(eq=False)
class EmbeddingTable:
    data: np.ndarray
    ids: list[SegmentId]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValidationError(f"data must be 2-D, got shape {self.data.shape}")
        self.ids = [(str(v), int(s)) for v, s in self.ids]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def validate(self) -> None:
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        if len(self.ids) != self.count:
            raise ValidationError(f"{len(self.ids)} ids for {self.count} rows")
        bad = np.flatnonzero(~np.isfinite(self.data).all(axis=1))
        if bad.size:
            raise ValidationError(f"row {int(bad[0])} contains a non-finite value")
        seen: set[SegmentId] = set()
        for i, sid in enumerate(self.ids):
            if sid in seen:
                raise ValidationError(f"row {i}: duplicate id {sid}")
            seen.add(sid)

    def index(self) -> dict[SegmentId, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    def take(self, rows: Sequence[int] | np.ndarray) -> "EmbeddingTable":
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddingTable(self.data[rows], [self.ids[i] for i in rows])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.ids == other.ids
        )


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def ids_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def write_embeddings(table: EmbeddingTable, path: str | os.PathLike) -> None:
    table.validate()
    path = Path(path)
    header = HEADER.pack(MAGIC, VERSION, table.count, table.dim, 0)
    body = np.ascontiguousarray(table.data, dtype="<f4").tobytes()
    _atomic_write(path, header + body)
    lines = "".join(f"{v}\t{s}\n" for v, s in table.ids)
    _atomic_write(ids_path(path), lines.encode("utf-8"))


def _read_ids(path: Path, count: int) -> list[SegmentId]:
    sidecar = ids_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"missing ids sidecar {sidecar}")
    ids = []
    for lineno, line in enumerate(sidecar.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{sidecar}:{lineno}: expected video_id<TAB>segment_index")
        ids.append((parts[0], int(parts[1])))
    if len(ids) != count:
        raise ValidationError(f"{sidecar} lists {len(ids)} ids, header says {count}")
    return ids


def read_embeddings(path: str | os.PathLike) -> EmbeddingTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        if not MAGIC.startswith(raw[:4]):
            raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
        raise TruncatedError(f"{path}: header truncated ({len(raw)} of {HEADER_SIZE} bytes)")
    magic, version, count, dim, _reserved = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    if dim == 0 or count * dim * 4 > MAX_PAYLOAD_BYTES:
        raise HeaderOverflowError(f"{path}: implausible count={count} dim={dim}")
    need = count * dim * 4
    have = len(raw) - HEADER_SIZE
    if have < need:
        raise TruncatedError(f"{path}: payload truncated ({have} of {need} bytes)")
    if have > need:
        raise TrailingDataError(f"{path}: {have - need} unexpected trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=HEADER_SIZE)
    table = EmbeddingTable(data.reshape(count, dim).astype(np.float32), _read_ids(path, count))
    table.validate()
    return table


@dataclass
class ManifestEntry:
    video_id: str
    segment_index: int
    split: str
    genre: str | None = None
    tags: list[str] = field(default_factory=list)
    duration_s: float | None = None

    @property
    def id(self) -> SegmentId:
        return (self.video_id, self.segment_index)


@dataclass
class Manifest:
    entries: list[ManifestEntry]

    def validate(self) -> None:
        split_of: dict[str, str] = {}
        seen: set[SegmentId] = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValidationError(f"{e.id}: unknown split {e.split!r}")
            if e.duration_s is not None and e.duration_s <= 0:
                raise ValidationError(f"{e.id}: duration must be positive")
            if e.id in seen:
                raise ValidationError(f"duplicate manifest entry {e.id}")
            seen.add(e.id)
            prev = split_of.setdefault(e.video_id, e.split)
            if prev != e.split:
                raise SplitConsistencyError(
                    f"video {e.video_id!r} appears in both {prev!r} and {e.split!r}"
                )

    def by_id(self) -> dict[SegmentId, ManifestEntry]:
        return {e.id: e for e in self.entries}

    def videos(self, split: str | None = None) -> dict[str, ManifestEntry]:
        """First entry per video, in manifest order."""
        out: dict[str, ManifestEntry] = {}
        for e in self.entries:
            if split is None or e.split == split:
                out.setdefault(e.video_id, e)
        return out

    def write(self, path: str | os.PathLike) -> None:
        lines = [json.dumps(asdict(e), ensure_ascii=False) + "\n" for e in self.entries]
        _atomic_write(Path(path), "".join(lines).encode("utf-8"))

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    entries.append(
                        ManifestEntry(
                            video_id=str(rec["video_id"]),
                            segment_index=int(rec["segment_index"]),
                            split=rec["split"],
                            genre=rec.get("genre"),
                            tags=list(rec.get("tags") or []),
                            duration_s=rec.get("duration_s"),
                        )
                    )
                except (KeyError, TypeError, json.JSONDecodeError) as exc:
                    raise ValidationError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
        manifest = cls(entries)
        manifest.validate()
        return manifest


@dataclass(eq=False)
class PairedDataset:
    """Audio and video tables row-aligned with ``manifest.entries``."""

    audio: EmbeddingTable
    video: EmbeddingTable
    manifest: Manifest

    def __post_init__(self):
        if self.audio.ids != self.video.ids:
            raise PairingError("audio and video rows are not aligned")
        if [e.id for e in self.manifest.entries] != self.audio.ids:
            raise PairingError("manifest order does not match table rows")

    def __len__(self) -> int:
        return self.audio.count

    @property
    def video_ids(self) -> list[str]:
        return [e.video_id for e in self.manifest.entries]

    def rows(self, split: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.manifest.entries) if e.split == split], dtype=np.int64)

    def subset(self, split: str) -> "PairedDataset":
        rows = self.rows(split)
        return PairedDataset(
            self.audio.take(rows),
            self.video.take(rows),
            Manifest([self.manifest.entries[i] for i in rows]),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PairedDataset):
            return NotImplemented
        return (
            self.audio == other.audio
            and self.video == other.video
            and self.manifest == other.manifest
        )

    def write(self, directory: str | os.PathLike) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = dataset_paths(directory)
        write_embeddings(self.audio, paths["audio"])
        write_embeddings(self.video, paths["video"])
        self.manifest.write(paths["manifest"])
        return paths


def dataset_paths(directory: str | os.PathLike) -> dict[str, Path]:
    directory = Path(directory)
    return {
        "audio": directory / "audio.mveb",
        "video": directory / "video.mveb",
        "manifest": directory / "manifest.jsonl",
    }


def assemble_dataset(audio_path, video_path, manifest_path) -> PairedDataset:
    audio = read_embeddings(audio_path)
    video = read_embeddings(video_path)
    manifest = Manifest.read(manifest_path)

    a_idx, v_idx = audio.index(), video.index()
    only_audio = sorted(set(a_idx) - set(v_idx))
    only_video = sorted(set(v_idx) - set(a_idx))
    if only_audio or only_video:
        parts = []
        if only_audio:
            parts.append("missing from video table: " + ", ".join(map(str, only_audio)))
        if only_video:
            parts.append("missing from audio table: " + ", ".join(map(str, only_video)))
        raise PairingError("; ".join(parts), only_audio + only_video)

    by_id = manifest.by_id()
    not_in_manifest = sorted(sid for sid in a_idx if sid not in by_id)
    if not_in_manifest:
        raise PairingError(
            "ids missing from manifest: " + ", ".join(map(str, not_in_manifest)), not_in_manifest
        )

    entries = [e for e in manifest.entries if e.id in a_idx]
    if len(entries) < len(manifest.entries):
        log.warning("manifest lists %d segments absent from the tables", len(manifest.entries) - len(entries))
    order = [e.id for e in entries]
    return PairedDataset(
        audio.take([a_idx[sid] for sid in order]),
        video.take([v_idx[sid] for sid in order]),
        Manifest(entries),
    )


def assign_splits(
    video_ids: Iterable[str], fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> dict[str, str]:
    """Assign whole videos to train/val/test in the given proportions."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ValidationError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    videos = sorted(set(video_ids))
    order = rng_mod.stream(seed, "synth", 4).permutation(len(videos))
    n_train = int(round(fractions[0] * len(videos)))
    n_val = int(round(fractions[1] * len(videos)))
    n_val = min(n_val, len(videos) - n_train)
    out = {}
    for rank, i in enumerate(order):
        out[videos[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def select_top_tags(manifest: Manifest, k: int = 10) -> list[str]:
    """The k most frequent tags over train-split videos, ties broken lexicographically."""
    if k < 1:
        raise ValueError("k must be positive")
    counts: Counter[str] = Counter()
    for entry in manifest.videos("train").values():
        counts.update(set(entry.tags))
    if len(counts) < k:
        raise ValidationError(f"requested {k} tags but only {len(counts)} distinct tags are available")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [tag for tag, _ in ranked[:k]]


@dataclass
class SynthSpec:
    n_videos: int = 100
    segments_per_video: int = 6
    latent_dim: int = 16
    audio_dim: int = 1506
    video_dim: int = 512
    cross_modal_correlation: float = 0.5
    noise_sigma: float = 0.1
    n_genres: int = 8
    n_tags: int = 12
    seed: int = 0
    # per-segment latent jitter around the video's latent
    segment_spread: float = 0.5
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # "shared": labels depend on the cross-modal latent only;
    # "all": labels also depend on each modality's private latent
    label_source: str = "shared"

    def validate(self) -> None:
        for name in ("n_videos", "segments_per_video", "latent_dim", "audio_dim", "video_dim", "n_genres", "n_tags"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if not 0.0 <= self.cross_modal_correlation <= 1.0:
            raise ValidationError(
                f"cross_modal_correlation must lie in [0, 1], got {self.cross_modal_correlation}"
            )
        if self.noise_sigma < 0 or self.segment_spread < 0:
            raise ValidationError("noise_sigma and segment_spread must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.label_source not in ("shared", "all"):
            raise ValidationError(f"unknown label_source {self.label_source!r}")
        assign_splits([], self.split_fractions)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown SynthSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        spec = cls(**d)
        spec.validate()
        return spec


def generate_synthetic(spec: SynthSpec) -> PairedDataset:
    """Paired audio/video features driven by a shared latent per video.

    Segment latent = video latent + segment jitter. Audio rows are
    ``A @ (rho*z + (1-rho)*z_audio) + noise`` and video rows
    ``B @ (rho*z + (1-rho)*z_video) + noise``.
    """
    spec.validate()
    rho = float(spec.cross_modal_correlation)
    n, s, L = spec.n_videos, spec.segments_per_video, spec.latent_dim

    proj = rng_mod.stream(spec.seed, "synth", 0)
    A = proj.standard_normal((spec.audio_dim, L)) / np.sqrt(L)
    B = proj.standard_normal((spec.video_dim, L)) / np.sqrt(L)

    lat = rng_mod.stream(spec.seed, "synth", 1)
    z_video = lat.standard_normal((n, L))
    za_video = lat.standard_normal((n, L))
    zv_video = lat.standard_normal((n, L))
    z = np.repeat(z_video, s, axis=0) + spec.segment_spread * lat.standard_normal((n * s, L))
    za = np.repeat(za_video, s, axis=0) + spec.segment_spread * lat.standard_normal((n * s, L))
    zv = np.repeat(zv_video, s, axis=0) + spec.segment_spread * lat.standard_normal((n * s, L))

    noise = rng_mod.stream(spec.seed, "synth", 2)
    audio = (rho * z + (1 - rho) * za) @ A.T
    video = (rho * z + (1 - rho) * zv) @ B.T
    if spec.noise_sigma > 0:
        audio += spec.noise_sigma * noise.standard_normal(audio.shape)
        video += spec.noise_sigma * noise.standard_normal(video.shape)

    lab = rng_mod.stream(spec.seed, "synth", 3)
    G = lab.standard_normal((spec.n_genres, L))
    T = lab.standard_normal((spec.n_tags, L))
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    offsets = lab.permutation(np.linspace(-0.3, 1.5, spec.n_tags))
    u = z_video if spec.label_source == "shared" else (z_video + za_video + zv_video) / np.sqrt(3.0)
    genres = np.argmax(u @ G.T, axis=1)
    tag_hits = (u @ T.T) > offsets

    dur = rng_mod.stream(spec.seed, "synth", 5).uniform(120.0, 300.0, size=n)
    vids = [f"v{i:06d}" for i in range(n)]
    splits = assign_splits(vids, spec.split_fractions, spec.seed)

    entries = []
    for i, vid in enumerate(vids):
        tags = [f"tag{t:02d}" for t in np.flatnonzero(tag_hits[i])]
        for j in range(s):
            entries.append(
                ManifestEntry(
                    video_id=vid,
                    segment_index=j,
                    split=splits[vid],
                    genre=f"genre{int(genres[i]):02d}",
                    tags=tags,
                    duration_s=round(float(dur[i]), 3),
                )
            )
    ids = [e.id for e in entries]
    return PairedDataset(EmbeddingTable(audio, ids), EmbeddingTable(video, list(ids)), Manifest(entries))
