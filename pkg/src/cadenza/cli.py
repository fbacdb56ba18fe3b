"""Command-line entry point: synth, train, eval-retrieval, probe, retrieve, analyze."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rng_mod
from .dataio import (
    EmbeddingTable,
    FormatError,
    PairedDataset,
    SynthSpec,
    ValidationError,
    assemble_dataset,
    dataset_paths,
    generate_synthetic,
    select_top_tags,
)
from .evaluation import (
    aggregate_multimodal,
    aggregate_tracks,
    format_table,
    group_mean,
    median_rank,
    probe_metrics,
    retrieval_to_dict,
    retrieval_to_text,
    retrieve_topk,
    similarity_contrast,
    tracks_to_table,
)
from .nn import read_checkpoint, write_checkpoint
from .training import (
    ConfigError,
    Heads,
    ModelConfig,
    TrainConfig,
    TrainingDivergedError,
    VARIANTS,
    config_dict,
    embed_dataset,
    probe_proba,
    split_config,
    train_contrastive,
    train_probe,
    variant_config,
)

log = logging.getLogger("cadenza")

SOURCES = (
    "contrastive-audio",
    "contrastive-video",
    "contrastive-agg",
    "backbone-audio",
    "backbone-video",
    "backbone-concat",
)
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


class Run:
    """Collects inputs/outputs of one command and writes the run manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.config: dict = {}
        self.started = time.perf_counter()

    def add_input(self, path) -> None:
        path = Path(path)
        self.inputs[str(path)] = sha256(path)
        sidecar = path.with_name(path.name + ".ids")
        if sidecar.exists():
            self.inputs[str(sidecar)] = sha256(sidecar)

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        tmp = path.with_name(name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
        self.outputs.append(path)
        return path

    def record(self, path: Path) -> None:
        self.outputs.append(Path(path))
        sidecar = Path(path).with_name(Path(path).name + ".ids")
        if sidecar.exists():
            self.outputs.append(sidecar)

    def finish(self) -> None:
        manifest = {
            "command": self.args.command,
            "argv": self.args.argv,
            "version": __version__,
            "seed": self.args.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": {str(p): sha256(p) for p in self.outputs},
            "wall_time_s": round(time.perf_counter() - self.started, 3),
        }
        (self.out / MANIFEST_NAME).write_text(_dump_json(manifest), encoding="utf-8")


# helpers ----------------------------------------------------------------------


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def _data_paths(args) -> dict[str, Path]:
    paths = dataset_paths(args.data) if args.data else {}
    for key in ("audio", "video", "manifest"):
        if getattr(args, key, None):
            paths[key] = Path(getattr(args, key))
    missing = [k for k in ("audio", "video", "manifest") if k not in paths]
    if missing:
        raise UsageError(f"dataset location missing for {missing}; pass --data DIR or --{missing[0]}")
    return paths


def _load_dataset(args, run: Run | None) -> PairedDataset:
    paths = _data_paths(args)
    ds = assemble_dataset(paths["audio"], paths["video"], paths["manifest"])
    if run is not None:
        for p in paths.values():
            run.add_input(p)
    return ds


def _load_heads(path, run: Run | None) -> Heads:
    sections, meta = read_checkpoint(path)
    if run is not None:
        run.add_input(path)
    try:
        mcfg = ModelConfig(**meta["model_config"])
        heads = Heads(mcfg, sections["audio"], sections["video"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: checkpoint metadata incomplete ({exc})") from exc
    if heads.video is None:
        raise FormatError(f"{path}: checkpoint has no video head")
    return heads


def _check_heads(heads: Heads, ds: PairedDataset) -> None:
    mcfg = heads.config
    if heads.video.dims[0] != ds.video.dim or (heads.audio is not None and heads.audio.dims[0] != ds.audio.dim):
        raise FormatError(
            f"checkpoint expects feature dims ({mcfg.audio_in}, {mcfg.video_in}), "
            f"dataset has ({ds.audio.dim}, {ds.video.dim})"
        )


def _train_config(args, base: dict | None = None) -> TrainConfig:
    _, tkw = split_config(base or {})
    if args.seed is not None:
        tkw["seed"] = args.seed
    return TrainConfig(**tkw)


def _dry_run(resolved: dict) -> int:
    print(_dump_json(resolved), end="")
    return 0


# commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_dict = _load_json(args.spec)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(spec_dict)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc
    if args.dry_run:
        return _dry_run(asdict(spec))
    run = Run(args)
    run.add_input(args.spec)
    run.config = asdict(spec)
    args.seed = spec.seed
    ds = generate_synthetic(spec)
    paths = ds.write(run.out)
    for p in paths.values():
        run.record(p)
    run.finish()
    print(f"wrote {len(ds)} segments from {spec.n_videos} videos to {run.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    mkw, _ = split_config(cfg)
    tcfg = _train_config(args, cfg)
    args.seed = tcfg.seed
    paths = _data_paths(args)
    ds = assemble_dataset(paths["audio"], paths["video"], paths["manifest"])
    for key, dim in (("audio_in", ds.audio.dim), ("video_in", ds.video.dim)):
        if mkw.setdefault(key, dim) != dim:
            raise ConfigError(f"config {key}={mkw[key]} but dataset features have dim {dim}")
    if args.negative_set:
        mkw["negative_set"] = args.negative_set
    mcfg = variant_config(args.variant, **mkw)
    resolved = {"variant": args.variant, **config_dict(mcfg, tcfg)}
    if args.dry_run:
        return _dry_run(resolved)

    run = Run(args)
    for p in paths.values():
        run.add_input(p)
    run.config = resolved
    heads, history = train_contrastive(ds, mcfg, tcfg)
    ckpt = run.out / "checkpoint.mvck"
    write_checkpoint(
        ckpt,
        heads.sections(),
        {"model_config": asdict(mcfg), "train_config": asdict(tcfg), "variant": args.variant,
         "best_epoch": history.best_epoch},
    )
    run.record(ckpt)
    run.write_text("history.csv", history.to_csv())
    run.write_text("config.json", _dump_json(resolved))
    run.finish()
    print(
        f"trained {args.variant}: {len(history.rows)} epochs, best epoch {history.best_epoch}, "
        f"val loss {history.initial_val_loss:.6f} -> {history.best_val_loss:.6f}"
    )
    return 0


def retrieval_report(heads: Heads, ds: PairedDataset) -> dict:
    test = ds.subset("test")
    if len(test) == 0:
        raise ValidationError("test split is empty")
    ea = embed_dataset(heads, test, "audio")
    ev = embed_dataset(heads, test, "video")
    a2v = median_rank(ea, ev, direction="a->v")
    v2a = median_rank(ev, ea, direction="v->a")
    return {"a->v": a2v.to_dict(), "v->a": v2a.to_dict(), "pool_size": a2v.pool_size}


def cmd_eval_retrieval(args) -> int:
    if args.dry_run:
        ds = _load_dataset(args, None)
        heads = _load_heads(args.checkpoint, None)
        _check_heads(heads, ds)
        return _dry_run({"checkpoint": str(args.checkpoint), "model_config": asdict(heads.config)})
    run = Run(args)
    ds = _load_dataset(args, run)
    heads = _load_heads(args.checkpoint, run)
    _check_heads(heads, ds)
    report = retrieval_report(heads, ds)
    run.config = {"model_config": asdict(heads.config)}
    run.write_text("retrieval_eval.json", _dump_json(report))
    rows = [("direction", "median_rank", "pool_size")]
    for d in ("a->v", "v->a"):
        rows.append((d, f"{report[d]['median_rank']:g}", str(report[d]["pool_size"])))
    text = format_table(rows) + f"tie rule: {report['a->v']['tie_rule']}\nmedian: {report['a->v']['median_rule']}\n"
    run.write_text("retrieval_eval.txt", text)
    run.finish()
    print(text, end="")
    return 0


def probe_features(source: str, ds: PairedDataset, heads: Heads | None) -> np.ndarray:
    if source.startswith("contrastive"):
        if heads is None:
            raise UsageError(f"--source {source} needs --checkpoint")
        _check_heads(heads, ds)
    if source == "backbone-audio":
        return ds.audio.data.astype(np.float64)
    if source == "backbone-video":
        return ds.video.data.astype(np.float64)
    if source == "backbone-concat":
        return np.hstack([ds.audio.data, ds.video.data]).astype(np.float64)
    ea = embed_dataset(heads, ds, "audio").data.astype(np.float64)
    ev = embed_dataset(heads, ds, "video").data.astype(np.float64)
    if source == "contrastive-audio":
        return ea
    if source == "contrastive-video":
        return ev
    if source == "contrastive-agg":
        return np.hstack([ea, ev])
    raise UsageError(f"unknown source {source!r}")


def probe_labels(ds: PairedDataset, task: str, top_k: int = 10):
    """Per-segment targets plus a per-segment 0/1 matrix and label names.

    Segments inherit their video's labels. Genre classes come from the
    train split; other segments with unseen genres get class -1.
    """
    entries = ds.manifest.entries
    if task == "multilabel_tags":
        names = select_top_tags(ds.manifest, top_k)
        y = np.array([[t in e.tags for t in names] for e in entries], dtype=np.float64).reshape(len(entries), len(names))
        return y, y, names
    if any(e.genre is None for e in entries):
        raise ValidationError("genre task needs a genre for every segment")
    names = sorted({e.genre for e in entries if e.split == "train"})
    pos = {g: i for i, g in enumerate(names)}
    y = np.array([pos.get(e.genre, -1) for e in entries], dtype=np.int64)
    onehot = np.zeros((len(entries), len(names)))
    seen = y >= 0
    onehot[np.flatnonzero(seen), y[seen]] = 1.0
    return y, onehot, names


def run_probe(
    x: np.ndarray, ds: PairedDataset, task: str, tcfg: TrainConfig, top_k: int = 10,
    hidden=(512, 256), dropout: float = 0.3, threshold: float = 0.5,
):
    """Train on train-split segments, early-stop on val, score test videos."""
    y, onehot, names = probe_labels(ds, task, top_k)
    split = np.array([e.split for e in ds.manifest.entries])
    usable = y >= 0 if task == "genre" else np.ones(len(y), dtype=bool)
    tr = np.flatnonzero((split == "train") & usable)
    va = np.flatnonzero((split == "val") & usable)
    te = np.flatnonzero((split == "test") & usable)
    if len(te) == 0:
        raise ValidationError("no labelled test segments")
    if len(va) == 0:
        va = tr
    probe, history = train_probe(
        x[tr], y[tr], task, tcfg, x[va], y[va], hidden=hidden, dropout=dropout,
        n_classes=len(names) if task == "genre" else None,
    )
    proba = probe_proba(probe, x[te], task)
    vids = [ds.manifest.entries[i].video_id for i in te]
    order, video_proba = group_mean(proba, vids)
    first = {}
    for i, v in zip(te, vids):
        first.setdefault(v, i)
    video_labels = onehot[[first[v] for v in order]]
    metrics = probe_metrics(video_proba, video_labels, names, threshold)
    if task == "genre":
        metrics.accuracy = float(np.mean(video_proba.argmax(axis=1) == video_labels.argmax(axis=1)))
    return metrics, history


def cmd_probe(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    tcfg = _train_config(args, {k: v for k, v in cfg.items() if k in TrainConfig.__dataclass_fields__})
    unknown = set(cfg) - set(TrainConfig.__dataclass_fields__) - {"hidden", "dropout", "threshold", "top_k"}
    if unknown:
        raise ConfigError(f"unknown probe config keys: {sorted(unknown)}")
    args.seed = tcfg.seed
    task = {"tags": "multilabel_tags", "genre": "genre"}[args.task]
    resolved = {
        "source": args.source, "task": task, **asdict(tcfg),
        "hidden": list(cfg.get("hidden", [512, 256])), "dropout": cfg.get("dropout", 0.3),
        "threshold": cfg.get("threshold", 0.5), "top_k": cfg.get("top_k", 10),
    }
    if args.source.startswith("contrastive") and not args.checkpoint:
        raise UsageError(f"--source {args.source} needs --checkpoint")
    if args.dry_run:
        _load_dataset(args, None)
        return _dry_run(resolved)
    run = Run(args)
    run.config = resolved
    ds = _load_dataset(args, run)
    heads = _load_heads(args.checkpoint, run) if args.checkpoint else None
    x = probe_features(args.source, ds, heads)
    metrics, history = run_probe(
        x, ds, task, tcfg, resolved["top_k"], tuple(resolved["hidden"]), resolved["dropout"], resolved["threshold"]
    )
    report = {"source": args.source, "task": task, "feature_dim": int(x.shape[1]), **metrics.to_dict()}
    run.write_text("probe_metrics.json", _dump_json(report))
    run.write_text("probe_history.csv", history.to_csv())
    rows = [("label", "auc")] + [(k, f"{v:.4f}") for k, v in metrics.per_label_auc.items()]
    text = (
        f"source {args.source}  task {task}  feature dim {x.shape[1]}\n"
        f"macro AUC {metrics.macro_auc:.4f}  macro F1 {metrics.macro_f1:.4f} (threshold {metrics.threshold})\n"
        + format_table(rows)
    )
    run.write_text("probe_metrics.txt", text)
    run.finish()
    print(text, end="")
    return 0


def retrieval_pool(heads: Heads | None, ds: PairedDataset, level: str, modality: str) -> EmbeddingTable:
    if heads is None:
        audio, video = ds.audio, ds.video
    else:
        _check_heads(heads, ds)
        audio, video = embed_dataset(heads, ds, "audio"), embed_dataset(heads, ds, "video")
    if level == "segment":
        if modality == "audio":
            return audio
        if modality == "video":
            return video
        # unit audio and video halves, concatenated and renormalized
        data = np.hstack([_unit_rows(audio), _unit_rows(video)]) / np.sqrt(2.0)
        return EmbeddingTable(data, list(audio.ids))
    ta, tv = aggregate_tracks(audio), aggregate_tracks(video)
    tracks = {"audio": ta, "video": tv}.get(modality) or aggregate_multimodal(ta, tv)
    return tracks_to_table(tracks)


def _unit_rows(table: EmbeddingTable) -> np.ndarray:
    x = table.data.astype(np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _read_seeds(path, level: str) -> list[tuple[str, int]]:
    seeds = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if level == "track":
            seeds.append((parts[0], 0))
        else:
            if len(parts) != 2:
                raise UsageError(f"segment seeds need video_id<TAB>segment_index, got {line!r}")
            seeds.append((parts[0], int(parts[1])))
    return seeds


def cmd_retrieve(args) -> int:
    n_default = 25 if args.level == "track" else 20
    k = 3 if args.k is None else args.k
    seed = 0 if args.seed is None else args.seed
    args.seed = seed
    resolved = {"level": args.level, "k": k, "modality": args.modality, "seed": seed,
                "random_seeds": None if args.seeds else (args.random_seeds or n_default),
                "seeds_file": args.seeds, "checkpoint": args.checkpoint}
    if args.dry_run:
        _load_dataset(args, None)
        return _dry_run(resolved)
    run = Run(args)
    run.config = resolved
    ds = _load_dataset(args, run)
    heads = _load_heads(args.checkpoint, run) if args.checkpoint else None
    pool = retrieval_pool(heads, ds, args.level, args.modality)
    if args.seeds:
        run.add_input(args.seeds)
        seeds = _read_seeds(args.seeds, args.level)
        unknown = [s for s in seeds if s not in pool.index()]
        if unknown:
            raise UsageError(f"unknown seed id(s): {unknown}")
    else:
        n = resolved["random_seeds"]
        if n > pool.count:
            raise UsageError(f"asked for {n} random seeds from a pool of {pool.count}")
        pick = rng_mod.stream(seed, "seeds").choice(pool.count, size=n, replace=False)
        seeds = [pool.ids[i] for i in sorted(pick)]
    entries = retrieve_topk(seeds, pool, k, args.level)
    run.write_text("retrieval.json", _dump_json(retrieval_to_dict(entries, args.level)))
    text = retrieval_to_text(entries, args.level)
    run.write_text("retrieval.txt", text)
    run.finish()
    print(text, end="")
    return 0


def cmd_analyze(args) -> int:
    grouping = {"same_song": "same_song_vs_different", "same_genre": "same_genre_vs_different"}.get(
        args.grouping, args.grouping
    )
    seed = 0 if args.seed is None else args.seed
    args.seed = seed
    resolved = {"grouping": grouping, "modality": args.modality, "seed": seed,
                "bootstrap": args.bootstrap, "checkpoint": args.checkpoint}
    if args.dry_run:
        _load_dataset(args, None)
        return _dry_run(resolved)
    run = Run(args)
    run.config = resolved
    ds = _load_dataset(args, run)
    heads = _load_heads(args.checkpoint, run) if args.checkpoint else None
    if heads is not None:
        _check_heads(heads, ds)
        table = embed_dataset(heads, ds, args.modality)
    else:
        table = getattr(ds, args.modality)
    res = similarity_contrast(table, ds.manifest, grouping, bootstrap=args.bootstrap, seed=seed)
    report = res.to_dict()
    run.write_text("analysis.json", _dump_json(report))
    rows = [("statistic", "value")] + [
        (k, f"{v:.6f}" if isinstance(v, float) else str(v)) for k, v in report.items()
    ]
    text = format_table(rows)
    run.write_text("analysis.txt", text)
    run.finish()
    print(text, end="")
    return 0


# parser -----------------------------------------------------------------------


def _add_data_args(p) -> None:
    p.add_argument("--data", help="directory holding audio.mveb, video.mveb, manifest.jsonl")
    p.add_argument("--audio", help="audio embedding file (overrides --data)")
    p.add_argument("--video", help="video embedding file (overrides --data)")
    p.add_argument("--manifest", help="JSON-lines manifest (overrides --data)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="64-bit seed for every random stream")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--dry-run", action="store_true", help="validate inputs, print the resolved config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cadenza", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic paired dataset")
    p.add_argument("spec", help="SynthSpec JSON file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train projection heads contrastively")
    _add_data_args(p)
    p.add_argument("--config", help="JSON with ModelConfig/TrainConfig field names")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="base")
    p.add_argument("--negative-set", choices=["standard", "paper-literal"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", parents=[common], help="cross-modal median ranks on the test split")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("probe", parents=[common], help="train and score a downstream probe")
    _add_data_args(p)
    p.add_argument("--source", choices=SOURCES, required=True)
    p.add_argument("--task", choices=["tags", "genre"], required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--config", help="JSON with TrainConfig fields plus hidden/dropout/threshold/top_k")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("retrieve", parents=[common], help="top-k similar tracks or segments per seed")
    _add_data_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--level", choices=["segment", "track"], default="track")
    p.add_argument("--k", type=int)
    p.add_argument("--seeds", help="file of seed ids (video_id, or video_id<TAB>segment_index)")
    p.add_argument("--random-seeds", type=int, metavar="N")
    p.add_argument("--modality", choices=["agg", "audio", "video"], default="agg")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("analyze", parents=[common], help="within- vs between-group cosine similarity")
    _add_data_args(p)
    p.add_argument("--grouping", choices=["same_song", "same_genre"], required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--modality", choices=["audio", "video"], default="audio")
    p.add_argument("--bootstrap", type=int, default=2000)
    p.set_defaults(func=cmd_analyze)
    return parser


def _thread_limit():
    value = os.environ.get("CADENZA_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        parser.error("--seed must be a 64-bit unsigned integer")
    if not args.dry_run:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError, ValidationError, FormatError, FileNotFoundError, KeyError) as exc:
        print(f"cadenza {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"cadenza {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
