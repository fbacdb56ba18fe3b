"""Configurations and SGD training loops for projection heads, autoencoders and probes."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import rng as rng_mod
from .contrastive import (
    LossConfig,
    canonical_negative_set,
    contrastive_loss,
    contrastive_loss_backward,
    similarity_matrix,
)
from .dataio import EmbeddingTable, PairedDataset
from .nn import Mlp, backward, forward, head_mlp, init_mlp
from .sampling import plan_batches

log = logging.getLogger(__name__)

HEAD_MODES = ("dual", "single_video_to_audio")
INITS = ("glorot", "autoencoder")
TASKS = ("multilabel_tags", "genre")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}, step {step}")
        self.epoch, self.step = epoch, step


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    audio_in: int = 1506
    video_in: int = 512
    hidden: int = 512
    embed: int = 256
    n_layers: int = 2
    head_mode: str = "dual"
    temperature: float = 1.0
    negative_set: str = "standard"
    init: str = "glorot"
    dropout: float = 0.3

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}")
        if min(self.audio_in, self.video_in, self.hidden, self.embed, self.n_layers) < 1:
            raise ConfigError("dims and n_layers must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        self.negative_set = canonical_negative_set(self.negative_set)
        LossConfig(self.temperature, self.negative_set)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.temperature, self.negative_set)


@dataclass
class TrainConfig:
    batch_size: int = 1000
    lr0: float = 0.01
    lr_gamma: float = 0.95
    patience_epochs: int = 3
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not 0 < self.lr_gamma <= 1:
            raise ConfigError("lr_gamma must lie in (0, 1]")
        if self.patience_epochs < 1 or self.max_epochs < 1:
            raise ConfigError("patience_epochs and max_epochs must be positive")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")


# the six experiment configurations, one flag set each
VARIANTS: dict[str, dict] = {
    "base": {},
    "embed512": {"embed": 512},
    "four-layers": {"n_layers": 4},
    "single-head": {"head_mode": "single_video_to_audio"},
    "tau03": {"temperature": 0.3},
    "ae-init": {"init": "autoencoder"},
}


def variant_config(name: str, **overrides) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return ModelConfig(**{**overrides, **VARIANTS[name]})


def split_config(d: dict) -> tuple[dict, dict]:
    """Split a flat config dict into ModelConfig and TrainConfig kwargs."""
    mkeys = {f.name for f in fields(ModelConfig)}
    tkeys = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - mkeys - tkeys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return {k: v for k, v in d.items() if k in mkeys}, {k: v for k, v in d.items() if k in tkeys}


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.lr_gamma**epoch


def sgd_step(mlp: Mlp, grads: Sequence[tuple[np.ndarray, np.ndarray]], lr: float) -> None:
    for layer, (dw, db) in zip(mlp.layers, grads):
        layer.weights -= lr * dw
        layer.bias -= lr * db


@dataclass
class History:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)  # epoch, train, val, lr
    initial_val_loss: float = math.nan
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for epoch, tr, va, lr in self.rows:
            w.writerow([epoch, repr(float(tr)), repr(float(va)), repr(float(lr))])
        return buf.getvalue()


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    current_lr: float = 0.0
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    seed: int = 0
    best: object = None


def _early_stop_loop(
    run_epoch: Callable[[int, float], float],
    val_loss: Callable[[], float],
    snapshot: Callable[[], object],
    tcfg: TrainConfig,
) -> tuple[object, History]:
    """Shared epoch loop: decay, validate, keep the best snapshot, stop on patience."""
    history = History()
    state = TrainState(seed=tcfg.seed)
    state.best_val_loss = history.initial_val_loss = val_loss()
    state.best = snapshot()
    for epoch in range(tcfg.max_epochs):
        state.epoch = epoch
        state.current_lr = lr_at(epoch, tcfg)
        train_loss = run_epoch(epoch, state.current_lr)
        vl = val_loss()
        if not math.isfinite(vl):
            raise TrainingDivergedError(epoch + 1, -1, "validation loss")
        history.rows.append((epoch + 1, train_loss, vl, state.current_lr))
        if vl < state.best_val_loss:
            state.best_val_loss = vl
            state.epochs_since_improvement = 0
            state.best = snapshot()
            history.best_epoch = epoch + 1
        else:
            state.epochs_since_improvement += 1
        if state.epochs_since_improvement == tcfg.patience_epochs:
            history.stopped_early = True
            break
    history.best_val_loss = state.best_val_loss
    return state.best, history


# Contrastive heads ------------------------------------------------------------


@dataclass
class Heads:
    config: ModelConfig
    audio: Mlp | None  # None: identity path (single-head mode)
    video: Mlp

    def copy(self) -> "Heads":
        return Heads(self.config, None if self.audio is None else self.audio.copy(), self.video.copy())

    def sections(self) -> dict[str, Mlp | None]:
        return {"audio": self.audio, "video": self.video}


def build_heads(mcfg: ModelConfig, seed: int) -> Heads:
    if mcfg.head_mode == "single_video_to_audio":
        video = head_mlp(mcfg.video_in, mcfg.hidden, mcfg.audio_in, mcfg.n_layers, mcfg.dropout, seed, key=1)
        return Heads(mcfg, None, video)
    audio = head_mlp(mcfg.audio_in, mcfg.hidden, mcfg.embed, mcfg.n_layers, mcfg.dropout, seed, key=0)
    video = head_mlp(mcfg.video_in, mcfg.hidden, mcfg.embed, mcfg.n_layers, mcfg.dropout, seed, key=1)
    return Heads(mcfg, audio, video)


def _embed_rows(head: Mlp | None, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    if head is None:
        return np.asarray(x, dtype=np.float64)
    return np.concatenate([forward(head, x[i : i + chunk])[0] for i in range(0, len(x), chunk)] or [np.zeros((0, head.dims[-1]))])


def contrastive_eval_loss(heads: Heads, audio: np.ndarray, video: np.ndarray, batches: Sequence[np.ndarray]) -> float:
    """Pair-weighted mean loss over fixed batches, eval mode."""
    ea = _embed_rows(heads.audio, audio)
    ev = _embed_rows(heads.video, video)
    cfg = heads.config.loss
    total = 0.0
    for b in batches:
        total += contrastive_loss(similarity_matrix(ea[b], ev[b]), cfg)[0] * len(b)
    return total / sum(len(b) for b in batches)


def train_contrastive(
    dataset: PairedDataset, mcfg: ModelConfig, tcfg: TrainConfig, heads: Heads | None = None
) -> tuple[Heads, History]:
    """Train both heads (or the video head alone) with SGD and early stopping.

    Returns the checkpoint with the best validation loss, not the last one.
    """
    train = dataset.subset("train")
    val = dataset.subset("val")
    if len(val) == 0:
        raise ConfigError("contrastive training needs a non-empty val split")
    if train.audio.dim != mcfg.audio_in or train.video.dim != mcfg.video_in:
        raise ConfigError(
            f"feature dims ({train.audio.dim}, {train.video.dim}) do not match "
            f"config ({mcfg.audio_in}, {mcfg.video_in})"
        )
    xa = train.audio.data.astype(np.float64)
    xv = train.video.data.astype(np.float64)
    va = val.audio.data.astype(np.float64)
    vv = val.video.data.astype(np.float64)

    if heads is None:
        heads = build_heads(mcfg, tcfg.seed)
        if mcfg.init == "autoencoder":
            heads = autoencoder_init(heads, train, val, tcfg)
    heads = heads.copy()
    cfg = mcfg.loss

    val_bs = min(tcfg.batch_size, len(set(val.video_ids)))
    val_batches = plan_batches(val, val_bs, seed=rng_mod.child_seed(tcfg.seed, "batch", 1), split=None).batches
    step = 0

    def run_epoch(epoch: int, lr: float) -> float:
        nonlocal step
        plan = plan_batches(train, tcfg.batch_size, seed=tcfg.seed, split=None, epoch=epoch)
        total, count = 0.0, 0
        for b in plan.batches:
            drop = rng_mod.stream(tcfg.seed, "dropout", step)
            if heads.audio is None:
                ea, tape_a = xa[b], None
            else:
                ea, tape_a = forward(heads.audio, xa[b], "train", drop)
            ev, tape_v = forward(heads.video, xv[b], "train", drop)
            loss, ga, gv = contrastive_loss_backward(ea, ev, cfg)
            if not (math.isfinite(loss) and np.isfinite(ga).all() and np.isfinite(gv).all()):
                raise TrainingDivergedError(epoch + 1, step)
            if heads.audio is not None:
                sgd_step(heads.audio, backward(heads.audio, tape_a, ga)[0], lr)
            sgd_step(heads.video, backward(heads.video, tape_v, gv)[0], lr)
            total += loss * len(b)
            count += len(b)
            step += 1
        log.info("epoch %d lr %.6g train loss %.6f", epoch + 1, lr, total / count)
        return total / count

    best, history = _early_stop_loop(
        run_epoch, lambda: contrastive_eval_loss(heads, va, vv, val_batches), heads.copy, tcfg
    )
    return best, history


def embed_dataset(heads: Heads, data: PairedDataset | EmbeddingTable, modality: str) -> EmbeddingTable:
    """Eval-mode embeddings for every row. Single-head audio passes through untouched."""
    if modality not in ("audio", "video"):
        raise ValueError("modality must be 'audio' or 'video'")
    table = getattr(data, modality) if isinstance(data, PairedDataset) else data
    head = heads.audio if modality == "audio" else heads.video
    if head is None:
        return EmbeddingTable(table.data.copy(), list(table.ids))
    if table.dim != head.dims[0]:
        raise ValueError(f"{modality} features have dim {table.dim}, head expects {head.dims[0]}")
    return EmbeddingTable(_embed_rows(head, table.data.astype(np.float64)), list(table.ids))


# Autoencoder pre-initialization --------------------------------------------


def decoder_for(encoder: Mlp, seed: int, key: int = 0) -> Mlp:
    """Mirror of ``encoder``'s dims: ReLU hidden layers, identity output, no dropout."""
    dims = encoder.dims[::-1]
    acts = ["relu"] * (len(dims) - 2) + ["identity"]
    return init_mlp(dims, acts, 0.0, seed=seed, key=100 + key)


def ae_loss_and_grads(encoder: Mlp, decoder: Mlp, x: np.ndarray, rng=None):
    """Squared reconstruction error (summed over coordinates, averaged over rows) and gradients."""
    code, tape_e = forward(encoder, x, "train", rng)
    recon, tape_d = forward(decoder, code, "train", rng)
    diff = recon - x
    loss = float(np.sum(diff**2) / len(x))
    g_dec, g_code = backward(decoder, tape_d, 2.0 * diff / len(x))
    g_enc, _ = backward(encoder, tape_e, g_code)
    return loss, g_enc, g_dec


def _row_batches(n: int, batch_size: int, gen: np.random.Generator) -> list[np.ndarray]:
    order = gen.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def fit_autoencoder(
    encoder: Mlp, x_train: np.ndarray, x_val: np.ndarray | None, tcfg: TrainConfig, key: int = 0
) -> tuple[Mlp, Mlp, History]:
    """SGD on reconstruction error; returns the best (encoder, decoder) and history."""
    encoder = encoder.copy()
    decoder = decoder_for(encoder, tcfg.seed, key)
    x_train = np.asarray(x_train, dtype=np.float64)
    x_check = x_train if x_val is None or len(x_val) == 0 else np.asarray(x_val, dtype=np.float64)
    step = 0

    def run_epoch(epoch: int, lr: float) -> float:
        nonlocal step
        gen = rng_mod.stream(tcfg.seed, "batch", 1000 + key, epoch)
        total = 0.0
        for b in _row_batches(len(x_train), tcfg.batch_size, gen):
            drop = rng_mod.stream(tcfg.seed, "dropout", 1000 + key, step)
            loss, g_enc, g_dec = ae_loss_and_grads(encoder, decoder, x_train[b], drop)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch + 1, step)
            sgd_step(encoder, g_enc, lr)
            sgd_step(decoder, g_dec, lr)
            total += loss * len(b)
            step += 1
        return total / len(x_train)

    def val_loss() -> float:
        recon = forward(decoder, forward(encoder, x_check)[0])[0]
        return float(np.sum((recon - x_check) ** 2) / len(x_check))

    best, history = _early_stop_loop(
        run_epoch, val_loss, lambda: (encoder.copy(), decoder.copy()), tcfg
    )
    return best[0], best[1], history


def train_autoencoder(
    table: EmbeddingTable, mcfg: ModelConfig, tcfg: TrainConfig, val_table: EmbeddingTable | None = None,
    modality: str = "audio",
) -> Mlp:
    """Encoder weights (head architecture) learned by reconstructing ``table``."""
    if table.count == 0:
        raise ValueError("cannot train an autoencoder on an empty table")
    heads = build_heads(replace(mcfg, audio_in=table.dim, video_in=table.dim), tcfg.seed)
    head = heads.video if modality == "video" or heads.audio is None else heads.audio
    key = 1 if modality == "video" else 0
    x_val = None if val_table is None else val_table.data
    encoder, _, _ = fit_autoencoder(head, table.data, x_val, tcfg, key=key)
    return encoder


def autoencoder_init(heads: Heads, train: PairedDataset, val: PairedDataset, tcfg: TrainConfig) -> Heads:
    out = heads.copy()
    if out.audio is not None:
        out.audio = fit_autoencoder(out.audio, train.audio.data, val.audio.data, tcfg, key=0)[0]
    out.video = fit_autoencoder(out.video, train.video.data, val.video.data, tcfg, key=1)[0]
    return out


# Probes ---------------------------------------------------------------------


def probe_loss(logits: np.ndarray, labels: np.ndarray, task: str) -> tuple[float, np.ndarray]:
    """Mean BCE (multilabel) or softmax cross-entropy (genre) and d loss / d logits."""
    z = np.asarray(logits, dtype=np.float64)
    if task == "multilabel_tags":
        y = np.asarray(labels, dtype=np.float64)
        if y.shape != z.shape:
            raise ValueError(f"labels {y.shape} do not match logits {z.shape}")
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return float(loss), (p - y) / z.size
    if task == "genre":
        y = np.asarray(labels, dtype=np.int64)
        n = z.shape[0]
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        loss = np.mean(lse - z[np.arange(n), y])
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        return float(loss), p / n
    raise ValueError(f"unknown task {task!r}")


def probe_proba(probe: Mlp, features: np.ndarray, task: str) -> np.ndarray:
    z = _embed_rows(probe, np.asarray(features, dtype=np.float64))
    if task == "multilabel_tags":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def build_probe(in_dim: int, out_dim: int, seed: int, hidden: Sequence[int] = (512, 256), dropout: float = 0.3) -> Mlp:
    dims = [in_dim, *hidden, out_dim]
    n = len(dims) - 1
    return init_mlp(dims, ["relu"] * (n - 1) + ["identity"], [dropout] * (n - 1) + [0.0], seed=seed, key=200)


def _check_labels(features: np.ndarray, labels: np.ndarray, task: str, n_classes: int | None) -> int:
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} feature rows but {len(labels)} label rows")
    if task == "multilabel_tags":
        return labels.shape[1]
    if task != "genre":
        raise ValueError(f"unknown task {task!r}")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(labels.astype(np.int64), minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class(es) {empty.tolist()} have no training examples")
    return n_classes


def train_probe(
    features: np.ndarray, labels: np.ndarray, task: str, tcfg: TrainConfig,
    val_features: np.ndarray | None = None, val_labels: np.ndarray | None = None,
    hidden: Sequence[int] = (512, 256), dropout: float = 0.3, n_classes: int | None = None,
) -> tuple[Mlp, History]:
    """Three-layer perceptron on frozen features, early-stopped on validation loss."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    out_dim = _check_labels(x, y, task, n_classes)
    if val_features is None:
        xv, yv = x, y
    else:
        xv, yv = np.asarray(val_features, dtype=np.float64), np.asarray(val_labels)
        if len(xv) != len(yv):
            raise ValueError("validation features and labels are misaligned")
    probe = build_probe(x.shape[1], out_dim, tcfg.seed, hidden, dropout)
    step = 0

    def run_epoch(epoch: int, lr: float) -> float:
        nonlocal step
        gen = rng_mod.stream(tcfg.seed, "batch", 2000, epoch)
        total = 0.0
        for b in _row_batches(len(x), tcfg.batch_size, gen):
            out, tape = forward(probe, x[b], "train", rng_mod.stream(tcfg.seed, "dropout", 2000, step))
            loss, g = probe_loss(out, y[b], task)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch + 1, step)
            sgd_step(probe, backward(probe, tape, g)[0], lr)
            total += loss * len(b)
            step += 1
        return total / len(x)

    def val_loss() -> float:
        return probe_loss(_embed_rows(probe, xv), yv, task)[0]

    return _early_stop_loop(run_epoch, val_loss, probe.copy, tcfg)


def config_dict(mcfg: ModelConfig | None = None, tcfg: TrainConfig | None = None) -> dict:
    out = {}
    if mcfg is not None:
        out.update(asdict(mcfg))
    if tcfg is not None:
        out.update(asdict(tcfg))
    return out
