"""Training, evaluation and the ablation grid."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from decimal import Decimal
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .ctc import ctc_loss, greedy_decode, min_steps
from .dataset import DEFAULT_CHARS, Alphabet, DataError, DatasetIndex, load_manifest, read_image
from .metrics import EvalReport, corpus_scores
from .network import Network, NetworkConfig, build_model
from .preprocessing import AugmentParams, CanvasSpec, make_batch, prepare_image, strip_margins
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "split", "loss_main", "loss_shortcut", "cer", "wer", "lr", "wall_seconds"]


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    preset: str = "tiny"
    base_lr: float = 0.001
    total_epochs: int = 240
    milestones: tuple[int, ...] = (120, 180)
    decay: float = 0.1
    batch_size: int = 16
    shortcut_weight: float = 0.1
    seed: int = 0
    augment: AugmentParams = field(default_factory=AugmentParams)
    flatten: str = "maxpool"
    shortcut: bool = True
    preprocessing: str = "pad"  # or "resize"
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    out_dir: str = "runs/default"
    alphabet: Optional[str] = None
    grad_clip: Optional[float] = None
    eval_train: bool = True
    # single-threaded kernels, wall time logged as 0 so logs are reproducible
    deterministic: bool = False
    threads: Optional[int] = None
    network: dict = field(default_factory=dict)

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if isinstance(self.augment, dict):
            self.augment = AugmentParams(**self.augment)
        if self.shortcut_weight < 0:
            raise ConfigError(f"shortcut weight must be >= 0, got {self.shortcut_weight}")
        if self.total_epochs <= 0:
            raise ConfigError("total_epochs must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.total_epochs:
            raise ConfigError("milestones must be smaller than total_epochs")
        if self.preprocessing not in ("pad", "resize"):
            raise ConfigError(f"preprocessing must be 'pad' or 'resize', got {self.preprocessing!r}")
        if self.flatten not in ("maxpool", "concat"):
            raise ConfigError(f"flatten must be 'maxpool' or 'concat', got {self.flatten!r}")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")

    def scaled(self, total_epochs: int) -> "TrainConfig":
        """Same config with milestones kept at 50% and 75% of the run."""
        # short runs may collapse both fractions onto one epoch, or onto epoch 0
        ms = tuple(sorted({int(total_epochs * f) for f in (0.5, 0.75)} - {0}))
        return dataclasses.replace(self, total_epochs=total_epochs, milestones=ms)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def network_config(self, n_classes: int) -> NetworkConfig:
        overrides = dict(self.network)
        overrides.setdefault("flatten", self.flatten)
        overrides.setdefault("shortcut", self.shortcut)
        overrides["n_classes"] = n_classes
        try:
            return NetworkConfig.preset(self.preset, **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Multistep decay: base_lr times decay for every milestone already reached."""
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    # decimal product so 1e-3 * 0.1**2 is exactly 1e-5
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.decay)) ** passed)


def combine_losses(main, shortcut, weight: float) -> Tensor:
    """``main + weight * shortcut`` on scalar losses (Tensors or plain numbers)."""
    if weight < 0:
        raise ConfigError("shortcut weight must be nonnegative")
    main = main if isinstance(main, Tensor) else Tensor(np.float64(main))
    if shortcut is None:
        return main
    shortcut = shortcut if isinstance(shortcut, Tensor) else Tensor(np.float64(shortcut))
    return T.add(main, T.mul(shortcut, weight))


def multitask_loss(main_logits: Tensor, shortcut_logits: Optional[Tensor], targets, weight: float) -> Tensor:
    """Main CTC loss plus ``weight`` times the shortcut CTC loss."""
    if weight < 0:
        raise ConfigError("shortcut weight must be nonnegative")
    main = ctc_loss(main_logits, targets)
    if shortcut_logits is None:
        return main
    if shortcut_logits.shape != main_logits.shape:
        raise ValueError(f"shortcut logits {shortcut_logits.shape} do not match main logits {main_logits.shape}")
    return combine_losses(main, ctc_loss(shortcut_logits, targets), weight)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        adam_step(params, self, lr)


def adam_step(params: dict[str, Tensor], state: Adam, lr: float) -> None:
    """One bias-corrected Adam update on every parameter that has a gradient."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# ---------------------------------------------------------------- data plumbing

def resolve_alphabet(cfg: TrainConfig, texts: Sequence[str]) -> Alphabet:
    if cfg.alphabet is not None:
        return Alphabet(cfg.alphabet)
    default = Alphabet(DEFAULT_CHARS)
    if all(not default.missing(t) for t in texts):
        return default
    return Alphabet.from_texts(texts)


def load_split(path, alphabet: Optional[Alphabet], split: str) -> tuple[DatasetIndex, list[np.ndarray]]:
    index = load_manifest(path, alphabet, split=split)
    images = [read_image(index.image_path(e)) for e in index.entries]
    return index, images


def predict(net: Network, images: Sequence[np.ndarray], spec: CanvasSpec, alphabet: Alphabet,
            resize_only: bool = False, batch_size: int = 16) -> list[str]:
    """Eval-mode greedy transcripts with margin spaces stripped."""
    was_training = net.training
    net.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                chunk = images[start : start + batch_size]
                x = np.stack([prepare_image(img, spec, "eval", resize_only=resize_only) for img in chunk])
                logits, _ = net.forward(x[:, None].astype(net.dtype))
                out.extend(strip_margins(greedy_decode(l, alphabet)) for l in logits.data)
    finally:
        net.training = was_training
    return out


def eval_loss(net: Network, images, texts, spec, alphabet, resize_only: bool, batch_size: int) -> float:
    """Mean main-branch CTC loss in eval mode, margins included, infeasible samples skipped."""
    was_training = net.training
    net.eval()
    total, count = 0.0, 0
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                pairs = [
                    (img, t)
                    for img, t in zip(images[start : start + batch_size], texts[start : start + batch_size])
                    if min_steps(alphabet.encode(" " + t + " ")) <= net.cfg.seq_len
                ]
                if not pairs:
                    continue
                batch = make_batch(pairs, spec, alphabet, "train", None, resize_only=resize_only, dtype=net.dtype)
                logits, _ = net.forward(batch.images)
                total += float(ctc_loss(logits, batch.labels).data) * len(pairs)
                count += len(pairs)
    finally:
        net.training = was_training
    return total / count if count else float("nan")


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    out_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path
    metrics_path: Path
    history: list[dict]
    skipped: int = 0


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _digest(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def _read_metrics(path: Path) -> list[dict]:
    rows = []
    with path.open(newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"epoch": int(r["epoch"]), "split": r["split"]}
            for k in METRIC_FIELDS[2:]:
                row[k] = float(r[k]) if r[k] != "" else None
            rows.append(row)
    return rows


def train(cfg: TrainConfig, resume: Optional[str] = None) -> TrainResult:
    """Run the full schedule, writing last.ckpt, best.ckpt and metrics.csv to ``cfg.out_dir``."""
    if cfg.train_manifest is None:
        raise ConfigError("train_manifest is required")
    threads = 1 if cfg.deterministic else cfg.threads
    with threadpool_limits(limits=threads):
        return _train(cfg, resume)


def _train(cfg: TrainConfig, resume: Optional[str]) -> TrainResult:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pre_index = load_manifest(cfg.train_manifest)
    alphabet = resolve_alphabet(cfg, pre_index.texts())
    index, images = load_split(cfg.train_manifest, alphabet, "train")
    texts = index.texts()
    val = None
    if cfg.val_manifest:
        vindex, vimages = load_split(cfg.val_manifest, alphabet, "val")
        val = (vimages, vindex.texts())

    net_cfg = cfg.network_config(len(alphabet))
    spec = CanvasSpec(*net_cfg.canvas)
    resize_only = cfg.preprocessing == "resize"
    opt = Adam()
    history: list[dict] = []
    start_epoch = 0
    best_cer = float("inf")
    if resume:
        net, header = load_checkpoint(resume, opt)
        if net.cfg != net_cfg:
            raise ConfigError("checkpoint network config does not match the training config")
        start_epoch = header["epoch"] + 1
        best_cer = header.get("best_cer", best_cer)
        if (out / "metrics.csv").exists():
            history = [r for r in _read_metrics(out / "metrics.csv") if r["epoch"] < start_epoch]
    else:
        net = build_model(net_cfg, cfg.seed)

    # samples whose margin-padded target cannot fit in W/8 steps
    feasible = []
    skipped = 0
    for i, t in enumerate(texts):
        if min_steps(alphabet.encode(" " + t + " ")) > net_cfg.seq_len:
            skipped += 1
            log.warning("skipping sample %d (%r): target too long for %d steps", i, t, net_cfg.seq_len)
        else:
            feasible.append(i)
    if not feasible:
        raise DataError("no training sample fits the sequence length of the network")

    weight = cfg.shortcut_weight
    header_extra = {"alphabet_tokens": len(alphabet)}
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.total_epochs):
        lr = lr_schedule(epoch, cfg)
        net.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(feasible)
        sum_main = sum_aux = 0.0
        n_seen = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = [int(i) for i in order[start : start + cfg.batch_size]]
            batch = make_batch(
                [(images[i], texts[i]) for i in idx], spec, alphabet, "train", cfg.augment,
                seeds=[[cfg.seed, epoch, i] for i in idx], resize_only=resize_only, dtype=net.dtype,
            )
            main, aux = net.forward(batch.images, with_shortcut=net.has_shortcut)
            main_loss = ctc_loss(main, batch.labels)
            loss = main_loss
            aux_val = None
            if aux is not None:
                aux_loss = ctc_loss(aux, batch.labels)
                aux_val = float(aux_loss.data)
                loss = combine_losses(main_loss, aux_loss, weight)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            net.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                clip_gradients(list(net.params.values()), cfg.grad_clip)
            adam_step(net.params, opt, lr)
            sum_main += float(main_loss.data) * len(idx)
            if aux_val is not None:
                sum_aux += aux_val * len(idx)
            n_seen += len(idx)

        wall = 0.0 if cfg.deterministic else round(time.perf_counter() - t0, 3)
        row = {"epoch": epoch, "split": "train", "loss_main": sum_main / n_seen,
               "loss_shortcut": sum_aux / n_seen if net.has_shortcut else None,
               "cer": None, "wer": None, "lr": lr, "wall_seconds": wall}
        if cfg.eval_train:
            rep = corpus_scores(texts, predict(net, images, spec, alphabet, resize_only, cfg.batch_size))
            row["cer"], row["wer"] = rep.cer, rep.wer
        history.append(row)
        select_cer = row["cer"]
        if val is not None:
            vimages, vtexts = val
            rep = corpus_scores(vtexts, predict(net, vimages, spec, alphabet, resize_only, cfg.batch_size))
            vloss = eval_loss(net, vimages, vtexts, spec, alphabet, resize_only, cfg.batch_size)
            history.append({"epoch": epoch, "split": "val", "loss_main": vloss, "loss_shortcut": None,
                            "cer": rep.cer, "wer": rep.wer, "lr": lr, "wall_seconds": wall})
            select_cer = rep.cer
        log.info("epoch %d lr %.2e loss %.4f cer %s", epoch, lr, row["loss_main"], _fmt(select_cer))

        _write_metrics(out / "metrics.csv", history)
        meta = dict(header_extra, history_digest=_digest(history))
        if select_cer is not None and select_cer < best_cer:
            best_cer = select_cer
            save_checkpoint(out / "best.ckpt", net, "".join(alphabet.chars), cfg.to_dict(), opt, epoch,
                            dict(meta, best_cer=best_cer))
        save_checkpoint(out / "last.ckpt", net, "".join(alphabet.chars), cfg.to_dict(), opt, epoch,
                        dict(meta, best_cer=best_cer))
    if not (out / "best.ckpt").exists() and (out / "last.ckpt").exists():
        (out / "best.ckpt").write_bytes((out / "last.ckpt").read_bytes())
    return TrainResult(out, out / "last.ckpt", out / "best.ckpt", out / "metrics.csv", history, skipped)


# ---------------------------------------------------------------- evaluation

def _checkpoint_context(header: dict) -> tuple[Alphabet, CanvasSpec, bool]:
    alphabet = Alphabet(header["alphabet"])
    spec = CanvasSpec(*header["network"]["canvas"])
    resize_only = header.get("train", {}).get("preprocessing", "pad") == "resize"
    return alphabet, spec, resize_only


def evaluate_network(net: Network, header: dict, index: DatasetIndex) -> tuple[EvalReport, list[str]]:
    alphabet, spec, resize_only = _checkpoint_context(header)
    for lineno, e in enumerate(index.entries, start=1):
        bad = alphabet.missing(e.text)
        if bad:
            raise DataError(f"manifest record {lineno}: character(s) {', '.join(map(repr, bad))} not in checkpoint alphabet")
    images = [read_image(index.image_path(e)) for e in index.entries]
    hyps = predict(net, images, spec, alphabet, resize_only)
    return corpus_scores(index.texts(), hyps), hyps


def evaluate(checkpoint, manifest, strip_shortcut: bool = False) -> EvalReport:
    """Greedy-decode a manifest with a checkpoint (eval mode, no shortcut) and score it."""
    net, header = load_checkpoint(checkpoint)
    if strip_shortcut:
        net.strip_shortcut()
    index = load_manifest(manifest)
    return evaluate_network(net, header, index)[0]


def decode_image(checkpoint, image_path) -> str:
    net, header = load_checkpoint(checkpoint)
    alphabet, spec, resize_only = _checkpoint_context(header)
    return predict(net, [read_image(image_path)], spec, alphabet, resize_only)[0]


# ---------------------------------------------------------------- ablation

ABLATION_FIELDS = ["preprocessing", "flattening", "shortcut", "train_cer", "train_wer", "val_cer", "val_wer"]


def ablation_grid() -> list[tuple[str, str, bool]]:
    """Cells in published ablation-table row order."""
    return [(p, f, s) for p in ("resize", "pad") for f in ("concat", "maxpool") for s in (False, True)]


def ablate(cfg: TrainConfig, out_dir=None) -> list[dict]:
    """Train every grid cell with the same seed and write ablation.csv."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for prep, flat, short in ablation_grid():
        name = f"{prep}-{flat}-{'shortcut' if short else 'plain'}"
        cell = dataclasses.replace(cfg, preprocessing=prep, flatten=flat, shortcut=short,
                                   out_dir=str(out / "cells" / name))
        result = train(cell)
        net, header = load_checkpoint(result.last_checkpoint)
        row = {"preprocessing": "padded" if prep == "pad" else "resized",
               "flattening": "max-pooling" if flat == "maxpool" else "concatenation",
               "shortcut": "yes" if short else "no"}
        rep, _ = evaluate_network(net, header, load_manifest(cfg.train_manifest))
        row["train_cer"], row["train_wer"] = rep.cer, rep.wer
        row["val_cer"] = row["val_wer"] = None
        if cfg.val_manifest:
            rep, _ = evaluate_network(net, header, load_manifest(cfg.val_manifest))
            row["val_cer"], row["val_wer"] = rep.cer, rep.wer
        rows.append(row)
        log.info("ablation cell %s: train CER %.2f", name, row["train_cer"])
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in ABLATION_FIELDS])
    return rows
