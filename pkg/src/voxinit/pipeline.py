"""Two-step training: self-supervised initialization, then segmentation.

Step 1 trains the encoder/decoder trunk on masked & shuffled views of the
training volumes (order prediction + reconstruction). Step 2 copies the
trunk into a segmentation model and trains it with Dice + cross-entropy on
the same volumes.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from voxinit import checkpoint as ckpt_io
from voxinit import initzoo, nn, objectives, ops
from voxinit.autodiff import Tape, Tensor, backward
from voxinit.dataio import VolumeSample, normalize
from voxinit.model import SEG_HEADS, SSL_HEADS, HybridSegModel, ModelConfig, init_weights
from voxinit.optim import NumericalError, make_optimizer
from voxinit.transform import TransformConfig, make_masked_shuffled

log = logging.getLogger(__name__)


@dataclass
class Step1Config:
    epochs: int = 200
    lr: float = 1e-4
    mask_ratio: float = 0.40
    mask_patch: int = 4
    heads_used: tuple[int, ...] = (1, 2, 3, 4)
    optimizer: str = "adamw"
    weight_decay: float = 1e-5

    def __post_init__(self):
        self.heads_used = tuple(int(h) for h in self.heads_used)
        if self.epochs < 1:
            raise ValueError("step-1 epochs must be >= 1")
        if not self.heads_used:
            raise ValueError("step-1 needs at least one order-prediction head")


@dataclass
class Step2Config:
    epochs: int = 200
    lr: float = 1e-4
    init_source: str = "unetr-default"  # checkpoint path or init scheme name
    optimizer: str = "adamw"
    weight_decay: float = 1e-5
    val_every: int = 10
    dice_denominator: str = "squared"
    head_init: str = "unetr-default"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("step-2 epochs must be >= 1")


@dataclass
class RunConfig:
    step1: Step1Config = field(default_factory=Step1Config)
    step2: Step2Config = field(default_factory=Step2Config)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TransferReport:
    copied: list[str]
    skipped: list[str]
    new: list[str]


@dataclass
class Step1Result:
    history: list[objectives.LossReport]
    checkpoint: ckpt_io.Checkpoint


@dataclass
class Step2Result:
    losses: list[float]
    dice_rows: list[tuple[int, objectives.DiceReport]]
    checkpoint: ckpt_io.Checkpoint

    @property
    def final_dice(self) -> objectives.DiceReport | None:
        return self.dice_rows[-1][1] if self.dice_rows else None


def _batch(image: np.ndarray, dtype) -> Tensor:
    return Tensor(normalize(image)[None].astype(dtype), dtype=dtype)


def _params_for_step(model: HybridSegModel) -> dict[str, Tensor]:
    return dict(model.params)


def _check_loss(value: float, epoch: int, it: int, step: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"{step}: non-finite loss at epoch {epoch}, iteration {it}")


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_step1_csv(path, history: Sequence[objectives.LossReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_cls", "L_rec", "L_total"])
        for e, r in enumerate(history, 1):
            w.writerow([e, _fmt(r.L_cls), _fmt(r.L_rec), _fmt(r.L_total)])


def write_dice_csv(path, rows: Sequence[tuple[int, objectives.DiceReport]], J: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + [f"dice_c{j}" for j in range(1, J)] + ["mean_dice"])
        for epoch, rep in rows:
            w.writerow([epoch] + [_fmt(v) for v in rep.per_class] + [_fmt(rep.mean)])


def train_step1(dataset: Sequence[VolumeSample], model: HybridSegModel, cfg: Step1Config,
                seed: int = 0, csv_path=None, run_config: dict | None = None) -> Step1Result:
    """Self-supervised initialization; a fresh permutation and mask every iteration."""
    missing = [h for h in SSL_HEADS if h not in model.heads]
    if missing:
        raise ValueError(f"step 1 needs heads {SSL_HEADS}, model lacks {missing}")
    mcfg = model.cfg
    B = mcfg.n_subvolumes
    if B < 2:
        raise ValueError(f"step 1 needs at least 2 sub-volumes, got B={B}")
    if any(h < 1 or h > mcfg.m for h in cfg.heads_used):
        raise ValueError(f"heads_used {cfg.heads_used} outside 1..{mcfg.m}")
    tcfg = TransformConfig(B=B, mask_ratio=cfg.mask_ratio, mask_patch=cfg.mask_patch)
    params = _params_for_step(model)
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([seed, 1])
    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(2 + mcfg.m)
        order = rng.permutation(len(dataset))
        for it, idx in enumerate(order):
            x = normalize(dataset[idx].image)
            masked, perm, _, target = make_masked_shuffled(x, tcfg, rng)
            inp = Tensor(masked[None].astype(model.dtype), dtype=model.dtype)
            with Tape() as tape:
                logits, recon = model.forward_ssl(inp)
                l_cls = objectives.order_prediction_loss(logits, perm, cfg.heads_used)
                l_rec = objectives.reconstruction_loss(target[None].astype(model.dtype), recon)
                loss = objectives.ssl_loss(l_cls, l_rec)
            _check_loss(float(loss.data), epoch, it, "step 1")
            opt.zero_grad()
            backward(tape, loss, wrt=list(params.values()))
            opt.step()
            per_level = objectives.per_level_order_loss(logits, perm)
            sums += [float(l_cls.data), float(l_rec.data)] + per_level
        sums /= len(dataset)
        rep = objectives.LossReport(sums[0], sums[1], sums[0] + sums[1], list(sums[2:]))
        history.append(rep)
        log.info("step1 epoch %d: L_cls=%.4f L_rec=%.4f", epoch, rep.L_cls, rep.L_rec)
    if csv_path is not None:
        write_step1_csv(csv_path, history)
    rc = dict(run_config or {}, step1=asdict(cfg), seed=seed)
    return Step1Result(history, ckpt_io.from_model(model, rc, step="step1"))


def transfer_weights(source: ckpt_io.Checkpoint | dict, target: HybridSegModel) -> TransferReport:
    """Copy trunk (non-head) tensors from ``source`` into ``target``.

    Head tensors are never copied: source heads are reported as skipped and
    target heads keep their fresh initialization.
    """
    tensors = source.tensors if isinstance(source, ckpt_io.Checkpoint) else source
    copied, skipped = [], []
    for name, arr in tensors.items():
        if name.startswith("heads.") or name not in target.params:
            skipped.append(name)
            continue
        dst = target.params[name]
        if tuple(arr.shape) != dst.shape:
            raise ValueError(f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} vs model {dst.shape}")
        dst.data = np.array(arr, dtype=target.dtype)
        copied.append(name)
    new = [n for n in target.params if n not in copied]
    return TransferReport(copied, skipped, new)


def train_step2(train: Sequence[VolumeSample], model: HybridSegModel, cfg: Step2Config,
                seed: int = 0, val: Sequence[VolumeSample] | None = None, csv_path=None,
                loss_csv_path=None, run_config: dict | None = None,
                window: tuple[int, int, int] | None = None) -> Step2Result:
    """Supervised segmentation with Dice + CE; validation Dice every ``val_every`` epochs."""
    if "seg" not in model.heads:
        raise ValueError("step 2 needs a segmentation head")
    J = model.cfg.num_classes
    params = _params_for_step(model)
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([seed, 2])
    targets = [objectives.one_hot(s.labels, J, model.dtype) for s in train]
    losses, dice_rows = [], []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for it, idx in enumerate(rng.permutation(len(train))):
            x = _batch(train[idx].image, model.dtype)
            with Tape() as tape:
                logits = model.forward_seg(x)
                probs = nn.softmax(ops.reshape(logits, logits.shape[1:]), axis=0)
                loss = objectives.dice_ce_loss(targets[idx], probs, cfg.dice_denominator, check=False)
            _check_loss(float(loss.data), epoch, it, "step 2")
            opt.zero_grad()
            backward(tape, loss, wrt=list(params.values()))
            opt.step()
            total += float(loss.data)
        losses.append(total / len(train))
        if val and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            rep = evaluate(val, model, window=window).mean
            dice_rows.append((epoch, rep))
            log.info("step2 epoch %d: loss=%.4f val dice=%.2f", epoch, losses[-1], rep.mean)
    if csv_path is not None:
        write_dice_csv(csv_path, dice_rows, J)
    if loss_csv_path is not None:
        with open(loss_csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for e, v in enumerate(losses, 1):
                w.writerow([e, _fmt(v)])
    rc = dict(run_config or {}, step2=asdict(cfg), seed=seed)
    return Step2Result(losses, dice_rows, ckpt_io.from_model(model, rc, step="step2"))


def build_seg_model(mcfg: ModelConfig, cfg: Step2Config, seed: int) -> tuple[HybridSegModel, TransferReport | None]:
    """Fresh segmentation model, initialized from a scheme or a step-1 checkpoint."""
    source = cfg.init_source
    try:
        scheme = initzoo.canonical_scheme(source)
    except initzoo.InitSpecError:
        scheme = None
    if scheme is not None:
        return HybridSegModel(mcfg, SEG_HEADS, initzoo.InitSpec(scheme), seed=seed), None
    ck = ckpt_io.load(source)
    if ck.model_config:
        mcfg = ModelConfig.from_dict(ck.model_config)
    model = HybridSegModel(mcfg, SEG_HEADS, initzoo.InitSpec(cfg.head_init), seed=seed)
    return model, transfer_weights(ck, model)


# -- inference & evaluation -------------------------------------------------

def window_starts(n: int, w: int, overlap: float = 0.5) -> list[int]:
    """Window origins along one axis; the last window is clamped flush to the end."""
    if w > n:
        raise ValueError(f"window {w} exceeds volume extent {n}; use full-volume inference")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    stride = max(1, int(w * (1.0 - overlap)))
    starts = list(range(0, n - w + 1, stride))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def window_grid(spatial, window, overlap: float = 0.5) -> list[tuple[int, int, int]]:
    axes = [window_starts(n, w, overlap) for n, w in zip(spatial, window)]
    return list(itertools.product(*axes))


def sliding_window_logits(volume: np.ndarray, predict: Callable[[np.ndarray], np.ndarray] | HybridSegModel,
                          window, overlap: float = 0.5) -> np.ndarray:
    """Uniformly averaged window logits [J, H, W, D] for a [C, H, W, D] volume."""
    fn = predict.predict_logits if isinstance(predict, HybridSegModel) else predict
    spatial = volume.shape[1:]
    window = tuple(int(w) for w in window)
    acc = count = None
    for h, w, d in window_grid(spatial, window, overlap):
        sl = (slice(h, h + window[0]), slice(w, w + window[1]), slice(d, d + window[2]))
        out = np.asarray(fn(volume[(slice(None),) + sl]), dtype=np.float64)
        if acc is None:
            acc = np.zeros((out.shape[0],) + tuple(spatial))
            count = np.zeros(spatial)
        acc[(slice(None),) + sl] += out
        count[sl] += 1.0
    return acc / count


def sliding_window_infer(volume: np.ndarray, model, window=None, overlap: float = 0.5) -> np.ndarray:
    """Label volume [H, W, D] by argmax over averaged window logits."""
    if window is None:
        window = model.cfg.dims
    if tuple(window) == tuple(volume.shape[1:]):
        fn = model.predict_logits if isinstance(model, HybridSegModel) else model
        return np.argmax(fn(volume), axis=0)
    return np.argmax(sliding_window_logits(volume, model, window, overlap), axis=0)


@dataclass
class EvalResult:
    per_sample: dict[str, objectives.DiceReport]
    mean: objectives.DiceReport

    def write(self, csv_path=None, json_path=None, J: int | None = None) -> None:
        J = J or len(self.mean.per_class) + 1
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["sample"] + [f"dice_c{j}" for j in range(1, J)] + ["mean_dice"])
                for sid, rep in self.per_sample.items():
                    w.writerow([sid] + [_fmt(v) for v in rep.per_class] + [_fmt(rep.mean)])
                w.writerow(["mean"] + [_fmt(v) for v in self.mean.per_class] + [_fmt(self.mean.mean)])
        if json_path is not None:
            payload = {"per_sample": {k: asdict(v) for k, v in self.per_sample.items()},
                       "mean": asdict(self.mean)}
            Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def evaluate(samples: Sequence[VolumeSample], model, window=None, overlap: float = 0.5,
             J: int | None = None) -> EvalResult:
    """Per-sample and class-averaged Dice of sliding-window predictions.

    ``model`` may also be a callable returning label volumes directly.
    """
    J = J or model.cfg.num_classes
    reports = {}
    for s in sorted(samples, key=lambda s: s.id):
        if isinstance(model, HybridSegModel):
            pred = sliding_window_infer(normalize(s.image), model, window, overlap)
        else:
            pred = model(s)
        reports[s.id] = objectives.dice_metric(pred, s.labels, J)
    per_class = np.mean([r.per_class for r in reports.values()], axis=0)
    mean = objectives.DiceReport([float(v) for v in per_class], float(np.mean(per_class)))
    return EvalResult(reports, mean)


def fresh_ssl_model(mcfg: ModelConfig, scheme: str = "unetr-default", seed: int = 0) -> HybridSegModel:
    return HybridSegModel(mcfg, SSL_HEADS, initzoo.InitSpec(scheme), seed=seed)


def reinit(model: HybridSegModel, scheme: str, seed: int) -> None:
    init_weights(model, initzoo.InitSpec(scheme), seed)
