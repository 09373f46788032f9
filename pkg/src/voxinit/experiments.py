"""Desk-scale experiments: learned vs default initialization, and ablations.

Every run writes its own metrics CSVs and contributes one row to a summary
CSV. Epoch totals (step 1 + step 2) are recorded next to each score so equal
budgets can be checked from the file alone.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from voxinit import dataio, initzoo
from voxinit.model import SEG_HEADS, HybridSegModel, ModelConfig
from voxinit.pipeline import (Step1Config, Step2Config, fresh_ssl_model, train_step1, train_step2,
                              transfer_weights)

log = logging.getLogger(__name__)

HEAD_SUBSETS = ((4,), (3, 4), (2, 3, 4), (1, 2, 3, 4))
MASK_RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8)


@dataclass
class DeskSetup:
    """Dataset and model shape shared by all arms of an experiment."""

    n_train: int = 10
    n_val: int = 4
    dims: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 4
    feature_size: int = 4
    lr1: float = 1e-4
    lr2: float = 1e-4
    val_every: int = 10

    def model_config(self) -> ModelConfig:
        return ModelConfig(dims=self.dims, num_classes=self.num_classes, feature_size=self.feature_size)

    def dataset(self, seed: int) -> tuple[list, list]:
        spec = dataio.SynthSpec.for_classes(dims=self.dims, num_classes=self.num_classes, seed=seed)
        samples = dataio.generate_dataset(spec, self.n_train + self.n_val)
        return samples[:self.n_train], samples[self.n_train:]


@dataclass
class RunRow:
    seed: int
    arm: str
    s1_epochs: int
    s2_epochs: int
    total_epochs: int
    mean_dice: float
    per_class: list[float] = field(default_factory=list)
    heads_used: str = ""
    mask_ratio: float | None = None
    final_l_cls: float | None = None
    final_l_rec: float | None = None
    seconds: float = 0.0


def run_arm(setup: DeskSetup, seed: int, arm: str, s1_epochs: int, s2_epochs: int, out_dir,
            heads_used: Sequence[int] = (1, 2, 3, 4), mask_ratio: float = 0.4, mask_patch: int = 4,
            data=None) -> RunRow:
    """One arm: optional self-supervised step, then segmentation training.

    ``s1_epochs == 0`` means the segmentation model starts from the
    unetr-default scheme.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = data if data is not None else setup.dataset(seed)
    mcfg = setup.model_config()
    tag = f"{arm}_seed{seed}"
    t0 = time.perf_counter()
    seg = HybridSegModel(mcfg, SEG_HEADS, initzoo.InitSpec("unetr-default"), seed=seed)
    l_cls = l_rec = None
    if s1_epochs > 0:
        ssl = fresh_ssl_model(mcfg, seed=seed)
        cfg1 = Step1Config(epochs=s1_epochs, lr=setup.lr1, mask_ratio=mask_ratio,
                           mask_patch=mask_patch, heads_used=tuple(heads_used))
        r1 = train_step1(train, ssl, cfg1, seed=seed, csv_path=out / f"{tag}_step1.csv")
        transfer_weights(r1.checkpoint, seg)
        l_cls, l_rec = r1.history[-1].L_cls, r1.history[-1].L_rec
    cfg2 = Step2Config(epochs=s2_epochs, lr=setup.lr2, val_every=setup.val_every)
    r2 = train_step2(train, seg, cfg2, seed=seed, val=val, csv_path=out / f"{tag}_dice.csv")
    rep = r2.final_dice
    row = RunRow(seed, arm, s1_epochs, s2_epochs, s1_epochs + s2_epochs, rep.mean, list(rep.per_class),
                 ",".join(str(h) for h in heads_used) if s1_epochs else "", mask_ratio if s1_epochs else None,
                 l_cls, l_rec, time.perf_counter() - t0)
    log.info("%s: mean dice %.2f (%.0f s)", tag, row.mean_dice, row.seconds)
    return row


SUMMARY_FIELDS = ("seed", "arm", "s1_epochs", "s2_epochs", "total_epochs", "heads_used", "mask_ratio",
                  "final_l_cls", "final_l_rec", "mean_dice")


def write_summary(path, rows: Sequence[RunRow]) -> None:
    """One row per run. Wall-clock time is left out so reruns compare byte for byte."""
    def fmt(v):
        if v is None:
            return ""
        return f"{v:.6f}" if isinstance(v, float) else str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            d = asdict(r)
            w.writerow([fmt(d[k]) for k in SUMMARY_FIELDS])


@dataclass
class Comparison:
    rows: list[RunRow]

    def mean(self, arm: str) -> float:
        return float(np.mean([r.mean_dice for r in self.rows if r.arm == arm]))

    @property
    def margin(self) -> float:
        return self.mean("learned") - self.mean("default")


def compare_initializations(out_dir, seeds: Sequence[int] = (0, 1, 2), setup: DeskSetup | None = None,
                            s1_epochs: int = 50, s2_epochs: int = 150,
                            baseline_epochs: int = 200) -> Comparison:
    """Learned initialization (step 1 then step 2) against unetr-default + step 2 at equal total epochs."""
    setup = setup or DeskSetup()
    if s1_epochs + s2_epochs != baseline_epochs:
        raise ValueError(f"unequal budgets: {s1_epochs}+{s2_epochs} vs {baseline_epochs}")
    rows = []
    for seed in seeds:
        data = setup.dataset(seed)
        rows.append(run_arm(setup, seed, "default", 0, baseline_epochs, out_dir, data=data))
        rows.append(run_arm(setup, seed, "learned", s1_epochs, s2_epochs, out_dir, data=data))
    write_summary(Path(out_dir) / "comparison.csv", rows)
    return Comparison(rows)


def head_subset_ablation(out_dir, seed: int = 0, setup: DeskSetup | None = None,
                         subsets=HEAD_SUBSETS, s1_epochs: int = 50, s2_epochs: int = 150) -> list[RunRow]:
    setup = setup or DeskSetup()
    data = setup.dataset(seed)
    rows = [run_arm(setup, seed, "heads_" + "".join(map(str, hs)), s1_epochs, s2_epochs, out_dir,
                    heads_used=hs, data=data) for hs in subsets]
    write_summary(Path(out_dir) / "head_subsets.csv", rows)
    return rows


def mask_ratio_sweep(out_dir, seed: int = 0, setup: DeskSetup | None = None, ratios=MASK_RATIOS,
                     s1_epochs: int = 50, s2_epochs: int = 150) -> list[RunRow]:
    setup = setup or DeskSetup()
    data = setup.dataset(seed)
    rows = [run_arm(setup, seed, f"mask_{int(round(r * 100)):02d}", s1_epochs, s2_epochs, out_dir,
                    mask_ratio=r, data=data) for r in ratios]
    write_summary(Path(out_dir) / "mask_ratios.csv", rows)
    return rows
