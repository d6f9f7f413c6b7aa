"""Desk-scale experiments: single-image overfit and the compression-mode ablation sweep."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compression import MODES
from .config import ModelConfig, TrainConfig
from .flops import count_model
from .metrics import metrics
from .network import Model, forward, init_model, predict, recalibrate_batchnorm, train_step
from .synthetic import synthetic_sample


@dataclass
class OverfitReport:
    losses: list
    dsc: np.ndarray
    mean_dsc: float
    miou: float
    model: Model

    def to_text(self) -> str:
        lines = [f"step {i:4d}  loss {v:.6f}" for i, v in enumerate(self.losses)]
        lines.append("dsc " + " ".join(f"{d:.4f}" for d in self.dsc))
        lines.append(f"mean_dsc {self.mean_dsc:.4f}")
        lines.append(f"miou {self.miou:.4f}")
        return "\n".join(lines) + "\n"


def run_overfit(cfg: ModelConfig, train: TrainConfig = TrainConfig(), seed: int | None = None,
                log=None) -> OverfitReport:
    seed = cfg.seed if seed is None else seed
    img, mask = synthetic_sample(seed, cfg.height, cfg.width, cfg.num_classes)
    model = init_model(cfg, seed)
    losses = []
    for step in range(train.steps):
        model, value = train_step(model, img, mask, train.lr)
        losses.append(value)
        if log is not None:
            log(step, value)
    # one image: running statistics set to its batch statistics reproduce the training-mode output
    model = recalibrate_batchnorm(model, img)
    m = metrics(predict(model, img), mask, cfg.num_classes)
    return OverfitReport(losses, m["dsc"], m["mean_dsc"], m["miou"], model)


@dataclass
class AblationRow:
    mode: str
    tokens: list        # attended tokens m per stage (sample 0, first block)
    flops: int
    max_abs_diff: float


def ablation_sweep(cfg: ModelConfig, seed: int | None = None) -> list[AblationRow]:
    """Same weights and input under every compression mode, compared with mode=none."""
    seed = cfg.seed if seed is None else seed
    img, _ = synthetic_sample(seed, cfg.height, cfg.width, cfg.num_classes)
    base = init_model(cfg, seed)
    rows, reference = [], None
    for mode in MODES:
        mcfg = cfg.with_mode(mode)
        out = forward(Model(mcfg, base.params, base.buffers), img, trace=True)
        if reference is None:
            reference = out.logits.data
        tokens = []
        for s in range(1, 9):
            recs = [r for r in out.records if r.layer.startswith(f"stage{s}.") and r.sample == 0]
            tokens.append(recs[0].state.m if recs else 0)
        rows.append(AblationRow(mode, tokens, count_model(mcfg).total,
                                float(np.abs(out.logits.data - reference).max())))
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    head = f"{'mode':<16} {'tokens per stage (1..8)':<44} {'FLOPs':>14} {'max|diff|':>11}"
    lines = [head]
    for r in rows:
        toks = " ".join(f"{t:>4d}" for t in r.tokens)
        lines.append(f"{r.mode:<16} {toks:<44} {r.flops:>14,d} {r.max_abs_diff:>11.4g}")
    return "\n".join(lines) + "\n"
