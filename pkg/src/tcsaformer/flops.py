"""Analytic operation counts for the network.

Convention: one multiply-accumulate counts as one FLOP. Softmax, GELU and
normalization are counted as one op per element they touch, reported
separately under ``elementwise``. Bias additions and residual additions are
not counted. Multiply totals by two to compare with 2-ops-per-MAC figures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attention import effective_k
from .compression import canonical_mode, keep_count, merge_count
from .config import ModelConfig, StageConfig

CONVENTION = "1 MAC = 1 FLOP; softmax/GELU/norm = 1 op per element; biases and residual adds not counted"
OP_CLASSES = ("patch", "posconv", "attention", "compression", "ffn", "skip", "head", "elementwise")


def attention_terms(N: int, C: int, rho: float, rho_m: float, topk_ratio: float,
                    mode: str = "prune_and_merge", rho_is_prune_fraction: bool = False) -> dict:
    """Token counts and MAC terms of one compress -> top-k attention -> decompress pass."""
    mode = canonical_mode(mode)
    pruning = mode in ("prune_only", "prune_and_merge")
    merging = mode in ("merge_only", "prune_and_merge")
    n = keep_count(N, rho, rho_is_prune_fraction) if pruning else N
    r = merge_count(n, rho_m) if merging else 0
    m = n - r
    k = effective_k(m, topk_ratio)
    # pooled token: N*C adds; T = GAP(X) W1: C^2; X W2: N*C^2; S = (X W2) T^T: N*C
    scoring = (2 * N * C + C * C + N * C * C) if pruning else 0
    similarity = ((n + 1) // 2) * (n // 2) * C if r > 0 else 0
    return {
        "N": N, "n": n, "r": r, "m": m, "k": k,
        "projection": 3 * m * C * C,
        "relevance": m * m * C,
        "fusion": m * k * C,
        "scoring": scoring,
        "similarity": similarity,
    }


def count_attention(N: int, rho: float, rho_m: float, topk_ratio: float, C: int, head_dim: int,
                    mode: str = "prune_and_merge", rho_is_prune_fraction: bool = False) -> int:
    """MACs of compressed attention on N tokens, compression overhead included."""
    if C % head_dim:
        raise ValueError(f"{C} channels not divisible by head_dim {head_dim}")
    t = attention_terms(N, C, rho, rho_m, topk_ratio, mode, rho_is_prune_fraction)
    return t["projection"] + t["relevance"] + t["fusion"] + t["scoring"] + t["similarity"]


def count_ffn(N: int, C: int, kind: str = "dbffn") -> tuple[int, int]:
    """(MACs, elementwise ops) of one feed-forward network on N tokens."""
    if kind == "mlp":
        return 8 * N * C * C, 4 * N * C
    macs = (2 * N * C * C                     # expand C -> 2C
            + (9 + 49) * 2 * N * C            # stage-1 depthwise 3x3, 7x7 on 2C
            + (9 + 49) * 4 * N * C            # stage-2 depthwise 3x3, 7x7 on 4C
            + 2 * 4 * N * C * C               # two pointwise 4C -> C
            + 2 * N * C * C)                  # fuse 2C -> C
    elementwise = 4 * N * C + (C + 2 * C + C + C + C) * N   # GELU on 2 x 2C, five batchnorms
    return macs, elementwise


def count_block(h: int, w: int, stage: StageConfig, ffn: str = "dbffn",
                rho_is_prune_fraction: bool = False) -> dict:
    N, C = h * w, stage.channels
    t = attention_terms(N, C, stage.rho, stage.rho_m, stage.topk_ratio, stage.mode, rho_is_prune_fraction)
    ffn_macs, ffn_elem = count_ffn(N, C, ffn)
    return {
        "posconv": 9 * N * C,
        "attention": t["projection"] + t["relevance"] + t["fusion"],
        "compression": t["scoring"] + t["similarity"],
        "ffn": ffn_macs,
        "elementwise": 2 * N * C + stage.heads * t["m"] * t["k"] + ffn_elem,
    }


@dataclass
class FlopsReport:
    per_op: dict
    per_stage: dict
    total: int
    baseline_total: int
    tokens: dict = field(default_factory=dict)

    @property
    def reduction(self) -> float:
        return 1.0 - self.total / self.baseline_total

    def to_text(self) -> str:
        lines = [f"# {CONVENTION}", ""]
        width = max(len(k) for k in list(self.per_op) + list(self.per_stage) + ["baseline_total"])
        lines.append("per op class")
        lines += [f"  {k:<{width}}  {v:>16,d}" for k, v in self.per_op.items()]
        lines.append("per stage")
        lines += [f"  {k:<{width}}  {v:>16,d}" for k, v in self.per_stage.items()]
        lines.append("tokens (N -> n -> m, k)")
        lines += [f"  {k:<{width}}  {t['N']:>6d} -> {t['n']:>6d} -> {t['m']:>6d}, k={t['k']}"
                  for k, t in self.tokens.items()]
        lines += [f"  {'total':<{width}}  {self.total:>16,d}",
                  f"  {'baseline_total':<{width}}  {self.baseline_total:>16,d}",
                  f"  {'reduction':<{width}}  {100 * self.reduction:>15.2f}%"]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"op.{k} = {v}" for k, v in self.per_op.items()]
        lines += [f"stage.{k} = {v}" for k, v in self.per_stage.items()]
        for s, t in self.tokens.items():
            lines += [f"tokens.{s}.{key} = {t[key]}" for key in ("N", "n", "r", "m", "k")]
        lines += [f"total = {self.total}", f"baseline_total = {self.baseline_total}",
                  f"reduction_ppm = {round(1e6 * self.reduction)}"]
        return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = int(value)
    return out


def _count(cfg: ModelConfig):
    per_op = dict.fromkeys(OP_CLASSES, 0)
    per_stage: dict = {}
    tokens = {}
    ch = [s.channels for s in cfg.stages]
    H, W = cfg.height, cfg.width

    def bump(stage, cls, value):
        per_op[cls] += value
        per_stage[stage] = per_stage.get(stage, 0) + value

    for i, st in enumerate(cfg.stages):
        name = f"stage{i + 1}"
        h, w = cfg.stage_resolution(i)
        per_stage[name] = 0
        if i == 0:
            bump(name, "patch", h * w * 49 * cfg.in_channels * ch[0])
            bump(name, "elementwise", h * w * ch[0])
        elif i < 4:
            bump(name, "patch", h * w * 9 * ch[i - 1] * ch[i])
            bump(name, "elementwise", h * w * ch[i])
        elif i > 4:
            hp, wp = cfg.stage_resolution(i - 1)
            bump(name, "patch", hp * wp * ch[i - 1] * 4 * ch[i])
            bump(name, "elementwise", h * w * ch[i])
            bump(name, "skip", h * w * 2 * ch[i] * ch[i])
        block = count_block(h, w, st, cfg.ffn, cfg.rho_is_prune_fraction)
        for cls, v in block.items():
            bump(name, cls, st.depth * v)
        tokens[name] = {key: v for key, v in attention_terms(
            h * w, st.channels, st.rho, st.rho_m, st.topk_ratio, st.mode, cfg.rho_is_prune_fraction).items()
            if key in ("N", "n", "r", "m", "k")}
    h, w = cfg.stage_resolution(7)
    per_stage["head"] = 0
    bump("head", "patch", h * w * ch[0] * 16 * ch[0])
    bump("head", "elementwise", H * W * ch[0])
    bump("head", "head", H * W * ch[0] * cfg.num_classes)
    return per_op, per_stage, tokens


def count_model(cfg: ModelConfig) -> FlopsReport:
    """Whole-model counts at the configured resolution, with the mode=none baseline."""
    per_op, per_stage, tokens = _count(cfg)
    base_op, _, _ = _count(cfg.with_mode("none"))
    return FlopsReport(per_op, per_stage, sum(per_op.values()), sum(base_op.values()), tokens)
