"""Stage and model configuration, defaults, and the ``key = value`` config file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .compression import canonical_mode

ENCODER_CHANNELS = (64, 128, 256, 512)
KEEP_RATIOS = (0.5, 0.4, 0.3, 0.1)
MERGE_RATIOS = (0.3, 0.2, 0.1, 0.1)
DEPTHS = (2, 2, 8, 1, 1, 8, 2, 2)
TOPK_RATIO = 1 / 8
HEAD_DIM = 32


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    channels: int
    depth: int
    rho: float = 0.5
    rho_m: float = 0.3
    topk_ratio: float = TOPK_RATIO
    head_dim: int = HEAD_DIM
    mode: str = "prune_and_merge"

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if self.channels % self.head_dim:
            raise ConfigError(f"channels {self.channels} not divisible by head_dim {self.head_dim}")
        if self.depth < 0:
            raise ConfigError(f"negative depth {self.depth}")

    @property
    def heads(self) -> int:
        return self.channels // self.head_dim


@dataclass(frozen=True)
class ModelConfig:
    """Whole-network wiring: stages 1-4 encode, 5-8 decode (stage i mirrors 9 - i)."""

    stages: tuple
    height: int = 224
    width: int = 224
    num_classes: int = 9
    in_channels: int = 3
    seed: int = 0
    ffn: str = "dbffn"
    rho_is_prune_fraction: bool = False
    unscaled_attention: bool = False
    cosine_similarity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if len(self.stages) != 8:
            raise ConfigError(f"need 8 stage configs, got {len(self.stages)}")
        if self.height % 32 or self.width % 32:
            raise ConfigError(f"input {self.height}x{self.width} must be divisible by 32")
        ch = [s.channels for s in self.stages]
        for i in range(3):
            if ch[i + 1] != 2 * ch[i]:
                raise ConfigError(f"encoder stage {i + 2} must double stage {i + 1} channels")
        for i in range(4, 8):
            if ch[i] != ch[7 - i]:
                raise ConfigError(f"decoder stage {i + 1} channels {ch[i]} must mirror stage {8 - i} ({ch[7 - i]})")
        if self.ffn not in ("dbffn", "mlp"):
            raise ConfigError(f"unknown ffn {self.ffn!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")

    @property
    def embed_dim(self) -> int:
        return self.stages[0].channels

    def stage_resolution(self, i: int) -> tuple[int, int]:
        """(h, w) of stage i (0-based)."""
        div = 4 * 2 ** (i if i < 4 else 7 - i)
        return self.height // div, self.width // div

    def with_mode(self, mode: str) -> "ModelConfig":
        return dataclasses.replace(self, stages=tuple(dataclasses.replace(s, mode=mode) for s in self.stages))

    def with_topk_ratio(self, ratio: float) -> "ModelConfig":
        return dataclasses.replace(self, stages=tuple(dataclasses.replace(s, topk_ratio=ratio) for s in self.stages))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    steps: int = 300


def mirrored_stages(channels, depths, rhos, rho_ms, topk_ratio=TOPK_RATIO, head_dim=HEAD_DIM,
                    mode="prune_and_merge") -> tuple:
    """Eight stages where decoder stage i reuses encoder stage 9 - i's ratios and channels."""
    enc = list(range(4)) + [3, 2, 1, 0]
    return tuple(StageConfig(channels[j], depths[i], rhos[j], rho_ms[j], topk_ratio, head_dim, mode)
                 for i, j in enumerate(enc))


def default_config(height: int = 224, width: int = 224, num_classes: int = 9, **kw) -> ModelConfig:
    stages = mirrored_stages(ENCODER_CHANNELS, DEPTHS, KEEP_RATIOS, MERGE_RATIOS)
    return ModelConfig(stages, height, width, num_classes, **kw)


def toy_config(height: int = 64, width: int = 64, num_classes: int = 3, **kw) -> ModelConfig:
    stages = mirrored_stages((16, 32, 64, 128), (1, 1, 2, 1, 1, 2, 1, 1), KEEP_RATIOS, MERGE_RATIOS,
                             head_dim=16)
    return ModelConfig(stages, height, width, num_classes, **kw)


# ---------------------------------------------------------------------------
# config file

_STAGE_KEYS = {"channels": int, "depth": int, "rho": float, "rho_m": float,
               "lambda": float, "head_dim": int, "mode": str}
_MODEL_KEYS = {"height": int, "width": int, "num_classes": int, "in_channels": int, "seed": int,
               "ffn": str, "rho_is_prune_fraction": bool, "unscaled_attention": bool,
               "cosine_similarity": bool}
_GLOBAL_STAGE_KEYS = {"embed_dim": int, "mode": str, "lambda": float, "head_dim": int}
_TRAIN_KEYS = {"train.lr": float, "train.steps": int}


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is float:
            return float(Fraction(raw))
        if kind is int:
            return int(raw)
        return raw
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _stage_key(key: str):
    parts = key.split(".")
    if len(parts) != 3 or not parts[1].startswith("stage"):
        return None
    try:
        idx = int(parts[1][5:])
    except ValueError:
        return None
    side, field_name = parts[0], parts[2]
    if side == "encoder" and 1 <= idx <= 4 or side == "decoder" and 5 <= idx <= 8:
        if field_name in _STAGE_KEYS:
            return idx - 1, field_name
    return None


def parse_config_text(text: str, base: ModelConfig | None = None, source: str = "<config>"):
    """Apply ``key = value`` lines onto ``base`` (default config). Returns (ModelConfig, TrainConfig)."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if (key not in _MODEL_KEYS and key not in _GLOBAL_STAGE_KEYS and key not in _TRAIN_KEYS
                and _stage_key(key) is None):
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        entries[key] = value

    cfg = base or default_config()
    model_kw = {k: _convert(k, v, _MODEL_KEYS[k]) for k, v in entries.items() if k in _MODEL_KEYS}
    stages = [dataclasses.asdict(s) for s in cfg.stages]
    if "embed_dim" in entries:
        c = _convert("embed_dim", entries["embed_dim"], int)
        for i, mult in enumerate((1, 2, 4, 8, 8, 4, 2, 1)):
            stages[i]["channels"] = c * mult
    for key in ("mode", "lambda", "head_dim"):
        if key in entries:
            val = _convert(key, entries[key], _GLOBAL_STAGE_KEYS[key])
            for s in stages:
                s["topk_ratio" if key == "lambda" else key] = val
    for key, value in entries.items():
        sk = _stage_key(key)
        if sk is None:
            continue
        idx, name = sk
        stages[idx]["topk_ratio" if name == "lambda" else name] = _convert(key, value, _STAGE_KEYS[name])
    try:
        model = dataclasses.replace(cfg, stages=tuple(StageConfig(**s) for s in stages), **model_kw)
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from None
    train = TrainConfig(**{k.split(".", 1)[1]: _convert(k, v, _TRAIN_KEYS[k])
                           for k, v in entries.items() if k in _TRAIN_KEYS})
    return model, train


def load_config(path, base: ModelConfig | None = None):
    path = Path(path)
    return parse_config_text(path.read_text(), base, source=str(path))


def config_to_text(cfg: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = [f"{k} = {str(getattr(cfg, k)).lower() if isinstance(getattr(cfg, k), bool) else getattr(cfg, k)}"
             for k in _MODEL_KEYS]
    for i, s in enumerate(cfg.stages):
        side = "encoder" if i < 4 else "decoder"
        for name in _STAGE_KEYS:
            val = getattr(s, "topk_ratio" if name == "lambda" else name)
            lines.append(f"{side}.stage{i + 1}.{name} = {val}")
    if train is not None:
        lines += [f"train.lr = {train.lr}", f"train.steps = {train.steps}"]
    return "\n".join(lines) + "\n"
