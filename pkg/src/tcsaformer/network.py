"""Transformer block and the U-shaped segmentation network.

Wiring for an H x W image with base width C:

    embed (H/4, C) -> stage1 -> merge -> stage2 -> merge -> stage3 -> merge -> stage4
    -> stage5 -> expand x2, fuse stage3 skip -> stage6 -> expand x2, fuse stage2 skip
    -> stage7 -> expand x2, fuse stage1 skip -> stage8 -> expand x4 -> 1x1 head
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionParams, AttentionTrace, dense_attention, tksa
from .compression import CompressionState, compress
from .config import ModelConfig, StageConfig
from .dbffn import dbffn_forward, init_dbffn, init_mlp, mlp_forward
from .decompression import decompress
from .params import ParamBuilder, Scope, wrap
from .tensor import Tensor

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    params: dict
    buffers: dict


@dataclass
class LayerRecord:
    layer: str
    sample: int
    state: CompressionState
    attention: Optional[AttentionTrace]


@dataclass
class SegmentationOutput:
    logits: Tensor
    records: list = field(default_factory=list)

    @property
    def states(self) -> list:
        return [r.state for r in self.records]

    @property
    def traces(self) -> list:
        return [r.attention for r in self.records]


# ---------------------------------------------------------------------------
# initialization


def init_block(pb: ParamBuilder, prefix: str, C: int, ffn: str = "dbffn") -> None:
    pb.depthwise(f"{prefix}.pos", C, 3)
    pb.layernorm(f"{prefix}.ln1", C)
    for name in ("w1", "w2", "wq", "wk", "wv"):
        pb.weight(f"{prefix}.attn.{name}", (C, C))
    pb.layernorm(f"{prefix}.ln2", C)
    if ffn == "dbffn":
        init_dbffn(pb, f"{prefix}.ffn", C)
    else:
        init_mlp(pb, f"{prefix}.ffn", C)


def init_model(config: ModelConfig, seed: int | None = None) -> Model:
    pb = ParamBuilder(np.random.default_rng(config.seed if seed is None else seed))
    ch = [s.channels for s in config.stages]
    C = config.embed_dim
    pb.conv("embed.conv", 7, config.in_channels, C)
    pb.layernorm("embed.norm", C)
    for i in (1, 2, 3):
        pb.conv(f"merge{i + 1}.conv", 3, ch[i - 1], ch[i])
        pb.layernorm(f"merge{i + 1}.norm", ch[i])
    for s, st in enumerate(config.stages, 1):
        for j in range(st.depth):
            init_block(pb, f"stage{s}.block{j}", st.channels, config.ffn)
    for s in (5, 6, 7):
        cin, cout = ch[s - 1], ch[s]
        pb.linear(f"up{s}.proj", cin, 4 * cout)
        pb.layernorm(f"up{s}.norm", cout)
        pb.linear(f"skip{s + 1}", 2 * cout, cout)
    pb.linear("final.proj", C, 16 * C)
    pb.layernorm("final.norm", C)
    pb.linear("head", C, config.num_classes)
    return Model(config, pb.params, pb.buffers)


# ---------------------------------------------------------------------------
# layers


def patch_embed(img: Tensor, p: Scope) -> Tensor:
    """Overlapping 7x7 stride-4 patches, linear embedding, layernorm."""
    B, H, W, _ = img.shape
    if H % 4 or W % 4:
        raise T.ShapeError(f"patch_embed: {H}x{W} not divisible by 4")
    return p.layernorm("norm", T.conv2d(img, p["conv.w"], p["conv.b"], stride=4, padding=3))


def patch_merge(x: Tensor, p: Scope) -> Tensor:
    """3x3 stride-2 conv doubling channels, layernorm."""
    _, h, w, _ = x.shape
    if h % 2 or w % 2:
        raise T.ShapeError(f"patch_merge: odd extent {h}x{w}")
    return p.layernorm("norm", T.conv2d(x, p["conv.w"], p["conv.b"], stride=2, padding=1))


def patch_expand(x: Tensor, p: Scope, factor: int) -> Tensor:
    """1x1 projection to factor^2 * C_out channels, depth-to-space, layernorm."""
    if factor == 1:
        return x
    return p.layernorm("norm", T.pixel_shuffle(p.conv1x1("proj", x), factor))


def skip_fuse(dec: Tensor, enc: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Concatenate encoder features and reduce back to the decoder width."""
    if dec.shape[:-1] != enc.shape[:-1]:
        raise T.ShapeError(f"skip_fuse: decoder {dec.shape} vs encoder {enc.shape}")
    return T.conv1x1(T.concat([dec, enc], axis=-1), w, b)


def compressed_attention(x: Tensor, p: Scope, stage: StageConfig, cfg: ModelConfig,
                         records: list | None = None, layer: str = "",
                         attention: str = "sparse") -> Tensor:
    """Compress, attend, decompress, per sample on the [hw x C] token view."""
    B, h, w, C = x.shape
    ap = AttentionParams(p["wq"], p["wk"], p["wv"], stage.head_dim, stage.topk_ratio,
                         cfg.unscaled_attention)
    outs = []
    for b in range(B):
        tokens = T.reshape(T.slice_axis(x, b, b + 1, 0), (h * w, C))
        comp, state = compress(tokens, p["w1"], p["w2"], stage.rho, stage.rho_m, stage.mode,
                               cfg.rho_is_prune_fraction, cfg.cosine_similarity)
        if attention == "dense":
            att, trace = dense_attention(comp, ap), None
        else:
            att, trace = tksa(comp, ap)
        out = decompress(att, state)
        if records is not None:
            records.append(LayerRecord(layer, b, state, trace))
        outs.append(T.reshape(out, (1, h, w, C)))
    return outs[0] if B == 1 else T.concat(outs, axis=0)


def block_forward(x: Tensor, p: Scope, stage: StageConfig, cfg: ModelConfig,
                  records: list | None = None, layer: str = "", attention: str = "sparse",
                  ffn: str = "dbffn") -> Tensor:
    x = T.add(x, p.dwconv("pos", x))
    with T.layer_scope("attn"):
        x = T.add(x, compressed_attention(p.layernorm("ln1", x), p.child("attn"), stage, cfg,
                                          records, layer, attention))
    with T.layer_scope("ffn"):
        y = p.layernorm("ln2", x)
        y = dbffn_forward(y, p.child("ffn")) if ffn == "dbffn" else mlp_forward(y, p.child("ffn"))
    return T.add(x, y)


def _stage(x, p: Scope, s: int, cfg: ModelConfig, records, attention):
    st = cfg.stages[s - 1]
    for j in range(st.depth):
        name = f"stage{s}.block{j}"
        with T.layer_scope(name):
            x = block_forward(x, p.child(name), st, cfg, records, name, attention, cfg.ffn)
    return x


def forward_tensors(tensors: dict, buffers: dict, cfg: ModelConfig, img, training: bool = False,
                    updates: dict | None = None, trace: bool = False, attention: str = "sparse",
                    bn_momentum: float = 0.1) -> SegmentationOutput:
    img = img if isinstance(img, Tensor) else T.tensor(img)
    if img.ndim != 4 or img.shape[-1] != cfg.in_channels:
        raise T.ShapeError(f"expected [B, H, W, {cfg.in_channels}] image, got {img.shape}")
    if img.shape[1] % 32 or img.shape[2] % 32:
        raise T.ShapeError(f"image {img.shape[1]}x{img.shape[2]} not divisible by 32")
    p = Scope(tensors, buffers, training, updates, momentum=bn_momentum)
    records = [] if trace else None
    with T.layer_scope("embed"):
        x = patch_embed(img, p.child("embed"))
    skips = []
    for s in (1, 2, 3, 4):
        if s > 1:
            with T.layer_scope(f"merge{s}"):
                x = patch_merge(x, p.child(f"merge{s}"))
        x = _stage(x, p, s, cfg, records, attention)
        skips.append(x)
    x = _stage(x, p, 5, cfg, records, attention)
    for s in (6, 7, 8):
        with T.layer_scope(f"up{s - 1}"):
            x = patch_expand(x, p.child(f"up{s - 1}"), 2)
            x = skip_fuse(x, skips[8 - s], p[f"skip{s}.w"], p[f"skip{s}.b"])
        x = _stage(x, p, s, cfg, records, attention)
    with T.layer_scope("head"):
        x = patch_expand(x, p.child("final"), 4)
        logits = p.conv1x1("head", x)
    return SegmentationOutput(logits, records or [])


def forward(model: Model, img, trace: bool = False, attention: str = "sparse") -> SegmentationOutput:
    """Inference forward pass (batchnorm uses running statistics)."""
    return forward_tensors(wrap(model.params), model.buffers, model.config, img, trace=trace,
                           attention=attention)


def predict(model: Model, img) -> np.ndarray:
    return forward(model, img).logits.data.argmax(axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# training


def loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """0.5 * pixelwise cross-entropy + 0.5 * soft Dice loss."""
    K = logits.shape[-1]
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    flat = T.reshape(logits, (-1, K))
    if flat.shape[0] != target.shape[0]:
        raise T.ShapeError(f"loss: {flat.shape[0]} pixels vs {target.shape[0]} labels")
    if target.size and (target.min() < 0 or target.max() >= K):
        raise ValueError(f"loss: labels outside [0, {K})")
    onehot = np.eye(K, dtype=logits.dtype)[target]
    logp = T.log_softmax_rows(flat)
    ce = T.scale(T.sum(T.mul(logp, onehot)), -1.0 / target.shape[0])
    probs = T.exp(logp)
    inter = T.sum(T.mul(probs, onehot), axis=0)
    denom = T.add(T.sum(probs, axis=0), onehot.sum(axis=0) + DICE_SMOOTH)
    dice = T.div(T.add(T.scale(inter, 2.0), DICE_SMOOTH), denom)
    dice_loss = T.sub(1.0, T.mean(dice))
    return T.add(T.scale(ce, 0.5), T.scale(dice_loss, 0.5))


def train_step(model: Model, images, masks, lr: float) -> tuple[Model, float]:
    """One plain gradient-descent step. Returns the updated model and the pre-step loss."""
    tensors = wrap(model.params, requires_grad=True)
    updates = {}
    with T.Tape() as tape:
        out = forward_tensors(tensors, model.buffers, model.config, images, training=True, updates=updates)
        value = loss(out.logits, masks)
    tape.backward(value)
    params = {k: (v - lr * tensors[k].grad).astype(v.dtype) for k, v in model.params.items()}
    buffers = {**model.buffers, **{k: v.astype(np.float32) for k, v in updates.items()}}
    return dataclasses.replace(model, params=params, buffers=buffers), value.item()


def recalibrate_batchnorm(model: Model, images) -> Model:
    """Set every running statistic to the batch statistics of ``images`` under current weights."""
    updates = {}
    forward_tensors(wrap(model.params), model.buffers, model.config, images, training=True,
                    updates=updates, bn_momentum=1.0)
    return dataclasses.replace(model, buffers={**model.buffers, **updates})
