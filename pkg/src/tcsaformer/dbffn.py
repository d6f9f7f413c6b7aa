"""Dual-branch feed-forward network and the plain MLP baseline it replaces.

Shapes for input [B, H, W, C]:

    expand  BN -> 1x1 C->2C -> BN                         2C
    stage 1 GELU(dw3x3), GELU(dw7x7), concatenated        4C
    stage 2 dw3x3 + 1x1 4C->C -> BN, dw7x7 + 1x1 4C->C -> BN, concatenated  2C
    fuse    1x1 2C->C -> BN                               C

Stage 2 uses depthwise-separable convolutions: a depthwise filter cannot
take 4C channels to C on its own. A channel-grouped conv (groups=C, four
channels per group) fits the same shapes and is not implemented.
"""

from __future__ import annotations

from . import tensor as T
from .params import ParamBuilder, Scope
from .tensor import Tensor


def init_dbffn(pb: ParamBuilder, prefix: str, C: int) -> None:
    pb.batchnorm(f"{prefix}.bn0", C)
    pb.linear(f"{prefix}.expand", C, 2 * C)
    pb.batchnorm(f"{prefix}.bn1", 2 * C)
    pb.depthwise(f"{prefix}.dw3a", 2 * C, 3)
    pb.depthwise(f"{prefix}.dw7a", 2 * C, 7)
    pb.depthwise(f"{prefix}.dw3b", 4 * C, 3)
    pb.linear(f"{prefix}.pw3b", 4 * C, C)
    pb.batchnorm(f"{prefix}.bn2l", C)
    pb.depthwise(f"{prefix}.dw7b", 4 * C, 7)
    pb.linear(f"{prefix}.pw7b", 4 * C, C)
    pb.batchnorm(f"{prefix}.bn2r", C)
    pb.linear(f"{prefix}.fuse", 2 * C, C)
    pb.batchnorm(f"{prefix}.bn3", C)


def dbffn_forward(x: Tensor, p: Scope) -> Tensor:
    C = x.shape[-1]
    if p["expand.w"].shape[0] != C:
        raise T.ShapeError(f"dbffn: parameters for {p['expand.w'].shape[0]} channels, input has {C}")
    xh = p.batchnorm("bn1", p.conv1x1("expand", p.batchnorm("bn0", x)))
    left = T.gelu(p.dwconv("dw3a", xh))
    right = T.gelu(p.dwconv("dw7a", xh))
    cat = T.concat([left, right], axis=-1)
    l2 = p.batchnorm("bn2l", p.conv1x1("pw3b", p.dwconv("dw3b", cat)))
    r2 = p.batchnorm("bn2r", p.conv1x1("pw7b", p.dwconv("dw7b", cat)))
    return p.batchnorm("bn3", p.conv1x1("fuse", T.concat([l2, r2], axis=-1)))


def init_mlp(pb: ParamBuilder, prefix: str, C: int, expansion: int = 4) -> None:
    pb.linear(f"{prefix}.fc1", C, expansion * C)
    pb.linear(f"{prefix}.fc2", expansion * C, C)


def mlp_forward(x: Tensor, p: Scope) -> Tensor:
    return p.conv1x1("fc2", T.gelu(p.conv1x1("fc1", x)))
