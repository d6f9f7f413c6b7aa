"""On-disk formats: the binary parameter container and the line-oriented trace file.

Parameter container (all integers little-endian u32)::

    b"TCSA" | version | tensor count
    per tensor: name length | name (utf-8) | rank | extents x rank | f32 payload

Trace file: see ``write_trace``; grammar in docs/FORMATS.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import BN_BUFFERS

MAGIC = b"TCSA"
VERSION = 1
TRACE_HEADER = "# tcsa-trace v1"


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameter container


def dump_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_tensors(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise FormatError("not a TCSA parameter container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        pos, out = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = arr.astype(np.float32)
    except struct.error as e:
        raise FormatError(f"truncated container: {e}") from None
    except ValueError as e:
        raise FormatError(f"truncated container: {e}") from None
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after last tensor")
    return out


def save_model(model, path) -> None:
    Path(path).write_bytes(dump_tensors({**model.params, **model.buffers}))


def load_model(config, path):
    from .network import Model, init_model

    stored = load_tensors(Path(path).read_bytes())
    ref = init_model(config)
    expected = {**ref.params, **ref.buffers}
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise FormatError(f"parameter names do not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, v in stored.items():
        if v.shape != expected[k].shape:
            raise FormatError(f"{k}: stored shape {v.shape} != expected {expected[k].shape}")
    params = {k: v for k, v in stored.items() if not k.endswith(BN_BUFFERS)}
    buffers = {k: v for k, v in stored.items() if k.endswith(BN_BUFFERS)}
    return Model(config, params, buffers)


# ---------------------------------------------------------------------------
# trace


@dataclass
class TraceRecord:
    layer: str
    sample: int
    N: int
    n: int
    r: int
    m: int
    k: int
    mask: np.ndarray
    kept: np.ndarray
    edges: list = field(default_factory=list)      # (source, target, score)
    topk: list = field(default_factory=list)       # per head [m x k] int arrays


def record_from_layer(rec) -> TraceRecord:
    st, att = rec.state, rec.attention
    ms = st.merge
    edges = [(int(s), int(t), float(w)) for s, t, w in zip(ms.edge_sources, ms.edge_targets, ms.edge_scores)]
    topk = [] if att is None else [np.asarray(att.indices[h]) for h in range(att.indices.shape[0])]
    k = 0 if att is None else att.k
    return TraceRecord(rec.layer, rec.sample, st.N, st.prune.n, ms.r, st.m if st.mode != "none" else st.N, k,
                       st.prune.mask.astype(np.uint8), np.asarray(st.prune.kept_indices), edges, topk)


def _mask_hex(mask: np.ndarray) -> str:
    return np.packbits(mask.astype(np.uint8), bitorder="little").tobytes().hex() or "-"


def _mask_from_hex(text: str, N: int) -> np.ndarray:
    raw = b"" if text == "-" else bytes.fromhex(text)
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:N]


def format_trace(records) -> str:
    lines = [TRACE_HEADER]
    for r in records:
        lines.append(f"layer {r.layer} sample={r.sample} N={r.N} n={r.n} r={r.r} m={r.m} k={r.k} heads={len(r.topk)}")
        lines.append(f"mask {_mask_hex(r.mask)}")
        lines.append("kept " + " ".join(map(str, r.kept.tolist())))
        lines.append("edges " + " ".join(f"{s},{t},{w!r}" for s, t, w in r.edges))
        for h, mat in enumerate(r.topk):
            lines.append(f"topk {h} " + ";".join(",".join(map(str, row)) for row in mat.tolist()))
        lines.append("end")
    return "\n".join(lines) + "\n"


def write_trace(layer_records, path) -> None:
    Path(path).write_text(format_trace([record_from_layer(r) for r in layer_records]))


def parse_trace(text: str) -> list[TraceRecord]:
    lines = text.splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise FormatError("missing trace header")
    out, cur = [], None
    for lineno, line in enumerate(lines[1:], 2):
        tag, _, rest = line.partition(" ")
        if tag == "layer":
            name, *fields = rest.split()
            kv = dict(f.split("=", 1) for f in fields)
            cur = TraceRecord(name, int(kv["sample"]), int(kv["N"]), int(kv["n"]), int(kv["r"]),
                              int(kv["m"]), int(kv["k"]), np.zeros(0, np.uint8), np.zeros(0, np.int64))
        elif cur is None:
            raise FormatError(f"line {lineno}: '{tag}' outside a layer record")
        elif tag == "mask":
            cur.mask = _mask_from_hex(rest.strip(), cur.N)
        elif tag == "kept":
            cur.kept = np.array(rest.split(), dtype=np.int64)
        elif tag == "edges":
            cur.edges = [(int(s), int(t), float(w)) for s, t, w in (e.split(",") for e in rest.split())]
        elif tag == "topk":
            _, rows = rest.split(" ", 1) if " " in rest else (rest, "")
            cur.topk.append(np.array([[int(v) for v in row.split(",")] for row in rows.split(";") if row],
                                     dtype=np.int64).reshape(-1, cur.k))
        elif tag == "end":
            out.append(cur)
            cur = None
        else:
            raise FormatError(f"line {lineno}: unknown tag '{tag}'")
    if cur is not None:
        raise FormatError("unterminated layer record")
    return out
