"""Binary weight-file format: deterministic, little-endian, self-describing.

Layout: magic ``EMOE``, format version u32, the serialized configuration
(eleven u32 fields plus six 3-byte format descriptors), a u32 tensor count,
then every tensor in one fixed declared order as
``{u16 name length, utf-8 name, u8 rank, u32 dims, format descriptor,
raw values}``.  Raw values are two's-complement little-endian words of the
format width rounded up to 8/16/32 bits.  Format descriptor bytes are
``(width, int_bits, flags)`` with flag bits: 0 signed, 1 saturate,
2 round-nearest-even.

The same weights always serialize to byte-identical files.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .attention import AttentionParams
from .fixedpoint import (
    FormatCatalog,
    FxTensor,
    Overflow,
    QFormat,
    Rounding,
    requantize,
)
from .model import (
    BlockWeights,
    LayerNormParams,
    MlpWeights,
    ModelConfig,
    ModelWeights,
)
from .moe import ExpertMlp, ExpertParams
from .unified_linear import BlockedWeights, LinearConfig, pack_blocked_weights

__all__ = ["MAGIC", "FORMAT_VERSION", "save_weights", "load_weights"]

MAGIC = b"EMOE"
FORMAT_VERSION = 1

_CONFIG_FIELDS = (
    "n_blocks", "d", "mlp_dim", "n_heads", "m_experts", "top_k", "h_moe",
    "patch_size", "image_h", "image_w", "n_tasks",
)


def _pack_format(fmt: QFormat) -> bytes:
    flags = (
        (1 if fmt.signed else 0)
        | (2 if fmt.overflow is Overflow.SATURATE else 0)
        | (4 if fmt.rounding is Rounding.NEAREST_EVEN else 0)
    )
    return struct.pack("<BBB", fmt.width_bits, fmt.int_bits, flags)


def _unpack_format(buf: bytes) -> QFormat:
    width, int_bits, flags = struct.unpack("<BBB", buf)
    return QFormat(
        width_bits=width,
        int_bits=int_bits,
        signed=bool(flags & 1),
        overflow=Overflow.SATURATE if flags & 2 else Overflow.WRAP,
        rounding=Rounding.NEAREST_EVEN if flags & 4 else Rounding.TRUNCATE,
    )


def _word_dtype(fmt: QFormat) -> np.dtype:
    if fmt.width_bits <= 8:
        return np.dtype("<i1" if fmt.signed else "<u1")
    if fmt.width_bits <= 16:
        return np.dtype("<i2" if fmt.signed else "<u2")
    if fmt.width_bits <= 32:
        return np.dtype("<i4" if fmt.signed else "<u4")
    raise ValueError(f"no storage word for {fmt.width_bits}-bit format")


def _write_tensor(out: io.BufferedIOBase, name: str, t: FxTensor) -> None:
    encoded = name.encode("utf-8")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<B", t.raw.ndim))
    for dim in t.raw.shape:
        out.write(struct.pack("<I", dim))
    out.write(_pack_format(t.fmt))
    out.write(np.ascontiguousarray(t.raw).astype(_word_dtype(t.fmt)).tobytes())


def _read_exact(src: io.BufferedIOBase, n: int) -> bytes:
    buf = src.read(n)
    if len(buf) != n:
        raise ValueError("weight file truncated")
    return buf


def _read_tensor(src: io.BufferedIOBase) -> tuple[str, FxTensor]:
    (name_len,) = struct.unpack("<H", _read_exact(src, 2))
    name = _read_exact(src, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(src, 1))
    dims = tuple(
        struct.unpack("<I", _read_exact(src, 4))[0] for _ in range(rank)
    )
    fmt = _unpack_format(_read_exact(src, 3))
    count = int(np.prod(dims)) if dims else 1
    raw = np.frombuffer(
        _read_exact(src, count * _word_dtype(fmt).itemsize), dtype=_word_dtype(fmt)
    ).astype(np.int64).reshape(dims)
    return name, FxTensor(raw, fmt)


def _bias_format(catalog: FormatCatalog, source: str) -> QFormat:
    return catalog.bias_attention if source == "attention" else catalog.bias_mlp


def _linear_tensors(name: str, layer: BlockedWeights, source: str,
                    catalog: FormatCatalog):
    weight = FxTensor(layer.matrix(), layer.weight_fmt)
    bias = requantize(
        FxTensor(layer.bias_raw, layer.bias_fmt), _bias_format(catalog, source)
    )
    yield f"{name}.weight", weight
    yield f"{name}.bias", bias


def _named_tensors(weights: ModelWeights):
    """Every tensor of the model in the declared serialization order."""
    cfg = weights.config
    cat = cfg.formats
    yield from _linear_tensors("patch_embed", weights.patch_proj, "attention", cat)
    yield "pos_embed", weights.pos_embed
    for i, bw in enumerate(weights.blocks):
        yield f"block{i}.ln1.gamma", bw.ln1.gamma
        yield f"block{i}.ln1.beta", bw.ln1.beta
        for nm, layer in (("wq", bw.attn.wq), ("wk", bw.attn.wk),
                          ("wv", bw.attn.wv), ("wo", bw.attn.wo)):
            yield from _linear_tensors(f"block{i}.attn.{nm}", layer, "attention", cat)
        yield f"block{i}.ln2.gamma", bw.ln2.gamma
        yield f"block{i}.ln2.beta", bw.ln2.beta
        if isinstance(bw.mlp, ExpertParams):
            for e, ex in enumerate(bw.mlp.experts):
                yield from _linear_tensors(f"block{i}.expert{e}.w1", ex.w1, "mlp", cat)
                yield from _linear_tensors(f"block{i}.expert{e}.w2", ex.w2, "mlp", cat)
        else:
            yield from _linear_tensors(f"block{i}.mlp.w1", bw.mlp.w1, "mlp", cat)
            yield from _linear_tensors(f"block{i}.mlp.w2", bw.mlp.w2, "mlp", cat)
    for t, gate in enumerate(weights.gates):
        yield from _linear_tensors(f"gate{t}", gate, "attention", cat)
    yield "final_ln.gamma", weights.final_ln.gamma
    yield "final_ln.beta", weights.final_ln.beta


def save_weights(weights: ModelWeights, path: str) -> None:
    cfg = weights.config
    tensors = list(_named_tensors(weights))
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<I", FORMAT_VERSION))
        for name in _CONFIG_FIELDS:
            out.write(struct.pack("<I", getattr(cfg, name)))
        cat = cfg.formats
        for fmt in (cat.activation, cat.weight, cat.bias_attention,
                    cat.bias_mlp, cat.bias_widened, cat.gelu_lut_entry):
            out.write(_pack_format(fmt))
        out.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors:
            _write_tensor(out, name, tensor)


def _take(tensors: dict[str, FxTensor], name: str, shape: tuple[int, ...]) -> FxTensor:
    if name not in tensors:
        raise ValueError(f"weight file is missing tensor {name!r}")
    t = tensors.pop(name)
    if t.raw.shape != shape:
        raise ValueError(f"tensor {name!r} has shape {t.raw.shape}, expected {shape}")
    return t


def _take_linear(tensors: dict[str, FxTensor], name: str, out_dim: int,
                 in_dim: int, source: str) -> BlockedWeights:
    weight = _take(tensors, f"{name}.weight", (out_dim, in_dim))
    bias = _take(tensors, f"{name}.bias", (out_dim,))
    cfg = LinearConfig(in_dim=in_dim, out_dim=out_dim, bias_source=source)
    return pack_blocked_weights(weight, bias, cfg)


def _take_layernorm(tensors: dict[str, FxTensor], name: str, d: int) -> LayerNormParams:
    return LayerNormParams(
        gamma=_take(tensors, f"{name}.gamma", (d,)),
        beta=_take(tensors, f"{name}.beta", (d,)),
    )


def load_weights(path: str) -> ModelWeights:
    with open(path, "rb") as src:
        if _read_exact(src, 4) != MAGIC:
            raise ValueError(f"{path} is not a weight file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(src, 4))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported weight format version {version}")
        fields = {
            name: struct.unpack("<I", _read_exact(src, 4))[0]
            for name in _CONFIG_FIELDS
        }
        fmts = [_unpack_format(_read_exact(src, 3)) for _ in range(6)]
        catalog = FormatCatalog(
            activation=fmts[0], weight=fmts[1], bias_attention=fmts[2],
            bias_mlp=fmts[3], bias_widened=fmts[4], gelu_lut_entry=fmts[5],
        )
        cfg = ModelConfig(formats=catalog, **fields)
        (count,) = struct.unpack("<I", _read_exact(src, 4))
        tensors: dict[str, FxTensor] = {}
        order: list[str] = []
        for _ in range(count):
            name, tensor = _read_tensor(src)
            tensors[name] = tensor
            order.append(name)

    patch_proj = _take_linear(tensors, "patch_embed", cfg.d, cfg.patch_dim,
                              "attention")
    pos_embed = _take(tensors, "pos_embed", (cfg.n_tokens, cfg.d))
    blocks = []
    for i in range(cfg.n_blocks):
        ln1 = _take_layernorm(tensors, f"block{i}.ln1", cfg.d)
        attn = AttentionParams(
            wq=_take_linear(tensors, f"block{i}.attn.wq", cfg.d, cfg.d, "attention"),
            wk=_take_linear(tensors, f"block{i}.attn.wk", cfg.d, cfg.d, "attention"),
            wv=_take_linear(tensors, f"block{i}.attn.wv", cfg.d, cfg.d, "attention"),
            wo=_take_linear(tensors, f"block{i}.attn.wo", cfg.d, cfg.d, "attention"),
            n_heads=cfg.n_heads,
        )
        ln2 = _take_layernorm(tensors, f"block{i}.ln2", cfg.d)
        if cfg.block_is_moe(i):
            experts = tuple(
                ExpertMlp(
                    w1=_take_linear(tensors, f"block{i}.expert{e}.w1",
                                    cfg.h_moe, cfg.d, "mlp"),
                    w2=_take_linear(tensors, f"block{i}.expert{e}.w2",
                                    cfg.d, cfg.h_moe, "mlp"),
                )
                for e in range(cfg.m_experts)
            )
            mlp: MlpWeights | ExpertParams = ExpertParams(experts=experts)
        else:
            mlp = MlpWeights(
                w1=_take_linear(tensors, f"block{i}.mlp.w1", cfg.mlp_dim, cfg.d, "mlp"),
                w2=_take_linear(tensors, f"block{i}.mlp.w2", cfg.d, cfg.mlp_dim, "mlp"),
            )
        blocks.append(BlockWeights(ln1=ln1, attn=attn, ln2=ln2, mlp=mlp))
    gates = tuple(
        _take_linear(tensors, f"gate{t}", cfg.m_experts, cfg.d, "attention")
        for t in range(cfg.n_tasks if cfg.m_experts else 0)
    )
    final_ln = _take_layernorm(tensors, "final_ln", cfg.d)
    if tensors:
        raise ValueError(f"weight file has unexpected tensors: {sorted(tensors)}")
    return ModelWeights(
        config=cfg,
        patch_proj=patch_proj,
        pos_embed=pos_embed,
        blocks=tuple(blocks),
        gates=gates,
        final_ln=final_ln,
    )
