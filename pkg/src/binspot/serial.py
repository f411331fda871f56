"""Checkpoint and packed-bundle serialization.

Checkpoint layout (little-endian):

    magic "BFS2" | u32 version=1
    | u32 meta_len | meta JSON (model config + quantization flags)
    | u32 record_count | records | u32 epoch

Each record is ``u32 name_len | name | u32 rank | rank*u32 dims | payload``
with a float32 payload. Record names are namespaced: ``p.`` trainable
parameters, ``s.`` normalization state, ``o.`` optimizer state. Everything
is written in sorted order with a canonical JSON encoding, so
save -> load -> save is byte-identical.

The packed bundle ("BFSP") stores binarized weight matrices as raw sign
bits plus their per-row scales instead of float payloads; loading rebuilds
the equivalent model with weights ``signs * alpha``, which reproduces both
the sign pattern and the mean-|w| scale exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .bitpack import BitTensor, pack_signs, unpack_signs
from .binarize import sign_binarize, weight_scale
from .data import FormatError
from .model import ModelConfig, ThinnableFsmn

CKPT_MAGIC = b"BFS2"
CKPT_VERSION = 1
PACK_MAGIC = b"BFSP"
PACK_VERSION = 1

_FLOAT_RECORD = 0
_BIT_RECORD = 1


def _dump_meta(model: ThinnableFsmn) -> bytes:
    meta = {
        "model": model.config.to_dict(),
        "binarized": model.binarized,
        "binarizer_kind": model.kind,
        "dual_scale": model.dual_scale,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def _model_from_meta(meta: dict) -> ThinnableFsmn:
    return ThinnableFsmn(
        ModelConfig.from_dict(meta["model"]),
        seed=0,
        binarized=meta["binarized"],
        binarizer_kind=meta["binarizer_kind"],
        dual_scale=meta["dual_scale"],
    )


def _write_float_record(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.off = offset

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError("truncated file")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def _read_float_record(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u32()).decode()
    rank = r.u32()
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    dims = [r.u32() for _ in range(rank)]
    count = 1
    for d in dims:
        count *= d
        if count > 1 << 31:
            raise FormatError("tensor dimension overflow")
    payload = r.take(4 * count)
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    return name, arr


def save_checkpoint(path, model: ThinnableFsmn, opt_state: dict | None = None,
                    epoch: int = 0) -> None:
    meta = _dump_meta(model)
    records = [("p." + k, v) for k, v in sorted(model.store.params.items())]
    records += [("s." + k, v) for k, v in sorted(model.store.state.items())]
    if opt_state:
        records += [("o." + k, v) for k, v in sorted(opt_state.items())]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_float_record(fh, name, arr)
        fh.write(struct.pack("<I", epoch))


def load_checkpoint(path) -> tuple[ThinnableFsmn, dict, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    r = _Reader(blob, 4)
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode())
    model = _model_from_meta(meta)
    opt_state: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name, arr = _read_float_record(r)
        space, key = name.split(".", 1)
        if space == "p":
            if key not in model.store.params:
                raise FormatError(f"unknown parameter {key}")
            if model.store.params[key].shape != arr.shape:
                raise FormatError(f"shape mismatch for {key}")
            model.store.params[key] = arr
        elif space == "s":
            if key not in model.store.state:
                raise FormatError(f"unknown state {key}")
            model.store.state[key] = arr
        elif space == "o":
            opt_state[key] = arr
        else:
            raise FormatError(f"unknown record namespace {space!r}")
    epoch = r.u32()
    if r.off != len(blob):
        raise FormatError("trailing bytes after checkpoint payload")
    return model, opt_state, epoch


# ---------------------------------------------------------------------------
# packed inference bundle


def _write_bit_record(fh, name: str, bits: BitTensor) -> None:
    raw = name.encode()
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<II", bits.rows, bits.logical_cols))
    fh.write(np.ascontiguousarray(bits.words, dtype="<u8").tobytes())


def _read_bit_record(r: _Reader) -> tuple[str, BitTensor]:
    name = r.take(r.u32()).decode()
    rows = r.u32()
    cols = r.u32()
    words_per_row = (cols + 63) // 64
    payload = r.take(8 * rows * words_per_row)
    words = (
        np.frombuffer(payload, dtype="<u8")
        .astype(np.uint64)
        .reshape(rows, words_per_row)
    )
    return name, BitTensor(rows, cols, words)


def export_packed(path, model: ThinnableFsmn) -> None:
    """Checkpoint -> packed inference bundle.

    Weight matrices of binarized units are stored as sign bits plus per-row
    scales; everything a forward pass needs (biases, thresholds, BN, PReLU,
    full-precision head/classifier, running stats) keeps float records.
    Optimizer state and backward ratios are dropped.
    """
    if not model.binarized:
        raise ValueError("only binarized models can be exported as packed bundles")
    packed_names = set()
    bit_records: list[tuple[str, BitTensor, np.ndarray]] = []
    for prefix, core in model.binarized_cores().items():
        w = model.store.params[core.w]
        bit_records.append((core.w, pack_signs(sign_binarize(w)), weight_scale(w)))
        packed_names.add(core.w)
    for prefix, mem in model.memory_units().items():
        for name in (mem.back, mem.ahead):
            if name is None:
                continue
            w = model.store.params[name]
            bit_records.append(
                (name, pack_signs(sign_binarize(w)), weight_scale(w, axis=1))
            )
            packed_names.add(name)
    float_records = [
        ("p." + k, v)
        for k, v in sorted(model.store.params.items())
        if k not in packed_names and not k.endswith(".ratio")
    ]
    float_records += [("s." + k, v) for k, v in sorted(model.store.state.items())]
    meta = _dump_meta(model)
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<I", PACK_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(float_records) + 2 * len(bit_records)))
        for name, arr in float_records:
            fh.write(struct.pack("<B", _FLOAT_RECORD))
            _write_float_record(fh, name, arr)
        for name, bits, alpha in sorted(bit_records, key=lambda rec: rec[0]):
            fh.write(struct.pack("<B", _BIT_RECORD))
            _write_bit_record(fh, "w." + name, bits)
            fh.write(struct.pack("<B", _FLOAT_RECORD))
            _write_float_record(fh, "a." + name, alpha)
        fh.write(struct.pack("<I", 0))  # reserved trailer, mirrors epoch slot


def load_packed(path) -> ThinnableFsmn:
    """Rebuild a model from a packed bundle.

    Binarized weights come back as ``signs * alpha``: sign-identical to the
    originals and with mean-|w| equal to the stored scale, so quantized and
    packed forwards reproduce the exported unit bit-for-bit.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PACK_MAGIC:
        raise FormatError(f"bad bundle magic {blob[:4]!r}")
    r = _Reader(blob, 4)
    version = r.u32()
    if version != PACK_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    meta = json.loads(r.take(r.u32()).decode())
    model = _model_from_meta(meta)
    signs: dict[str, np.ndarray] = {}
    alphas: dict[str, np.ndarray] = {}
    n_records = r.u32()
    seen = 0
    while seen < n_records:
        kind = r.u8()
        if kind == _FLOAT_RECORD:
            name, arr = _read_float_record(r)
            if name.startswith("p."):
                key = name[2:]
                model.store.params[key] = arr
            elif name.startswith("s."):
                model.store.state[name[2:]] = arr
            elif name.startswith("a."):
                alphas[name[2:]] = arr
            else:
                raise FormatError(f"unknown float record {name!r}")
        elif kind == _BIT_RECORD:
            name, bits = _read_bit_record(r)
            if not name.startswith("w."):
                raise FormatError(f"unknown bit record {name!r}")
            signs[name[2:]] = unpack_signs(bits)
        else:
            raise FormatError(f"unknown record kind {kind}")
        seen += 1
    for key, sgn in signs.items():
        if key not in alphas:
            raise FormatError(f"bundle missing scales for {key}")
        if key not in model.store.params:
            raise FormatError(f"unknown packed weight {key}")
        model.store.params[key] = sgn * alphas[key][:, None]
    return model
