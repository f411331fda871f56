"""FLOPs accounting and diagnostic reports.

FLOPs convention (per input example): a multiply-accumulate costs 2 FLOPs
at full precision; a binarized multiply-accumulate costs 1/64 of its
full-precision counterpart (64-bit words fit 64 ±1 products per bitwise
instruction). Elementwise work (batch norm, PReLU, biases, adds, scale
applications, the second-scale statistic) costs 1 FLOP per scalar op and
is itemized explicitly rather than folded into matmul rows.

The ``float_flops`` column prices the full-precision counterpart of each
item; ``bin_flops`` prices the requested quantization mode, where
``dual_scale`` doubles every binarized matmul and adds the one-pass
second-scale statistic plus the combine step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binarize import dual_scale_binarize, sign_binarize
from .model import ModelConfig, ThinnableFsmn
from .wavelet import haar_dwt2, relative_energy

MODES = ("full", "single_scale", "dual_scale")
BINARY_WORD = 64


@dataclass(frozen=True)
class FlopsRow:
    part: str
    name: str
    float_flops: float
    bin_flops: float
    kind: str  # "matmul" or "overhead"
    binarized_unit: bool


@dataclass(frozen=True)
class FlopsReport:
    mode: str
    delta: int
    rows: tuple[FlopsRow, ...]

    @property
    def total_float(self) -> float:
        return sum(r.float_flops for r in self.rows)

    @property
    def total_bin(self) -> float:
        return sum(r.bin_flops for r in self.rows)

    @property
    def ratio(self) -> float:
        return self.total_float / self.total_bin if self.total_bin else float("inf")

    def matmul_total(self, part: str | None = None, binarized_only: bool = False) -> float:
        return sum(
            r.bin_flops
            for r in self.rows
            if r.kind == "matmul"
            and (part is None or r.part == part)
            and (not binarized_only or r.binarized_unit)
        )


def flops_report(config: ModelConfig, mode: str = "single_scale", delta: int = 1) -> FlopsReport:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    executed = config.executed_blocks(delta)
    t_out, f_out = config.seq_len, config.freq_out
    c1, c2 = config.head_channels
    hid, bck = config.hidden_dim, config.backbone_dim
    mem = config.memory
    taps = (mem.n_back + 1) + mem.n_ahead
    rows: list[FlopsRow] = []

    def matmul(part, name, macs, binarized):
        flt = 2.0 * macs
        if not binarized or mode == "full":
            bin_f = flt
        else:
            bin_f = flt / BINARY_WORD
            if mode == "dual_scale":
                bin_f *= 2.0
        rows.append(FlopsRow(part, name, flt, bin_f, "matmul", binarized))

    def overhead(part, name, flt, bin_f=None):
        rows.append(FlopsRow(part, name, flt, flt if bin_f is None else bin_f, "overhead", False))

    def binarized_overheads(part, prefix, numel_in, numel_out):
        """alpha_w application + dual-scale statistic/combine, absent at full precision."""
        if mode == "full":
            return
        overhead(part, prefix + ".alpha_w", 0.0, numel_out)
        if mode == "dual_scale":
            overhead(part, prefix + ".alpha2_reduce", 0.0, numel_in)
            overhead(part, prefix + ".dual_combine", 0.0, 2.0 * numel_out)

    # Head: full-precision entry conv, then one binarized conv.
    plane = t_out * f_out
    matmul("head", "l1.matmul", c1 * 9 * plane, binarized=False)
    overhead("head", "l1.bias", c1 * plane)
    overhead("head", "l1.bn", 2.0 * c1 * plane)
    overhead("head", "l1.prelu", 2.0 * c1 * plane)
    matmul("head", "l2.matmul", c2 * (c1 * 9) * plane, binarized=True)
    binarized_overheads("head", "l2", c1 * plane, c2 * plane)
    overhead("head", "l2.bias", c2 * plane)
    overhead("head", "l2.bn", 2.0 * c2 * plane)
    overhead("head", "l2.prelu", 2.0 * c2 * plane)

    # Neck: binarized linear per frame.
    frame = config.frame_dim
    matmul("neck", "l1.matmul", t_out * hid * frame, binarized=True)
    binarized_overheads("neck", "l1", t_out * frame, t_out * hid)
    overhead("neck", "l1.bias", t_out * hid)
    overhead("neck", "l1.bn", 2.0 * t_out * hid)
    overhead("neck", "l1.prelu", 2.0 * t_out * hid)

    # Backbone: only blocks the delta variant executes.
    for l in executed:
        part = "backbone"
        pre = f"block{l}"
        matmul(part, pre + ".proj.matmul", t_out * bck * hid, binarized=True)
        binarized_overheads(part, pre + ".proj", t_out * hid, t_out * bck)
        overhead(part, pre + ".proj.bias", t_out * bck)
        matmul(part, pre + ".mem.taps", taps * t_out * bck, binarized=True)
        if mode != "full":
            scale_cost = taps * t_out * bck
            if mode == "dual_scale":
                scale_cost *= 2.0
                overhead(part, pre + ".mem.alpha2_reduce", 0.0, t_out * bck)
            overhead(part, pre + ".mem.tap_scales", 0.0, scale_cost)
        overhead(part, pre + ".mem.skip_add", t_out * bck)
        overhead(part, pre + ".mem.proj_add", t_out * bck)
        matmul(part, pre + ".hid.matmul", t_out * hid * bck, binarized=True)
        binarized_overheads(part, pre + ".hid", t_out * bck, t_out * hid)
        overhead(part, pre + ".hid.bias", t_out * hid)
        overhead(part, pre + ".bn", 2.0 * t_out * hid)
        overhead(part, pre + ".prelu", 2.0 * t_out * hid)

    # Classifier: mean pool + full-precision linear.
    overhead("classifier", "pool", t_out * hid)
    matmul("classifier", "l1.matmul", hid * config.num_classes, binarized=False)
    overhead("classifier", "l1.bias", config.num_classes)
    return FlopsReport(mode=mode, delta=delta, rows=tuple(rows))


def flops_csv(report: FlopsReport) -> str:
    lines = ["part,name,float_flops,bin_flops"]
    for r in report.rows:
        lines.append(f"{r.part},{r.name},{r.float_flops:.17g},{r.bin_flops:.17g}")
    lines.append(f"total,,{report.total_float:.17g},{report.total_bin:.17g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# diagnostics over trained models


def freq_energy_report(
    model: ThinnableFsmn,
    teacher: ThinnableFsmn,
    features: np.ndarray,
    delta: int = 1,
) -> list[dict]:
    """Per-block relative wavelet energy for student and teacher.

    Rows pair up by block index (uniform mapping); energies are pooled over
    the sample batch. Directional observations (binarized representations
    leaning high-frequency) are reported, never asserted.
    """
    _, student_trace = model.forward(features, delta)
    _, teacher_trace = teacher.forward(features, 1, mode="float")
    rows = []
    for l in student_trace.executed:
        for tag, rep in (("student", student_trace.reps[l]),
                         ("teacher", teacher_trace.reps[l])):
            en = relative_energy(haar_dwt2(rep))
            rows.append({"model": tag, "layer": l,
                         "p_low": en.p_low, "p_high": en.p_high})
    return rows


def freq_csv(rows: list[dict]) -> str:
    lines = ["model,layer,p_low,p_high"]
    for r in rows:
        lines.append(f"{r['model']},{r['layer']},{r['p_low']:.17g},{r['p_high']:.17g}")
    return "\n".join(lines) + "\n"


def quant_error_report(
    model: ThinnableFsmn, features: np.ndarray, delta: int = 1
) -> list[dict]:
    """Per-unit activation quantization MSE, single- vs dual-scale.

    Both columns binarize with the plain sign so the identity
    mse_dual = mse_single - alpha2^2 holds row by row; the dual column can
    therefore never exceed the single one.
    """
    _, trace = model.forward(features, delta, mode="quant")
    rows = []
    for name, a in model.binarizer_inputs(trace).items():
        single = sign_binarize(a)
        mse_single = float(np.mean((a - single) ** 2))
        dual = dual_scale_binarize(a)
        mse_dual = float(np.mean((a - dual.reconstruct()) ** 2))
        rows.append({"layer": name, "mse_single": mse_single, "mse_dual": mse_dual})
    return rows


def qerr_csv(rows: list[dict]) -> str:
    lines = ["layer,mse_single,mse_dual"]
    for r in rows:
        lines.append(f"{r['layer']},{r['mse_single']:.17g},{r['mse_dual']:.17g}")
    return "\n".join(lines) + "\n"
