"""The dual-scale thinnable binarized FSMN and its full-precision twin.

Topology (head -> neck -> backbone -> classifier):

* head: one full-precision 3x3/stride-2 conv (never binarized) followed by
  one binarized 3x3 conv, each with batch norm + PReLU;
* neck: binarized linear lifting the flattened per-frame head features to
  the hidden width, so every backbone block maps hidden -> hidden and can
  be skipped by identity;
* backbone: N blocks, each = binarized projection (hidden -> backbone
  width) -> memory block over projected frames (+ skip from the previous
  executed block's memory output) -> binarized hidden map (backbone ->
  hidden) -> per-variant batch norm -> PReLU;
* classifier: mean pool over time + full-precision linear (never
  binarized).

A runtime variant ``delta`` executes only blocks at indices i*delta and
replaces the rest with identity; each block keeps one batch-norm parameter
set per variant. The forward trace records every executed block's output
representation, which is what the frequency-split distillation consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .layers import (
    BatchNormBank,
    BinarizedConv2d,
    BinarizedLinear,
    Conv2dFP,
    FPLinear,
    MemoryBlock,
    ParamStore,
    PReLU,
)


def conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@dataclass(frozen=True)
class MemoryBlockConfig:
    """Look-back/look-ahead tap counts and strides of a memory block."""

    n_back: int = 8
    n_ahead: int = 2
    stride_back: int = 1
    stride_ahead: int = 1

    def __post_init__(self):
        if self.n_back < 0 or self.n_ahead < 0:
            raise ValueError("tap orders must be >= 0")
        if self.stride_back < 1 or self.stride_ahead < 1:
            raise ValueError("strides must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    num_blocks: int = 4
    delta_set: tuple[int, ...] = (1, 2, 4)
    backbone_dim: int = 128
    hidden_dim: int = 224
    input_time: int = 32
    input_freq: int = 40
    head_channels: tuple[int, int] = (16, 16)
    memory: MemoryBlockConfig = field(default_factory=MemoryBlockConfig)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        deltas = tuple(self.delta_set)
        if not deltas or 1 not in deltas:
            raise ValueError("delta_set must be nonempty and contain 1")
        if tuple(sorted(set(deltas))) != deltas:
            raise ValueError("delta_set must be sorted and duplicate-free")
        for d in deltas:
            if d < 1 or self.num_blocks % d != 0:
                raise ValueError(f"delta {d} must divide num_blocks={self.num_blocks}")
        object.__setattr__(self, "delta_set", deltas)
        object.__setattr__(self, "head_channels", tuple(self.head_channels))

    # Derived head/sequence geometry (3x3 convs, stride 2 then 1, pad 1).
    @property
    def seq_len(self) -> int:
        return conv_out(self.input_time, 3, 2, 1)

    @property
    def freq_out(self) -> int:
        return conv_out(self.input_freq, 3, 2, 1)

    @property
    def frame_dim(self) -> int:
        return self.head_channels[1] * self.freq_out

    def executed_blocks(self, delta: int) -> list[int]:
        if delta not in self.delta_set:
            raise ValueError(f"delta {delta} not in delta_set {self.delta_set}")
        return [i * delta for i in range(1, self.num_blocks // delta + 1)]

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "num_blocks": self.num_blocks,
            "delta_set": list(self.delta_set),
            "backbone_dim": self.backbone_dim,
            "hidden_dim": self.hidden_dim,
            "input_time": self.input_time,
            "input_freq": self.input_freq,
            "head_channels": list(self.head_channels),
            "memory": {
                "n_back": self.memory.n_back,
                "n_ahead": self.memory.n_ahead,
                "stride_back": self.memory.stride_back,
                "stride_ahead": self.memory.stride_ahead,
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        mem = MemoryBlockConfig(**d["memory"])
        return ModelConfig(
            num_classes=d["num_classes"],
            num_blocks=d["num_blocks"],
            delta_set=tuple(d["delta_set"]),
            backbone_dim=d["backbone_dim"],
            hidden_dim=d["hidden_dim"],
            input_time=d["input_time"],
            input_freq=d["input_freq"],
            head_channels=tuple(d["head_channels"]),
            memory=mem,
        )


@dataclass
class ForwardTrace:
    """Everything backward needs, plus the per-block representations."""

    delta: int
    mode: str
    reps: dict[int, np.ndarray]
    stages: dict
    block_ctxs: dict[int, dict]
    executed: list[int]
    logits: np.ndarray


class FsmnBlock:
    def __init__(self, store, prefix, cfg: ModelConfig, rng, kind, deltas):
        mem = cfg.memory
        self.proj = BinarizedLinear(
            store, prefix + ".proj", cfg.backbone_dim, cfg.hidden_dim, rng, kind
        )
        self.mem = MemoryBlock(
            store, prefix + ".mem", cfg.backbone_dim, mem.n_back, mem.n_ahead,
            mem.stride_back, mem.stride_ahead, rng, kind,
        )
        self.hid = BinarizedLinear(
            store, prefix + ".hid", cfg.hidden_dim, cfg.backbone_dim, rng, kind
        )
        self.bn = BatchNormBank(store, prefix, cfg.hidden_dim, deltas)
        self.prelu = PReLU(store, prefix + ".prelu", cfg.hidden_dim)

    def forward(self, store, r_in, skip_prev, delta, mode, dual,
                train_stats, update_running):
        p, c_proj = self.proj.forward(store, r_in, mode, dual)
        p_tilde, c_mem = self.mem.forward(store, p, skip_prev, mode, dual)
        z, c_hid = self.hid.forward(store, p_tilde, mode, dual)
        y, c_bn = self.bn.forward(store, z, delta, train_stats, update_running)
        r_out, c_act = self.prelu.forward(store, y)
        ctx = {"proj": c_proj, "mem": c_mem, "hid": c_hid, "bn": c_bn, "act": c_act}
        return r_out, p_tilde, ctx

    def backward(self, store, ctx, g_r, g_skip_in):
        """g_skip_in is the gradient flowing into this block's memory output
        through the next executed block's skip connection."""
        g_y = self.prelu.backward(store, ctx["act"], g_r)
        g_z = self.bn.backward(store, ctx["bn"], g_y)
        g_pt = self.hid.backward(store, ctx["hid"], g_z)
        if g_skip_in is not None:
            g_pt = g_pt + g_skip_in
        g_p, g_skip_prev = self.mem.backward(store, ctx["mem"], g_pt)
        g_rin = self.proj.backward(store, ctx["proj"], g_p)
        return g_rin, g_skip_prev


class ThinnableFsmn:
    """Student network; with ``binarized=False`` it is the full-precision
    teacher (same topology, quantizers replaced by identity)."""

    def __init__(self, config: ModelConfig, seed: int = 0, binarized: bool = True,
                 binarizer_kind: str = "lpb", dual_scale: bool = True):
        self.config = config
        self.binarized = binarized
        self.kind = binarizer_kind if binarized else "ste"
        self.dual_scale = dual_scale and binarized
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        c1, c2 = config.head_channels
        s = self.store
        self.conv1 = Conv2dFP(s, "head.l1", c1, 1, 3, 2, 1, rng)
        self.bn1 = BatchNormBank(s, "head.l1", c1, (1,))
        self.prelu1 = PReLU(s, "head.l1.prelu", c1)
        self.conv2 = BinarizedConv2d(s, "head.l2", c2, c1, 3, 1, 1, rng, self.kind)
        self.bn2 = BatchNormBank(s, "head.l2", c2, (1,))
        self.prelu2 = PReLU(s, "head.l2.prelu", c2)
        self.neck = BinarizedLinear(
            s, "neck", config.hidden_dim, config.frame_dim, rng, self.kind
        )
        self.neck_bn = BatchNormBank(s, "neck", config.hidden_dim, (1,))
        self.neck_prelu = PReLU(s, "neck.prelu", config.hidden_dim)
        self.blocks = {
            l: FsmnBlock(s, f"block{l}", config, rng, self.kind, config.delta_set)
            for l in range(1, config.num_blocks + 1)
        }
        self.classifier = FPLinear(s, "cls", config.num_classes, config.hidden_dim, rng)

    # -- forward -----------------------------------------------------------

    def default_mode(self) -> str:
        return "quant" if self.binarized else "float"

    def forward(self, x, delta: int = 1, mode: str | None = None,
                train_stats: bool = False, update_running: bool = False):
        """Returns (logits, ForwardTrace).

        ``train_stats`` selects batch statistics for normalization (vs the
        running moments); ``update_running`` folds the batch moments into
        the running ones and is the only state mutation a forward can do.
        """
        cfg = self.config
        mode = mode or self.default_mode()
        if mode != "float" and not self.binarized:
            raise ValueError("full-precision model only supports float mode")
        executed = cfg.executed_blocks(delta)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != cfg.input_time or x.shape[2] != cfg.input_freq:
            raise ValueError(
                f"expected (batch, {cfg.input_time}, {cfg.input_freq}) features, "
                f"got {x.shape}"
            )
        dual = self.dual_scale and mode != "float"
        s = self.store
        stages: dict = {}
        h, stages["conv1"] = self.conv1.forward(s, x[:, None, :, :])
        h = h.transpose(0, 2, 3, 1)  # channels-last so BN sees (…, C)
        h, stages["bn1"] = self.bn1.forward(s, h, 1, train_stats, update_running)
        h, stages["prelu1"] = self.prelu1.forward(s, h)
        h = h.transpose(0, 3, 1, 2)
        h, stages["conv2"] = self.conv2.forward(s, h, mode, dual)
        h = h.transpose(0, 2, 3, 1)
        h, stages["bn2"] = self.bn2.forward(s, h, 1, train_stats, update_running)
        h, stages["prelu2"] = self.prelu2.forward(s, h)
        bsz, t_out, f_out, c2 = h.shape
        r = h.reshape(bsz, t_out, f_out * c2)
        r, stages["neck"] = self.neck.forward(s, r, mode, dual)
        r, stages["neck_bn"] = self.neck_bn.forward(s, r, 1, train_stats, update_running)
        r, stages["neck_prelu"] = self.neck_prelu.forward(s, r)
        reps: dict[int, np.ndarray] = {}
        block_ctxs: dict[int, dict] = {}
        skip = None
        for l in executed:
            r, skip, block_ctxs[l] = self.blocks[l].forward(
                s, r, skip, delta, mode, dual, train_stats, update_running
            )
            reps[l] = r
        pooled = r.mean(axis=1)
        logits, stages["cls"] = self.classifier.forward(s, pooled)
        stages["seq_shape"] = (bsz, t_out, f_out, c2)
        trace = ForwardTrace(
            delta=delta, mode=mode, reps=reps, stages=stages,
            block_ctxs=block_ctxs, executed=executed, logits=logits,
        )
        return logits, trace

    # -- backward ----------------------------------------------------------

    def backward(self, trace: ForwardTrace, g_logits: np.ndarray,
                 rep_grads: dict[int, np.ndarray] | None = None) -> np.ndarray:
        """Accumulates parameter gradients; returns the input gradient.

        ``rep_grads`` lets a distillation loss inject extra gradient on the
        recorded block representations (added where each was produced).
        """
        if trace.mode == "packed":
            raise ValueError("packed forward is inference-only")
        s = self.store
        stages = trace.stages
        g_pooled = self.classifier.backward(s, stages["cls"], np.asarray(g_logits))
        bsz, t_out, f_out, c2 = stages["seq_shape"]
        g_r = np.broadcast_to(g_pooled[:, None, :] / t_out,
                              (bsz, t_out, g_pooled.shape[-1])).copy()
        g_skip = None
        for l in reversed(trace.executed):
            if rep_grads and l in rep_grads:
                g_r = g_r + rep_grads[l]
            g_r, g_skip = self.blocks[l].backward(s, trace.block_ctxs[l], g_r, g_skip)
        g_r = self.neck_prelu.backward(s, stages["neck_prelu"], g_r)
        g_r = self.neck_bn.backward(s, stages["neck_bn"], g_r)
        g_r = self.neck.backward(s, stages["neck"], g_r)
        g_h = g_r.reshape(bsz, t_out, f_out, c2)
        g_h = self.prelu2.backward(s, stages["prelu2"], g_h)
        g_h = self.bn2.backward(s, stages["bn2"], g_h)
        g_h = self.conv2.backward(s, stages["conv2"], g_h.transpose(0, 3, 1, 2))
        g_h = g_h.transpose(0, 2, 3, 1)
        g_h = self.prelu1.backward(s, stages["prelu1"], g_h)
        g_h = self.bn1.backward(s, stages["bn1"], g_h)
        g_x = self.conv1.backward(s, stages["conv1"], g_h.transpose(0, 3, 1, 2))
        return g_x[:, 0, :, :]

    # -- introspection ------------------------------------------------------

    def binarized_cores(self) -> dict:
        """Binarized matmul units, keyed by checkpoint prefix."""
        units = {"head.l2": self.conv2.core, "neck": self.neck.core}
        for l, blk in self.blocks.items():
            units[f"block{l}.proj"] = blk.proj.core
            units[f"block{l}.hid"] = blk.hid.core
        return units

    def memory_units(self) -> dict:
        return {f"block{l}.mem": blk.mem for l, blk in self.blocks.items()}

    def binarizer_inputs(self, trace: ForwardTrace) -> dict[str, np.ndarray]:
        """Pre-binarization activation tensors cached by a quantized forward."""
        if trace.mode == "float":
            raise ValueError("float forward caches no binarizer inputs")
        acts = {"head.l2": trace.stages["conv2"]["bin"]["a"],
                "neck": trace.stages["neck"]["bin"]["a"]}
        for l in trace.executed:
            ctx = trace.block_ctxs[l]
            acts[f"block{l}.proj"] = ctx["proj"]["bin"]["a"]
            acts[f"block{l}.mem"] = ctx["mem"]["bin"]["a"]
            acts[f"block{l}.hid"] = ctx["hid"]["bin"]["a"]
        return acts


def make_teacher(config: ModelConfig, seed: int = 0) -> ThinnableFsmn:
    """Full-precision counterpart: same topology, all blocks, one BN set."""
    teacher_cfg = replace(config, delta_set=(1,))
    return ThinnableFsmn(teacher_cfg, seed=seed, binarized=False)


def desk_config(num_classes: int = 4, input_time: int = 32,
                input_freq: int = 40) -> ModelConfig:
    """Small configuration sized for CPU-minute toy runs."""
    return ModelConfig(
        num_classes=num_classes,
        backbone_dim=24,
        hidden_dim=32,
        head_channels=(6, 6),
        input_time=input_time,
        input_freq=input_freq,
        memory=MemoryBlockConfig(n_back=4, n_ahead=2),
    )


def thinned_copy(model: ThinnableFsmn, delta: int) -> ThinnableFsmn:
    """Explicitly built sub-network containing exactly the blocks that a
    ``delta`` forward executes, with that variant's batch-norm set.

    Its plain (delta=1) forward must match ``model.forward(x, delta)``
    exactly; tests use this as the structural-equality oracle.
    """
    cfg = model.config
    blocks = cfg.executed_blocks(delta)
    sub_cfg = replace(cfg, num_blocks=len(blocks), delta_set=(1,))
    sub = ThinnableFsmn(sub_cfg, seed=0, binarized=model.binarized,
                        binarizer_kind=model.kind, dual_scale=model.dual_scale)
    multi_bank = len(cfg.delta_set) > 1

    def source_name(name: str) -> str:
        if name.startswith("block"):
            idx, rest = name[5:].split(".", 1)
            src_block = blocks[int(idx) - 1]
            if rest.startswith("bn.") and multi_bank:
                rest = f"bn{delta}." + rest[3:]
            return f"block{src_block}.{rest}"
        return name

    for name in sub.store.params:
        sub.store.params[name][...] = model.store.params[source_name(name)]
    for name in sub.store.state:
        sub.store.state[name][...] = model.store.state[source_name(name)]
    return sub
