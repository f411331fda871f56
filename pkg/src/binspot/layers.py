"""Layer primitives with explicit forward/backward passes.

Every layer follows the same protocol: ``forward`` returns the output plus
a context dict caching whatever backward needs, and ``backward`` consumes
that context, accumulates parameter gradients into the store, and returns
the input gradient. No autograd: the chain rules through binarizers, batch
norm, PReLU and the memory taps are written out by hand so they can be
checked against finite differences of the surrogate loss.

Forward ``mode`` selects how binarized units quantize:

* ``"float"``     - no quantization anywhere (teacher path);
* ``"quant"``     - hard ±1 binarization (training/eval forward);
* ``"surrogate"`` - piecewise-linear binarizer stand-ins, making the whole
  network differentiable for gradient checking;
* ``"packed"``    - like ``"quant"`` but matmuls and tap products run on
  bit-packed operands through the XNOR/popcount kernels.

The mode only changes forward values; backward applies one set of chain
rules to whatever was cached.
"""

from __future__ import annotations

import numpy as np

from . import binarize
from .binarize import BinarizerParams
from .bitkernel import bgemm_reference
from .bitpack import BitTensor, pack_signs, unpack_signs

MODES = ("float", "quant", "surrogate", "packed")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ParamStore:
    """Flat name -> array registry for parameters, gradients and state.

    ``params`` are trained and checkpointed; ``state`` (batch-norm running
    statistics) is checkpointed but not touched by the optimizer. Gradients
    accumulate across multiple backward passes until ``zero_grads``.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def register(self, name: str, value: np.ndarray) -> str:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        return name

    def register_state(self, name: str, value: np.ndarray) -> str:
        if name in self.state:
            raise ValueError(f"duplicate state {name}")
        self.state[name] = np.asarray(value, dtype=np.float64)
        return name

    def add_grad(self, name: str, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.params[name].shape:
            g = g.reshape(self.params[name].shape)
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.copy()

    def grad(self, name: str) -> np.ndarray:
        return self.grads.get(name, np.zeros_like(self.params[name]))

    def zero_grads(self) -> None:
        self.grads = {}


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# activation binarizer shared by all binarized units


class UnitBinarizer:
    """Quantizes one unit's activations; owns that unit's threshold/ratio.

    ``kind="lpb"`` registers a learnable threshold and backward ratio;
    ``kind="ste"`` is the fixed sign/straight-through binarizer (the vanilla
    baseline) with no learnable parameters.
    """

    def __init__(self, store: ParamStore, prefix: str, kind: str = "lpb"):
        if kind not in ("lpb", "ste"):
            raise ValueError(f"unknown binarizer kind {kind!r}")
        self.kind = kind
        if kind == "lpb":
            self.theta = store.register(prefix + ".theta", np.zeros(1))
            self.ratio = store.register(prefix + ".ratio", np.ones(1))

    def _params(self, store: ParamStore) -> BinarizerParams:
        if self.kind == "ste":
            return BinarizerParams(theta=0.0, ratio=1.0)
        return BinarizerParams(
            theta=float(store.params[self.theta][0]),
            ratio=float(store.params[self.ratio][0]),
        )

    def forward(self, store: ParamStore, a: np.ndarray, mode: str, dual: bool):
        """Returns (s1, s2, alpha2, ctx); s2/alpha2 are None in single-scale."""
        p = self._params(store)
        if mode == "surrogate":
            s1 = (
                binarize.ste_surrogate(a)
                if self.kind == "ste"
                else binarize.lpb_surrogate(a, p)
            )
        else:
            s1 = binarize.lpb_forward(a, p)  # theta=0 for ste, i.e. plain sign
        s2 = alpha2 = e = None
        if dual:
            e = a - s1
            alpha2 = float(np.mean(np.abs(e)))
            s2 = binarize.ste_surrogate(e) if mode == "surrogate" else binarize.sign_binarize(e)
        ctx = {"a": a, "e": e, "p": p, "dual": dual}
        return s1, s2, alpha2, ctx

    def backward(self, store: ParamStore, ctx, g_s1, g_s2=None, g_alpha2: float = 0.0):
        """Chain rule through b1 = q(a), e = a - b1, alpha2 = mean|e|, b2 = sign(e)."""
        a, e, p = ctx["a"], ctx["e"], ctx["p"]
        if ctx["dual"]:
            g_e = binarize.ste_backward(g_s2, e) + g_alpha2 * np.sign(e) / e.size
            g_b1 = g_s1 - g_e
        else:
            g_e = 0.0
            g_b1 = g_s1
        if self.kind == "ste":
            g_a = binarize.ste_backward(g_b1, a)
        else:
            g_a, g_theta, g_ratio = binarize.lpb_backward(g_b1, a, p)
            store.add_grad(self.theta, np.array([g_theta]))
            store.add_grad(self.ratio, np.array([g_ratio]))
        return g_a + g_e


# ---------------------------------------------------------------------------
# matmul cores


def _binary_weight_pieces(store, w_name, mode):
    """Weight-side quantization: (sign matrix, alpha_w, w)."""
    w = store.params[w_name]
    alpha = binarize.weight_scale(w)
    bw = binarize.ste_surrogate(w) if mode == "surrogate" else binarize.sign_binarize(w)
    return bw, alpha, w


class BinaryMatmulCore:
    """out = alpha_w * (s1 @ bw.T) [+ alpha2 * alpha_w * (s2 @ bw.T)] + bias.

    Operates on row matrices (N, in_dim); the owning layer handles any
    reshaping (sequences, im2col). Weight gradients combine the straight
    through path into sign(w) with the analytic path into alpha_w=mean|w|.
    """

    def __init__(self, store: ParamStore, prefix: str, out_dim: int, in_dim: int,
                 rng: np.random.Generator):
        self.w = store.register(prefix + ".w", _he_init(rng, (out_dim, in_dim), in_dim))
        self.b = store.register(prefix + ".b", np.zeros(out_dim))

    def forward(self, store, s1, s2, alpha2, mode, pad_mask=None):
        """``pad_mask`` marks entries that are logically zero (conv padding).

        The packed path cannot represent zeros, so padded entries are packed
        as +1 and the exact surplus ``pad_mask @ bw.T`` is subtracted from
        the raw popcount result; the float-simulated path sees real zeros.
        """
        bw, alpha, w = _binary_weight_pieces(store, self.w, mode)
        if mode == "packed":
            bits = pack_signs(bw)
            correction = 0.0
            if pad_mask is not None:
                s1 = np.where(pad_mask, 1.0, s1)
                s2 = np.where(pad_mask, 1.0, s2) if s2 is not None else None
                correction = pad_mask.astype(np.float64) @ bw.T
            raw1 = bgemm_reference(pack_signs(s1), bits) - correction
            raw2 = (
                bgemm_reference(pack_signs(s2), bits) - correction
                if s2 is not None
                else None
            )
        else:
            raw1 = s1 @ bw.T
            raw2 = s2 @ bw.T if s2 is not None else None
        out = raw1 * alpha
        if raw2 is not None:
            out = out + alpha2 * (raw2 * alpha)
        out = out + store.params[self.b]
        ctx = {"s1": s1, "s2": s2, "alpha2": alpha2, "alpha": alpha,
               "bw": bw, "w": w, "raw1": raw1, "raw2": raw2}
        return out, ctx

    def backward(self, store, ctx, g):
        """Returns (g_s1, g_s2, g_alpha2)."""
        s1, s2, alpha2 = ctx["s1"], ctx["s2"], ctx["alpha2"]
        alpha, bw, w = ctx["alpha"], ctx["bw"], ctx["w"]
        store.add_grad(self.b, g.sum(axis=0))
        g_scaled = g * alpha  # (N, out)
        g_s1 = g_scaled @ bw
        g_bw = g_scaled.T @ s1
        g_alpha = np.sum(g * ctx["raw1"], axis=0)
        g_s2 = g_alpha2 = None
        if s2 is not None:
            g_s2 = alpha2 * g_s1
            g_bw += alpha2 * (g_scaled.T @ s2)
            g_alpha += alpha2 * np.sum(g * ctx["raw2"], axis=0)
            g_alpha2 = float(np.sum(g_scaled * ctx["raw2"]))
        g_w = binarize.ste_backward(g_bw, w)
        g_w += (g_alpha / w.shape[1])[:, None] * np.sign(w)
        store.add_grad(self.w, g_w)
        return g_s1, g_s2, g_alpha2

    def float_forward(self, store, x):
        w = store.params[self.w]
        out = x @ w.T + store.params[self.b]
        return out, {"x": x, "w": w}

    def float_backward(self, store, ctx, g):
        store.add_grad(self.b, g.sum(axis=0))
        store.add_grad(self.w, g.T @ ctx["x"])
        return g @ ctx["w"]


class BinarizedLinear:
    """Binarized linear unit over the last axis of (..., in_dim) inputs."""

    def __init__(self, store, prefix, out_dim, in_dim, rng, kind="lpb"):
        self.core = BinaryMatmulCore(store, prefix, out_dim, in_dim, rng)
        self.binarizer = UnitBinarizer(store, prefix, kind)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, store, x, mode, dual):
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.in_dim)
        if mode == "float":
            out, core_ctx = self.core.float_forward(store, flat)
            ctx = {"mode": mode, "core": core_ctx, "lead": lead}
        else:
            s1, s2, alpha2, bin_ctx = self.binarizer.forward(store, flat, mode, dual)
            out, core_ctx = self.core.forward(store, s1, s2, alpha2, mode)
            ctx = {"mode": mode, "core": core_ctx, "bin": bin_ctx, "lead": lead}
        return out.reshape(*lead, self.out_dim), ctx

    def backward(self, store, ctx, g):
        g = g.reshape(-1, self.out_dim)
        if ctx["mode"] == "float":
            gx = self.core.float_backward(store, ctx["core"], g)
        else:
            g_s1, g_s2, g_alpha2 = self.core.backward(store, ctx["core"], g)
            gx = self.binarizer.backward(store, ctx["bin"], g_s1, g_s2, g_alpha2 or 0.0)
        return gx.reshape(*ctx["lead"], self.in_dim)


class FPLinear:
    """Plain full-precision linear (classifier); never binarized."""

    def __init__(self, store, prefix, out_dim, in_dim, rng):
        self.w = store.register(prefix + ".w", _he_init(rng, (out_dim, in_dim), in_dim))
        self.b = store.register(prefix + ".b", np.zeros(out_dim))

    def forward(self, store, x):
        return x @ store.params[self.w].T + store.params[self.b], {"x": x}

    def backward(self, store, ctx, g):
        store.add_grad(self.b, g.sum(axis=0))
        store.add_grad(self.w, g.T @ ctx["x"])
        return g @ store.params[self.w]


# ---------------------------------------------------------------------------
# convolutions (im2col based)


def im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(B, C, H, W) -> (B, OH*OW, C*k*k) patch matrix."""
    bsz, ch, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((bsz, ch, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(bsz, oh * ow, ch * k * k), (oh, ow)


def col2im(g_cols: np.ndarray, x_shape, k: int, stride: int, pad: int, oh: int, ow: int):
    """Adjoint of im2col: scatter-add patch gradients back to input positions."""
    bsz, ch, h, w = x_shape
    g = g_cols.reshape(bsz, oh, ow, ch, k, k).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((bsz, ch, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, :, i, j]
    return gx[:, :, pad : pad + h, pad : pad + w]


class Conv2dFP:
    """Full-precision 2D convolution (the never-binarized head entry layer)."""

    def __init__(self, store, prefix, out_ch, in_ch, k, stride, pad, rng):
        fan_in = in_ch * k * k
        self.w = store.register(prefix + ".w", _he_init(rng, (out_ch, in_ch, k, k), fan_in))
        self.b = store.register(prefix + ".b", np.zeros(out_ch))
        self.k, self.stride, self.pad = k, stride, pad
        self.out_ch, self.in_ch = out_ch, in_ch

    def forward(self, store, x):
        cols, (oh, ow) = im2col(x, self.k, self.stride, self.pad)
        wmat = store.params[self.w].reshape(self.out_ch, -1)
        out = cols @ wmat.T + store.params[self.b]
        out = out.reshape(x.shape[0], oh, ow, self.out_ch).transpose(0, 3, 1, 2)
        return out, {"cols": cols, "x_shape": x.shape, "oh": oh, "ow": ow}

    def backward(self, store, ctx, g):
        oh, ow = ctx["oh"], ctx["ow"]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        cols = ctx["cols"].reshape(-1, ctx["cols"].shape[-1])
        store.add_grad(self.b, gmat.sum(axis=0))
        store.add_grad(self.w, (gmat.T @ cols).reshape(store.params[self.w].shape))
        g_cols = gmat @ store.params[self.w].reshape(self.out_ch, -1)
        g_cols = g_cols.reshape(ctx["x_shape"][0], oh * ow, -1)
        return col2im(g_cols, ctx["x_shape"], self.k, self.stride, self.pad, oh, ow)


class BinarizedConv2d:
    """Binarized 2D convolution.

    The activation tensor is quantized before patch extraction so the
    second-scale statistic is taken over the raw activations, not over the
    im2col matrix where border elements would be replicated unevenly.
    """

    def __init__(self, store, prefix, out_ch, in_ch, k, stride, pad, rng, kind="lpb"):
        fan_in = in_ch * k * k
        self.core = BinaryMatmulCore(store, prefix, out_ch, fan_in, rng)
        self.binarizer = UnitBinarizer(store, prefix, kind)
        self.k, self.stride, self.pad = k, stride, pad
        self.out_ch, self.in_ch = out_ch, in_ch

    def forward(self, store, x, mode, dual):
        if mode == "float":
            cols, (oh, ow) = im2col(x, self.k, self.stride, self.pad)
            flat = cols.reshape(-1, cols.shape[-1])
            out, core_ctx = self.core.float_forward(store, flat)
            ctx = {"mode": mode, "core": core_ctx, "x_shape": x.shape, "oh": oh, "ow": ow}
        else:
            s1, s2, alpha2, bin_ctx = self.binarizer.forward(store, x, mode, dual)
            cols1, (oh, ow) = im2col(s1, self.k, self.stride, self.pad)
            flat1 = cols1.reshape(-1, cols1.shape[-1])
            flat2 = None
            if s2 is not None:
                cols2, _ = im2col(s2, self.k, self.stride, self.pad)
                flat2 = cols2.reshape(-1, cols2.shape[-1])
            pad_mask = None
            if mode == "packed" and self.pad > 0:
                ones = np.ones((1,) + x.shape[1:], dtype=np.float64)
                mask_cols, _ = im2col(ones, self.k, self.stride, self.pad)
                mask = mask_cols.reshape(-1, mask_cols.shape[-1]) == 0.0
                pad_mask = np.tile(mask, (x.shape[0], 1))
            out, core_ctx = self.core.forward(store, flat1, flat2, alpha2, mode,
                                              pad_mask=pad_mask)
            ctx = {"mode": mode, "core": core_ctx, "bin": bin_ctx,
                   "x_shape": x.shape, "oh": oh, "ow": ow}
        bsz = x.shape[0]
        out = out.reshape(bsz, ctx["oh"], ctx["ow"], self.out_ch).transpose(0, 3, 1, 2)
        return out, ctx

    def backward(self, store, ctx, g):
        oh, ow = ctx["oh"], ctx["ow"]
        bsz = ctx["x_shape"][0]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        if ctx["mode"] == "float":
            g_flat = self.core.float_backward(store, ctx["core"], gmat)
            g_cols = g_flat.reshape(bsz, oh * ow, -1)
            return col2im(g_cols, ctx["x_shape"], self.k, self.stride, self.pad, oh, ow)
        g_f1, g_f2, g_alpha2 = self.core.backward(store, ctx["core"], gmat)
        g_s1 = col2im(g_f1.reshape(bsz, oh * ow, -1), ctx["x_shape"],
                      self.k, self.stride, self.pad, oh, ow)
        g_s2 = None
        if g_f2 is not None:
            g_s2 = col2im(g_f2.reshape(bsz, oh * ow, -1), ctx["x_shape"],
                          self.k, self.stride, self.pad, oh, ow)
        return self.binarizer.backward(store, ctx["bin"], g_s1, g_s2, g_alpha2 or 0.0)


# ---------------------------------------------------------------------------
# normalization / activation


class BatchNormBank:
    """Batch norm with one parameter/statistics set per bank key.

    Thinnable blocks pass their execution variant as the key, so each
    variant normalizes with its own affine parameters and running moments
    and never touches a sibling's. Head/neck layers use a single-key bank.
    """

    def __init__(self, store, prefix, dim, keys):
        self.keys = tuple(keys)
        self.gamma, self.beta, self.mean, self.var = {}, {}, {}, {}
        for key in self.keys:
            tag = f"{prefix}.bn{key}" if len(self.keys) > 1 else f"{prefix}.bn"
            self.gamma[key] = store.register(tag + ".gamma", np.ones(dim))
            self.beta[key] = store.register(tag + ".beta", np.zeros(dim))
            self.mean[key] = store.register_state(tag + ".running_mean", np.zeros(dim))
            self.var[key] = store.register_state(tag + ".running_var", np.ones(dim))

    def forward(self, store, x, key, train_stats: bool, update_running: bool):
        axes = tuple(range(x.ndim - 1))
        if train_stats:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_running:
                store.state[self.mean[key]] *= 1.0 - BN_MOMENTUM
                store.state[self.mean[key]] += BN_MOMENTUM * mu
                store.state[self.var[key]] *= 1.0 - BN_MOMENTUM
                store.state[self.var[key]] += BN_MOMENTUM * var
        else:
            mu = store.state[self.mean[key]]
            var = store.state[self.var[key]]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv_std
        y = store.params[self.gamma[key]] * xhat + store.params[self.beta[key]]
        n = x.size // x.shape[-1]
        ctx = {"xhat": xhat, "inv_std": inv_std, "key": key,
               "train_stats": train_stats, "n": n, "axes": axes}
        return y, ctx

    def backward(self, store, ctx, g):
        key, axes = ctx["key"], ctx["axes"]
        xhat, inv_std, n = ctx["xhat"], ctx["inv_std"], ctx["n"]
        store.add_grad(self.gamma[key], np.sum(g * xhat, axis=axes))
        store.add_grad(self.beta[key], np.sum(g, axis=axes))
        g_xhat = g * store.params[self.gamma[key]]
        if not ctx["train_stats"]:
            return g_xhat * inv_std
        sum_g = np.sum(g_xhat, axis=axes)
        sum_gx = np.sum(g_xhat * xhat, axis=axes)
        return (inv_std / n) * (n * g_xhat - sum_g - xhat * sum_gx)


class PReLU:
    """Leaky rectifier with a learnable per-channel negative slope."""

    def __init__(self, store, prefix, dim, init_slope=0.25):
        self.slope = store.register(prefix + ".slope", np.full(dim, init_slope))

    def forward(self, store, x):
        neg = x < 0
        slope = store.params[self.slope]
        y = np.where(neg, slope * x, x)
        return y, {"x": x, "neg": neg}

    def backward(self, store, ctx, g):
        x, neg = ctx["x"], ctx["neg"]
        axes = tuple(range(x.ndim - 1))
        store.add_grad(self.slope, np.sum(g * x * neg, axis=axes))
        return g * np.where(neg, store.params[self.slope], 1.0)


# ---------------------------------------------------------------------------
# FSMN memory block


def _packed_tap_product(sign_rows: np.ndarray, tap_signs: np.ndarray) -> np.ndarray:
    """Elementwise ±1 product via packed XNOR, unpacked back to floats.

    ``sign_rows`` is (N, D) of ±1, ``tap_signs`` (D,) of ±1. XNOR sets a bit
    where the operands agree (product +1); padding is re-zeroed to keep the
    packing discipline.
    """
    frames = pack_signs(sign_rows)
    tap = pack_signs(tap_signs[None, :])
    words = ~(frames.words ^ tap.words)
    words[:, -1] &= frames.tail_mask()
    prod = BitTensor(frames.rows, frames.logical_cols, words)
    return unpack_signs(prod)


class MemoryBlock:
    """Temporal tap filter over projected frames.

    Taps are depthwise ±1 vectors with one scale each; look-back tap i reads
    the frame ``i*stride1`` steps back, look-ahead tap j the frame
    ``j*stride2`` ahead, out-of-range frames contributing zero. The skip
    input (previous block's memory output) and the raw projection are added
    unquantized.
    """

    def __init__(self, store, prefix, dim, n_back, n_ahead, stride1, stride2,
                 rng, kind="lpb"):
        self.dim = dim
        self.n_back, self.n_ahead = n_back, n_ahead
        self.stride1, self.stride2 = stride1, stride2
        self.back = store.register(
            prefix + ".back", rng.normal(0.0, 0.5, size=(n_back + 1, dim))
        )
        self.ahead = (
            store.register(prefix + ".ahead", rng.normal(0.0, 0.5, size=(n_ahead, dim)))
            if n_ahead > 0
            else None
        )
        self.binarizer = UnitBinarizer(store, prefix, kind)

    def _shifts(self):
        back = [(i * self.stride1, i) for i in range(self.n_back + 1)]
        ahead = [(-j * self.stride2, j - 1) for j in range(1, self.n_ahead + 1)]
        return back, ahead

    def _tap_pieces(self, store, name, mode):
        w = store.params[name]
        alpha = binarize.weight_scale(w, axis=1)  # one scale per tap row
        bw = binarize.ste_surrogate(w) if mode == "surrogate" else binarize.sign_binarize(w)
        return bw, alpha, w

    @staticmethod
    def _shifted_add(out, contrib, shift):
        """out[:, t] += contrib[:, t - shift] with zero padding in time."""
        t = out.shape[1]
        if shift >= 0:
            if shift < t:
                out[:, shift:] += contrib[:, : t - shift]
        else:
            s = -shift
            if s < t:
                out[:, : t - s] += contrib[:, s:]

    def forward(self, store, p, skip_prev, mode, dual):
        out = p.copy()
        if skip_prev is not None:
            out += skip_prev
        if mode == "float":
            ctx = {"mode": mode, "p_shape": p.shape, "has_skip": skip_prev is not None}
            back_w = store.params[self.back]
            for shift, row in self._shifts()[0]:
                self._shifted_add(out, p * back_w[row], shift)
            if self.ahead is not None:
                ahead_w = store.params[self.ahead]
                for shift, row in self._shifts()[1]:
                    self._shifted_add(out, p * ahead_w[row], shift)
            ctx["p"] = p
            return out, ctx
        s1, s2, alpha2, bin_ctx = self.binarizer.forward(store, p, mode, dual)
        taps = []
        for group, name in (("back", self.back), ("ahead", self.ahead)):
            if name is None:
                continue
            bw, alpha, w = self._tap_pieces(store, name, mode)
            shifts = self._shifts()[0] if group == "back" else self._shifts()[1]
            for shift, row in shifts:
                tap_sign = bw[row]
                if mode == "packed":
                    flat1 = _packed_tap_product(s1.reshape(-1, self.dim), tap_sign)
                    prod1 = flat1.reshape(s1.shape)
                else:
                    prod1 = s1 * tap_sign
                contrib = alpha[row] * prod1
                prod2 = None
                if s2 is not None:
                    if mode == "packed":
                        prod2 = _packed_tap_product(
                            s2.reshape(-1, self.dim), tap_sign
                        ).reshape(s2.shape)
                    else:
                        prod2 = s2 * tap_sign
                    contrib = contrib + alpha[row] * alpha2 * prod2
                self._shifted_add(out, contrib, shift)
                taps.append({"group": group, "row": row, "shift": shift,
                             "prod1": prod1, "prod2": prod2})
        ctx = {"mode": mode, "bin": bin_ctx, "taps": taps, "s1": s1, "s2": s2,
               "alpha2": alpha2, "p_shape": p.shape,
               "has_skip": skip_prev is not None}
        return out, ctx

    @staticmethod
    def _shifted_gather(g, shift, t):
        """Gradient counterpart of _shifted_add: returns g[:, t + shift]-aligned view."""
        out = np.zeros_like(g)
        if shift >= 0:
            if shift < t:
                out[:, : t - shift] = g[:, shift:]
        else:
            s = -shift
            if s < t:
                out[:, s:] = g[:, : t - s]
        return out

    def backward(self, store, ctx, g):
        """Returns (g_p, g_skip)."""
        g_skip = g if ctx["has_skip"] else None
        t = ctx["p_shape"][1]
        if ctx["mode"] == "float":
            g_p = g.copy()
            p = ctx["p"]
            back_w = store.params[self.back]
            g_back = np.zeros_like(back_w)
            for shift, row in self._shifts()[0]:
                gs = self._shifted_gather(g, shift, t)
                g_p += gs * back_w[row]
                g_back[row] = np.sum(gs * p, axis=(0, 1))
            store.add_grad(self.back, g_back)
            if self.ahead is not None:
                ahead_w = store.params[self.ahead]
                g_ahead = np.zeros_like(ahead_w)
                for shift, row in self._shifts()[1]:
                    gs = self._shifted_gather(g, shift, t)
                    g_p += gs * ahead_w[row]
                    g_ahead[row] = np.sum(gs * p, axis=(0, 1))
                store.add_grad(self.ahead, g_ahead)
            return g_p, g_skip
        s1, s2, alpha2 = ctx["s1"], ctx["s2"], ctx["alpha2"]
        g_s1 = np.zeros_like(s1)
        g_s2 = np.zeros_like(s2) if s2 is not None else None
        g_alpha2 = 0.0
        pieces = {"back": self._tap_pieces(store, self.back, ctx["mode"])}
        if self.ahead is not None:
            pieces["ahead"] = self._tap_pieces(store, self.ahead, ctx["mode"])
        grads_w = {grp: np.zeros_like(pc[2]) for grp, pc in pieces.items()}
        for tap in ctx["taps"]:
            bw, alpha, w = pieces[tap["group"]]
            row, shift = tap["row"], tap["shift"]
            gs = self._shifted_gather(g, shift, t)
            tap_sign = bw[row]
            g_s1 += gs * (alpha[row] * tap_sign)
            g_bw = alpha[row] * np.sum(gs * s1, axis=(0, 1))
            g_alpha_row = np.sum(gs * tap["prod1"])
            if s2 is not None:
                g_s2 += gs * (alpha[row] * alpha2 * tap_sign)
                g_bw += alpha[row] * alpha2 * np.sum(gs * s2, axis=(0, 1))
                dot2 = float(np.sum(gs * tap["prod2"]))
                g_alpha_row += alpha2 * dot2
                g_alpha2 += alpha[row] * dot2
            g_row = binarize.ste_backward(g_bw, w[row])
            g_row += g_alpha_row * np.sign(w[row]) / self.dim
            grads_w[tap["group"]][row] += g_row
        store.add_grad(self.back, grads_w["back"])
        if self.ahead is not None:
            store.add_grad(self.ahead, grads_w["ahead"])
        g_p = g + self.binarizer.backward(store, ctx["bin"], g_s1, g_s2, g_alpha2)
        return g_p, g_skip
