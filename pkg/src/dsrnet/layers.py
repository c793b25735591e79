"""Forward/backward primitives on a dynamic tape.

Every op computes eagerly on numpy and, when given a ``Tape``, records a
closure that propagates gradients to its inputs.  The tape is rebuilt per
forward pass, which is what lets the gate route different samples through
different sub-graphs: the recorded program simply differs between batches.

Gradients accumulate additively into ``Tensor.grad``; parameter grads are
pre-allocated to zeros and therefore keep accumulating across backward
calls until the optimizer (or the caller) zeroes them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, elementwise_add, he_normal_init, Rng

# Cap on im2col buffer rows; larger convolutions stream in row blocks so the
# scratch buffer stays well under a gigabyte even for 1024x1024 inputs.
_GEMM_MAX_ROWS = 1 << 18

# A forward pass recorded on a tape may keep its im2col matrix alive for the
# backward pass (one fewer full rebuild per conv); per-conv cap in bytes.
# Kept small: a deep stack holds one cached matrix per conv at once.
_COLS_CACHE_BYTES = 24 << 20


@dataclass
class LayerParams:
    """Learnable weight + bias with paired grad accumulators and Adam state.

    ``weight`` is (out, in, kh, kw); fully connected layers use kh = kw = 1.
    ``bias`` is stored as (out, 1, 1, 1) so it round-trips through the 4-D
    tensor record format unchanged.
    """

    name: str
    weight: Tensor
    bias: Tensor
    adam_m_w: np.ndarray = field(init=False)
    adam_v_w: np.ndarray = field(init=False)
    adam_m_b: np.ndarray = field(init=False)
    adam_v_b: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight.grad = np.zeros_like(self.weight.data)
        self.bias.grad = np.zeros_like(self.bias.data)
        self.adam_m_w = np.zeros_like(self.weight.data)
        self.adam_v_w = np.zeros_like(self.weight.data)
        self.adam_m_b = np.zeros_like(self.bias.data)
        self.adam_v_b = np.zeros_like(self.bias.data)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def zero_grad(self) -> None:
        self.weight.grad = np.zeros_like(self.weight.data)
        self.bias.grad = np.zeros_like(self.bias.data)

    def num_params(self) -> int:
        return self.weight.data.size + self.bias.data.size


def make_conv(name: str, co: int, ci: int, k: int, rng: Rng, dtype=np.float32) -> LayerParams:
    """He-normal weight, zero bias."""
    w = he_normal_init((co, ci, k, k), rng, dtype=dtype)
    b = Tensor.zeros((co, 1, 1, 1), dtype=dtype)
    return LayerParams(name, w, b)


def make_linear(name: str, co: int, ci: int, rng: Rng, dtype=np.float32) -> LayerParams:
    return make_conv(name, co, ci, 1, rng, dtype=dtype)


class Tape:
    """Ordered record of ops; backward visits them in exact reverse order."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[str, Tensor, object]] = []

    def record(self, op: str, out: Tensor, bwd) -> None:
        self._nodes.append((op, out, bwd))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(everything) back through the recorded ops.

        Intermediate grads are reset per call; parameter grads accumulate.
        """
        for _, out, _ in self._nodes:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for _, out, bwd in reversed(self._nodes):
            if out.grad is not None:
                bwd(out.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_shape(x_shape, w_shape, pad: int):
    n, ci, h, w = x_shape
    co, ci_w, kh, kw = w_shape
    if ci != ci_w:
        raise ValueError(f"conv2d channel mismatch: input has {ci}, kernel expects {ci_w}")
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output dims non-positive: ({oh}, {ow}) from input ({h}, {w})")
    return n, co, oh, ow


def _pad_hw(xd: np.ndarray, pad: int) -> np.ndarray:
    # np.pad has too much call overhead for the tiny gradcheck shapes
    if pad == 0:
        return xd
    n, c, h, w = xd.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = xd
    return out


def _window_view(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n, ci, oh, ow, kh, kw) sliding view over the padded input."""
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, hp - kh + 1, wp - kw + 1, kh, kw), (sn, sc, sh, sw, sh, sw)
    )


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> np.ndarray:
    n = xp.shape[0]
    return _window_view(xp, kh, kw).transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)


def _conv_gemm(xp: np.ndarray, w: np.ndarray, oh: int, ow: int, keep_cols: bool = False):
    """Correlation via im2col + matmul, streamed in row blocks when large.

    Returns (out, cols); cols is only materialized for the single-shot path
    when the caller asks to keep it.
    """
    n = xp.shape[0]
    co, ci, kh, kw = w.shape
    wm = w.reshape(co, -1).T  # (ci*kh*kw, co)
    out = np.empty((n, co, oh, ow), dtype=xp.dtype)
    if n * oh * ow <= _GEMM_MAX_ROWS:
        cols = _im2col(xp, kh, kw, oh, ow)
        out[:] = (cols @ wm).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
        return out, (cols if keep_cols else None)
    win = _window_view(xp, kh, kw)
    rows_block = max(1, _GEMM_MAX_ROWS // ow)
    for i in range(n):
        for y0 in range(0, oh, rows_block):
            y1 = min(oh, y0 + rows_block)
            cols = win[i, :, y0:y1].transpose(1, 2, 0, 3, 4).reshape((y1 - y0) * ow, -1)
            out[i, :, y0:y1] = (cols @ wm).reshape(y1 - y0, ow, co).transpose(2, 0, 1)
    return out, None


def _conv_forward(xd: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int,
                  keep_cols: bool = False):
    _, co, oh, ow = _conv_out_shape(xd.shape, w.shape, pad)
    out, cols = _conv_gemm(_pad_hw(xd, pad), w, oh, ow, keep_cols=keep_cols)
    out += b.reshape(1, co, 1, 1)
    return out, cols


def conv2d_direct(xd: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int) -> np.ndarray:
    """Direct-summation reference path (slow; the in-tree correctness oracle)."""
    n, co, oh, ow = _conv_out_shape(xd.shape, w.shape, pad)
    _, ci, kh, kw = w.shape
    xp = _pad_hw(xd, pad)
    out = np.empty((n, co, oh, ow), dtype=xd.dtype)
    for i in range(n):
        for o in range(co):
            for y in range(oh):
                for x in range(ow):
                    acc = b.reshape(-1)[o]
                    for j in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, j, u, v] * xp[i, j, y + u, x + v]
                    out[i, o, y, x] = acc
    return out


def conv2d(x: Tensor, p: LayerParams, pad: int, stride: int = 1,
           tape: Tape | None = None, method: str = "gemm") -> Tensor:
    """2-D correlation with bias.  3x3 kernels with pad 1 preserve h, w.

    ``stride`` exists for signature generality but only 1 is accepted.
    ``method`` selects "gemm" (default) or "direct" (reference path); both
    share the same backward.
    """
    if stride != 1:
        raise ValueError(f"conv2d supports stride 1 only, got {stride}")
    co, ci, kh, kw = p.weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel dims must be odd, got ({kh}, {kw})")
    xd, w = x.data, p.weight.data
    b = p.bias.data.reshape(-1)
    want_cols = False
    if tape is not None and method == "gemm":
        n_, _, oh_, ow_ = _conv_out_shape(xd.shape, p.weight.shape, pad)
        want_cols = n_ * oh_ * ow_ * ci * kh * kw * xd.itemsize <= _COLS_CACHE_BYTES
    saved_cols = None
    if method == "direct":
        out_d = conv2d_direct(xd, w, b, pad)
    elif method == "gemm":
        out_d, saved_cols = _conv_forward(xd, w, b, pad, keep_cols=want_cols)
    else:
        raise ValueError(f"unknown conv2d method {method!r}")
    out = Tensor(out_d)

    if tape is not None:
        n, _, oh, ow = out_d.shape

        def bwd(gout: np.ndarray) -> None:
            gm = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(-1, co)
            _accum(p.bias, gm.sum(axis=0).reshape(co, 1, 1, 1))
            cols = saved_cols
            if cols is None:
                cols = _im2col(_pad_hw(xd, pad), kh, kw, oh, ow)
            _accum(p.weight, (gm.T @ cols).reshape(w.shape))
            dcols = gm @ w.reshape(co, -1)
            dc = dcols.reshape(n, oh, ow, ci, kh, kw)
            hp, wp = xd.shape[2] + 2 * pad, xd.shape[3] + 2 * pad
            gxp = np.zeros((n, ci, hp, wp), dtype=xd.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + oh, v:v + ow] += dc[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + xd.shape[2], pad:pad + xd.shape[3]] if pad else gxp
            _accum(x, np.ascontiguousarray(gx))

        tape.record("conv2d", out, bwd)
    return out


# ---------------------------------------------------------------------------
# pointwise and shape ops
# ---------------------------------------------------------------------------


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        mask = x.data > 0  # gradient at exactly 0 is 0

        def bwd(gout):
            _accum(x, gout * mask)

        tape.record("relu", out, bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    out = elementwise_add(a, b)
    if tape is not None:

        def bwd(gout):
            _accum(a, gout)
            _accum(b, gout)

        tape.record("add", out, bwd)
    return out


def linear(x: Tensor, p: LayerParams, tape: Tape | None = None) -> Tensor:
    """Fully connected layer on (n, ci, 1, 1) tensors."""
    n, ci, h, w = x.shape
    if h != 1 or w != 1:
        raise ValueError(f"linear expects 1x1 spatial dims, got {x.shape}")
    co, ci_w, _, _ = p.weight.shape
    if ci != ci_w:
        raise ValueError(f"linear channel mismatch: input has {ci}, weight expects {ci_w}")
    xm = x.data.reshape(n, ci)
    wm = p.weight.data.reshape(co, ci)
    out_m = xm @ wm.T + p.bias.data.reshape(co)
    out = Tensor(out_m.reshape(n, co, 1, 1))
    if tape is not None:

        def bwd(gout):
            gm = gout.reshape(n, co)
            _accum(p.bias, gm.sum(axis=0).reshape(co, 1, 1, 1))
            _accum(p.weight, (gm.T @ xm).reshape(p.weight.shape))
            _accum(x, (gm @ wm).reshape(x.shape))

        tape.record("linear", out, bwd)
    return out


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    if tape is not None:

        def bwd(gout):
            g = np.empty_like(x.data)
            g[:] = gout / (h * w)
            _accum(x, g)

        tape.record("global_avg_pool", out, bwd)
    return out


def softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Row softmax over the channel axis of (n, k, 1, 1), max-subtracted."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_d = e / e.sum(axis=1, keepdims=True)
    out = Tensor(out_d)
    if tape is not None:

        def bwd(gout):
            dot = (gout * out_d).sum(axis=1, keepdims=True)
            _accum(x, (gout - dot) * out_d)

        tape.record("softmax", out, bwd)
    return out


def pixel_shuffle(x: Tensor, s: int, tape: Tape | None = None) -> Tensor:
    """Rearrange (n, c*s^2, h, w) into (n, c, h*s, w*s).

    out[i, j, y*s+dy, x*s+dx] = x[i, j*s^2 + dy*s + dx, y, x]; pure permutation.
    """
    n, cs2, h, w = x.shape
    if cs2 % (s * s) != 0:
        raise ValueError(f"pixel_shuffle needs channels divisible by s^2={s*s}, got {cs2}")
    c = cs2 // (s * s)
    out_d = np.ascontiguousarray(
        x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)
    )
    out = Tensor(out_d)
    if tape is not None:

        def bwd(gout):
            g = gout.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape)
            _accum(x, np.ascontiguousarray(g))

        tape.record("pixel_shuffle", out, bwd)
    return out


# ---------------------------------------------------------------------------
# batch routing ops (used by the gated branch)
# ---------------------------------------------------------------------------


def take_batch(x: Tensor, idx: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Gather a sub-batch by (unique) sample indices."""
    out = Tensor(x.data[idx])
    if tape is not None:

        def bwd(gout):
            g = np.zeros_like(x.data)
            g[idx] = gout
            _accum(x, g)

        tape.record("take_batch", out, bwd)
    return out


def add_rows(base: Tensor, x: Tensor, idx: np.ndarray, tape: Tape | None = None) -> Tensor:
    """out = base with x added into the rows named by (unique) idx."""
    out_d = base.data.copy()
    out_d[idx] += x.data
    out = Tensor(out_d)
    if tape is not None:

        def bwd(gout):
            _accum(base, gout)
            _accum(x, gout[idx].copy())

        tape.record("add_rows", out, bwd)
    return out


def scale_rows(x: Tensor, s: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-sample scalar scaling: out[i] = s[i,0,0,0] * x[i]."""
    if s.shape != (x.shape[0], 1, 1, 1):
        raise ValueError(f"scale_rows expects scales shaped (n,1,1,1), got {s.shape}")
    out = Tensor(x.data * s.data)
    if tape is not None:

        def bwd(gout):
            _accum(x, gout * s.data)
            _accum(s, (gout * x.data).sum(axis=(1, 2, 3), keepdims=True))

        tape.record("scale_rows", out, bwd)
    return out


def select_col(x: Tensor, j: int, tape: Tape | None = None) -> Tensor:
    """Slice channel j of (n, k, 1, 1) as (n, 1, 1, 1)."""
    out = Tensor(x.data[:, j:j + 1].copy())
    if tape is not None:

        def bwd(gout):
            g = np.zeros_like(x.data)
            g[:, j:j + 1] = gout
            _accum(x, g)

        tape.record("select_col", out, bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params: list[LayerParams], eps: float = 1e-5) -> float:
    """Compare analytic grads of a scalar composite against central differences.

    ``f(tape)`` must run the forward pass and return the scalar loss tensor,
    recording on ``tape`` when one is given.  Use f64 parameters and inputs
    placed away from ReLU kinks (no pre-activation within 10*eps of zero),
    otherwise the finite-difference step straddles the non-smoothness.

    Returns max over all parameter elements of |a - n| / max(1e-8, |a| + |n|).
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = f(tape)
    if not np.isfinite(loss.item()):
        raise ValueError("grad_check: non-finite loss")
    tape.backward(loss)
    analytic = [(p.weight.grad.copy(), p.bias.grad.copy()) for p in params]

    def loss_at() -> float:
        val = f(None).item()
        if not np.isfinite(val):
            raise ValueError("grad_check: non-finite loss during perturbation")
        return val

    max_err = 0.0
    for p, (gw, gb) in zip(params, analytic):
        for arr, g in ((p.weight.data, gw), (p.bias.data, gb)):
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = loss_at()
                flat[k] = orig - eps
                down = loss_at()
                flat[k] = orig
                numeric = (up - down) / (2 * eps)
                a = gflat[k]
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                if err > max_err:
                    max_err = err
    return max_err
