"""DSRNet assembly: block structure, per-sample gated routing, counters, checkpoints.

The network is four stages: a residual enhancement stack (reb), a wide
enhancement stage made of a complementary conv branch (cb) plus a gate
mechanism (gm) routing a fixed (fdg) and a selected (sdg) dynamic branch,
a feature refinement stack (frb) with a long skip from reb, and a
sub-pixel reconstruction head (rb).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .layers import LayerParams, Tape, make_conv, make_linear
from .tensor import DTYPES, Rng, Tensor, read_tensor_record, write_tensor_record

VARIANTS = (
    "full",
    "no_frb_last_layer",
    "no_frb_last_layer_and_residual",
    "no_frb",
    "reb_cb_rb",
    "reb_rb",
    "reb_minus2_rb",
    "reb_first4_rb",
    "no_fdg",
    "no_sdg",
)

MODEL_MAGIC = b"DSRN"
MODEL_VERSION = 1


@dataclass
class ModelConfig:
    scale: int = 2
    width: int = 64
    in_channels: int = 3
    gate_threshold: float = 0.75
    gate_hidden: int = 16
    variant: str = "full"
    gate_train_mode: str = "soft_scale"
    dtype: str = "f32"

    def validate(self) -> "ModelConfig":
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be one of 2, 3, 4, got {self.scale}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if not 0.0 < self.gate_threshold < 1.0:
            raise ValueError(f"gate_threshold must lie in (0, 1), got {self.gate_threshold}")
        if self.gate_hidden < 1:
            raise ValueError(f"gate_hidden must be >= 1, got {self.gate_hidden}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.gate_train_mode != "soft_scale":
            raise ValueError(f"unknown gate_train_mode {self.gate_train_mode!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "width": self.width,
            "in_channels": self.in_channels,
            "gate_threshold": self.gate_threshold,
            "gate_hidden": self.gate_hidden,
            "variant": self.variant,
            "gate_train_mode": self.gate_train_mode,
            "dtype": self.dtype,
        }


@dataclass(frozen=True)
class _Structure:
    """Which sub-blocks a variant keeps, and their depths."""

    reb_layers: int
    reb_residual: bool
    has_cb: bool
    has_gm: bool
    has_fdg: bool
    has_sdg: bool
    frb_layers: int  # 0, 5, or 6
    frb_residual: bool


_STRUCTURES = {
    "full": _Structure(6, True, True, True, True, True, 6, True),
    "no_frb_last_layer": _Structure(6, True, True, True, True, True, 5, True),
    "no_frb_last_layer_and_residual": _Structure(6, True, True, True, True, True, 5, False),
    "no_frb": _Structure(6, True, True, True, True, True, 0, False),
    "reb_cb_rb": _Structure(6, True, True, False, False, False, 0, False),
    "reb_rb": _Structure(6, True, False, False, False, False, 0, False),
    "reb_minus2_rb": _Structure(4, True, False, False, False, False, 0, False),
    "reb_first4_rb": _Structure(4, False, False, False, False, False, 0, False),
    # Kept as named in the ablation table: dropping either dynamic gate also
    # drops the refinement stack, and without sdg the gate mechanism has
    # nothing left to route, so it goes too.
    "no_fdg": _Structure(6, True, True, True, False, True, 0, False),
    "no_sdg": _Structure(6, True, True, False, True, False, 0, False),
}


@dataclass
class GateDecision:
    """Per-sample softmax probabilities and the resulting routing choice."""

    probs: Tensor  # (n, 2, 1, 1)
    use_sdg: np.ndarray  # (n,) bool; true iff probs[i, 1] < threshold (strict)

    @property
    def p2(self) -> np.ndarray:
        return self.probs.data[:, 1, 0, 0]

    @property
    def routed_fraction(self) -> float:
        return float(self.use_sdg.mean()) if self.use_sdg.size else 0.0


class DsrNet:
    """A built model: parameter blocks plus the routing-aware forward pass.

    Immutable during inference; training mutates grad/Adam state and needs
    exclusive access per step.
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.struct = _STRUCTURES[config.variant]
        self.reb: list[LayerParams] = []
        self.cb: list[LayerParams] = []
        self.gm: list[LayerParams] = []
        self.fdg: list[LayerParams] = []
        self.sdg: list[LayerParams] = []
        self.frb: list[LayerParams] = []
        self.rb: list[LayerParams] = []

    # -- construction -------------------------------------------------------

    def _allocate(self, rng: Rng | None) -> None:
        cfg, st = self.config, self.struct
        dt = DTYPES[cfg.dtype]
        w = cfg.width

        def conv(name, co, ci, k):
            if rng is None:
                return LayerParams(name, Tensor.zeros((co, ci, k, k), dt), Tensor.zeros((co, 1, 1, 1), dt))
            return make_conv(name, co, ci, k, rng, dtype=dt)

        self.reb = [conv("reb1", w, cfg.in_channels, 3)]
        self.reb += [conv(f"reb{i}", w, w, 3) for i in range(2, st.reb_layers + 1)]
        if st.has_cb:
            self.cb = [conv(f"cb{i}", w, w, 3) for i in range(1, 5)]
        if st.has_gm:
            self.gm = [
                conv("gm_fc1", cfg.gate_hidden, w, 1),
                conv("gm_fc2", 2, cfg.gate_hidden, 1),
            ]
        if st.has_fdg:
            self.fdg = [conv(f"fdg{i}", w, w, 3) for i in range(1, 5)]
        if st.has_sdg:
            self.sdg = [
                conv("sdg1", w, w, 3),
                conv("sdg2", w, w, 1),
                conv("sdg3", w, w, 3),
                conv("sdg4", w, w, 1),
            ]
        self.frb = [conv(f"frb{i}", w, w, 3) for i in range(1, st.frb_layers + 1)]
        self.rb = [
            conv("rb1", cfg.in_channels * cfg.scale ** 2, w, 3),
            conv("rb2", cfg.in_channels, cfg.in_channels, 3),
        ]

    def parameters(self) -> list[LayerParams]:
        """All parameter blocks in fixed checkpoint order."""
        return self.reb + self.cb + self.gm + self.fdg + self.sdg + self.frb + self.rb

    def blocks(self) -> dict[str, list[LayerParams]]:
        return {"reb": self.reb, "cb": self.cb, "gm": self.gm, "fdg": self.fdg,
                "sdg": self.sdg, "frb": self.frb, "rb": self.rb}

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- block forwards -----------------------------------------------------

    @staticmethod
    def _conv_relu_stack(x: Tensor, params: list[LayerParams], tape: Tape | None) -> Tensor:
        a = x
        for p in params:
            pad = 1 if p.weight.shape[2] == 3 else 0
            a = L.relu(L.conv2d(a, p, pad=pad, tape=tape), tape=tape)
        return a

    def reb_forward(self, x: Tensor, tape: Tape | None = None) -> tuple[Tensor, Tensor]:
        """Residual enhancement stack.

        Layer-2 output is added into layer-4 output before layer 5; returns
        the final activation and the post-residual layer-4 map, which the
        refinement stack later consumes as its long skip.
        """
        st = self.struct
        a = x
        a2 = None
        for i, p in enumerate(self.reb, start=1):
            a = L.relu(L.conv2d(a, p, pad=1, tape=tape), tape=tape)
            if i == 2:
                a2 = a
            if i == 4 and st.reb_residual:
                a = L.add(a, a2, tape=tape)
            if i == 4:
                skip = a
        return a, skip

    def gate_mechanism(self, o_reb: Tensor, tape: Tape | None = None) -> GateDecision:
        """Pool, two fully connected layers and a softmax; the second
        probability decides, per sample and strictly below the threshold,
        whether the selected branch runs."""
        pooled = L.global_avg_pool(o_reb, tape=tape)
        h = L.relu(L.linear(pooled, self.gm[0], tape=tape), tape=tape)
        logits = L.linear(h, self.gm[1], tape=tape)
        probs = L.softmax(logits, tape=tape)
        use_sdg = probs.data[:, 1, 0, 0] < self.config.gate_threshold
        return GateDecision(probs, use_sdg)

    def web_forward(self, o_reb: Tensor, tape: Tape | None = None,
                    return_gate: bool = False):
        """Wide enhancement: complementary branch plus the dynamic branches.

        out = cb(o_reb) + fdg(o_reb) + [routed] * p2 * sdg(o_reb), decided per
        sample.  The p2 scaling keeps the gate differentiable when routed; a
        non-routed sample never executes the selected branch at all.
        """
        st = self.struct
        out = None
        if st.has_cb:
            out = self._conv_relu_stack(o_reb, self.cb, tape)
        if st.has_fdg:
            f = self._conv_relu_stack(o_reb, self.fdg, tape)
            out = f if out is None else L.add(out, f, tape=tape)
        gate = None
        if st.has_sdg:
            gate = self.gate_mechanism(o_reb, tape=tape)
            idx = np.flatnonzero(gate.use_sdg)
            if idx.size:
                xr = L.take_batch(o_reb, idx, tape=tape)
                sd = self._conv_relu_stack(xr, self.sdg, tape)
                pr = L.take_batch(gate.probs, idx, tape=tape)
                g2 = L.select_col(pr, 1, tape=tape)
                sd = L.scale_rows(sd, g2, tape=tape)
                out = L.add_rows(out, sd, idx, tape=tape)
        if return_gate:
            return out, gate
        return out

    def frb_forward(self, o_web: Tensor, o_reb4: Tensor, tape: Tape | None = None) -> Tensor:
        """Refinement stack; the long skip from the enhancement stage joins
        after layer 5 and the sum feeds the final layer."""
        st = self.struct
        if o_web.shape != o_reb4.shape:
            raise ValueError(f"frb shape mismatch: {o_web.shape} vs {o_reb4.shape}")
        a = self._conv_relu_stack(o_web, self.frb[:5], tape)
        if st.frb_layers == 6:
            t = L.add(a, o_reb4, tape=tape)
            return L.relu(L.conv2d(t, self.frb[5], pad=1, tape=tape), tape=tape)
        if st.frb_residual:
            return L.add(a, o_reb4, tape=tape)
        return a

    def rb_forward(self, o_frb: Tensor, tape: Tape | None = None) -> Tensor:
        """Sub-pixel reconstruction: conv to c*s^2 channels, shuffle, final conv."""
        a = L.conv2d(o_frb, self.rb[0], pad=1, tape=tape)
        a = L.pixel_shuffle(a, self.config.scale, tape=tape)
        return L.conv2d(a, self.rb[1], pad=1, tape=tape)

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        out, _ = self.forward_with_gate(x, tape=tape)
        return out

    def forward_with_gate(self, x: Tensor, tape: Tape | None = None):
        """Full composition honoring the variant; also returns the gate
        decision (None for variants without one)."""
        cfg, st = self.config, self.struct
        n, c, h, w = x.shape
        if c != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
        if h < 3 or w < 3:
            raise ValueError(f"input spatial dims must be >= 3, got ({h}, {w})")
        o_reb, o_reb4 = self.reb_forward(x, tape)
        gate = None
        if st.has_cb or st.has_fdg or st.has_sdg:
            feat, gate = self.web_forward(o_reb, tape, return_gate=True)
        else:
            feat = o_reb
        if st.frb_layers:
            feat = self.frb_forward(feat, o_reb4, tape)
        return self.rb_forward(feat, tape), gate


def build(config: ModelConfig, rng: Rng) -> DsrNet:
    """Allocate and He-initialize all blocks for the configured variant."""
    m = DsrNet(config)
    m._allocate(rng)
    return m


# ---------------------------------------------------------------------------
# complexity counters
# ---------------------------------------------------------------------------


@dataclass
class ParamCounts:
    total: int
    total_without_sdg: int
    by_block: dict[str, int] = field(default_factory=dict)


@dataclass
class MacCounts:
    routed: int
    skipped: int
    by_block: dict[str, int] = field(default_factory=dict)


def count_params(m: DsrNet) -> ParamCounts:
    """Exact learnable scalar count (weights + biases) with a per-block split."""
    by_block = {name: sum(p.num_params() for p in ps) for name, ps in m.blocks().items() if ps}
    total = sum(by_block.values())
    return ParamCounts(total, total - by_block.get("sdg", 0), by_block)


def count_macs(m: DsrNet, h: int, w: int) -> MacCounts:
    """Multiply-accumulate count for an (h, w) low-resolution input.

    Each convolution contributes k^2 * ci * co * h' * w' at its own working
    resolution (the reconstruction head's final conv runs at the upscaled
    size); the gate's fully connected layers contribute ci * co each.  The
    routed total includes the selected branch, the skipped total omits it.
    """
    s = m.config.scale
    by_block: dict[str, int] = {}
    for name, ps in m.blocks().items():
        if not ps:
            continue
        macs = 0
        for p in ps:
            co, ci, kh, kw = p.weight.shape
            if name == "gm":
                macs += ci * co
            elif p.name == "rb2":
                macs += kh * kw * ci * co * (h * s) * (w * s)
            else:
                macs += kh * kw * ci * co * h * w
        by_block[name] = macs
    routed = sum(by_block.values())
    return MacCounts(routed, routed - by_block.get("sdg", 0), by_block)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_model(m: DsrNet, path) -> None:
    """Config header followed by weight/bias tensor records in block order."""
    blob = json.dumps(m.config.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(MODEL_MAGIC)
        fp.write(struct.pack("<II", MODEL_VERSION, len(blob)))
        fp.write(blob)
        for p in m.parameters():
            write_tensor_record(fp, p.weight.data)
            write_tensor_record(fp, p.bias.data)


def load_model(path) -> DsrNet:
    with open(path, "rb") as fp:
        head = fp.read(len(MODEL_MAGIC) + 8)
        if len(head) != len(MODEL_MAGIC) + 8 or head[:4] != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, blob_len = struct.unpack("<II", head[4:12])
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        cfg = ModelConfig(**json.loads(fp.read(blob_len).decode("utf-8")))
        m = DsrNet(cfg)
        m._allocate(rng=None)
        for p in m.parameters():
            for t in (p.weight, p.bias):
                rec = read_tensor_record(fp)
                if rec.shape != t.shape:
                    raise ValueError(
                        f"{path}: checkpoint shape {rec.shape} does not match "
                        f"{p.name} {t.shape}"
                    )
                t.data[...] = rec
        return m
