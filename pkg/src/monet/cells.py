"""Sequence cells: the MoNet unit and its comparison families.

Every cell is a pure function from parameter tensors and input tensors to
output tensors, recorded on the active tape.  Inputs are per-timestep
matrices with one row per sequence, so the same code path serves both a
single sequence (one row) and a training batch.

The MoNet unit consumes a feature vector plus the states of its two temporal
neighbors from the previous expansion pass and fuses a ReLU candidate with
those neighbors through a per-coordinate three-way softmax.  Stacking the
unit L times (one shared parameter set) grows the temporal context by one
step per side per pass, starting from a context-free base pass, so depth L
sees exactly L steps in each direction.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .binio import (FormatError, check_magic, check_version, read_array,
                    read_str, read_u32, write_array, write_str, write_u32)
from .tensor import (ShapeError, Tensor, add, add_rowvec, concat,
                     group_softmax, matmul, mul, relu, sigmoid, split, tanh)

FAMILIES = ("vanilla-rnn", "gru", "lstm", "bi-gru", "bi-lstm", "conv1d", "monet")

CHECKPOINT_MAGIC = b"MONW"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class CellConfig:
    """Shape and wiring of one sequence model."""

    family: str
    d_x: int
    d_s: int
    layers: int = 1
    kernel: int = 3
    causal_only: bool = False
    out_dim: int | None = None

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.d_x < 1 or self.d_s < 1:
            raise ValueError(f"dims must be >= 1, got d_x={self.d_x}, d_s={self.d_s}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.family == "conv1d" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ValueError(f"conv kernel must be odd and >= 1, got {self.kernel}")
        if self.causal_only and self.family.startswith("bi-"):
            raise ValueError(f"{self.family} cannot be causal_only")
        if self.out_dim is not None and self.out_dim < 1:
            raise ValueError(f"out_dim must be >= 1, got {self.out_dim}")

    @property
    def output_dim(self) -> int:
        return self.d_s if self.out_dim is None else self.out_dim


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class VanillaRnnParams:
    W: Tensor
    U: Tensor
    b: Tensor


@dataclasses.dataclass
class GruParams:
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor


@dataclasses.dataclass
class LstmParams:
    W_i: Tensor
    U_i: Tensor
    b_i: Tensor
    W_f: Tensor
    U_f: Tensor
    b_f: Tensor
    W_o: Tensor
    U_o: Tensor
    b_o: Tensor
    W_g: Tensor
    U_g: Tensor
    b_g: Tensor


@dataclasses.dataclass
class MoNetParams:
    """One shared parameter set for every expansion pass.

    The input projections for the reset and mix gates are shared between the
    left-neighbor and right-neighbor versions of each gate; only the
    state-to-gate matrices are direction-specific.  The candidate consumes
    both gated neighbors at once, so its state matrix has 2*d_s input rows.
    """

    W_r: Tensor
    U_r_left: Tensor
    U_r_right: Tensor
    b_r: Tensor
    W_z: Tensor
    U_z_left: Tensor
    U_z_right: Tensor
    b_z: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor


@dataclasses.dataclass
class ConvStage:
    taps: list[Tensor]
    bias: Tensor


@dataclasses.dataclass
class Conv1dParams:
    stages: list[ConvStage]


@dataclasses.dataclass
class BidirParams:
    fwd: list
    bwd: list
    proj_fwd: Tensor
    proj_bwd: Tensor
    b_out: Tensor


@dataclasses.dataclass
class LinearReadout:
    W: Tensor
    b: Tensor


@dataclasses.dataclass
class MoNetTrace:
    """All intermediates of one MoNet step.

    ``weight_cand + weight_right + weight_left == 1`` per coordinate, each
    weight in (0, 1); ``out`` is their convex combination of the candidate
    and the two neighbor states.
    """

    reset_left: Tensor
    reset_right: Tensor
    mix_left: Tensor
    mix_right: Tensor
    candidate: Tensor
    weight_cand: Tensor
    weight_right: Tensor
    weight_left: Tensor
    out: Tensor


def collect_tensors(obj, out: list[Tensor] | None = None) -> list[Tensor]:
    """All Tensor leaves of a parameter container, in stable field order."""
    if out is None:
        out = []
    if isinstance(obj, Tensor):
        out.append(obj)
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            collect_tensors(item, out)
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            collect_tensors(getattr(obj, f.name), out)
    elif obj is not None:
        raise TypeError(f"cannot collect tensors from {type(obj).__name__}")
    return out


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _weight(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _bias(d: int) -> Tensor:
    return Tensor(np.zeros(d), requires_grad=True)


def init_vanilla(d_in: int, d_s: int, rng) -> VanillaRnnParams:
    w = 1.0 / math.sqrt(d_s)
    return VanillaRnnParams(W=_weight(rng, (d_in, d_s), w), U=_weight(rng, (d_s, d_s), w), b=_bias(d_s))


def init_gru(d_in: int, d_s: int, rng) -> GruParams:
    w = 1.0 / math.sqrt(d_s)
    return GruParams(
        W_r=_weight(rng, (d_in, d_s), w), U_r=_weight(rng, (d_s, d_s), w), b_r=_bias(d_s),
        W_z=_weight(rng, (d_in, d_s), w), U_z=_weight(rng, (d_s, d_s), w), b_z=_bias(d_s),
        W_h=_weight(rng, (d_in, d_s), w), U_h=_weight(rng, (d_s, d_s), w), b_h=_bias(d_s),
    )


def init_lstm(d_in: int, d_s: int, rng) -> LstmParams:
    w = 1.0 / math.sqrt(d_s)
    mk = lambda: (_weight(rng, (d_in, d_s), w), _weight(rng, (d_s, d_s), w), _bias(d_s))
    W_i, U_i, b_i = mk()
    W_f, U_f, b_f = mk()
    W_o, U_o, b_o = mk()
    W_g, U_g, b_g = mk()
    return LstmParams(W_i, U_i, b_i, W_f, U_f, b_f, W_o, U_o, b_o, W_g, U_g, b_g)


def init_monet(d_x: int, d_s: int, rng) -> MoNetParams:
    w = 1.0 / math.sqrt(d_s)
    return MoNetParams(
        W_r=_weight(rng, (d_x, d_s), w),
        U_r_left=_weight(rng, (d_s, d_s), w),
        U_r_right=_weight(rng, (d_s, d_s), w),
        b_r=_bias(d_s),
        W_z=_weight(rng, (d_x, d_s), w),
        U_z_left=_weight(rng, (d_s, d_s), w),
        U_z_right=_weight(rng, (d_s, d_s), w),
        b_z=_bias(d_s),
        W_h=_weight(rng, (d_x, d_s), w),
        U_h=_weight(rng, (2 * d_s, d_s), w),
        b_h=_bias(d_s),
    )


def init_conv1d(d_x: int, d_s: int, layers: int, kernel: int, rng) -> Conv1dParams:
    w = 1.0 / math.sqrt(d_s)
    stages = []
    d_in = d_x
    for _ in range(layers):
        taps = [_weight(rng, (d_in, d_s), w) for _ in range(kernel)]
        stages.append(ConvStage(taps=taps, bias=_bias(d_s)))
        d_in = d_s
    return Conv1dParams(stages=stages)


_DIRECTIONAL_INIT = {"vanilla-rnn": init_vanilla, "gru": init_gru, "lstm": init_lstm}


def _init_stack(family: str, d_x: int, d_s: int, layers: int, rng) -> list:
    init = _DIRECTIONAL_INIT[family]
    return [init(d_x if i == 0 else d_s, d_s, rng) for i in range(layers)]


def init_bidir(family: str, d_x: int, d_s: int, layers: int, rng) -> BidirParams:
    base = family.removeprefix("bi-")
    w = 1.0 / math.sqrt(d_s)
    return BidirParams(
        fwd=_init_stack(base, d_x, d_s, layers, rng),
        bwd=_init_stack(base, d_x, d_s, layers, rng),
        proj_fwd=_weight(rng, (d_s, d_s), w),
        proj_bwd=_weight(rng, (d_s, d_s), w),
        b_out=_bias(d_s),
    )


def init_params(config: CellConfig, rng):
    config.validate()
    f = config.family
    if f == "vanilla-rnn" or f == "gru" or f == "lstm":
        return _init_stack(f, config.d_x, config.d_s, config.layers, rng)
    if f == "bi-gru" or f == "bi-lstm":
        return init_bidir(f, config.d_x, config.d_s, config.layers, rng)
    if f == "conv1d":
        return init_conv1d(config.d_x, config.d_s, config.layers, config.kernel, rng)
    return init_monet(config.d_x, config.d_s, rng)


# ---------------------------------------------------------------------------
# Single-step cells
# ---------------------------------------------------------------------------

def vanilla_step(x: Tensor, s: Tensor, p: VanillaRnnParams) -> Tensor:
    return tanh(add(add_rowvec(matmul(x, p.W), p.b), matmul(s, p.U)))


def gru_step(x: Tensor, s: Tensor, p: GruParams) -> Tensor:
    """One gated-recurrent step: reset and update gates, tanh candidate,
    convex blend of previous state and candidate."""
    r = sigmoid(add(add_rowvec(matmul(x, p.W_r), p.b_r), matmul(s, p.U_r)))
    z = sigmoid(add(add_rowvec(matmul(x, p.W_z), p.b_z), matmul(s, p.U_z)))
    h = tanh(add(add_rowvec(matmul(x, p.W_h), p.b_h), matmul(mul(r, s), p.U_h)))
    one_minus_z = add_rowvec(-z, Tensor(np.ones(z.shape[1])))
    return add(mul(z, s), mul(one_minus_z, h))


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], p: LstmParams) -> tuple[Tensor, Tensor]:
    """Standard LSTM step; state is the (hidden, cell) pair."""
    s, c = state
    gate = lambda W, b, U: add(add_rowvec(matmul(x, W), b), matmul(s, U))
    i = sigmoid(gate(p.W_i, p.b_i, p.U_i))
    f = sigmoid(gate(p.W_f, p.b_f, p.U_f))
    o = sigmoid(gate(p.W_o, p.b_o, p.U_o))
    g = tanh(gate(p.W_g, p.b_g, p.U_g))
    c_next = add(mul(f, c), mul(i, g))
    return mul(o, tanh(c_next)), c_next


def _monet_core(pre_r: Tensor, pre_z: Tensor, pre_h: Tensor,
                s_left: Tensor, s_right: Tensor, ones: Tensor,
                p: MoNetParams) -> MoNetTrace:
    """MoNet step from precomputed input projections.

    The fusion softmax runs per coordinate over the fixed constant 1 and the
    two mix gates; its three weights blend the candidate with the raw
    neighbor states.
    """
    reset_left = sigmoid(add(pre_r, matmul(s_left, p.U_r_left)))
    reset_right = sigmoid(add(pre_r, matmul(s_right, p.U_r_right)))
    mix_left = sigmoid(add(pre_z, matmul(s_left, p.U_z_left)))
    mix_right = sigmoid(add(pre_z, matmul(s_right, p.U_z_right)))
    gated = concat(mul(s_right, reset_right), mul(s_left, reset_left), axis=1)
    candidate = relu(add(pre_h, matmul(gated, p.U_h)))
    weight_cand, weight_right, weight_left = group_softmax([ones, mix_right, mix_left])
    out = add(add(mul(weight_cand, candidate), mul(weight_right, s_right)),
              mul(weight_left, s_left))
    return MoNetTrace(reset_left, reset_right, mix_left, mix_right, candidate,
                      weight_cand, weight_right, weight_left, out)


def monet_unit(x: Tensor, s_left: Tensor, s_right: Tensor, p: MoNetParams) -> MoNetTrace:
    """One MoNet step on (rows, d_x) input with (rows, d_s) neighbor states.

    ``s_left`` is the earlier-time neighbor, ``s_right`` the later-time one;
    pass zero states for absent neighbors.
    """
    if x.ndim != 2 or s_left.ndim != 2 or s_right.ndim != 2:
        raise ShapeError(f"monet_unit: need 2-D inputs, got {x.shape}, {s_left.shape}, {s_right.shape}")
    if s_left.shape != s_right.shape or x.shape[0] != s_left.shape[0]:
        raise ShapeError(f"monet_unit: row counts and state dims must agree, "
                         f"got {x.shape}, {s_left.shape}, {s_right.shape}")
    pre_r = add_rowvec(matmul(x, p.W_r), p.b_r)
    pre_z = add_rowvec(matmul(x, p.W_z), p.b_z)
    pre_h = add_rowvec(matmul(x, p.W_h), p.b_h)
    ones = Tensor(np.ones(s_left.shape))
    return _monet_core(pre_r, pre_z, pre_h, s_left, s_right, ones, p)


def _monet_base(pre_z: Tensor, pre_h: Tensor, ones: Tensor) -> Tensor:
    # Context-free pass: with both neighbors absent the unit reduces to a
    # pure function of x_t, identical in value and gradient to running the
    # full step on zero neighbor states.
    z = sigmoid(pre_z)
    h = relu(pre_h)
    weight_cand, _, _ = group_softmax([ones, z, z])
    return mul(weight_cand, h)


# ---------------------------------------------------------------------------
# Sequence runners (lists of per-timestep row matrices)
# ---------------------------------------------------------------------------

def monet_steps(xs: list[Tensor], p: MoNetParams, layers: int,
                causal_only: bool = False) -> list[Tensor]:
    """Expand the shared unit over the sequence: one context-free base pass,
    then ``layers`` neighbor passes, so position t at the end depends on
    inputs t-layers..t+layers exactly (t-layers..t when causal_only)."""
    n = xs[0].shape[0]
    d_s = p.b_h.shape[0]
    zero = Tensor(np.zeros((n, d_s)))
    ones = Tensor(np.ones((n, d_s)))
    pre_r = [add_rowvec(matmul(x, p.W_r), p.b_r) for x in xs]
    pre_z = [add_rowvec(matmul(x, p.W_z), p.b_z) for x in xs]
    pre_h = [add_rowvec(matmul(x, p.W_h), p.b_h) for x in xs]
    states = [_monet_base(pre_z[t], pre_h[t], ones) for t in range(len(xs))]
    for _ in range(layers):
        prev = states
        states = []
        for t in range(len(xs)):
            left = prev[t - 1] if t > 0 else zero
            right = prev[t + 1] if (t + 1 < len(xs) and not causal_only) else zero
            states.append(_monet_core(pre_r[t], pre_z[t], pre_h[t], left, right, ones, p).out)
    return states


def stacked_steps(xs: list[Tensor], layer_params: list, family: str) -> list[Tensor]:
    """Left-to-right pass through a stack of causal cells; fresh parameters
    per depth level, zero initial state."""
    n = xs[0].shape[0]
    seq = xs
    for p in layer_params:
        d_s = p.b.shape[0] if family == "vanilla-rnn" else (
            p.b_r.shape[0] if family == "gru" else p.b_i.shape[0])
        out = []
        if family == "lstm":
            state = (Tensor(np.zeros((n, d_s))), Tensor(np.zeros((n, d_s))))
            for x in seq:
                state = lstm_step(x, state, p)
                out.append(state[0])
        else:
            step = vanilla_step if family == "vanilla-rnn" else gru_step
            s = Tensor(np.zeros((n, d_s)))
            for x in seq:
                s = step(x, s, p)
                out.append(s)
        seq = out
    return seq


def bidir_steps(xs: list[Tensor], p: BidirParams, family: str) -> list[Tensor]:
    """Independent left-to-right and right-to-left stacks, merged per
    timestep by summing the two projected states."""
    base = family.removeprefix("bi-")
    fwd = stacked_steps(xs, p.fwd, base)
    bwd = list(reversed(stacked_steps(list(reversed(xs)), p.bwd, base)))
    out = []
    for f, b in zip(fwd, bwd):
        out.append(add_rowvec(add(matmul(f, p.proj_fwd), matmul(b, p.proj_bwd)), p.b_out))
    return out


def conv1d_steps(xs: list[Tensor], p: Conv1dParams, causal_only: bool = False) -> list[Tensor]:
    """Stacked temporal convolutions with zero padding (implicit: taps that
    fall outside the sequence are skipped) and ReLU between stages only."""
    seq = xs
    for idx, stage in enumerate(p.stages):
        k = len(stage.taps)
        pad = k - 1 if causal_only else (k - 1) // 2
        out = []
        for t in range(len(seq)):
            acc = None
            for j in range(k):
                u = t + j - pad
                if 0 <= u < len(seq):
                    term = matmul(seq[u], stage.taps[j])
                    acc = term if acc is None else add(acc, term)
            out.append(add_rowvec(acc, stage.bias))
        if idx + 1 < len(p.stages):
            out = [relu(y) for y in out]
        seq = out
    return seq


def monet_forward(X: Tensor, p: MoNetParams, layers: int, causal_only: bool = False) -> Tensor:
    """Single-sequence wrapper: (T, d_x) in, (T, d_s) out."""
    xs = list(split(X, [1] * X.shape[0], axis=0))
    return _cat_rows(monet_steps(xs, p, layers, causal_only))


def conv1d_forward(X: Tensor, p: Conv1dParams, causal_only: bool = False) -> Tensor:
    xs = list(split(X, [1] * X.shape[0], axis=0))
    return _cat_rows(conv1d_steps(xs, p, causal_only))


def bidirectional_forward(X: Tensor, p: BidirParams, family: str) -> Tensor:
    xs = list(split(X, [1] * X.shape[0], axis=0))
    return _cat_rows(bidir_steps(xs, p, family))


def _cat_rows(parts: list[Tensor]) -> Tensor:
    out = parts[0]
    for part in parts[1:]:
        out = concat(out, part, axis=0)
    return out


# ---------------------------------------------------------------------------
# Model wrapper
# ---------------------------------------------------------------------------

class Hallucinator:
    """A configured sequence-to-sequence model: appearance features in,
    hallucinated motion features out.

    Wraps the family-specific parameters plus an optional linear readout
    (used when the cell width differs from the target feature dim, e.g. for
    parameter-matched baselines).
    """

    def __init__(self, config: CellConfig, params, readout: LinearReadout | None = None):
        config.validate()
        if readout is None and config.out_dim is not None and config.out_dim != config.d_s:
            raise ValueError("config.out_dim differs from d_s but no readout given")
        self.config = config
        self.params = params
        self.readout = readout

    @classmethod
    def build(cls, config: CellConfig, rng: np.random.Generator) -> "Hallucinator":
        config.validate()
        params = init_params(config, rng)
        readout = None
        if config.out_dim is not None and config.out_dim != config.d_s:
            w = 1.0 / math.sqrt(config.d_s)
            readout = LinearReadout(W=_weight(rng, (config.d_s, config.out_dim), w),
                                    b=_bias(config.out_dim))
        return cls(config, params, readout)

    def forward_steps(self, xs: list[Tensor]) -> list[Tensor]:
        c = self.config
        if c.family == "monet":
            states = monet_steps(xs, self.params, c.layers, c.causal_only)
        elif c.family in ("vanilla-rnn", "gru", "lstm"):
            states = stacked_steps(xs, self.params, c.family)
        elif c.family in ("bi-gru", "bi-lstm"):
            states = bidir_steps(xs, self.params, c.family)
        else:
            states = conv1d_steps(xs, self.params, c.causal_only)
        if self.readout is not None:
            states = [add_rowvec(matmul(s, self.readout.W), self.readout.b) for s in states]
        return states

    def forward(self, X: Tensor) -> Tensor:
        """(T, d_x) sequence in, (T, output_dim) sequence out."""
        if X.ndim != 2 or X.shape[1] != self.config.d_x:
            raise ShapeError(f"forward: need (T, {self.config.d_x}), got {X.shape}")
        xs = list(split(X, [1] * X.shape[0], axis=0))
        return _cat_rows(self.forward_steps(xs))

    def tensors(self) -> list[Tensor]:
        out = collect_tensors(self.params)
        if self.readout is not None:
            collect_tensors(self.readout, out)
        return out

    # -- checkpoint round trip ---------------------------------------------

    def save(self, path: str) -> None:
        c = self.config
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            write_u32(f, CHECKPOINT_VERSION)
            write_str(f, c.family)
            write_u32(f, c.d_x)
            write_u32(f, c.d_s)
            write_u32(f, c.layers)
            write_u32(f, c.kernel)
            write_u32(f, 1 if c.causal_only else 0)
            write_u32(f, 0 if c.out_dim is None else c.out_dim)
            for t in self.tensors():
                write_array(f, t.data, "<f8")

    @classmethod
    def load(cls, path: str) -> "Hallucinator":
        with open(path, "rb") as f:
            check_magic(f, CHECKPOINT_MAGIC)
            check_version(f, CHECKPOINT_VERSION)
            family = read_str(f, "family tag")
            d_x = read_u32(f, "d_x")
            d_s = read_u32(f, "d_s")
            layers = read_u32(f, "layers")
            kernel = read_u32(f, "kernel")
            causal = read_u32(f, "causal flag")
            out_dim = read_u32(f, "out_dim")
            config = CellConfig(family=family, d_x=d_x, d_s=d_s, layers=layers,
                                kernel=kernel, causal_only=bool(causal),
                                out_dim=None if out_dim == 0 else out_dim)
            model = cls.build(config, np.random.default_rng(0))
            for t in model.tensors():
                arr = read_array(f, "<f8", "weight array")
                if arr.shape != t.shape:
                    raise FormatError(f"weight shape mismatch: file has {arr.shape}, "
                                      f"config needs {t.shape}")
                t.data = arr
            trailing = f.read(1)
            if trailing:
                raise FormatError("trailing bytes after final weight array")
        return model


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

def _count_directional(family: str, d_in: int, d_s: int) -> int:
    per_gate = d_in * d_s + d_s * d_s + d_s
    gates = {"vanilla-rnn": 1, "gru": 3, "lstm": 4}[family]
    return gates * per_gate


def _count_stack(family: str, d_x: int, d_s: int, layers: int) -> int:
    total = _count_directional(family, d_x, d_s)
    total += (layers - 1) * _count_directional(family, d_s, d_s)
    return total


def count_params(config: CellConfig) -> int:
    """Exact learnable-scalar count from closed-form formulas (the build
    path is independent; tests reconcile the two)."""
    config.validate()
    c = config
    if c.family in ("vanilla-rnn", "gru", "lstm"):
        n = _count_stack(c.family, c.d_x, c.d_s, c.layers)
    elif c.family in ("bi-gru", "bi-lstm"):
        base = c.family.removeprefix("bi-")
        n = 2 * _count_stack(base, c.d_x, c.d_s, c.layers) + 2 * c.d_s * c.d_s + c.d_s
    elif c.family == "conv1d":
        n = c.kernel * c.d_x * c.d_s + c.d_s
        n += (c.layers - 1) * (c.kernel * c.d_s * c.d_s + c.d_s)
    else:
        n = 3 * c.d_s * c.d_x + 6 * c.d_s * c.d_s + 3 * c.d_s
    if c.out_dim is not None and c.out_dim != c.d_s:
        n += c.d_s * c.out_dim + c.out_dim
    return n


@dataclasses.dataclass
class FlopCount:
    """Exact multiply-add accounting for one unit of work.

    ``madds_input``/``madds_state`` count matrix-multiply multiply-adds
    against input and state/tap matrices; ``adds_bias`` counts bias adds;
    ``activations`` counts scalar nonlinearity evaluations (softmax counted
    as one exp per stacked entry); ``elementwise`` counts the remaining
    scalar multiplies/adds (gate sums, gated-state products, fusion blend).
    """

    madds_input: int
    madds_state: int
    adds_bias: int
    activations: int
    elementwise: int

    @property
    def total_madds(self) -> int:
        return self.madds_input + self.madds_state + self.adds_bias

    def scaled(self, k: int) -> "FlopCount":
        return FlopCount(k * self.madds_input, k * self.madds_state,
                         k * self.adds_bias, k * self.activations,
                         k * self.elementwise)

    def plus(self, other: "FlopCount") -> "FlopCount":
        return FlopCount(self.madds_input + other.madds_input,
                         self.madds_state + other.madds_state,
                         self.adds_bias + other.adds_bias,
                         self.activations + other.activations,
                         self.elementwise + other.elementwise)


def _flops_directional(family: str, d_in: int, d_s: int) -> FlopCount:
    gates = {"vanilla-rnn": 1, "gru": 3, "lstm": 4}[family]
    acts = {"vanilla-rnn": d_s, "gru": 3 * d_s, "lstm": 5 * d_s}[family]
    elem = {"vanilla-rnn": d_s, "gru": 7 * d_s, "lstm": 8 * d_s}[family]
    return FlopCount(madds_input=gates * d_in * d_s, madds_state=gates * d_s * d_s,
                     adds_bias=gates * d_s, activations=acts, elementwise=elem)


def flops_per_step(config: CellConfig) -> FlopCount:
    """Cost of advancing the whole configured model by one time step.

    For the expansion-based unit this is the cost of one unit application
    plus the once-per-step input projections; ``flops_per_sequence`` is the
    authority on how projections amortize across passes.
    """
    config.validate()
    c = config
    if c.family in ("vanilla-rnn", "gru", "lstm"):
        total = _flops_directional(c.family, c.d_x, c.d_s)
        for _ in range(c.layers - 1):
            total = total.plus(_flops_directional(c.family, c.d_s, c.d_s))
        return total
    if c.family in ("bi-gru", "bi-lstm"):
        base = c.family.removeprefix("bi-")
        one = _flops_directional(base, c.d_x, c.d_s)
        for _ in range(c.layers - 1):
            one = one.plus(_flops_directional(base, c.d_s, c.d_s))
        both = one.scaled(2)
        merge = FlopCount(madds_input=0, madds_state=2 * c.d_s * c.d_s,
                          adds_bias=c.d_s, activations=0, elementwise=c.d_s)
        return both.plus(merge)
    if c.family == "conv1d":
        total = FlopCount(c.kernel * c.d_x * c.d_s, 0, c.d_s, 0, 0)
        for i in range(c.layers - 1):
            total = total.plus(FlopCount(0, c.kernel * c.d_s * c.d_s, c.d_s, c.d_s, 0))
        return total
    # monet: shared input projections for the three gates, four directional
    # state matrices plus the double-width candidate matrix, four sigmoid
    # gates, the ReLU candidate, a three-way softmax per coordinate.
    return FlopCount(madds_input=3 * c.d_x * c.d_s,
                     madds_state=6 * c.d_s * c.d_s,
                     adds_bias=3 * c.d_s,
                     activations=8 * c.d_s,
                     elementwise=11 * c.d_s)


def flops_per_sequence(config: CellConfig, seq_len: int) -> FlopCount:
    """Exact cost over a length-``seq_len`` sequence.  The expansion model
    computes input projections once per step and reuses them in every pass,
    so only the state-side work scales with depth."""
    config.validate()
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    c = config
    if c.family != "monet":
        return flops_per_step(config).scaled(seq_len)
    proj = FlopCount(madds_input=3 * c.d_x * c.d_s, madds_state=0,
                     adds_bias=3 * c.d_s, activations=0, elementwise=0)
    base_pass = FlopCount(0, 0, 0, 5 * c.d_s, c.d_s)
    unit = FlopCount(0, 6 * c.d_s * c.d_s, 0, 8 * c.d_s, 11 * c.d_s)
    per_step = proj.plus(base_pass).plus(unit.scaled(c.layers))
    return per_step.scaled(seq_len)


@dataclasses.dataclass
class MatchResult:
    config: CellConfig
    count: int
    target: int
    matched: bool

    @property
    def gap(self) -> float:
        return abs(self.count - self.target) / self.target


def match_params(reference: CellConfig, family: str, layers: int = 1,
                 kernel: int = 3, causal_only: bool = False,
                 tolerance: float = 0.05, max_width: int = 4096) -> MatchResult:
    """Find a width for ``family`` whose parameter count is within
    ``tolerance`` of the reference model's, keeping the output dim equal.

    A linear readout is attached (and counted) whenever the matched width
    differs from the reference output dim.  If no width lands inside the
    tolerance the closest one is returned with ``matched`` False.
    """
    reference.validate()
    target = count_params(reference)
    out_dim = reference.output_dim
    best: MatchResult | None = None
    # Counts increase strictly with width, so the optimum is the first width
    # whose count reaches the target or the one just before it.
    for d_s in range(1, max_width + 1):
        cand = CellConfig(family=family, d_x=reference.d_x, d_s=d_s, layers=layers,
                          kernel=kernel, causal_only=causal_only,
                          out_dim=None if d_s == out_dim else out_dim)
        n = count_params(cand)
        if best is None or abs(n - target) < abs(best.count - target):
            best = MatchResult(config=cand, count=n, target=target,
                               matched=abs(n - target) <= tolerance * target)
        if n >= target:
            break
    assert best is not None
    return best
