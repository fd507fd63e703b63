"""Layers, initialization, losses, optimizers and the ADVM model format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


class SpecError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | upsample | activation | linear | skip-concat | flatten
    kernel: int = 3
    in_ch: int = 0
    out_ch: int = 0
    stride: int = 1
    slope: float = 0.1
    act: str = "leaky_relu"
    factor: int = 2

    def __post_init__(self):
        # slopes are stored as float32 bits in model files
        object.__setattr__(self, "slope", float(np.float32(self.slope)))

    @property
    def padding(self) -> int:
        return self.kernel // 2


def conv(in_ch, out_ch, kernel=3, stride=1) -> LayerSpec:
    return LayerSpec("conv", kernel=kernel, in_ch=in_ch, out_ch=out_ch, stride=stride)


def linear(in_f, out_f) -> LayerSpec:
    return LayerSpec("linear", kernel=1, in_ch=in_f, out_ch=out_f)


def activation(act="leaky_relu", slope=0.1) -> LayerSpec:
    return LayerSpec("activation", act=act, slope=slope)


def validate_spec(specs: Sequence[LayerSpec], chained: bool = True) -> None:
    """Check per-layer hyperparameters; ``chained`` also checks consecutive channel counts."""
    channels = None
    for i, s in enumerate(specs):
        if s.kind == "conv":
            if s.kernel % 2 == 0:
                raise SpecError(f"layer {i}: kernel size {s.kernel} is not odd")
            if s.stride < 1 or s.in_ch < 1 or s.out_ch < 1:
                raise SpecError(f"layer {i}: bad conv hyperparameters {s}")
            if chained and channels is not None and s.in_ch != channels:
                raise SpecError(f"layer {i}: expects {s.in_ch} channels, previous layer gives {channels}")
            channels = s.out_ch
        elif s.kind == "linear":
            if s.in_ch < 1 or s.out_ch < 1:
                raise SpecError(f"layer {i}: bad linear sizes {s}")
            channels = s.out_ch
        elif s.kind in ("activation", "upsample", "flatten", "skip-concat"):
            if s.kind == "activation" and s.act not in _ACTIVATIONS:
                raise SpecError(f"layer {i}: unknown activation {s.act!r}")
            if s.kind == "upsample" and s.factor < 1:
                raise SpecError(f"layer {i}: upsample factor {s.factor}")
        else:
            raise SpecError(f"layer {i}: unknown kind {s.kind!r}")


def glorot_bound(spec: LayerSpec) -> float:
    k2 = spec.kernel * spec.kernel if spec.kind == "conv" else 1
    return float(np.sqrt(6.0 / (k2 * spec.in_ch + k2 * spec.out_ch)))


def init_params(specs: Sequence[LayerSpec], seed: int, chained: bool = True) -> list[list[Tensor]]:
    """Per-layer parameter lists: Glorot-uniform weights, zero biases."""
    validate_spec(specs, chained)
    gen = T.rng(seed)
    params = []
    for s in specs:
        if s.kind == "conv":
            shape = (s.out_ch, s.in_ch, s.kernel, s.kernel)
        elif s.kind == "linear":
            shape = (s.in_ch, s.out_ch)
        else:
            params.append([])
            continue
        b = glorot_bound(s)
        w = gen.uniform(-b, b, size=shape).astype(T.DTYPE)
        params.append([Tensor(w, requires_grad=True),
                       Tensor(np.zeros(s.out_ch, T.DTYPE), requires_grad=True)])
    return params


_ACTIVATIONS = {
    "leaky_relu": lambda x, s: T.leaky_relu(x, s.slope),
    "relu": lambda x, s: T.relu(x),
    "sigmoid": lambda x, s: T.sigmoid(x),
    "tanh": lambda x, s: T.tanh(x),
}


def apply_layer(spec: LayerSpec, params: Sequence[Tensor], x: Tensor) -> Tensor:
    if spec.kind == "conv":
        return T.conv2d(x, params[0], params[1], stride=spec.stride, padding=spec.padding)
    if spec.kind == "linear":
        return T.matmul(x, params[0]) + params[1]
    if spec.kind == "activation":
        return _ACTIVATIONS[spec.act](x, spec)
    if spec.kind == "upsample":
        return T.upsample_nearest(x, spec.factor)
    if spec.kind == "flatten":
        return T.reshape(x, (x.shape[0], -1))
    raise SpecError(f"{spec.kind} layers cannot be applied in a plain stack")


class Sequential:
    def __init__(self, specs: Sequence[LayerSpec], seed: int = 0, params=None):
        self.specs = list(specs)
        self.layer_params = init_params(self.specs, seed) if params is None else params

    def parameters(self) -> list[Tensor]:
        return [p for ps in self.layer_params for p in ps]

    def __call__(self, x: Tensor) -> Tensor:
        for spec, ps in zip(self.specs, self.layer_params):
            x = apply_layer(spec, ps, x)
        return x


# losses --------------------------------------------------------------------

def mse_onehot_loss(probabilities, target_class, negate: bool = False) -> Tensor:
    """Mean squared deviation of probabilities from a one-hot vector.

    Accepts a single vector ``(l,)`` or a batch ``(n, l)`` with one target per
    row. With ``negate`` the MSE from the one-hot of ``target_class`` (the
    correct class) is returned with flipped sign, so minimizing it pushes the
    prediction away.
    """
    p = T.as_tensor(probabilities)
    l = p.shape[-1]
    targets = np.atleast_1d(np.asarray(target_class, dtype=int))
    if np.any(targets < 0) or np.any(targets >= l):
        raise ValueError(f"class {target_class} out of range for {l} classes")
    onehot = np.zeros(p.shape, dtype=p.dtype)
    if p.ndim == 1:
        onehot[targets[0]] = 1
    else:
        onehot[np.arange(p.shape[0]), np.broadcast_to(targets, (p.shape[0],))] = 1
    loss = T.mean(T.square(p - Tensor._wrap(onehot)))
    return -loss if negate else loss


def softmax_cross_entropy(logits, label) -> Tensor:
    z = T.as_tensor(logits)
    l = z.shape[-1]
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    if np.any(labels < 0) or np.any(labels >= l):
        raise ValueError(f"label {label} out of range for {l} classes")
    logp = T.log_softmax(z, axis=-1)
    if z.ndim == 1:
        return -logp[int(labels[0])]
    picked = logp[np.arange(z.shape[0]), labels]
    return -T.mean(picked)


# optimizers ----------------------------------------------------------------

class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.01):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = (p.data - self.lr * p.grad).astype(p.dtype)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += eps
        p.data = (p.data - (lr / c1) * m / denom).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)


def value_and_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        loss = fn(xt)
    tape.backward(loss)
    return loss.item(), xt.grad


@dataclass
class LbfgsResult:
    x: Tensor
    fun: float
    iterations: int
    converged: bool


def lbfgs_minimize(objective: Callable[[Tensor], Tensor], x0, memory: int = 10,
                   max_iters: int = 100, grad_tol: float = 1e-5, c1: float = 1e-4,
                   max_halvings: int = 40) -> LbfgsResult:
    """Two-loop L-BFGS with Armijo backtracking (step halving)."""
    if memory < 1:
        raise ValueError(f"L-BFGS memory must be >= 1, got {memory}")
    x0 = T.as_tensor(x0)
    dtype = x0.dtype
    x = np.array(x0.data, dtype=dtype)
    f, g = value_and_grad(objective, x)
    if not np.isfinite(f):
        raise NumericError(f"objective is not finite at x0: {f}")
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    it = 0
    converged = False
    while True:
        if np.max(np.abs(g)) < grad_tol:
            converged = True
            break
        if it >= max_iters:
            break
        gf = g.reshape(-1).astype(np.float64)
        q = gf.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q /= max(1.0, float(np.sum(np.abs(gf))))
        for s, y, rho, a in zip(s_hist, y_hist, rho_hist, reversed(alphas)):
            b = rho * (y @ q)
            q += s * (a - b)
        d = -q
        slope = gf @ d
        if slope >= 0:
            # not a descent direction: restart from steepest descent
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -gf / max(1.0, float(np.sum(np.abs(gf))))
            slope = gf @ d
        step = 1.0
        accepted = False
        for _ in range(max_halvings):
            xn = (x.reshape(-1) + step * d).astype(dtype).reshape(x.shape)
            fn, gn = value_and_grad(objective, xn)
            if np.isfinite(fn) and fn <= f + c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        it += 1
        if not accepted:
            break
        s = (xn.reshape(-1).astype(np.float64) - x.reshape(-1))
        y = (gn.reshape(-1).astype(np.float64) - gf)
        sy = s @ y
        if sy > 1e-10 * np.sqrt((s @ s) * (y @ y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
        x, f, g = xn, fn, gn
    return LbfgsResult(Tensor(x, dtype=dtype), float(f), it, converged)


# ADVM model format -----------------------------------------------------------

ADVM_MAGIC = b"ADVM"
ADVM_VERSION = 1
KIND_CODES = {"conv": 1, "upsample": 2, "activation": 3, "linear": 4,
              "skip-concat": 5, "flatten": 6, "header": 7}
_CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
_ACT_CODES = {"leaky_relu": 0, "relu": 1, "sigmoid": 2, "tanh": 3}
_CODE_ACTS = {v: k for k, v in _ACT_CODES.items()}


def _f2u(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def _u2f(u: int) -> float:
    return struct.unpack("<f", struct.pack("<I", u))[0]


def spec_hyper(spec: LayerSpec) -> list[int]:
    return [spec.kernel, spec.in_ch, spec.out_ch, spec.stride, _f2u(spec.slope),
            _ACT_CODES[spec.act], spec.factor]


def spec_from_hyper(kind: str, h: Sequence[int]) -> LayerSpec:
    return LayerSpec(kind, kernel=h[0], in_ch=h[1], out_ch=h[2], stride=h[3],
                     slope=_u2f(h[4]), act=_CODE_ACTS[h[5]], factor=h[6])


def encode_records(records: Sequence[tuple[str, Sequence[int], Sequence[Tensor]]]) -> bytes:
    """Pack (kind, hyperparameters, parameter tensors) records into ADVM bytes."""
    out = [ADVM_MAGIC, struct.pack("<HH", ADVM_VERSION, len(records))]
    for kind, hyper, params in records:
        out.append(struct.pack("<BB", KIND_CODES[kind], len(hyper)))
        out.append(struct.pack(f"<{len(hyper)}I", *hyper))
        out.append(struct.pack("<B", len(params)))
        out.extend(T.tensor_to_bytes(p) for p in params)
    return b"".join(out)


def decode_records(buf: bytes) -> list[tuple[str, list[int], list[Tensor]]]:
    if buf[:4] != ADVM_MAGIC:
        raise T.FormatError("bad ADVM magic")
    try:
        version, count = struct.unpack_from("<HH", buf, 4)
        if version != ADVM_VERSION:
            raise T.FormatError(f"unsupported ADVM version {version}")
        pos = 8
        records = []
        for _ in range(count):
            code, nh = struct.unpack_from("<BB", buf, pos)
            pos += 2
            hyper = list(struct.unpack_from(f"<{nh}I", buf, pos))
            pos += 4 * nh
            (np_,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            params = []
            for _ in range(np_):
                t, pos = T.tensor_from_bytes(buf, pos)
                t.requires_grad = True
                params.append(t)
            if code not in _CODE_KINDS:
                raise T.FormatError(f"unknown layer kind code {code}")
            records.append((_CODE_KINDS[code], hyper, params))
    except struct.error as exc:
        raise T.FormatError(f"truncated ADVM file: {exc}") from None
    if pos != len(buf):
        raise T.FormatError("trailing bytes after ADVM records")
    return records


def sequential_to_bytes(model: Sequential, header: Sequence[int] = ()) -> bytes:
    records = [("header", list(header), [])]
    records += [(s.kind, spec_hyper(s), ps) for s, ps in zip(model.specs, model.layer_params)]
    return encode_records(records)


def sequential_from_bytes(buf: bytes) -> tuple[Sequential, list[int]]:
    records = decode_records(buf)
    if not records or records[0][0] != "header":
        raise T.FormatError("ADVM stack is missing its header record")
    header = records[0][1]
    specs = [spec_from_hyper(kind, h) for kind, h, _ in records[1:]]
    params = [ps for _, _, ps in records[1:]]
    return Sequential(specs, params=params), header
