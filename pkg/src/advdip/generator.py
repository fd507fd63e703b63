"""Deep-image-prior generator and the two attacks built on it.

The generator is a symmetric encoder-decoder: five stride-2 3x3 encoder convs,
five nearest-upsample + 3x3 decoder convs, each decoder level fed a 1x1-conv
skip branch from the encoder feature at the same resolution, and a sigmoid
1x1 output head. It maps a fixed uniform noise map to an image.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .attacks import AttackResult, make_result
from .classifier import ClassifierModel, Dataset, classify, write_ppm
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    levels: int = 5
    channels: int = 128
    skip_channels: int = 4
    noise_channels: int = 32
    out_channels: int = 3
    slope: float = 0.1

    def __post_init__(self):
        # stored as float32 bits in the model file, so keep the float32 value
        object.__setattr__(self, "slope", float(np.float32(self.slope)))

    @property
    def multiple(self) -> int:
        return 2**self.levels


class GeneratorModel:
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0, params=None):
        self.cfg = cfg
        self.specs = self._layer_specs(cfg)
        self.layer_params = nn.init_params(self.specs, seed, chained=False) if params is None else params

    @staticmethod
    def _layer_specs(cfg: GeneratorConfig) -> list[nn.LayerSpec]:
        L, ch, sk = cfg.levels, cfg.channels, cfg.skip_channels
        enc_in = [cfg.noise_channels] + [ch] * (L - 1)
        enc = [nn.conv(c, ch, 3, stride=2) for c in enc_in]
        skips = [nn.conv(c, sk, 1) for c in enc_in]
        dec = [nn.conv(ch + sk, ch, 3) for _ in range(L)]
        return enc + skips + dec + [nn.conv(ch, cfg.out_channels, 1)]

    def parameters(self) -> list[Tensor]:
        return [p for ps in self.layer_params for p in ps]

    def _conv(self, i: int, x: Tensor) -> Tensor:
        s = self.specs[i]
        w, b = self.layer_params[i]
        return T.conv2d(x, w, b, stride=s.stride, padding=s.padding)

    def forward(self, noise: Tensor) -> Tensor:
        """Raw network output for a noise tensor whose sides divide by 2**levels."""
        L, slope = self.cfg.levels, self.cfg.slope
        feats = [noise]
        for i in range(L):
            feats.append(T.leaky_relu(self._conv(i, feats[-1]), slope))
        u = feats[L]
        for lvl in range(L, 0, -1):
            skip = T.leaky_relu(self._conv(L + lvl - 1, feats[lvl - 1]), slope)
            u = T.concat([T.upsample_nearest(u, 2), skip], axis=1)
            u = T.leaky_relu(self._conv(2 * L + lvl - 1, u), slope)
        return T.sigmoid(self._conv(3 * L, u))

    def render(self, noise) -> Tensor:
        """G(N) at the noise map's own size: reflect-pad, generate, crop.

        A Tensor ``noise`` (for gradients with respect to N) must already have
        sides divisible by 2**levels.
        """
        h, w = noise.shape[-2:]
        m = self.cfg.multiple
        ph, pw = -h % m, -w % m
        if isinstance(noise, Tensor):
            if ph or pw:
                raise T.ShapeError(f"noise tensor sides {h}x{w} must divide by {m}")
            return self.forward(noise)
        top, left = ph // 2, pw // 2
        padded = noise
        if ph or pw:
            padded = np.pad(noise, ((0, 0), (0, 0), (top, ph - top), (left, pw - left)), mode="reflect")
        out = self.forward(Tensor._wrap(np.ascontiguousarray(padded)))
        if ph or pw:
            out = out[:, :, top : top + h, left : left + w]
        return out

    __call__ = render

    def to_bytes(self) -> bytes:
        c = self.cfg
        header = [c.levels, c.channels, c.skip_channels, c.noise_channels, c.out_channels, nn._f2u(c.slope)]
        records = [("header", header, [])]
        records += [(s.kind, nn.spec_hyper(s), ps) for s, ps in zip(self.specs, self.layer_params)]
        return nn.encode_records(records)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GeneratorModel":
        records = nn.decode_records(buf)
        if not records or records[0][0] != "header" or len(records[0][1]) != 6:
            raise T.FormatError("not a generator ADVM file")
        h = records[0][1]
        cfg = GeneratorConfig(h[0], h[1], h[2], h[3], h[4], nn._u2f(h[5]))
        model = cls(cfg, params=[ps for _, _, ps in records[1:]])
        if len(model.layer_params) != len(model.specs):
            raise T.FormatError("generator ADVM layer count does not match its header")
        return model


def noise_map(height: int, width: int, channels: int = 32, seed: int = 0,
              amplitude: float = 0.1) -> np.ndarray:
    if height < 16 or width < 16:
        raise ValueError(f"noise map needs sides >= 16, got {height}x{width}")
    return T.tensor_uniform((1, channels, height, width), 0.0, amplitude, seed).data


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(1.0 / mse)


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=T.DTYPE)
    return x[None] if x.ndim == 3 else x


def dip_reconstruct(x, iters: int = 3000, seed: int = 0, lr: float = 1e-3,
                    cfg: GeneratorConfig = GeneratorConfig(), log_every: int = 100):
    """Fit G to ``x`` from random weights under plain squared error.

    Returns the final rendering and the PSNR trace sampled every ``log_every``
    iterations (plus the last one).
    """
    x = _as_batch(x)
    if x.min() < 0 or x.max() > 1:
        raise ValueError("target image must lie in [0, 1]")
    gen = GeneratorModel(cfg, seed)
    N = noise_map(x.shape[2], x.shape[3], cfg.noise_channels, seed + 1)
    opt = nn.Adam(gen.parameters(), lr=lr)
    target = Tensor._wrap(x)
    trace = []
    for it in range(iters):
        with Tape() as tape:
            out = gen.render(N)
            loss = T.sum(T.square(out - target))
        if not np.isfinite(loss.item()):
            raise nn.NumericError(f"non-finite reconstruction loss at iteration {it}")
        if it % log_every == 0:
            trace.append(psnr(out.data, x))
        tape.backward(loss)
        opt.step()
    final = gen.render(N).data
    trace.append(psnr(final, x))
    return final, trace


@dataclass
class DipAttackConfig:
    lam: float = 1e-5
    max_iters: int = 5000
    stop_prob: float = 0.9
    stop_psnr: float = 30.0
    seed: int = 0
    lr: float = 1e-3
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.lam < 0 or self.max_iters < 1:
            raise ValueError(f"bad DIP attack config: lam={self.lam}, max_iters={self.max_iters}")


def dip_adversarial(x, f: ClassifierModel, target: int, cfg: DipAttackConfig = DipAttackConfig(),
                    label: int | None = None) -> AttackResult:
    """Targeted attack by reconstructing ``x`` under the dual adversarial/reconstruction loss.

    Stops at the first iteration whose rendering reaches both the target
    probability and PSNR thresholds. Otherwise runs ``max_iters`` and returns
    the best rendering seen along the way, ranked by: classified as the target,
    then target probability at the threshold, then PSNR. Keeping the best
    iterate matters because Adam on a saturated classifier occasionally bursts
    away from a good solution late in the run.
    """
    t0 = time.perf_counter()
    x = _as_batch(x)
    y0, _, _ = classify(f, x)
    if label is not None and y0 != label:
        raise PreconditionError(f"image is misclassified ({y0} != {label})")
    if target == y0:
        raise PreconditionError("target class equals the current prediction")
    gen = GeneratorModel(cfg.generator, cfg.seed)
    N = noise_map(x.shape[2], x.shape[3], cfg.generator.noise_channels, cfg.seed + 1)
    opt = nn.Adam(gen.parameters(), lr=cfg.lr)
    xt = Tensor._wrap(x)
    best_key, best_out, best_it = None, None, 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        with Tape() as tape:
            out = gen.render(N)
            probs = f.probabilities(out)
            loss = nn.mse_onehot_loss(probs[0], target) + cfg.lam * T.sum(T.square(out - xt))
        if not np.isfinite(loss.item()):
            raise nn.NumericError(f"non-finite DIP attack loss at iteration {it}")
        p = probs.data[0]
        quality = psnr(out.data, x)
        key = (int(np.argmax(p)) == target, bool(p[target] >= cfg.stop_prob), quality)
        if best_key is None or key > best_key:
            best_key, best_out, best_it = key, out.data, it
        if key[1] and quality >= cfg.stop_psnr:
            break
        tape.backward(loss)
        opt.step()
    res = make_result(f, x, best_out, target=target, original=y0, iterations=it, t0=t0)
    res.extra.update(psnr=psnr(res.x_adv, x), best_iteration=best_it)
    return res


# patches -----------------------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    side: int
    image_shape: tuple[int, int] = (32, 32)
    placement: str = "random"  # random | fixed
    offset: tuple[int, int] = (0, 0)

    @classmethod
    def from_area(cls, area: float, image_shape=(32, 32), **kw) -> "PatchSpec":
        h, w = image_shape
        side = int(round(np.sqrt(area * h * w)))
        return cls(max(1, min(side, h, w)), tuple(image_shape), **kw)

    @property
    def area_fraction(self) -> float:
        return self.side * self.side / (self.image_shape[0] * self.image_shape[1])

    def mask(self, offset=None) -> np.ndarray:
        r, c = self.offset if offset is None else offset
        M = np.zeros(self.image_shape, T.DTYPE)
        M[r : r + self.side, c : c + self.side] = 1
        return M

    def sample_offset(self, gen: np.random.Generator) -> tuple[int, int]:
        if self.placement == "fixed":
            return self.offset
        h, w = self.image_shape
        return int(gen.integers(0, h - self.side + 1)), int(gen.integers(0, w - self.side + 1))


def _zeros(a, rows, cols):
    return Tensor._wrap(np.zeros(a.shape[:2] + (rows, cols), a.dtype))


def _pad(a: Tensor, top, bottom, left, right) -> Tensor:
    h, w = a.shape[2], a.shape[3]
    parts = [a]
    if left or right:
        parts = [p for p in (_zeros(a, h, left) if left else None, a,
                             _zeros(a, h, right) if right else None) if p is not None]
        a = T.concat(parts, axis=3)
    if top or bottom:
        w = a.shape[3]
        parts = [p for p in (_zeros(a, top, w) if top else None, a,
                             _zeros(a, bottom, w) if bottom else None) if p is not None]
        a = T.concat(parts, axis=2)
    return a


def composite(x, patch, mask, offset) -> Tensor:
    """Blend ``patch`` into ``x`` at ``offset`` through ``mask``.

    ``patch`` is (1, C, s, s) and ``mask`` is (s, s) or broadcastable to it;
    both are translated to ``offset`` before the element-wise blend.
    """
    x = T.as_tensor(x)
    patch = T.as_tensor(patch)
    if patch.ndim == 3:
        patch = T.reshape(patch, (1,) + patch.shape)
    H, W = x.shape[-2:]
    s_h, s_w = patch.shape[-2:]
    r, c = offset
    if r < 0 or c < 0 or r + s_h > H or c + s_w > W:
        raise ValueError(f"patch {s_h}x{s_w} at {offset} does not fit a {H}x{W} image")
    M = np.zeros((H, W), x.dtype)
    M[r : r + s_h, c : c + s_w] = np.broadcast_to(np.asarray(mask, x.dtype), (s_h, s_w))
    placed = _pad(patch, r, H - r - s_h, c, W - c - s_w)
    return Tensor._wrap(M) * placed + Tensor._wrap(1 - M) * x


@dataclass
class PatchResult:
    render: np.ndarray  # (3, s, s)
    generator: GeneratorModel
    noise: np.ndarray
    spec: PatchSpec
    attack_class: int
    iters: int
    seed: int
    loss_trace: list[float] = field(default_factory=list)

    def save(self, prefix) -> None:
        prefix = str(prefix)
        Path(prefix + ".advm").write_bytes(self.generator.to_bytes())
        write_ppm(prefix + ".ppm", self.render)
        meta = (f"attack_class={self.attack_class}\narea_fraction={self.spec.area_fraction:.6f}\n"
                f"seed={self.seed}\niters={self.iters}\nside={self.spec.side}\n")
        Path(prefix + ".meta").write_text(meta, encoding="utf-8")


def read_patch_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def _patch_canvas(side: int, cfg: GeneratorConfig) -> int:
    return max(cfg.multiple, -(-side // cfg.multiple) * cfg.multiple)


def render_patch(gen: GeneratorModel, noise: np.ndarray, side: int) -> Tensor:
    out = gen.render(noise)
    h = noise.shape[-1]
    o = (h - side) // 2
    return out[:, :, o : o + side, o : o + side]


def dip_patch_train(train: Dataset, f: ClassifierModel, attack_class: int, spec: PatchSpec,
                    iters: int = 400, batch: int = 16, seed: int = 0, lr: float = 1e-3,
                    cfg: GeneratorConfig = GeneratorConfig(), loss: str = "ce") -> PatchResult:
    """Train one generator-rendered sticker that pushes many images toward ``attack_class``.

    No reconstruction term: the loss is a targeted classification loss averaged
    over a mini-batch of images, each with the patch at a fresh random offset.
    ``loss="ce"`` uses cross-entropy toward the attack class; ``loss="mse"`` the
    one-hot MSE over probabilities, whose gradient vanishes once the classifier
    is confident about the pasted images.
    """
    if loss not in ("ce", "mse"):
        raise ValueError(f"unknown patch loss {loss!r}")
    if not len(train):
        raise ValueError("empty training set")
    if np.any(train.labels == attack_class):
        raise ValueError("training images must exclude the attack class")
    gen = GeneratorModel(cfg, seed)
    canvas = _patch_canvas(spec.side, cfg)
    N = noise_map(canvas, canvas, cfg.noise_channels, seed + 1)
    opt = nn.Adam(gen.parameters(), lr=lr)
    stream = T.rng(seed + 2)
    trace = []
    for it in range(iters):
        idx = stream.integers(0, len(train), size=batch)
        with Tape() as tape:
            patch = render_patch(gen, N, spec.side)
            ones = np.ones((spec.side, spec.side), T.DTYPE)
            xs = [composite(Tensor._wrap(train.images[i : i + 1]), patch, ones, spec.sample_offset(stream))
                  for i in idx]
            z = f.logits(T.concat(xs, axis=0))
            want = np.full(batch, attack_class)
            J = (nn.softmax_cross_entropy(z, want) if loss == "ce"
                 else nn.mse_onehot_loss(T.softmax(z, axis=-1), want))
        if not np.isfinite(J.item()):
            raise nn.NumericError(f"non-finite patch loss at iteration {it}")
        trace.append(J.item())
        tape.backward(J)
        opt.step()
    render = render_patch(gen, N, spec.side).data[0]
    return PatchResult(render, gen, N, spec, attack_class, iters, seed, trace)
