"""Desk-scale CNN classifier, the synthetic shapes dataset and PPM ingestion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring")
HUES = {"red": (0.85, 0.25, 0.15), "blue": (0.15, 0.35, 0.85)}
CLASS_NAMES = tuple(f"{h}-{s}" for h in HUES for s in SHAPES)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= len(self.class_names):
            raise ValueError("label exceeds class count")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.class_names)


# rendering -------------------------------------------------------------------

def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    if kind == "circle":
        return r <= 0.9
    if kind == "ring":
        return (r <= 0.9) & (r >= 0.5)
    if kind == "square":
        return (np.abs(u) <= 0.72) & (np.abs(v) <= 0.72)
    if kind == "cross":
        return ((np.abs(u) <= 0.28) & (np.abs(v) <= 0.9)) | ((np.abs(v) <= 0.28) & (np.abs(u) <= 0.9))
    if kind == "triangle":
        # equilateral, circumradius 0.95, apex up
        return (v >= -0.475) & (np.sqrt(3) * u + v <= 0.95) & (-np.sqrt(3) * u + v <= 0.95)
    raise ValueError(kind)


def render_shape(label: int, side: int, gen: np.random.Generator | None = None,
                 supersample: int = 4) -> np.ndarray:
    """Render one class archetype; ``gen=None`` gives the canonical exemplar."""
    kind = SHAPES[label % len(SHAPES)]
    hue = np.array(list(HUES.values())[label // len(SHAPES)])
    if gen is None:
        scale, angle, cx, cy = 1.0, 0.0, 0.0, 0.0
        color, bg_level, tilt, noise = hue, 0.5, np.zeros(2), None
    else:
        scale = gen.uniform(0.8, 1.2)
        angle = gen.uniform(0, 2 * np.pi)
        radius = 0.3 * side * scale
        slack = max(side / 2 - radius - 1, 0)
        cx, cy = gen.uniform(-slack, slack, size=2)
        color = np.clip(hue + gen.uniform(-0.08, 0.08, size=3), 0, 1)
        bg_level = gen.uniform(0.4, 0.6)
        tilt = gen.uniform(-0.1, 0.1, size=2)
        noise = gen.uniform(-0.02, 0.02, size=(3, side, side))
    radius = 0.3 * side * scale
    s = supersample
    coords = (np.arange(side * s) + 0.5) / s - side / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    ca, sa = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (ca * dx + sa * dy) / radius
    v = (-sa * dx + ca * dy) / radius
    # image y grows downward; flip so the triangle apex points up at angle 0
    cover = _shape_mask(kind, u, -v).reshape(side, s, side, s).mean(axis=(1, 3))
    grid = (np.arange(side) + 0.5) / side - 0.5
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    bg = bg_level + tilt[0] * gx + tilt[1] * gy
    img = bg[None] * (1 - cover[None]) + color[:, None, None] * cover[None]
    if noise is not None:
        img = img + noise
    return np.clip(img, 0, 1).astype(T.DTYPE)


def synth_dataset(num_classes: int = 10, per_class: int = 100, side: int = 32, seed: int = 0) -> Dataset:
    if num_classes > len(CLASS_NAMES) or num_classes < 1:
        raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}, got {num_classes}")
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    gen = T.rng(seed)
    n = num_classes * per_class
    labels = np.arange(n) % num_classes
    images = np.stack([render_shape(int(c), side, gen) for c in labels]) if n else \
        np.zeros((0, 3, side, side), T.DTYPE)
    return Dataset(images, labels, CLASS_NAMES[:num_classes])


def shapes_split(train: int = 5000, test: int = 1000, side: int = 32, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint train/test shapes-10 datasets drawn from independent streams."""
    return (synth_dataset(10, train // 10, side, seed),
            synth_dataset(10, test // 10, side, seed + 1_000_003))


# model -----------------------------------------------------------------------

def reference_spec(num_classes: int = 10, side: int = 32) -> list[nn.LayerSpec]:
    chans = [3, 16, 32, 64]
    specs = []
    for cin, cout in zip(chans, chans[1:]):
        specs += [nn.conv(cin, cout, 3, stride=2), nn.activation("leaky_relu", 0.1)]
    feat = side // 8
    specs += [nn.LayerSpec("flatten"), nn.linear(64 * feat * feat, num_classes)]
    return specs


@dataclass
class ClassifierModel:
    net: nn.Sequential
    num_classes: int
    input_shape: tuple[int, int, int] = (3, 32, 32)
    trained: bool = False

    @classmethod
    def build(cls, specs: Sequence[nn.LayerSpec] | None = None, num_classes: int = 10,
              input_shape=(3, 32, 32), seed: int = 0) -> "ClassifierModel":
        specs = reference_spec(num_classes, input_shape[-1]) if specs is None else list(specs)
        if specs[-1].out_ch != num_classes:
            raise nn.SpecError(f"final layer width {specs[-1].out_ch} != class count {num_classes}")
        return cls(nn.Sequential(specs, seed), num_classes, tuple(input_shape))

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def logits(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise T.ShapeError(f"model expects images {self.input_shape}, got {x.shape[1:]}")
        return self.net(x)

    def probabilities(self, x) -> Tensor:
        return T.softmax(self.logits(x), axis=-1)

    def predict(self, images: np.ndarray, batch: int = 500) -> np.ndarray:
        out = [np.argmax(self.logits(Tensor(images[i : i + batch])).data, axis=1)
               for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def classify(f: ClassifierModel, x) -> tuple[int, np.ndarray, np.ndarray]:
    """Label, probabilities and logits for one image."""
    z = f.logits(x)
    p = T.softmax(z, axis=-1)
    return int(np.argmax(z.data[0])), p.data[0], z.data[0]


def accuracy(f: ClassifierModel, data: Dataset) -> float:
    if not len(data):
        return float("nan")
    return float(np.mean(f.predict(data.images) == data.labels))


def train_classifier(data: Dataset, specs=None, epochs: int = 20, batch: int = 32, seed: int = 0,
                     lr: float = 3e-3) -> tuple[ClassifierModel, list[float]]:
    """Minimize softmax cross-entropy with Adam; returns the model and per-epoch train accuracy."""
    if not len(data):
        raise ValueError("empty dataset")
    model = ClassifierModel.build(specs, len(data.class_names), data.images.shape[1:], seed)
    params = model.parameters()
    opt = nn.Adam(params, lr=lr)
    history = []
    n = len(data)
    for epoch in range(epochs):
        order = T.rng(seed * 7919 + epoch + 1).permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            with Tape() as tape:
                loss = nn.softmax_cross_entropy(model.logits(Tensor(data.images[idx])), data.labels[idx])
            if not np.isfinite(loss.item()):
                raise nn.NumericError(f"non-finite training loss in epoch {epoch}")
            tape.backward(loss)
            opt.step()
        history.append(accuracy(model, data))
        log.info("epoch %d train accuracy %.4f", epoch, history[-1])
    model.trained = epochs > 0
    return model, history


def save_model(f: ClassifierModel, path) -> None:
    header = [f.num_classes, *f.input_shape, int(f.trained)]
    Path(path).write_bytes(nn.sequential_to_bytes(f.net, header))


def load_model(path) -> ClassifierModel:
    net, header = nn.sequential_from_bytes(Path(path).read_bytes())
    if len(header) != 5:
        raise T.FormatError("not a classifier ADVM file")
    return ClassifierModel(net, header[0], tuple(header[1:4]), bool(header[4]))


# PPM and directory datasets ------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    c, h, w = img.shape
    if c != 3:
        raise ValueError("PPM output needs 3 channels")
    px = np.clip(np.round(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise T.FormatError(f"truncated PPM header in {path}")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise T.FormatError(f"{path}: only 8-bit binary PPM (P6, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos) \
        if len(buf) - pos >= w * h * 3 else None
    if raw is None:
        raise T.FormatError(f"truncated PPM pixel data in {path}")
    return (raw.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(T.DTYPE)


def save_dataset_dir(data: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("filename,label\n")
        for i, (img, lab) in enumerate(zip(data.images, data.labels)):
            name = f"img_{i:05d}.ppm"
            write_ppm(d / name, img)
            fh.write(f"{name},{int(lab)}\n")


def load_dataset_dir(directory, class_names: Sequence[str] | None = None) -> Dataset:
    d = Path(directory)
    with open(d / "labels.csv", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    images = np.stack([read_ppm(d / r["filename"]) for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    if class_names is None:
        class_names = CLASS_NAMES if labels.max() < len(CLASS_NAMES) else \
            tuple(str(i) for i in range(labels.max() + 1))
        class_names = tuple(class_names[: labels.max() + 1])
    return Dataset(images, labels, tuple(class_names))
