"""Baseline adversarial attacks sharing one result contract.

Every attack takes a classifier exposing ``logits(Tensor) -> Tensor`` and an
image ``x`` of shape (3, H, W) or (1, 3, H, W) with values in [0, 1], and
returns an :class:`AttackResult` whose ``x_adv`` lies in [0, 1].

Targeted attacks minimize the one-hot MSE between the classifier's
probabilities and the target class. Untargeted attacks minimize the negated
MSE to the true class, which pushes the prediction away from it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tape, Tensor


@dataclass
class AttackResult:
    x_adv: np.ndarray
    r: np.ndarray
    success: bool
    predicted: int
    original: int
    target: int | None
    iterations: int
    l2: float
    linf: float
    seconds: float
    extra: dict = field(default_factory=dict)


def _batch(x) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(T.DTYPE)
    return x[None] if x.ndim == 3 else x


def _predict(f, x: np.ndarray) -> tuple[int, np.ndarray]:
    z = f.logits(Tensor(x, dtype=x.dtype)).data[0]
    return int(np.argmax(z)), z


def make_result(f, x, x_adv, target=None, original=None, iterations=0, t0=None,
                untargeted_label=None) -> AttackResult:
    """Clamp ``x_adv`` into the box and fill in the shared result fields."""
    x = _batch(x)
    x_adv = np.clip(_batch(x_adv), 0, 1).astype(x.dtype)
    if original is None:
        original = _predict(f, x)[0]
    pred, _ = _predict(f, x_adv)
    r = x_adv - x
    if target is not None:
        success = pred == target
    else:
        success = pred != (original if untargeted_label is None else untargeted_label)
    r64 = r.astype(np.float64)
    return AttackResult(
        x_adv=x_adv, r=r, success=bool(success), predicted=pred, original=int(original),
        target=None if target is None else int(target), iterations=int(iterations),
        l2=float(np.sqrt(np.sum(r64 * r64))), linf=float(np.max(np.abs(r64))) if r.size else 0.0,
        seconds=0.0 if t0 is None else time.perf_counter() - t0)


def attack_loss(f, x: Tensor, target: int, targeted: bool = True, kind: str = "mse") -> Tensor:
    """One-hot MSE over probabilities, or cross-entropy toward ``target`` with ``kind="ce"``."""
    if kind == "ce":
        ce = nn.softmax_cross_entropy(f.logits(x), np.array([target]))
        return ce if targeted else -ce
    if kind != "mse":
        raise ValueError(f"unknown attack loss {kind!r}")
    probs = T.softmax(f.logits(x), axis=-1)
    return nn.mse_onehot_loss(probs[0], target, negate=not targeted)


def input_grad(f, x: np.ndarray, loss_fn) -> tuple[float, np.ndarray]:
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        loss = loss_fn(f, xt)
    tape.backward(loss)
    return loss.item(), xt.grad


# fast gradient family -------------------------------------------------------------

@dataclass
class FgsmConfig:
    eps: float = 0.1
    steps: int = 10
    mu: float = 1.0
    mode: str = "single"  # single | iterative | momentum

    def __post_init__(self):
        if self.eps <= 0 or self.steps < 1 or self.mu < 0:
            raise ValueError(f"invalid FGSM config {self}")
        if self.mode not in ("single", "iterative", "momentum"):
            raise ValueError(f"unknown FGSM mode {self.mode!r}")

    @property
    def alpha(self) -> float:
        return self.eps / self.steps


def _target_and_mode(f, x, target, targeted):
    if target is None:
        return _predict(f, x)[0], False
    return int(target), targeted


def fgsm(f, x, target=None, cfg: FgsmConfig = FgsmConfig(), targeted: bool = True) -> AttackResult:
    """One signed-gradient step of size eps that descends the attack loss."""
    t0 = time.perf_counter()
    x = _batch(x)
    y, targeted = _target_and_mode(f, x, target, targeted)
    _, g = input_grad(f, x, lambda f_, xt: attack_loss(f_, xt, y, targeted))
    x_adv = x - cfg.eps * np.sign(g)
    return _finish(f, x, x_adv, y, targeted, 1, t0)


def _finish(f, x, x_adv, y, targeted, iterations, t0):
    if targeted:
        return make_result(f, x, x_adv, target=y, iterations=iterations, t0=t0)
    return make_result(f, x, x_adv, original=None, iterations=iterations, t0=t0, untargeted_label=y)


def fgsm_iterative(f, x, target=None, cfg: FgsmConfig = FgsmConfig(mode="iterative"),
                   targeted: bool = True) -> AttackResult:
    t0 = time.perf_counter()
    x = _batch(x)
    y, targeted = _target_and_mode(f, x, target, targeted)
    r = np.zeros_like(x)
    for _ in range(cfg.steps):
        _, g = input_grad(f, np.clip(x + r, 0, 1), lambda f_, xt: attack_loss(f_, xt, y, targeted))
        r = r - cfg.alpha * np.sign(g)
    return _finish(f, x, x + r, y, targeted, cfg.steps, t0)


def momentum_iterative(f, x, target=None, cfg: FgsmConfig = FgsmConfig(mode="momentum"),
                       targeted: bool = True) -> AttackResult:
    t0 = time.perf_counter()
    x = _batch(x)
    y, targeted = _target_and_mode(f, x, target, targeted)
    r = np.zeros_like(x)
    acc = np.zeros(x.shape, np.float64)
    for _ in range(cfg.steps):
        _, g = input_grad(f, np.clip(x + r, 0, 1), lambda f_, xt: attack_loss(f_, xt, y, targeted))
        l1 = float(np.sum(np.abs(g), dtype=np.float64))
        acc = cfg.mu * acc + (g / l1 if l1 > 0 else 0.0)
        r = r - cfg.alpha * np.sign(acc).astype(x.dtype)
    return _finish(f, x, x + r, y, targeted, cfg.steps, t0)


def run_fgsm(f, x, target=None, cfg: FgsmConfig = FgsmConfig(), targeted=True) -> AttackResult:
    fn = {"single": fgsm, "iterative": fgsm_iterative, "momentum": momentum_iterative}[cfg.mode]
    return fn(f, x, target, cfg, targeted)


def select_min_eps(attack: Callable[[float], AttackResult], lo: float = 1 / 255, hi: float = 0.1,
                   refine: int = 8) -> AttackResult:
    """Smallest effective eps in [lo, hi]: doubling to bracket, then bisection."""
    eps = lo
    fail = None
    res = attack(eps)
    while not res.success and eps < hi:
        fail = eps
        eps = min(2 * eps, hi)
        res = attack(eps)
    if not res.success:
        res.extra["eps"] = eps
        return res
    best, best_eps = res, eps
    if fail is not None:
        a, b = fail, eps
        for _ in range(refine):
            mid = 0.5 * (a + b)
            trial = attack(mid)
            if trial.success:
                best, best_eps, b = trial, mid, mid
            else:
                a = mid
    best.extra["eps"] = best_eps
    return best


# penalty-weight search ---------------------------------------------------------

def min_feasible_weight(trial: Callable[[float], tuple[bool, object]], lo: float = 1e-3,
                        hi: float = 1e3, steps: int = 12):
    """Geometric bisection for the smallest weight whose trial succeeds.

    The first probe is the geometric midpoint of [lo, hi]. Returns
    ``(weight, payload)`` of the smallest successful probe, or ``(None, payload)``
    with the payload of the upper bound when nothing succeeds.
    """
    best = None
    top = hi
    for _ in range(steps):
        d = math.sqrt(lo * hi)
        ok, payload = trial(d)
        if ok:
            best = (d, payload)
            hi = d
        else:
            lo = d
    if best is None:
        ok, payload = trial(top)
        return (top, payload) if ok else (None, payload)
    return best


def lbfgs_attack(f, x, target: int, d_range=(1e-3, 1e3), steps: int = 12, memory: int = 10,
                 inner_iters: int = 50, grad_tol: float = 1e-6, loss: str = "ce") -> AttackResult:
    """Box-constrained penalty attack: min ||r|| + d * J(clamp(x + r), target) over d.

    ``loss`` picks J. Cross-entropy is the default because a confident
    classifier saturates the one-hot MSE: its input gradient falls to ~1e-6,
    far below the unit gradient of ||r||, so no d in range moves r off zero.
    """
    t0 = time.perf_counter()
    if not getattr(f, "trained", True):
        raise ValueError("L-BFGS attack needs a trained classifier")
    x = _batch(x)
    y0, _ = _predict(f, x)
    if y0 == target:
        raise ValueError("image is already classified as the target")
    xt = Tensor(x, dtype=x.dtype)
    total_iters = 0

    def trial(d):
        nonlocal total_iters

        def objective(r):
            adv = T.clamp(xt + r, 0.0, 1.0)
            return T.l2_norm(r) + d * attack_loss(f, adv, target, kind=loss)

        sol = nn.lbfgs_minimize(objective, np.zeros_like(x), memory=memory,
                                max_iters=inner_iters, grad_tol=grad_tol)
        total_iters += sol.iterations
        res = make_result(f, x, x + sol.x.data, target=target, original=y0)
        return res.success, res

    d, res = min_feasible_weight(trial, *d_range, steps=steps)
    res.iterations = total_iters
    res.seconds = time.perf_counter() - t0
    res.extra["d"] = d
    return res


@dataclass
class CwConfig:
    kappa: float = 0.0
    search_steps: int = 9
    d_range: tuple[float, float] = (1e-3, 1e3)
    inner_iters: int = 200
    lr: float = 0.05
    delta: float = 1e-6

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")


def logit_margin(z: np.ndarray, c: int) -> float:
    others = np.delete(z, c)
    return float(z[c] - others.max())


def cw_attack(f, x, target: int, cfg: CwConfig = CwConfig()) -> AttackResult:
    """Tanh-reparametrized L2 attack with the logit-margin objective.

    Keeps the smallest-distortion iterate whose target logit beats every other
    logit by at least kappa, across all search steps.
    """
    t0 = time.perf_counter()
    x = _batch(x)
    y0, _ = _predict(f, x)
    if y0 == target:
        raise ValueError("image is already classified as the target")
    squeezed = np.clip(x, cfg.delta, 1 - cfg.delta).astype(np.float64)
    w0 = np.arctanh(2 * squeezed - 1).astype(x.dtype)
    xt = Tensor(x, dtype=x.dtype)
    others = np.array([i for i in range(f.num_classes) if i != target])
    best = {"l2": np.inf, "x": None}
    total = 0

    def trial(d):
        nonlocal total
        w = Tensor(w0.copy(), requires_grad=True, dtype=x.dtype)
        state = nn.AdamState.zeros([w])
        found = False
        for _ in range(cfg.inner_iters):
            with Tape() as tape:
                adv = 0.5 * (T.tanh(w) + 1.0)
                z = f.logits(adv)
                zc = z[0, target]
                zo = T.max(z[0, others], axis=0)
                g = T.relu(zo - zc + cfg.kappa) - cfg.kappa
                dist = T.sum(T.square(adv - xt))
                loss = dist + d * g
            zd = z.data[0]
            margin = logit_margin(zd, target)
            if margin >= cfg.kappa and int(np.argmax(zd)) == target:
                found = True
                if dist.item() < best["l2"]:
                    best["l2"], best["x"] = dist.item(), adv.data.copy()
            tape.backward(loss)
            nn.adam_step([w], [w.grad], state, lr=cfg.lr)
            total += 1
        return found, None

    d, _ = min_feasible_weight(trial, *cfg.d_range, steps=cfg.search_steps)
    x_adv = best["x"] if best["x"] is not None else 0.5 * (np.tanh(w0) + 1)
    res = make_result(f, x, x_adv, target=target, original=y0, iterations=total, t0=t0)
    z = _predict(f, res.x_adv)[1]
    res.extra.update(d=d, margin=logit_margin(z, target))
    res.success = res.success and res.extra["margin"] >= cfg.kappa
    return res


# saliency map ----------------------------------------------------------------------

def _class_grads(f, x: np.ndarray, target: int, use_logits: bool):
    """Gradients of the target output and of the summed other outputs."""
    def grad_of(select):
        xt = Tensor(x, requires_grad=True, dtype=x.dtype)
        with Tape() as tape:
            out = f.logits(xt)
            if not use_logits:
                out = T.softmax(out, axis=-1)
            loss = select(out)
        tape.backward(loss)
        return xt.grad.reshape(-1).astype(np.float64), out.data[0]

    g_t, out = grad_of(lambda o: o[0, target])
    mask = np.ones(out.shape[0], dtype=x.dtype)
    mask[target] = 0
    g_o, _ = grad_of(lambda o: T.sum(o[0] * Tensor._wrap(mask)))
    return g_t, g_o


def smm_attack(f, x, target: int, step: float = 0.5, max_pixels: int | None = None,
               use_logits: bool = False, top_k: int = 64, max_iters: int | None = None) -> AttackResult:
    """Pixel-pair saliency attack restricted to the top-k target-gradient pixels.

    Each pixel moves in the direction that raises the target output. A pair is
    admissible when its summed target term is positive and its summed
    other-class term is negative; the pair maximizing their product's
    magnitude is perturbed by ``step``.
    """
    t0 = time.perf_counter()
    x = _batch(x)
    m = x.size
    max_pixels = int(0.1 * m) if max_pixels is None else max_pixels
    max_iters = max_pixels if max_iters is None else max_iters
    y0, _ = _predict(f, x)
    adv = x.reshape(-1).copy()
    exhausted = np.zeros(m, dtype=bool)
    touched = np.zeros(m, dtype=bool)
    it = 0
    reason = "success"
    pred = y0
    while pred != target:
        if touched.sum() >= max_pixels or it >= max_iters:
            reason = "budget"
            break
        g_t, g_o = _class_grads(f, adv.reshape(x.shape), target, use_logits)
        direction = np.sign(g_t)
        alpha = np.abs(g_t)
        beta = direction * g_o
        cand = np.flatnonzero(~exhausted & (direction != 0))
        if len(cand) < 2:
            reason = "no-admissible-pair"
            break
        cand = cand[np.argsort(-alpha[cand], kind="stable")[:top_k]]
        A = alpha[cand][:, None] + alpha[cand][None, :]
        B = beta[cand][:, None] + beta[cand][None, :]
        score = np.where((A > 0) & (B < 0), A * -B, -np.inf)
        np.fill_diagonal(score, -np.inf)
        flat = int(np.argmax(score))
        if not np.isfinite(score.flat[flat]):
            reason = "no-admissible-pair"
            break
        p, q = cand[flat // len(cand)], cand[flat % len(cand)]
        for i in (p, q):
            adv[i] = np.clip(adv[i] + direction[i] * step, 0, 1)
            touched[i] = True
            if (direction[i] > 0 and adv[i] >= 1) or (direction[i] < 0 and adv[i] <= 0):
                exhausted[i] = True
        it += 1
        pred, _ = _predict(f, adv.reshape(x.shape))
    res = make_result(f, x, adv.reshape(x.shape), target=target, original=y0, iterations=it, t0=t0)
    res.extra.update(reason=reason if not res.success else "success", pixels=int(touched.sum()))
    return res


# DeepFool ------------------------------------------------------------------------

def deepfool_step(f, x_t: np.ndarray, label: int, use_logits: bool = False, top_classes: int = 10):
    """One linearized step toward the nearest class boundary.

    Returns ``(step, k)``: the additive step for ``x_t`` and the chosen class.
    """
    out = f.logits(Tensor(x_t, dtype=x_t.dtype)).data[0]
    if not use_logits:
        e = np.exp(out - out.max())
        out = e / e.sum()
    order = [int(i) for i in np.argsort(-out, kind="stable") if i != label][: top_classes - 1]
    cls = [label] + order
    # one backward pass: row b of the batch selects output cls[b]
    xb = Tensor(np.repeat(x_t, len(cls), axis=0), requires_grad=True, dtype=x_t.dtype)
    sel = np.zeros((len(cls), out.shape[0]), dtype=x_t.dtype)
    sel[np.arange(len(cls)), cls] = 1
    with Tape() as tape:
        o = f.logits(xb)
        if not use_logits:
            o = T.softmax(o, axis=-1)
        loss = T.sum(o * Tensor._wrap(sel))
    tape.backward(loss)
    grads = xb.grad.reshape(len(cls), -1).astype(np.float64)
    vals = out.astype(np.float64)
    w = grads[1:] - grads[0]
    v = vals[order] - vals[label]
    wn = np.linalg.norm(w, axis=1)
    if np.all(wn == 0):
        raise nn.NumericError("degenerate linearization: all boundary normals vanish")
    with np.errstate(divide="ignore"):
        dist = np.where(wn > 0, np.abs(v) / wn, np.inf)
    j = int(np.argmin(dist))
    step = (np.abs(v[j]) / wn[j] ** 2) * w[j]
    return step.reshape(x_t.shape), order[j]


def deepfool(f, x, max_iters: int = 50, label: int | None = None, overshoot: float = 0.02,
             use_logits: bool = False, top_classes: int = 10) -> AttackResult:
    """Untargeted minimal-step attack by iterated linearization."""
    t0 = time.perf_counter()
    x = _batch(x)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    y0, _ = _predict(f, x)
    label = y0 if label is None else label
    r_tot = np.zeros(x.shape, np.float64)
    x_t = x.copy()
    it = 0
    raw_steps = []
    while it < max_iters and _predict(f, x_t)[0] == label:
        step, _ = deepfool_step(f, x_t, label, use_logits, top_classes)
        raw_steps.append(float(np.linalg.norm(step)))
        r_tot += step
        x_t = np.clip(x + (1 + overshoot) * r_tot, 0, 1).astype(x.dtype)
        it += 1
    res = make_result(f, x, x_t, original=y0, iterations=it, t0=t0, untargeted_label=label)
    res.extra["step_norms"] = raw_steps
    return res
