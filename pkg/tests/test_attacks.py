import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advdip import attacks as A
from advdip import tensor as T
from advdip.tensor import Tensor


class Affine:
    """Linear classifier z = W vec(x) + b, enough to derive attack oracles by hand."""

    trained = True

    def __init__(self, W, b):
        self.W = np.asarray(W, np.float64)
        self.b = np.asarray(b, np.float64)
        self.num_classes = len(self.b)

    def logits(self, x):
        x = T.as_tensor(x)
        flat = T.reshape(x, (x.shape[0], -1))
        return T.matmul(flat, Tensor(self.W.T, dtype=x.dtype)) + Tensor(self.b, dtype=x.dtype)

    def probabilities(self, x):
        return T.softmax(self.logits(x), axis=-1)


def random_affine(seed, classes=3, shape=(3, 4, 4)):
    g = np.random.default_rng(seed)
    d = int(np.prod(shape))
    return Affine(g.normal(size=(classes, d)), g.normal(size=classes)), g.uniform(0.2, 0.8, size=shape)


def mse_grad_oracle(f, x, target, negate=False):
    """Closed-form input gradient of mean((softmax(Wx+b) - e_t)^2)."""
    z = f.W @ x.reshape(-1) + f.b
    p = np.exp(z - z.max())
    p /= p.sum()
    e = np.zeros_like(p)
    e[target] = 1
    dp = 2 * (p - e) / len(p)
    dz = p * (dp - p @ dp)
    g = f.W.T @ dz
    return (-g if negate else g).reshape(x.shape)


# fast gradient family ---------------------------------------------------------------

def test_fgsm_matches_closed_form_sign_step():
    f, x = random_affine(0)
    x = x.astype(np.float32)
    target = 2
    res = A.fgsm(f, x, target, A.FgsmConfig(eps=0.05))
    expect = np.clip(x - 0.05 * np.sign(mse_grad_oracle(f, x, target)), 0, 1)
    np.testing.assert_allclose(res.x_adv[0], expect, atol=1e-6)
    assert res.iterations == 1 and res.target == target


def test_untargeted_fgsm_ascends_true_class_loss():
    f, x = random_affine(1)
    x = x.astype(np.float32)
    y = int(np.argmax(f.W @ x.reshape(-1) + f.b))
    res = A.fgsm(f, x, None, A.FgsmConfig(eps=0.05))
    expect = np.clip(x - 0.05 * np.sign(mse_grad_oracle(f, x, y, negate=True)), 0, 1)
    np.testing.assert_allclose(res.x_adv[0], expect, atol=1e-6)
    assert res.target is None
    assert res.success == (res.predicted != y)


def test_iterative_with_one_step_equals_fgsm():
    f, x = random_affine(2)
    x = x.astype(np.float32)
    single = A.fgsm(f, x, 1, A.FgsmConfig(eps=0.03))
    iterated = A.fgsm_iterative(f, x, 1, A.FgsmConfig(eps=0.03, steps=1, mode="iterative"))
    np.testing.assert_array_equal(single.x_adv, iterated.x_adv)


def test_momentum_without_memory_equals_iterative():
    f, x = random_affine(3)
    x = x.astype(np.float32)
    it = A.fgsm_iterative(f, x, 0, A.FgsmConfig(eps=0.08, steps=5, mode="iterative"))
    mo = A.momentum_iterative(f, x, 0, A.FgsmConfig(eps=0.08, steps=5, mu=0.0, mode="momentum"))
    np.testing.assert_array_equal(it.x_adv, mo.x_adv)


@settings(max_examples=25, deadline=None)
@given(eps=st.floats(1e-3, 0.3), steps=st.integers(1, 6), mode=st.sampled_from(["iterative", "momentum"]),
       seed=st.integers(0, 50))
def test_iterative_perturbation_within_eps(eps, steps, mode, seed):
    f, x = random_affine(seed)
    res = A.run_fgsm(f, x.astype(np.float32), 0, A.FgsmConfig(eps=eps, steps=steps, mode=mode))
    assert res.linf <= eps * (1 + 1e-5)
    assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1
    np.testing.assert_allclose(res.r, res.x_adv - x.astype(np.float32)[None], atol=1e-7)


def test_fgsm_config_validation():
    with pytest.raises(ValueError):
        A.FgsmConfig(eps=0)
    with pytest.raises(ValueError):
        A.FgsmConfig(steps=0)
    with pytest.raises(ValueError):
        A.FgsmConfig(mode="pgd")
    assert A.FgsmConfig(eps=0.1, steps=4).alpha == pytest.approx(0.025)


# search helpers -------------------------------------------------------------------

def _threshold_attack(threshold):
    calls = []

    def attack(eps):
        calls.append(eps)
        return A.AttackResult(np.zeros(1), np.zeros(1), eps >= threshold, 0, 0, None, 1, 0, 0, 0)

    return attack, calls


def test_select_min_eps_brackets_then_bisects():
    attack, calls = _threshold_attack(0.073)
    res = A.select_min_eps(attack)
    # doubling from 1/255 brackets the threshold in [16/255, 0.1]; 8 halvings leave < 1.5e-4
    assert 0.073 <= res.extra["eps"] <= 0.073 + 1.5e-4
    assert res.success
    assert calls[:5] == pytest.approx([1 / 255, 2 / 255, 4 / 255, 8 / 255, 16 / 255])


def test_select_min_eps_reports_failure_at_cap():
    attack, _ = _threshold_attack(1.0)
    res = A.select_min_eps(attack)
    assert not res.success and res.extra["eps"] == 0.1


def test_select_min_eps_first_probe_success():
    attack, calls = _threshold_attack(0.0)
    assert A.select_min_eps(attack).extra["eps"] == pytest.approx(1 / 255)
    assert len(calls) == 1


def test_min_feasible_weight_geometric_resolution():
    probes = []

    def trial(d):
        probes.append(d)
        return d >= 2.0, d

    d, payload = A.min_feasible_weight(trial)
    assert probes[0] == pytest.approx(1.0)
    # 12 geometric halvings of a 1e6 ratio leave a factor of 1e6 ** (1 / 4096)
    assert 2.0 <= d <= 2.0 * 1e6 ** (1 / 4096)
    assert payload == d


def test_min_feasible_weight_nothing_succeeds():
    d, payload = A.min_feasible_weight(lambda d: (False, d))
    assert d is None and payload == 1e3


# penalty attacks ----------------------------------------------------------------------

@pytest.mark.parametrize("kappa", [0.0, 5.0])
def test_cw_margin_contract_on_affine(kappa):
    f, x = random_affine(4)
    x = x.astype(np.float32)
    y = int(np.argmax(f.W @ x.reshape(-1) + f.b))
    target = (y + 1) % 3
    res = A.cw_attack(f, x, target, A.CwConfig(kappa=kappa, search_steps=6, inner_iters=100))
    assert res.success
    z = f.W @ res.x_adv.reshape(-1).astype(np.float64) + f.b
    assert A.logit_margin(z, target) >= kappa - 1e-4


def test_cw_rejects_current_class_and_negative_kappa():
    f, x = random_affine(5)
    y = int(np.argmax(f.W @ x.reshape(-1) + f.b))
    with pytest.raises(ValueError):
        A.cw_attack(f, x.astype(np.float32), y)
    with pytest.raises(ValueError):
        A.CwConfig(kappa=-1)


def test_logit_margin():
    assert A.logit_margin(np.array([1.0, 4.0, 2.5]), 1) == pytest.approx(1.5)
    assert A.logit_margin(np.array([1.0, 4.0, 2.5]), 0) == pytest.approx(-3.0)


@pytest.mark.parametrize("loss", ["ce", "mse"])
def test_lbfgs_on_affine_reaches_target(loss):
    f, x = random_affine(6)
    x = x.astype(np.float32)
    y = int(np.argmax(f.W @ x.reshape(-1) + f.b))
    target = (y + 2) % 3
    res = A.lbfgs_attack(f, x, target, steps=8, loss=loss)
    assert res.success and res.predicted == target
    assert res.extra["d"] is not None
    with pytest.raises(ValueError):
        A.lbfgs_attack(f, x, y)


def test_attack_loss_kinds():
    f, x = random_affine(7)
    xt = Tensor(x[None], dtype=np.float64)
    mse = A.attack_loss(f, xt, 1).item()
    assert mse == pytest.approx(-A.attack_loss(f, xt, 1, targeted=False).item())
    ce = A.attack_loss(f, xt, 1, kind="ce").item()
    z = f.W @ x.reshape(-1) + f.b
    assert ce == pytest.approx(np.log(np.exp(z - z.max()).sum()) + z.max() - z[1], rel=1e-9)
    with pytest.raises(ValueError):
        A.attack_loss(f, xt, 1, kind="hinge")


# saliency map -----------------------------------------------------------------------

def test_smm_picks_dominant_pixel():
    shape = (3, 2, 2)
    d = 12
    W = np.zeros((2, d))
    W[1, 5] = 10.0
    W[1, :] += np.linspace(0.01, 0.02, d)
    f = Affine(W, [8.0, 0.0])
    x = np.full(shape, 0.5, np.float32)
    res = A.smm_attack(f, x, 1, step=0.5)
    assert res.success and res.iterations == 1
    assert res.r.reshape(-1)[5] == pytest.approx(0.5)
    assert res.extra["pixels"] == 2


def test_smm_budget_exhaustion_is_not_success():
    W = np.zeros((2, 12))
    W[1, 0] = 1.0
    f = Affine(W, [100.0, 0.0])
    res = A.smm_attack(f, np.full((3, 2, 2), 0.5, np.float32), 1, max_pixels=2)
    assert not res.success
    assert res.extra["reason"] in ("budget", "no-admissible-pair")


# DeepFool ---------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_deepfool_one_step_projects_onto_affine_boundary(seed):
    f, x = random_affine(seed, classes=2)
    x64 = x[None].astype(np.float64)
    label = int(np.argmax(f.W @ x.reshape(-1) + f.b))
    step, k = A.deepfool_step(f, x64, label, use_logits=True)
    w = f.W[1 - label] - f.W[label]
    b = f.b[1 - label] - f.b[label]
    expect = abs(w @ x.reshape(-1) + b) / np.linalg.norm(w)
    assert k == 1 - label
    assert np.linalg.norm(step) == pytest.approx(expect, rel=1e-4)
    # the step lands on the hyperplane
    assert w @ (x64 + step).reshape(-1) + b == pytest.approx(0, abs=1e-8)


def test_deepfool_flips_affine_prediction():
    f, x = random_affine(8)
    y = int(np.argmax(f.W @ x.reshape(-1) + f.b))
    res = A.deepfool(f, x.astype(np.float32), use_logits=True)
    assert res.success and res.predicted != y and res.target is None
    assert len(res.extra["step_norms"]) == res.iterations
    with pytest.raises(ValueError):
        A.deepfool(f, x, max_iters=0)


def test_make_result_clamps_and_measures():
    f, x = random_affine(9)
    x = x.astype(np.float32)
    res = A.make_result(f, x, x + 2.0, target=0)
    assert res.x_adv.max() == 1.0
    np.testing.assert_allclose(res.r, res.x_adv - x[None])
    assert res.linf == pytest.approx(float(np.max(1 - x)))
    assert res.l2 == pytest.approx(float(np.linalg.norm((1 - x).astype(np.float64))), rel=1e-6)
