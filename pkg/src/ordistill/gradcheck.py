"""Central finite-difference verification of every autodiff primitive and of
the composed image -> total-loss path.  Runs in float64.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .attention import AttentionMap, normalize, spatial_attention, student_map
from .backbone import BackboneConfig, init_model
from .losses import or_loss, total_loss

EPS = 1e-4
REL_TOL = 1e-4
ABS_FLOOR = 1e-7
KINK_MARGIN = 1e-2


def numeric_grads(f, arrays: list[np.ndarray], eps: float = EPS) -> list[np.ndarray]:
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*arrays)
            flat[i] = orig - eps
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = ABS_FLOOR) -> float:
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.where(diff <= floor, 0.0, diff / denom)
    return float(err.max()) if err.size else 0.0


def check_grads(build, arrays: list[np.ndarray], eps: float = EPS) -> float:
    """Max relative error between tape gradients and central differences.

    build(*tensors) must return a scalar Tensor.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = build(*tensors)
        tape.backward(loss)

    def f(*arrs):
        return build(*[T.Tensor(a) for a in arrs]).item()

    numeric = numeric_grads(f, arrays, eps)
    worst = 0.0
    for t, n in zip(tensors, numeric):
        a = t.grad if t.grad is not None else np.zeros_like(n)
        worst = max(worst, max_rel_error(a, n))
    return worst


def _rand(rng, *shape, away_from_zero: bool = False) -> np.ndarray:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 10 * KINK_MARGIN)
    return x


def _project(out: T.Tensor, proj: np.ndarray) -> T.Tensor:
    return T.sum_(T.broadcast_mul(out, T.Tensor(proj)))


def _check_unary(op, rng, shape, away_from_zero=False) -> float:
    x = _rand(rng, *shape, away_from_zero=away_from_zero)
    proj = rng.standard_normal(op(T.Tensor(x)).shape)
    return check_grads(lambda t: _project(op(t), proj), [x])


def _check_conv2d(rng) -> float:
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    b_, ci, co = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))
    kh = kw = int(rng.integers(1, 4))
    h = w = int(rng.integers(kh, 5))
    x = _rand(rng, b_, ci, h, w)
    wgt = _rand(rng, co, ci, kh, kw)
    bias = _rand(rng, co)
    out = T.conv2d(T.Tensor(x), T.Tensor(wgt), T.Tensor(bias), stride, padding)
    proj = rng.standard_normal(out.shape)
    return check_grads(
        lambda tx, tw, tb: _project(T.conv2d(tx, tw, tb, stride, padding), proj),
        [x, wgt, bias])


def _check_linear(rng) -> float:
    b_, fin, fout = 3, int(rng.integers(1, 5)), int(rng.integers(2, 5))
    x, wgt, bias = _rand(rng, b_, fin), _rand(rng, fout, fin), _rand(rng, fout)
    proj = rng.standard_normal((b_, fout))
    return check_grads(lambda tx, tw, tb: _project(T.linear(tx, tw, tb), proj),
                       [x, wgt, bias])


def _check_binary(op, rng, broadcast: bool) -> float:
    sa = tuple(int(rng.integers(1, 5)) for _ in range(3))
    sb = tuple(1 if (broadcast and rng.random() < 0.5) else d for d in sa)
    a, b = _rand(rng, *sa), _rand(rng, *sb)
    proj = rng.standard_normal(np.broadcast_shapes(sa, sb))
    return check_grads(lambda ta, tb: _project(op(ta, tb), proj), [a, b])


def _check_softmax_ce(rng) -> float:
    b_, k = 3, int(rng.integers(2, 5))
    logits = _rand(rng, b_, k)
    labels = rng.integers(0, k, size=b_)
    return check_grads(lambda t: T.softmax_cross_entropy(t, labels), [logits])


def _check_max_pool(rng) -> float:
    b_, c = 2, int(rng.integers(1, 4))
    x = _rand(rng, b_, c, 4, 4)
    out_shape = (b_, c, 2, 2)
    proj = rng.standard_normal(out_shape)
    return check_grads(lambda t: _project(T.max_pool2d(t, 2), proj), [x])


def _check_scalar_mul(rng) -> float:
    x = _rand(rng, 2, 3)
    c = float(rng.standard_normal())
    proj = rng.standard_normal((2, 3))
    return check_grads(lambda t: _project(T.scalar_mul(t, c), proj), [x])


def _check_standardize(rng) -> float:
    x = _rand(rng, 2, 1, 3, 3) * 2.0  # comfortably non-constant planes
    proj = rng.standard_normal(x.shape)
    return check_grads(lambda t: _project(T.spatial_standardize(t), proj), [x])


def _check_attention_path(rng) -> float:
    """Composed Eq-style path: F -> raw map -> normalized -> clamped -> mean."""
    f = _rand(rng, 2, 3, 4, 4)
    teacher = np.abs(rng.standard_normal((2, 1, 4, 4)))

    def build(t):
        sm = student_map(normalize(spatial_attention(t)))
        tm = AttentionMap(T.Tensor(teacher), "teacher")
        return or_loss(tm, sm)

    return check_grads(build, [f])


CHECKS = {
    "conv2d": _check_conv2d,
    "linear": _check_linear,
    "global_avg_pool": lambda rng: _check_unary(T.global_avg_pool, rng, (2, 3, 3, 2)),
    "channel_avg_pool": lambda rng: _check_unary(T.channel_avg_pool, rng, (2, 3, 3, 2)),
    "max_pool2d": _check_max_pool,
    "broadcast_mul": lambda rng: _check_binary(T.broadcast_mul, rng, True),
    "add": lambda rng: _check_binary(T.add, rng, True),
    "sub": lambda rng: _check_binary(T.sub, rng, True),
    "scalar_mul": _check_scalar_mul,
    "relu": lambda rng: _check_unary(T.relu, rng, (3, 4), away_from_zero=True),
    "clamp_min0": lambda rng: _check_unary(T.clamp_min0, rng, (3, 4), away_from_zero=True),
    "abs": lambda rng: _check_unary(T.abs_, rng, (3, 4), away_from_zero=True),
    "mean": lambda rng: _check_unary(lambda t: T.mean(t), rng, (2, 3, 2)),
    "sum": lambda rng: _check_unary(lambda t: T.sum_(t), rng, (2, 3, 2)),
    "softmax_cross_entropy": _check_softmax_ce,
    "spatial_standardize": _check_standardize,
    "attention_path": _check_attention_path,
}


def check_primitive(name: str, trials: int = 5, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return max(CHECKS[name](rng) for _ in range(trials))


def check_end_to_end(seed: int = 0) -> float:
    """Image -> backbone -> CE + OR total loss, gradients of every parameter."""
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(stage_channels=[2, 3], blocks_per_stage=1,
                         input_size=(16, 16), num_classes=3, seed=seed)
    model = init_model(cfg, dtype=np.float64)
    images = rng.uniform(0, 1, size=(2, 3, 16, 16))
    labels = rng.integers(0, 3, size=2)
    teacher = np.abs(rng.standard_normal((2, 1, 4, 4)))
    names = list(model.params)

    def build(timg, *tparams):
        m = init_model(cfg, dtype=np.float64)
        for nm, tp in zip(names, tparams):
            m.params[nm] = tp
        feats, logits = m.forward(timg)
        ce = T.softmax_cross_entropy(logits, labels)
        sm = student_map(normalize(spatial_attention(feats)))
        tm = AttentionMap(T.Tensor(teacher), "teacher")
        return total_loss(ce, [or_loss(tm, sm)], alpha=0.5).total

    arrays = [images] + [model.params[n].data for n in names]
    return check_grads(build, arrays)


def run_all(trials: int = 5, seed: int = 0) -> dict[str, float]:
    results = {name: check_primitive(name, trials, seed) for name in CHECKS}
    results["end_to_end"] = check_end_to_end(seed)
    return results
