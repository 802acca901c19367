"""Property suites behind ``gatedunipose verify``.

Each suite returns :class:`CheckResult` rows. Oracles here are independent of
the code under test: central finite differences for gradients, the unmerged
multi-branch forward for deployment, separable interpolation matrices for
DySample, and hand-enumerated golden files for the metrics.
"""
from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import tensor as T
from .blocks import (
    ConvFFN,
    DepthwiseMixer,
    DilatedReparamBlock,
    DySampleUpsampler,
    GatedConv,
    GatedFFN,
    GatedUniPoseBlock,
    GlaceEmbed,
    PlainDownsample,
    SqueezeExcite,
)
from .codec import decode_keypoints, encode_gaussian
from .data import AnnotationRecord, PredictionRecord, read_annotation_file, read_predictions
from .evaluation import OKS_THRESHOLDS, OksParams, average_precision, oks, pckh
from .losses import mse_heatmap_loss, output_distillation_loss
from .model import ModelConfig, build_model, switch_to_deploy
from .nn import BatchNorm2d, Module
from .seeding import derive_seed
from .tensor import ConvSpec, Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def __post_init__(self):
        self.passed = bool(self.passed)


@dataclass(frozen=True)
class GradTolerance:
    h: float
    rtol: float
    floor: float  # denominators below this are replaced by it


# Finite differences always run in 64-bit; the 32-bit path is checked against
# the verified 64-bit backward instead (see ``precision_suite``).
GRAD_TOLERANCE = GradTolerance(h=1e-5, rtol=1e-3, floor=1e-6)
F32_BACKWARD_RTOL = 5e-3


def active_gradient_rtol(precision: str) -> float:
    """Tolerance on gradients computed at ``precision``; 64-bit is the tighter one."""
    return GRAD_TOLERANCE.rtol if precision == "f64" else F32_BACKWARD_RTOL
REPARAM_TOLERANCES = {"f32": 1e-4, "f64": 1e-8}


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(fn, leaves, rng, coords: int | None, tol: GradTolerance, stats: dict | None = None) -> float:
    """Max relative deviation between autograd and central differences.

    ``fn()`` recomputes the output from ``leaves``. The scalar checked is
    ``sum(fn() * R)`` for a fixed random ``R``. ``coords`` entries are sampled
    (leaf chosen uniformly, then an entry) or every entry when ``None``.

    Piecewise-smooth ops (bilinear sampling, clamps) have kinks. When the
    central difference misses, the two one-sided slopes disagree, and the
    analytic value equals one of them, the stencil ``[x - h, x + h]``
    straddles a kink: a sampled entry is replaced by a fresh draw and an
    exhaustive one is skipped. ``stats["kinks"]`` counts them.
    """
    out = fn()
    weights = rng.standard_normal(out.shape) / np.sqrt(out.data.size)
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.zero_grad()
    (out * Tensor(weights)).sum().backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]

    def value():
        return float((fn().data.astype(np.float64) * weights).sum())

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), tol.floor)

    def draw():
        i = int(rng.integers(len(leaves)))
        return i, int(rng.integers(leaves[i].data.size))

    if coords is None:
        picks = [(i, j) for i, l in enumerate(leaves) for j in range(l.data.size)]
    else:
        picks = [draw() for _ in range(coords)]

    worst, kinks, checked = 0.0, 0, 0
    budget = 0 if coords is None else 4 * coords
    with T.no_grad():
        center = value()
        while picks:
            i, j = picks.pop()
            flat = leaves[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + tol.h
            up = value()
            flat[j] = orig - tol.h
            down = value()
            flat[j] = orig
            numeric = (up - down) / (2 * tol.h)
            a = float(analytic[i].reshape(-1)[j])
            err = rel(a, numeric)
            right, left = (up - center) / tol.h, (center - down) / tol.h
            if err > tol.rtol and rel(right, left) > tol.rtol and min(rel(a, right), rel(a, left)) <= tol.rtol:
                kinks += 1
                if budget > 0:
                    budget -= 1
                    picks.append(draw())
                continue
            checked += 1
            worst = max(worst, err)
    if stats is not None:
        stats["kinks"] = stats.get("kinks", 0) + kinks
        stats["checked"] = stats.get("checked", 0) + checked
    return worst


def _leaf(rng, *shape, low=None, high=None):
    if low is None:
        return Tensor(rng.standard_normal(shape), requires_grad=True)
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _module_case(module: Module, rng, *input_shape):
    module.reset_parameters(int(rng.integers(2 ** 31)))
    _perturb_parameters(module, rng)
    x = _leaf(rng, *input_shape)
    return (lambda: module(x)), [x] + module.parameters()


def _perturb_parameters(module: Module, rng, amount: float = 0.3):
    """Push constant-initialised parameters (norm scales, gate biases) off their defaults."""
    for p in module.parameters():
        p.data = (p.data + amount * rng.standard_normal(p.shape)).astype(p.data.dtype)


def _random_conv_spec(rng, transposed=False):
    groups = int(rng.choice([1, 2]))
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    d = int(rng.integers(1, 3))
    p = int(rng.integers(0, (k - 1) * d + 1))
    return ConvSpec(cin, cout, k, s, p, d, groups, bool(rng.integers(2)))


def _case_conv2d(rng):
    spec = _random_conv_spec(rng)
    x = _leaf(rng, 2, spec.in_channels, int(rng.integers(5, 8)), int(rng.integers(5, 8)))
    w = _leaf(rng, *spec.weight_shape())
    b = _leaf(rng, spec.out_channels) if spec.has_bias else None
    return (lambda: T.conv2d(x, w, b, spec)), [x, w] + ([b] if b is not None else [])


def _case_transposed_conv2d(rng):
    while True:
        spec = _random_conv_spec(rng)
        h, w_ = int(rng.integers(3, 6)), int(rng.integers(3, 6))
        try:
            ho, wo = spec.transposed_output_hw(h, w_)
            adj = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, spec.stride,
                           spec.padding, spec.dilation, spec.groups)
            if adj.output_hw(ho, wo) == (h, w_):
                break
        except Exception:
            continue
    x = _leaf(rng, 2, spec.in_channels, h, w_)
    w = _leaf(rng, *spec.transposed_weight_shape())
    b = _leaf(rng, spec.out_channels) if spec.has_bias else None
    return (lambda: T.transposed_conv2d(x, w, spec, b)), [x, w] + ([b] if b is not None else [])


def _case_grid_sample(rng):
    n, c, h, w = 2, int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(3, 7))
    x = _leaf(rng, n, c, h, w)
    ho, wo = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    # Fractional parts kept away from the lattice where bilinear sampling has kinks;
    # some positions land outside the frame to exercise the clamped branch.
    ix = rng.integers(-1, w, (n, ho, wo))
    iy = rng.integers(-1, h, (n, ho, wo))
    fx, fy = rng.uniform(0.1, 0.9, (2, n, ho, wo))
    coords = Tensor(np.stack([ix + fx, iy + fy], axis=1), requires_grad=True)
    return (lambda: T.grid_sample_bilinear(x, coords)), [x, coords]


def _case_batch_norm(training):
    def case(rng):
        c = int(rng.integers(1, 4))
        x = _leaf(rng, 3, c, 3, 4)
        gamma, beta = _leaf(rng, c), _leaf(rng, c)
        state = T.BatchNormState(c)
        state.running_mean = rng.standard_normal(c).astype(T.get_dtype())
        state.running_var = rng.uniform(0.5, 2.0, c).astype(T.get_dtype())
        return (lambda: T.batch_norm(x, gamma, beta, state, training)), [x, gamma, beta]
    return case


def _shape4(rng):
    return (2, int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5)))


def _unary(op):
    def case(rng):
        x = _leaf(rng, *_shape4(rng))
        return (lambda: op(x)), [x]
    return case


def _binary(op):
    def case(rng):
        shape = _shape4(rng)
        a, b = _leaf(rng, *shape), _leaf(rng, *shape)
        return (lambda: op(a, b)), [a, b]
    return case


def _case_clip(rng):
    # magnitudes kept away from the clip bound of 1, where the derivative jumps
    shape = _shape4(rng)
    mag = np.where(rng.random(shape) < 0.5, rng.uniform(0.0, 0.9, shape), rng.uniform(1.1, 2.0, shape))
    x = Tensor(mag * rng.choice([-1.0, 1.0], shape), requires_grad=True)
    return (lambda: T.clip(x, -1.0, 1.0)), [x]


def _case_channel_scale(rng):
    shape = _shape4(rng)
    x, s = _leaf(rng, *shape), _leaf(rng, shape[0], shape[1])
    return (lambda: T.channel_scale(x, s)), [x, s]


def _case_channel_bias(rng):
    shape = _shape4(rng)
    x, b = _leaf(rng, *shape), _leaf(rng, shape[1])
    return (lambda: T.add_channel_bias(x, b)), [x, b]


def _case_concat(rng):
    n, h, w = 2, int(rng.integers(2, 4)), int(rng.integers(2, 4))
    parts = [_leaf(rng, n, int(rng.integers(1, 4)), h, w) for _ in range(int(rng.integers(2, 4)))]
    return (lambda: T.concat_channels(parts)), parts


def _case_avg_pool(rng):
    k = int(rng.integers(1, 4))
    x = _leaf(rng, 2, int(rng.integers(1, 3)), k * int(rng.integers(1, 4)), k * int(rng.integers(1, 4)))
    return (lambda: T.avg_pool2d(x, k)), [x]


def _case_linear(rng):
    n, i, o = 3, int(rng.integers(1, 6)), int(rng.integers(1, 6))
    x, w, b = _leaf(rng, n, i), _leaf(rng, o, i), _leaf(rng, o)
    return (lambda: T.linear(x, w, b)), [x, w, b]


def _case_mse(rng):
    shape = _shape4(rng)
    pred, target = _leaf(rng, *shape), _leaf(rng, *shape)
    mask = rng.random(shape[1]) < 0.7
    mask[0] = True
    return (lambda: T.mse(pred, target, mask)), [pred, target]


def _case_upsample(rng):
    x = _leaf(rng, *_shape4(rng))
    f = int(rng.integers(2, 5))
    return (lambda: T.bilinear_upsample(x, f)), [x]


def _case_reshape_permute(rng):
    x = _leaf(rng, *_shape4(rng))
    return (lambda: T.permute(T.reshape(x, (x.shape[0], -1, x.shape[3])), (2, 0, 1))), [x]


def _case_mse_loss(rng):
    shape = _shape4(rng)
    pred = _leaf(rng, *shape)
    target = rng.standard_normal(shape)
    return (lambda: mse_heatmap_loss(pred, target)), [pred]


def _case_distill(rng):
    shape = _shape4(rng)
    student = _leaf(rng, *shape)
    teacher = rng.standard_normal(shape)
    return (lambda: output_distillation_loss(student, teacher)), [student]


def _case_gconv(rng):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    return _module_case(GatedConv(ConvSpec(c_in, c_out, k, 1, k // 2)), rng, 2, c_in, 5, 5)


def _case_drb(rng):
    k = int(rng.choice([7, 9]))
    return _module_case(DilatedReparamBlock(2, k), rng, 2, 2, 9, 9)


def _case_drb_deployed(rng):
    block = DilatedReparamBlock(2, 7)
    block.reset_parameters(int(rng.integers(2 ** 31)))
    _perturb_parameters(block, rng)
    block.eval()
    block.merge()
    x = _leaf(rng, 2, 2, 8, 8)
    return (lambda: block(x)), [x] + block.parameters()


def _case_dwmixer(rng):
    return _module_case(DepthwiseMixer(2, int(rng.choice([3, 5]))), rng, 2, 2, 6, 6)


def _case_se(rng):
    c = 4 * int(rng.integers(1, 3))
    return _module_case(SqueezeExcite(c), rng, 2, c, 3, 3)


def _case_dysample(rng):
    s = int(rng.choice([2, 4]))
    up = DySampleUpsampler(2, s)
    fn, leaves = _module_case(up, rng, 2, 2, 4, 4)
    up.offset.weight.data = (rng.standard_normal(up.offset.weight.shape)).astype(T.get_dtype())
    return fn, leaves


def _case_glace(rng):
    stride = int(rng.choice([2, 4]))
    return _module_case(GlaceEmbed(3, 4, stride, stem=True), rng, 2, 3, 8, 8)


def _case_glace_down(rng):
    return _module_case(GlaceEmbed(2, 4, 2, stem=False), rng, 2, 2, 6, 6)


def _case_plain_down(rng):
    return _module_case(PlainDownsample(2, 3, 2), rng, 2, 2, 6, 6)


def _case_gated_ffn(rng):
    return _module_case(GatedFFN(2), rng, 2, 2, 3, 3)


def _case_conv_ffn(rng):
    return _module_case(ConvFFN(2), rng, 2, 2, 3, 3)


def _case_block(rng):
    k = int(rng.choice([3, 7]))
    return _module_case(GatedUniPoseBlock(4, k, bool(rng.integers(2))), rng, 2, 4, 7, 7)


def _case_toy_model(rng):
    config = ModelConfig(
        input_size=(32, 32), joints=2, stem_stride=4, stage_channels=(4, 8, 8, 8),
        stage_depths=(1, 1, 1, 1), stage_kernels=(7, 3, 3, 3), decoder_channels=4,
        use_gconv=bool(rng.integers(2)), use_glace=bool(rng.integers(2)),
        use_dysample=bool(rng.integers(2)), seed=int(rng.integers(2 ** 31)))
    model = build_model(config)
    _perturb_parameters(model, rng, 0.1)
    x = _leaf(rng, 2, 3, 32, 32)
    return (lambda: model(x)), [x] + model.parameters()


OP_CASES = {
    "add": _binary(T.add),
    "hadamard": _binary(T.hadamard),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "sigmoid": _unary(T.sigmoid),
    "gelu": _unary(T.gelu),
    "clip": _case_clip,
    "reshape+permute": _case_reshape_permute,
    "sum": _unary(lambda x: x.sum()),
    "mean": _unary(lambda x: x.mean()),
    "channel_scale": _case_channel_scale,
    "add_channel_bias": _case_channel_bias,
    "concat_channels": _case_concat,
    "global_avg_pool": _unary(T.global_avg_pool),
    "avg_pool2d": _case_avg_pool,
    "linear": _case_linear,
    "mse": _case_mse,
    "batch_norm.train": _case_batch_norm(True),
    "batch_norm.eval": _case_batch_norm(False),
    "conv2d": _case_conv2d,
    "transposed_conv2d": _case_transposed_conv2d,
    "grid_sample_bilinear": _case_grid_sample,
    "bilinear_upsample": _case_upsample,
}

BLOCK_CASES = {
    "GatedConv": _case_gconv,
    "DilatedReparamBlock": _case_drb,
    "DilatedReparamBlock.deployed": _case_drb_deployed,
    "DepthwiseMixer": _case_dwmixer,
    "SqueezeExcite": _case_se,
    "DySampleUpsampler": _case_dysample,
    "GlaceEmbed.stem": _case_glace,
    "GlaceEmbed.down": _case_glace_down,
    "PlainDownsample": _case_plain_down,
    "GatedFFN": _case_gated_ffn,
    "ConvFFN": _case_conv_ffn,
    "GatedUniPoseBlock": _case_block,
    "mse_heatmap_loss": _case_mse_loss,
    "output_distillation_loss": _case_distill,
    "GatedUniPoseModel": _case_toy_model,
}


def _case_seed(seed: int, name: str, case: int) -> int:
    return derive_seed(seed, zlib.crc32(name.encode()), case)


def _selected(names):
    return {k: v for k, v in {**OP_CASES, **BLOCK_CASES}.items() if names is None or k in names}


def gradient_suite(cases: int = 20, coords: int = 6, seed: int = 0, names=None) -> list:
    """One row per differentiable op or block, each over ``cases`` randomized 64-bit cases."""
    tol = GRAD_TOLERANCE
    rows = []
    for name, build in _selected(names).items():
        t0 = time.perf_counter()
        worst, stats = 0.0, {}
        for case in range(cases):
            rng = np.random.default_rng(_case_seed(seed, name, case))
            with T.precision("f64"):
                fn, leaves = build(rng)
                worst = max(worst, gradcheck(fn, leaves, rng, coords, tol, stats))
        detail = f"max_rel={worst:.2e} tol={tol.rtol:g} cases={cases} coords={stats['checked']}"
        if stats["kinks"]:
            detail += f" kinks_resampled={stats['kinks']}"
        rows.append(CheckResult(f"grad/{name}", worst <= tol.rtol and stats["checked"] > 0, detail,
                                time.perf_counter() - t0))
    return rows



def _backward(build, seed: int) -> list:
    rng = np.random.default_rng(seed)
    fn, leaves = build(rng)
    out = fn()
    weights = np.random.default_rng(seed + 1).standard_normal(out.shape).astype(out.data.dtype)
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.zero_grad()
    (out * Tensor(weights)).sum().backward()
    return [np.zeros(l.shape) if l.grad is None else l.grad.astype(np.float64) for l in leaves]


def precision_suite(cases: int = 20, seed: int = 0, names=None, rtol: float = F32_BACKWARD_RTOL) -> list:
    """32-bit backward against the 64-bit one on the same case, as a relative norm."""
    rows = []
    for name, build in _selected(names).items():
        t0 = time.perf_counter()
        worst = 0.0
        for case in range(cases):
            case_seed = _case_seed(seed, name, case)
            with T.precision("f64"):
                ref = _backward(build, case_seed)
            with T.precision("f32"):
                got = _backward(build, case_seed)
            diff = np.sqrt(sum(((a - b) ** 2).sum() for a, b in zip(got, ref)))
            scale = np.sqrt(sum((b ** 2).sum() for b in ref))
            worst = max(worst, float(diff / max(scale, GRAD_TOLERANCE.floor)))
        rows.append(CheckResult(f"f32grad/{name}", worst <= rtol,
                                f"rel_norm={worst:.2e} tol={rtol:g} cases={cases}", time.perf_counter() - t0))
    return rows

# ---------------------------------------------------------------------------
# deployment equivalence


def randomize_norm_statistics(module: Module, rng) -> None:
    """Give every batch norm non-trivial affine parameters and running statistics."""
    dt = T.get_dtype()
    for _, m in module.named_modules():
        if isinstance(m, BatchNorm2d):
            c = m.weight.shape[0]
            m.weight.data = rng.uniform(0.5, 1.5, c).astype(dt)
            m.bias.data = (0.2 * rng.standard_normal(c)).astype(dt)
            m.state.running_mean = (0.2 * rng.standard_normal(c)).astype(dt)
            m.state.running_var = rng.uniform(0.5, 1.5, c).astype(dt)


def _max_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def reparam_suite(inputs: int = 10, seed: int = 0) -> list:
    tol = REPARAM_TOLERANCES[T.get_precision()]
    rows = []
    for k in (7, 9, 13):
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(seed, 0xD7B, k))
        block = DilatedReparamBlock(4, k)
        block.reset_parameters(int(rng.integers(2 ** 31)))
        randomize_norm_statistics(block, rng)
        block.eval()
        xs = [Tensor(rng.standard_normal((2, 4, 17, 15))) for _ in range(inputs)]
        with T.no_grad():
            before = [block(x).data for x in xs]
            block.merge()
            worst = max(_max_diff(b, block(x).data) for b, x in zip(before, xs))
        rows.append(CheckResult(f"reparam/DRB K={k}", worst <= tol, f"max_abs={worst:.2e} tol={tol:g}",
                                time.perf_counter() - t0))

    t0 = time.perf_counter()
    rng = np.random.default_rng(derive_seed(seed, 0xD7B, 0))
    model = build_model(ModelConfig.preset("toy", seed=seed))
    randomize_norm_statistics(model, rng)
    model.eval()
    xs = [rng.standard_normal((1, 3) + model.config.input_size) for _ in range(inputs)]
    before = [model.predict(x) for x in xs]
    switch_to_deploy(model)
    worst = max(_max_diff(b, model.predict(x)) for b, x in zip(before, xs))
    rows.append(CheckResult("reparam/toy model", worst <= tol, f"max_abs={worst:.2e} tol={tol:g}",
                            time.perf_counter() - t0))
    return rows


# ---------------------------------------------------------------------------
# gated convolution


def gconv_suite(cases: int = 20, seed: int = 0) -> list:
    t0 = time.perf_counter()
    worst_pass = worst_zero = worst_bound = 0.0
    for case in range(cases):
        rng = np.random.default_rng(derive_seed(seed, 0x6C0, case))
        c_in, c_out, k = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.choice([1, 3]))
        layer = GatedConv(ConvSpec(c_in, c_out, k, 1, k // 2))
        layer.reset_parameters(int(rng.integers(2 ** 31)))
        x = Tensor(rng.standard_normal((2, c_in, 6, 6)))
        with T.no_grad():
            value = layer.value(x).data
            worst_bound = max(worst_bound, float(np.max(np.abs(layer(x).data) - np.abs(value))))
            bias = layer.gate.bias.data.copy()
            layer.gate.bias.data = np.full_like(bias, 1000.0)
            worst_pass = max(worst_pass, _max_diff(layer(x).data, value))
            layer.gate.bias.data = np.full_like(bias, -1000.0)
            worst_zero = max(worst_zero, float(np.max(np.abs(layer(x).data))))
    dt = time.perf_counter() - t0
    return [
        CheckResult("gconv/gate +1000 passes value", worst_pass <= 1e-6, f"max_abs={worst_pass:.2e}", dt),
        CheckResult("gconv/gate -1000 zeroes", worst_zero <= 1e-6, f"max_abs={worst_zero:.2e}", 0.0),
        CheckResult("gconv/|out| <= |value|", worst_bound <= 0.0, f"max_excess={worst_bound:.2e}", 0.0),
    ]


# ---------------------------------------------------------------------------
# DySample


def dysample_suite(cases: int = 10, seed: int = 0) -> list:
    rows = []
    for s in (2, 4):
        t0 = time.perf_counter()
        worst = 0.0
        for case in range(cases):
            rng = np.random.default_rng(derive_seed(seed, 0xD75, s, case))
            c, h, w = int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
            up = DySampleUpsampler(c, s)
            up.reset_parameters(int(rng.integers(2 ** 31)))
            x = Tensor(rng.standard_normal((2, c, h, w)))
            with T.no_grad():
                worst = max(worst, _max_diff(up(x).data, T.bilinear_upsample(x, s).data))
        rows.append(CheckResult(f"dysample/zero offsets s={s}", worst <= 1e-6, f"max_abs={worst:.2e}",
                                time.perf_counter() - t0))
    return rows


# ---------------------------------------------------------------------------
# codec


def codec_sweep(positions: int = 600, stride: int = 4, shape=(64, 48), sigma: float = 2.0,
                refine: str = "parabolic", seed: int = 0) -> np.ndarray:
    """Euclidean decode error (input px) over a sub-pixel sweep away from the borders."""
    rng = np.random.default_rng(derive_seed(seed, 0xC0DE))
    h, w = shape
    margin = 4 * stride
    side = int(np.ceil(np.sqrt(positions)))
    fx = (np.arange(side) + 0.5) / side
    xs = margin + fx * stride + rng.integers(0, w * stride - 3 * margin, side)
    ys = margin + fx * stride + rng.integers(0, h * stride - 3 * margin, side)
    errors = []
    for x in xs:
        for y in ys:
            hm = encode_gaussian(np.array([[x, y, 2.0]]), shape, sigma, stride)
            dec = decode_keypoints(hm, stride, refine=refine)
            errors.append(float(np.hypot(dec[0, 0] - x, dec[0, 1] - y)))
    return np.asarray(errors)


def codec_suite(positions: int = 600, seed: int = 0) -> list:
    t0 = time.perf_counter()
    errors = codec_sweep(positions, seed=seed)
    worst = float(errors.max())
    return [CheckResult("codec/round trip sigma=2", worst <= 0.5,
                        f"max_err={worst:.3f}px positions={errors.size}", time.perf_counter() - t0)]


# ---------------------------------------------------------------------------
# metrics


def fixture_path(name: str):
    return resources.files("gatedunipose") / "fixtures" / name


def load_golden(name: str) -> dict:
    return json.loads(fixture_path(name).read_text())


def ap_fixture_report():
    gts = read_annotation_file(fixture_path("ap_scene_annotations.json")).records
    preds = read_predictions(fixture_path("ap_scene_predictions.json"), joints=gts[0].num_joints)
    return average_precision(preds, gts)


def pckh_fixture_report():
    gts = read_annotation_file(fixture_path("pckh_scene_annotations.json")).records
    preds = read_predictions(fixture_path("pckh_scene_predictions.json"), joints=gts[0].num_joints)
    return pckh(preds, gts)


def compare_golden(report, golden: dict) -> list:
    """Field names whose values differ from the golden report (exact comparison)."""
    got = report.to_dict()
    bad = []
    for key in ("value", "per_threshold", "per_joint", "counts"):
        if key in golden and got[key] != golden[key]:
            bad.append(key)
    return bad


def random_scene(rng, images: int = 4, joints: int = 17):
    """Random gts with noisy, randomly scored predictions (some spurious, some missing)."""
    gts, preds = [], []
    ann = 0
    for image in range(images):
        for _ in range(int(rng.integers(1, 4))):
            ann += 1
            center = rng.uniform(100, 400, 2)
            kps = np.concatenate([center + rng.normal(0, 40, (joints, 2)),
                                  rng.choice([0, 2], (joints, 1), p=[0.2, 0.8])], axis=1)
            kps[0, 2] = 2
            gts.append(AnnotationRecord(ann, image, (0, 0, 100, 100), kps, float(rng.uniform(2e3, 2e4))))
            if rng.random() < 0.85:
                noisy = kps.copy()
                noisy[:, :2] += rng.normal(0, rng.uniform(1, 15), (joints, 2))
                preds.append(PredictionRecord(image, float(rng.random()), noisy))
        for _ in range(int(rng.integers(0, 2))):
            kps = np.concatenate([rng.uniform(0, 500, (joints, 2)), np.ones((joints, 1))], axis=1)
            preds.append(PredictionRecord(image, float(rng.random()), kps))
    return preds, gts


def metric_suite(scenes: int = 20, seed: int = 0) -> list:
    t0 = time.perf_counter()
    rows = []
    rng = np.random.default_rng(derive_seed(seed, 0x0C5))
    worst_id, worst_e = 0.0, 0.0
    for _ in range(20):
        j = int(rng.integers(1, 18))
        params = OksParams(rng.uniform(0.02, 0.2, j), float(rng.uniform(5, 200)))
        gt = np.concatenate([rng.uniform(0, 300, (j, 2)), np.full((j, 1), 2.0)], axis=1)
        worst_id = max(worst_id, abs(oks(gt, gt, params) - 1.0))
        single = gt.copy()
        single[:, 2] = 0
        i = int(rng.integers(j))
        single[i, 2] = 2
        pred = single.copy()
        angle = rng.uniform(0, 2 * np.pi)
        d = params.scale * params.kappas[i] * np.sqrt(2)
        pred[i, :2] += d * np.array([np.cos(angle), np.sin(angle)])
        worst_e = max(worst_e, abs(oks(pred, single, params) - np.exp(-1)))
    rows.append(CheckResult("metric/oks identity", worst_id <= 1e-12, f"max_dev={worst_id:.1e}"))
    rows.append(CheckResult("metric/oks d=s*k*sqrt2", worst_e <= 1e-6, f"max_dev={worst_e:.1e}"))

    bad = compare_golden(ap_fixture_report(), load_golden("ap_scene_golden.json"))
    rows.append(CheckResult("metric/ap golden fixture", not bad, "mismatch: " + ",".join(bad) if bad else "exact"))
    bad = compare_golden(pckh_fixture_report(), load_golden("pckh_scene_golden.json"))
    rows.append(CheckResult("metric/pckh golden fixture", not bad, "mismatch: " + ",".join(bad) if bad else "exact"))

    violations = 0
    for scene in range(scenes):
        preds, gts = random_scene(np.random.default_rng(derive_seed(seed, 0xA9, scene)))
        per = average_precision(preds, gts).per_threshold
        vals = [per[float(t)] for t in OKS_THRESHOLDS]
        violations += sum(a < b for a, b in zip(vals, vals[1:]))
    rows.append(CheckResult("metric/ap monotone in threshold", violations == 0,
                            f"violations={violations} scenes={scenes}", time.perf_counter() - t0))
    return rows


# ---------------------------------------------------------------------------


def run_all(cases: int = 20, coords: int = 6, reparam_inputs: int = 10, codec_positions: int = 600,
            seed: int = 0) -> list:
    extra = precision_suite(cases, seed) if T.get_precision() == "f32" else []
    return (gradient_suite(cases, coords, seed) + extra + reparam_suite(reparam_inputs, seed)
            + gconv_suite(cases, seed) + dysample_suite(seed=seed) + codec_suite(codec_positions, seed)
            + metric_suite(seed=seed))


def format_results(rows) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
