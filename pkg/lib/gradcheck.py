"""
Central-difference gradient checking and the registry of checked computations
"""

from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from lib.backbone import Block
from lib.config import settings
from lib.nn import Parameter
from lib.objectives import (
    HeadBranch, HeadOutputs, focal_loss, gaussian_target, giou_loss, l1_loss, target_unmixing_loss,
    tracking_loss
)
from lib.prompts import Fpfm, PromptConfig, WmpBlock, grid_to_tokens, wmp_block
from lib.tensor import (
    Tape, Tensor, absolute, add, arccos, attention, batch_norm, concat, conv2d, div, exp, getitem,
    layer_norm, leaky_relu, log, masked_mul, matmul, maximum, minimum, mul, neg, power, relu,
    reshape, sigmoid, softmax, softplus, stack, sub, tensor_mean, tensor_sum, transpose
)
from lib.unmixing import mse_loss, sad_loss
from lib.wavelets import haar1d_channels, haar2d, ihaar2d

logger = structlog.get_logger()

Inputs = Sequence[Tensor]
Case = Tuple[Callable[..., Tensor], List[Tensor]]
CASES: Dict[str, Callable[[np.random.Generator], Case]] = {}


class GradCheckError(ArithmeticError):
    """Non-finite analytic gradient or a check above tolerance"""
    pass


class GradCheckReport(NamedTuple):
    name: str
    seeds: int
    max_error: float
    passed: bool


def _as_inputs(x: Union[Tensor, Inputs]) -> List[Tensor]:
    items = [x] if isinstance(x, Tensor) else list(x)
    return [t if isinstance(t, Parameter) else Tensor(t.data, requires_grad=True) for t in items]


def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Inputs], eps: Optional[float] = None,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)

    Parameters are perturbed in place and restored; other inputs are replaced by
    perturbed copies. max_coords samples that many coordinates per input.
    """
    eps = settings.gradcheck_eps if eps is None else eps
    if not 1e-7 <= eps <= 1e-3:
        raise GradCheckError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    inputs = _as_inputs(x)

    with Tape() as tape:
        loss = f(*inputs)
        tape.backward(loss)
    analytic = [tape.grad(t) for t in inputs]

    def evaluate(values: List[Tensor]) -> float:
        return f(*values).item()

    worst = 0.0
    for which, (tensor, grad) in enumerate(zip(inputs, analytic)):
        bad = np.flatnonzero(~np.isfinite(grad))
        if bad.size:
            raise GradCheckError(f"Non-finite analytic gradient in input {which} at coordinate {int(bad[0])}")
        coords = np.arange(tensor.size)
        if max_coords is not None and tensor.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(tensor.size, max_coords, replace=False))

        for coord in coords:
            index = np.unravel_index(coord, tensor.shape)
            values = []
            for sign in (1.0, -1.0):
                if isinstance(tensor, Parameter):
                    original = tensor.data[index]
                    tensor.data[index] = original + sign * eps
                    values.append(evaluate(inputs))
                    tensor.data[index] = original
                else:
                    shifted = tensor.data.copy()
                    shifted[index] += sign * eps
                    replaced = list(inputs)
                    replaced[which] = Tensor(shifted)
                    values.append(evaluate(replaced))
            numeric = (values[0] - values[1]) / (2.0 * eps)
            error = abs(grad[index] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(error))
    return worst


def register(name: str):
    def wrap(builder: Callable[[np.random.Generator], Case]):
        CASES[name] = builder
        return builder
    return wrap


def _away(rng: np.random.Generator, shape, low: float = 0.1, high: float = 1.0) -> np.ndarray:
    """Random values with magnitude in [low, high], clear of kinks at 0"""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, high, size=shape)


def _t(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _weighted(fn: Callable[..., Tensor], inputs: List[Tensor], rng: np.random.Generator) -> Case:
    """Reduce an op's output to a scalar with fixed random weights"""
    weights = rng.standard_normal(fn(*inputs).shape)
    return (lambda *xs: tensor_sum(fn(*xs) * weights)), inputs


def _clear_kinks(pre_activation: Callable[[], np.ndarray], shift: Parameter, axis: int, margin: float = 1e-3) -> None:
    """Move a bias/shift until no preactivation sits within margin of 0"""
    for _ in range(50):
        z = np.moveaxis(pre_activation(), axis, 0).reshape(shift.size, -1)
        near = np.any(np.abs(z) < margin, axis=1)
        if not near.any():
            return
        shift.data[near] += 7.0 * margin


# Catalogue ops

@register("add")
def _case_add(rng):
    return _weighted(add, [_t(rng.standard_normal((3, 4))), _t(rng.standard_normal(4))], rng)


@register("sub")
def _case_sub(rng):
    return _weighted(sub, [_t(rng.standard_normal((3, 4))), _t(rng.standard_normal((3, 1)))], rng)


@register("mul")
def _case_mul(rng):
    return _weighted(mul, [_t(rng.standard_normal((2, 3))), _t(rng.standard_normal((2, 3)))], rng)


@register("div")
def _case_div(rng):
    return _weighted(div, [_t(rng.standard_normal((2, 3))), _t(_away(rng, (2, 3), 0.5, 2.0))], rng)


@register("neg")
def _case_neg(rng):
    return _weighted(neg, [_t(rng.standard_normal((3, 3)))], rng)


@register("power")
def _case_power(rng):
    return _weighted(lambda a: power(a, 1.5), [_t(rng.uniform(0.5, 2.0, (3, 3)))], rng)


@register("masked_mul")
def _case_masked_mul(rng):
    mask = rng.integers(0, 2, (3, 4)).astype(np.float64)
    return _weighted(lambda a: masked_mul(a, mask), [_t(rng.standard_normal((3, 4)))], rng)


@register("maximum")
def _case_maximum(rng):
    a = rng.standard_normal((3, 4))
    return _weighted(maximum, [_t(a), _t(a + _away(rng, a.shape))], rng)


@register("minimum")
def _case_minimum(rng):
    a = rng.standard_normal((3, 4))
    return _weighted(minimum, [_t(a), _t(a + _away(rng, a.shape))], rng)


@register("absolute")
def _case_absolute(rng):
    return _weighted(absolute, [_t(_away(rng, (3, 4)))], rng)


@register("relu")
def _case_relu(rng):
    return _weighted(relu, [_t(_away(rng, (3, 4)))], rng)


@register("leaky_relu")
def _case_leaky_relu(rng):
    return _weighted(leaky_relu, [_t(_away(rng, (3, 4)))], rng)


@register("sigmoid")
def _case_sigmoid(rng):
    return _weighted(sigmoid, [_t(rng.standard_normal((3, 4)) * 3)], rng)


@register("softplus")
def _case_softplus(rng):
    return _weighted(softplus, [_t(rng.standard_normal((3, 4)) * 3)], rng)


@register("exp")
def _case_exp(rng):
    return _weighted(exp, [_t(rng.standard_normal((3, 4)))], rng)


@register("log")
def _case_log(rng):
    return _weighted(log, [_t(rng.uniform(0.5, 3.0, (3, 4)))], rng)


@register("arccos")
def _case_arccos(rng):
    return _weighted(arccos, [_t(rng.uniform(-0.9, 0.9, (3, 4)))], rng)


@register("softmax")
def _case_softmax(rng):
    return _weighted(lambda a: softmax(a, axis=1), [_t(rng.standard_normal((2, 5, 3)))], rng)


@register("sum")
def _case_sum(rng):
    return _weighted(lambda a: tensor_sum(a, axis=(0, 2), keepdims=True), [_t(rng.standard_normal((2, 3, 4)))], rng)


@register("mean")
def _case_mean(rng):
    return _weighted(lambda a: tensor_mean(a, axis=1), [_t(rng.standard_normal((2, 3, 4)))], rng)


@register("reshape")
def _case_reshape(rng):
    return _weighted(lambda a: reshape(a, (4, 6)), [_t(rng.standard_normal((2, 3, 4)))], rng)


@register("transpose")
def _case_transpose(rng):
    return _weighted(lambda a: transpose(a, (2, 0, 1)), [_t(rng.standard_normal((2, 3, 4)))], rng)


@register("concat")
def _case_concat(rng):
    inputs = [_t(rng.standard_normal((2, 3, 4))), _t(rng.standard_normal((2, 2, 4)))]
    return _weighted(lambda a, b: concat([a, b], axis=1), inputs, rng)


@register("stack")
def _case_stack(rng):
    inputs = [_t(rng.standard_normal((3, 4))), _t(rng.standard_normal((3, 4)))]
    return _weighted(lambda a, b: stack([a, b], axis=1), inputs, rng)


@register("getitem")
def _case_getitem(rng):
    index = np.array([0, 2, 2, 1])
    return _weighted(lambda a: getitem(a, (slice(None), index)), [_t(rng.standard_normal((2, 3, 4)))], rng)


@register("matmul")
def _case_matmul(rng):
    inputs = [_t(rng.standard_normal((2, 3, 4))), _t(rng.standard_normal((4, 5)))]
    return _weighted(matmul, inputs, rng)


@register("conv2d")
def _case_conv2d(rng):
    inputs = [_t(rng.standard_normal((2, 4, 6, 6))), _t(rng.standard_normal((4, 2, 3, 3))), _t(rng.standard_normal(4))]
    return _weighted(lambda x, w, b: conv2d(x, w, b, stride=2, padding=1, groups=2), inputs, rng)


@register("batch_norm")
def _case_batch_norm(rng):
    def fn(x, gamma, beta):
        return batch_norm(x, gamma, beta, np.zeros(2), np.ones(2), training=True)

    inputs = [_t(rng.standard_normal((3, 2, 3, 3))), _t(rng.uniform(0.5, 2.0, 2)), _t(rng.standard_normal(2))]
    return _weighted(fn, inputs, rng)


@register("layer_norm")
def _case_layer_norm(rng):
    inputs = [_t(rng.standard_normal((2, 3, 5))), _t(rng.uniform(0.5, 2.0, 5)), _t(rng.standard_normal(5))]
    return _weighted(layer_norm, inputs, rng)


@register("attention")
def _case_attention(rng):
    inputs = [_t(rng.standard_normal((2, 3, 4))) for _ in range(3)]
    return _weighted(lambda q, k, v: attention(q, k, v)[0], inputs, rng)


# Wavelets

@register("haar1d_channels")
def _case_haar1d(rng):
    return _weighted(lambda a: concat(list(haar1d_channels(a, axis=1)), axis=1),
                     [_t(rng.standard_normal((2, 6, 2, 2)))], rng)


@register("haar2d")
def _case_haar2d(rng):
    return _weighted(lambda a: stack(list(haar2d(a)), axis=0), [_t(rng.standard_normal((2, 3, 4, 4)))], rng)


@register("ihaar2d")
def _case_ihaar2d(rng):
    inputs = [_t(rng.standard_normal((2, 3, 2, 2))) for _ in range(4)]
    return _weighted(lambda *s: ihaar2d(s), inputs, rng)


# Modules

@register("block")
def _case_block(rng):
    block = Block(8, 2, 2, rng)
    tokens = _t(rng.standard_normal((2, 5, 8)))

    def preact() -> np.ndarray:
        attended, _ = block.attn(block.norm1(tokens))
        return block.mlp.fc1(block.norm2(tokens + attended)).data

    _clear_kinks(preact, block.mlp.fc1.bias, axis=-1)
    params = [block.attn.qkv.weight, block.mlp.fc1.weight, block.norm2.gamma]
    return _weighted(lambda x, *_: block(x)[0], [tokens] + params, rng)


def _clear_group_fusion(fusion, prompt: Tensor, feature: Tensor) -> None:
    def preact() -> np.ndarray:
        x = fusion.in_proj(concat([feature, prompt], axis=1))
        return fusion.bn(fusion.group_conv(x)).data

    _clear_kinks(preact, fusion.bn.beta, axis=1)


@register("wmp_block")
def _case_wmp_block(rng):
    config = PromptConfig(hf_hidden=8, hf_groups=2)
    block = WmpBlock(8, config, rng)
    prompt = _t(rng.standard_normal((2, 8, 4, 4)))
    feature = _t(rng.standard_normal((2, 8, 4, 4)))
    p, h = haar2d(prompt), haar2d(feature)
    for name in ("HL", "LH", "HH"):
        _clear_group_fusion(block.hf[name], getattr(p, name), getattr(h, name))
    params = [block.ll.query.weight, block.hf["HH"].group_conv.weight, block.hf["LH"].bn.gamma]
    return _weighted(lambda a, b, *_: wmp_block(a, b, block), [prompt, feature] + params, rng)


@register("fpfm")
def _case_fpfm(rng):
    fuser = Fpfm(8, PromptConfig(fusion_latent=4), rng)
    fuser.up.weight.assign(rng.standard_normal(fuser.up.weight.shape))
    low = _t(rng.standard_normal((2, 8, 2, 2)))
    high = _t(rng.standard_normal((2, 8, 2, 2)))

    def down() -> np.ndarray:
        return fuser.down(grid_to_tokens(concat([low, high], axis=1))).data

    def middle() -> np.ndarray:
        z0 = leaky_relu(Tensor(down()))
        return (fuser.middle(z0) + z0).data

    _clear_kinks(down, fuser.down.bias, axis=-1)
    _clear_kinks(middle, fuser.middle.bias, axis=-1)
    params = [fuser.down.weight, fuser.middle.weight, fuser.up.weight, fuser.up.bias]
    return _weighted(lambda a, b, *_: fuser(a, b), [low, high] + params, rng)


@register("head_branch")
def _case_head_branch(rng):
    branch = HeadBranch(4, 2, rng, channels=4, depth=2)
    x = _t(rng.standard_normal((2, 4, 4, 4)))
    for depth, bn in enumerate(branch.norms):
        def preact(depth=depth) -> np.ndarray:
            h = x
            for conv, norm in zip(branch.convs[:depth], branch.norms[:depth]):
                h = relu(norm(conv(h)))
            return branch.norms[depth](branch.convs[depth](h)).data

        _clear_kinks(preact, bn.beta, axis=1)
    params = [branch.convs[0].weight, branch.norms[1].gamma, branch.projection.weight]
    return _weighted(lambda a, *_: branch(a), [x] + params, rng)


# Losses

@register("sad_loss")
def _case_sad(rng):
    mask = rng.integers(0, 2, (2, 3, 3)).astype(np.float64)
    mask[0, 0, 0] = 1.0
    inputs = [_t(rng.uniform(0.1, 1.0, (2, 5, 3, 3))), _t(rng.uniform(0.1, 1.0, (2, 5, 3, 3)))]
    return (lambda a, b: sad_loss(a, b, mask=mask)), inputs


@register("mse_loss")
def _case_mse(rng):
    inputs = [_t(rng.standard_normal((2, 5, 3, 3))), _t(rng.standard_normal((2, 5, 3, 3)))]
    return mse_loss, inputs


@register("focal_loss")
def _case_focal(rng):
    target = gaussian_target(np.array([[20.0, 12.0, 16.0, 24.0], [5.0, 30.0, 20.0, 12.0]]))
    return (lambda logits: focal_loss(sigmoid(logits), target)), [_t(rng.standard_normal((2, 1, 8, 8)))]


@register("giou_loss")
def _case_giou(rng):
    gt = np.column_stack([rng.uniform(5, 30, (3, 2)), rng.uniform(8, 20, (3, 2))])
    pred = gt + np.column_stack([_away(rng, (3, 2), 0.5, 3.0), _away(rng, (3, 2), 0.5, 3.0)])
    pred[:, 2:] = np.abs(pred[:, 2:])
    return (lambda p: giou_loss(p, gt)), [_t(pred)]


@register("l1_loss")
def _case_l1(rng):
    gt = np.column_stack([rng.uniform(5, 30, (3, 2)), rng.uniform(8, 20, (3, 2))])
    pred = gt + _away(rng, (3, 4), 0.5, 3.0)
    pred[:, 2:] = np.abs(pred[:, 2:])
    return (lambda p: l1_loss(p, gt)), [_t(pred)]


@register("tracking_loss")
def _case_tracking(rng):
    gt = np.array([[20.0, 14.0, 18.0, 22.0], [33.0, 9.0, 12.0, 15.0]])

    def fn(cls, offset, size):
        return tracking_loss(HeadOutputs(sigmoid(cls), sigmoid(offset), sigmoid(size)), gt)

    inputs = [_t(rng.standard_normal((2, 1, 8, 8))), _t(rng.standard_normal((2, 2, 8, 8))),
              _t(rng.standard_normal((2, 2, 8, 8)) - 1.0)]
    return fn, inputs


@register("target_unmixing_loss")
def _case_target_unmixing(rng):
    mask = rng.integers(0, 2, (2, 2, 2)).astype(np.float64)
    inputs = [_t(rng.uniform(0.1, 1.0, shape)) for shape in
              ((2, 4, 4, 4), (2, 4, 4, 4), (2, 4, 8, 8), (2, 4, 8, 8))]
    return (lambda a, b, c, d: target_unmixing_loss(a, b, c, d, mask, 0.2)), inputs


def run_gradchecks(names: Optional[Sequence[str]] = None, seeds: Optional[int] = None,
                   eps: Optional[float] = None, tolerance: Optional[float] = None) -> List[GradCheckReport]:
    """Run registered checks over seeds 0..seeds-1"""
    names = list(names) if names else sorted(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise GradCheckError(f"Unknown gradcheck entries: {unknown}; known: {sorted(CASES)}")
    seeds = seeds or settings.gradcheck_seeds
    tolerance = tolerance or settings.gradcheck_tolerance

    reports = []
    for name in names:
        worst = 0.0
        for seed in range(seeds):
            f, inputs = CASES[name](np.random.default_rng(seed))
            worst = max(worst, grad_check(f, inputs, eps=eps))
        report = GradCheckReport(name=name, seeds=seeds, max_error=worst, passed=worst <= tolerance)
        logger.info("gradcheck_entry", name=name, max_error=worst, passed=report.passed)
        reports.append(report)
    return reports
