import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
from attr import define, field
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from patchseek.errors import FormatError, ParameterError, ShapeError
from patchseek.gridcore import (
    Activation,
    ConvSpec,
    FeatureStack,
    Grid2D,
    batchnorm_apply,
    conv2d,
    depthwise_conv,
    frozen_array,
    pointwise,
)
from patchseek.labelgen import PseudoMask

logger = logging.getLogger(__name__)

DW_KERNEL = 13
FOCAL_WEIGHT = 20.0
DICE_WEIGHT = 1.0
PROBABILITY_CLIP = 1e-7

_MAGIC = b"PSKP"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@define(frozen=True, eq=False)
class BatchNormParams:
    """Inference-mode batch normalization statistics and affine parameters."""

    mean: np.ndarray = field(converter=frozen_array(np.float64))
    var: np.ndarray = field(converter=frozen_array(np.float64))
    gamma: np.ndarray = field(converter=frozen_array(np.float64))
    beta: np.ndarray = field(converter=frozen_array(np.float64))
    eps: float = 1e-5


def _check_seeker(instance: "SeekerParams", attribute: Any, value: Any) -> None:
    channels = instance.dw_weights.shape[0]
    if instance.dw_weights.shape != (channels, DW_KERNEL, DW_KERNEL):
        raise ShapeError(
            f"depthwise kernels must be (C, {DW_KERNEL}, {DW_KERNEL}), "
            f"got {instance.dw_weights.shape}",
        )
    if instance.dw_bias.shape != (channels,):
        raise ShapeError(f"depthwise bias must have {channels} values")
    for name in ("mean", "var", "gamma", "beta"):
        if getattr(instance.bn, name).shape != (channels,):
            raise ShapeError(f"batchnorm {name} must have {channels} values")
    pw = instance.pw
    if pw.out_channels != 1 or pw.kernel_h != 1 or pw.kernel_w != 1:
        raise ShapeError("the pointwise layer must be 1x1 with a single output channel")
    if pw.in_channels != channels:
        raise ShapeError(f"the pointwise layer must read {channels} channels")


@define(frozen=True, eq=False)
class SeekerParams:
    """Depthwise 13x13 conv, batchnorm, ReLU and a 1x1 conv down to one logit."""

    dw_weights: np.ndarray = field(converter=frozen_array(np.float64))
    dw_bias: np.ndarray = field(converter=frozen_array(np.float64))
    bn: BatchNormParams
    pw: ConvSpec = field(validator=_check_seeker)

    @property
    def channels(self) -> int:  # noqa: D102
        return int(self.dw_weights.shape[0])


def _check_probabilities(instance: Any, attribute: Any, value: Grid2D) -> None:
    if value.values.min() < 0 or value.values.max() > 1:
        raise ParameterError("objectness values must lie in [0, 1]")


@define(frozen=True, eq=False)
class ObjectnessMask:
    """Per-cell foreground probability on the stride-8 feature grid."""

    grid: Grid2D = field(validator=_check_probabilities)

    @classmethod
    def from_label(cls, label: PseudoMask) -> "ObjectnessMask":
        """
        Use a pseudo-label as the mask, e.g. during warm-up.

        :param label: the label.
        :return: the mask.
        """
        return cls(label.grid)

    @property
    def shape(self) -> Tuple[int, int]:  # noqa: D102
        return self.grid.shape


@define(frozen=True, eq=False)
class LossReport:
    """Seeker losses and the gradient of the total with respect to the logits."""

    focal: float
    dice: float
    total: float
    grad: Grid2D

    @classmethod
    def combine(
        cls,
        focal: float,
        dice: float,
        focal_grad: np.ndarray,
        dice_grad: np.ndarray,
    ) -> "LossReport":
        """
        Combine the focal and dice terms at the 20:1 ratio.

        :param focal: focal loss value.
        :param dice: dice loss value.
        :param focal_grad: focal gradient with respect to the logits.
        :param dice_grad: dice gradient with respect to the logits.
        :return: the report.
        """
        return cls(
            focal=focal,
            dice=dice,
            total=FOCAL_WEIGHT * focal + DICE_WEIGHT * dice,
            grad=Grid2D(FOCAL_WEIGHT * focal_grad + DICE_WEIGHT * dice_grad),
        )


@define(frozen=True, eq=False)
class SeekerGradients:
    """Gradients of a scalar loss with respect to the trainable seeker parameters."""

    dw_weights: np.ndarray
    dw_bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    pw_weights: np.ndarray
    pw_bias: np.ndarray


@define(frozen=True, eq=False)
class FitResult:
    """Trained parameters and the loss before every step."""

    params: SeekerParams
    history: List[float]


@define(frozen=True, eq=False)
class _Activations:
    depthwise: np.ndarray
    normalized: np.ndarray
    hidden: np.ndarray
    logits: Grid2D


def _values(carrier: Union[Grid2D, PseudoMask, ObjectnessMask]) -> np.ndarray:
    if isinstance(carrier, Grid2D):
        return carrier.values
    return carrier.grid.values


def _forward(features: FeatureStack, params: SeekerParams) -> _Activations:
    if features.channels != params.channels:
        raise ShapeError(
            f"seeker expects {params.channels} channels, got {features.channels}",
        )
    depthwise = depthwise_conv(features, DW_KERNEL, params.dw_weights, params.dw_bias)
    bn = params.bn
    normalized = batchnorm_apply(depthwise, bn.mean, bn.var, bn.gamma, bn.beta, bn.eps)
    hidden = pointwise(normalized, Activation.RELU)
    logits = conv2d(hidden, params.pw)
    return _Activations(
        depthwise=depthwise.values,
        normalized=normalized.values,
        hidden=hidden.values,
        logits=Grid2D(logits.values[0]),
    )


def seek_logits(features: FeatureStack, params: SeekerParams) -> Grid2D:
    """
    Compute the objectness logits of a stem feature stack.

    :param features: stem features.
    :param params: seeker parameters.
    :return: logits with the spatial shape of the features.
    """
    return _forward(features, params).logits


def seek(features: FeatureStack, params: SeekerParams) -> ObjectnessMask:
    """
    Estimate the class-agnostic objectness mask of a stem feature stack.

    Probabilities are clipped to [PROBABILITY_CLIP, 1 - PROBABILITY_CLIP], so
    the mask stays strictly inside (0, 1) for saturated logits.
    :param features: stem features.
    :param params: seeker parameters.
    :raises ShapeError: if the channel counts differ.
    :return: the mask.
    """
    probabilities = pointwise(seek_logits(features, params), Activation.SIGMOID)
    clipped = np.clip(probabilities.values, PROBABILITY_CLIP, 1 - PROBABILITY_CLIP)
    return ObjectnessMask(Grid2D(clipped))


def _check_same_shape(first: np.ndarray, second: np.ndarray) -> None:
    if first.shape != second.shape:
        raise ShapeError(f"prediction shape {first.shape} != target shape {second.shape}")


def focal_loss(
    logits: Grid2D,
    target: Union[PseudoMask, Grid2D],
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> Tuple[float, Grid2D]:
    """
    Mean binary focal loss with soft targets used as Bernoulli weights.

    :param logits: predicted logits.
    :param target: label values in [0, 1].
    :param gamma: focusing exponent.
    :param alpha: weight of the positive term.
    :raises ParameterError: if gamma or alpha are out of range.
    :return: the loss and its gradient with respect to the logits.
    """
    if gamma < 0:
        raise ParameterError(f"gamma must be non-negative, got {gamma}")
    if not 0 < alpha < 1:
        raise ParameterError(f"alpha must be in (0, 1), got {alpha}")
    z = logits.values
    y = _values(target)
    _check_same_shape(z, y)

    p = np.clip(expit(z), PROBABILITY_CLIP, 1 - PROBABILITY_CLIP)
    q = 1 - p
    log_p = np.log(p)
    log_q = np.log(q)
    positive = alpha * y * q**gamma
    negative = (1 - alpha) * (1 - y) * p**gamma
    loss = -(positive * log_p + negative * log_q)

    d_positive = positive * (q - gamma * p * log_p)
    d_negative = negative * (gamma * q * log_q - p)
    grad = -(d_positive + d_negative) / z.size
    return float(loss.mean()), Grid2D(grad)


def dice_loss(
    pred: Union[ObjectnessMask, Grid2D],
    target: Union[PseudoMask, Grid2D],
    smooth: float = 1.0,
) -> Tuple[float, Grid2D]:
    """
    Soft dice loss, 1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s).

    :param pred: predicted probabilities.
    :param target: label values in [0, 1].
    :param smooth: additive smoothing.
    :raises ParameterError: if smooth is not positive.
    :return: the loss and its gradient with respect to the probabilities.
    """
    if smooth <= 0:
        raise ParameterError(f"smooth must be positive, got {smooth}")
    p = _values(pred)
    y = _values(target)
    _check_same_shape(p, y)

    numerator = 2 * (p * y).sum() + smooth
    denominator = p.sum() + y.sum() + smooth
    grad = -(2 * y * denominator - numerator) / denominator**2
    return float(1 - numerator / denominator), Grid2D(grad)


def seeker_loss(logits: Grid2D, target: Union[PseudoMask, Grid2D]) -> LossReport:
    """
    Total seeker loss, 20 * focal + dice, with its gradient with respect to the logits.

    :param logits: predicted logits.
    :param target: label values in [0, 1].
    :return: the report.
    """
    focal, focal_grad = focal_loss(logits, target)
    probabilities = expit(logits.values)
    dice, dice_grad = dice_loss(Grid2D(probabilities), target)
    dice_logit_grad = dice_grad.values * probabilities * (1 - probabilities)
    return LossReport.combine(focal, dice, focal_grad.values, dice_logit_grad)


def seeker_gradients(
    features: FeatureStack,
    params: SeekerParams,
    grad_logits: Grid2D,
) -> SeekerGradients:
    """
    Backpropagate a logit gradient to the trainable seeker parameters.

    Batchnorm running statistics are frozen; gamma and beta are trained.
    :param features: stem features the logits were computed from.
    :param params: seeker parameters.
    :param grad_logits: gradient of the loss with respect to the logits.
    :return: parameter gradients.
    """
    acts = _forward(features, params)
    grad = grad_logits.values
    _check_same_shape(acts.logits.values, grad)

    pw_weights = np.einsum("yx,cyx->c", grad, acts.hidden)
    d_hidden = params.pw.weights[0, :, 0, 0][:, None, None] * grad
    d_normalized = d_hidden * (acts.normalized > 0)

    bn = params.bn
    scale = 1 / np.sqrt(bn.var + bn.eps)
    centered = (acts.depthwise - bn.mean[:, None, None]) * scale[:, None, None]
    d_depthwise = d_normalized * (bn.gamma * scale)[:, None, None]

    pad = DW_KERNEL // 2
    padded = np.pad(features.values, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(
        padded,
        (features.height, features.width),
        axis=(1, 2),
    )
    return SeekerGradients(
        dw_weights=np.einsum("cijyx,cyx->cij", windows, d_depthwise),
        dw_bias=d_depthwise.sum(axis=(1, 2)),
        gamma=(d_normalized * centered).sum(axis=(1, 2)),
        beta=d_normalized.sum(axis=(1, 2)),
        pw_weights=pw_weights.reshape(1, -1, 1, 1),
        pw_bias=np.array([grad.sum()]),
    )


def init_params(
    channels: int,
    rng: np.random.Generator,
    noise: float = 0.01,
) -> SeekerParams:
    """
    Initialize seeker parameters around identity depthwise kernels.

    :param channels: number of stem channels.
    :param rng: random generator.
    :param noise: standard deviation of the depthwise kernel noise.
    :return: the parameters.
    """
    dw_weights = rng.normal(0, noise, size=(channels, DW_KERNEL, DW_KERNEL))
    dw_weights[:, DW_KERNEL // 2, DW_KERNEL // 2] += 1
    return SeekerParams(
        dw_weights=dw_weights,
        dw_bias=np.zeros(channels),
        bn=BatchNormParams(
            mean=np.zeros(channels),
            var=np.ones(channels),
            gamma=np.ones(channels),
            beta=np.zeros(channels),
        ),
        pw=ConvSpec(
            weights=rng.normal(0, 0.1, size=(1, channels, 1, 1)),
            bias=np.zeros(1),
        ),
    )


def _trainable(params: SeekerParams) -> Dict[str, np.ndarray]:
    return {
        "dw_weights": params.dw_weights.copy(),
        "dw_bias": params.dw_bias.copy(),
        "gamma": params.bn.gamma.copy(),
        "beta": params.bn.beta.copy(),
        "pw_weights": params.pw.weights.copy(),
        "pw_bias": params.pw.bias.copy(),
    }


def _rebuild(params: SeekerParams, values: Dict[str, np.ndarray]) -> SeekerParams:
    return SeekerParams(
        dw_weights=values["dw_weights"],
        dw_bias=values["dw_bias"],
        bn=BatchNormParams(
            mean=params.bn.mean,
            var=params.bn.var,
            gamma=values["gamma"],
            beta=values["beta"],
            eps=params.bn.eps,
        ),
        pw=ConvSpec(weights=values["pw_weights"], bias=values["pw_bias"]),
    )


def fit(  # noqa: WPS210
    features: FeatureStack,
    target: Union[PseudoMask, Grid2D],
    params: SeekerParams,
    steps: int = 200,
    learning_rate: float = 0.05,
) -> FitResult:
    """
    Train the seeker on frozen stem features with Adam.

    :param features: frozen stem features.
    :param target: objectness label.
    :param params: initial parameters.
    :param steps: number of gradient steps.
    :param learning_rate: Adam step size.
    :return: trained parameters and the loss before every step.
    """
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    values = _trainable(params)
    first = {name: np.zeros_like(value) for name, value in values.items()}
    second = {name: np.zeros_like(value) for name, value in values.items()}
    history: List[float] = []

    for step in range(1, steps + 1):
        current = _rebuild(params, values)
        report = seeker_loss(seek_logits(features, current), target)
        history.append(report.total)
        grads = seeker_gradients(features, current, report.grad)
        for name, value in values.items():
            grad = getattr(grads, name)
            first[name] = beta1 * first[name] + (1 - beta1) * grad
            second[name] = beta2 * second[name] + (1 - beta2) * grad**2
            corrected_first = first[name] / (1 - beta1**step)
            corrected_second = second[name] / (1 - beta2**step)
            value -= learning_rate * corrected_first / (np.sqrt(corrected_second) + eps)
        logger.debug("seeker step %d loss %.6f", step, report.total)

    return FitResult(params=_rebuild(params, values), history=history)


def save_params(params: SeekerParams, path: Union[str, Path]) -> None:
    """
    Serialize seeker parameters to a flat little-endian binary file.

    :param params: the parameters.
    :param path: the destination.
    """
    bn = params.bn
    payload = np.concatenate(
        [
            params.dw_weights.ravel(),
            params.dw_bias,
            bn.mean,
            bn.var,
            bn.gamma,
            bn.beta,
            [bn.eps],
            params.pw.weights.ravel(),
            params.pw.bias,
        ],
    )
    header = _HEADER.pack(_MAGIC, _FORMAT_VERSION, params.channels, DW_KERNEL)
    Path(path).write_bytes(header + payload.astype("<f8").tobytes())


def load_params(path: Union[str, Path]) -> SeekerParams:
    """
    Read seeker parameters written by save_params.

    :param path: the file.
    :raises FormatError: on a wrong magic, version or payload length.
    :return: the parameters.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated seeker parameter header")
    magic, version, channels, kernel = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != _FORMAT_VERSION or kernel != DW_KERNEL:
        raise FormatError(f"{path}: not a seeker parameter file of version {_FORMAT_VERSION}")
    payload = np.frombuffer(data[_HEADER.size :], dtype="<f8")
    sizes = [channels * kernel * kernel, channels, channels, channels, channels, channels, 1]
    sizes += [channels, 1]
    if payload.size != sum(sizes):
        raise FormatError(f"{path}: expected {sum(sizes)} values, got {payload.size}")
    parts = np.split(payload.astype(np.float64), np.cumsum(sizes)[:-1])
    dw_weights, dw_bias, mean, var, gamma, beta, eps, pw_weights, pw_bias = parts
    return SeekerParams(
        dw_weights=dw_weights.reshape(channels, kernel, kernel),
        dw_bias=dw_bias,
        bn=BatchNormParams(mean=mean, var=var, gamma=gamma, beta=beta, eps=float(eps[0])),
        pw=ConvSpec(weights=pw_weights.reshape(1, channels, 1, 1), bias=pw_bias),
    )
