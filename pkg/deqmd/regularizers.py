"""Differentiable regularization functionals ``R_theta``.

Three kinds are available:

    - :py:class:`SmoothedTV`: ``lam * TV_eps(x)``, fixed, with an analytic gradient.
    - :py:class:`ScalarNetRegularizer`: a small convolutional network with a scalar output (DEQ-S).
    - :py:class:`RedRegularizer`: ``0.5 * ||x - N_theta(x)||^2`` for a residual denoiser ``N_theta`` (DEQ-RED).

The learnable kinds are built from Softplus activations only, so ``R_theta`` is smooth in both ``x`` and ``theta``.
Gradients come from torch's reverse-mode engine, wrapped in a :py:class:`Tape` that records one forward evaluation
and can be replayed exactly once.
"""

import hashlib
import logging
import numpy as np
import struct
import torch

from abc import ABC, abstractmethod
from dataclasses import dataclass
from deqmd import Image, Seed
from deqmd.constants import CHECKPOINT_MAGIC, SOFTPLUS_BETA, SOFTPLUS_THRESHOLD, TV_EPS
from deqmd.errors import DomainError, ImageFormatError, LayoutMismatchError, ShapeMismatchError, StaleTapeError
from pathlib import Path
from scipy.special import expit
from torch import nn
from typing import Callable


log = logging.getLogger(__name__)


def softplus(x: float | np.ndarray, beta: float = SOFTPLUS_BETA) -> float | np.ndarray:
    """``(1 / beta) log(1 + exp(beta x))``, evaluated without overflow for large ``beta x``.

    :raises DomainError: If ``beta <= 0``.
    """
    if not beta > 0:
        raise DomainError(f'beta must be positive, got {beta}')
    return np.logaddexp(0.0, beta * np.asarray(x, dtype=np.float64)) / beta


def softplus_derivative(x: float | np.ndarray, beta: float = SOFTPLUS_BETA) -> float | np.ndarray:
    """The logistic function ``sigma(beta x)``."""
    if not beta > 0:
        raise DomainError(f'beta must be positive, got {beta}')
    return expit(beta * np.asarray(x, dtype=np.float64))


def _differences(x):
    # Forward differences with circular wrap along columns (axis 1) and rows (axis 0)
    if isinstance(x, torch.Tensor):
        return torch.roll(x, -1, 1) - x, torch.roll(x, -1, 0) - x
    return np.roll(x, -1, 1) - x, np.roll(x, -1, 0) - x


def tv_smoothed_value(x: Image | np.ndarray, eps: float = TV_EPS) -> float:
    """``sum(sqrt((x[i, j+1] - x[i, j])^2 + (x[i+1, j] - x[i, j])^2 + eps))`` with circular index wrap, summed over
    channels.

    :raises DomainError: If ``eps <= 0``.
    """
    if not eps > 0:
        raise DomainError(f'eps must be positive, got {eps}')
    pixels = x.data if isinstance(x, Image) else np.asarray(x, dtype=np.float64)
    dx, dy = _differences(pixels)
    return float(np.sqrt(dx * dx + dy * dy + eps).sum())


def tv_smoothed_grad(x: Image | np.ndarray, eps: float = TV_EPS) -> np.ndarray:
    """Analytic gradient of :py:func:`tv_smoothed_value`."""
    if not eps > 0:
        raise DomainError(f'eps must be positive, got {eps}')
    pixels = x.data if isinstance(x, Image) else np.asarray(x, dtype=np.float64)
    dx, dy = _differences(pixels)
    norm = np.sqrt(dx * dx + dy * dy + eps)
    gx, gy = dx / norm, dy / norm
    # Each pixel appears in its own term and in the terms of its left and upper neighbours
    return -(gx + gy) + np.roll(gx, 1, 1) + np.roll(gy, 1, 0)


def tv_smoothed_tensor(x: torch.Tensor, eps: float = TV_EPS) -> torch.Tensor:
    dx, dy = _differences(x)
    return torch.sqrt(dx * dx + dy * dy + eps).sum()


@dataclass(frozen=True)
class Architecture:
    """Shape of a learnable network.

    :param kind: ``scalar`` for the scalar-output network or ``red`` for the residual denoiser.
    :type kind: str

    :param widths: Hidden channel counts. The scalar network uses three convolutions (``1 -> w0 -> w1 -> w2``) and a
        linear head; the denoiser uses ``len(widths) + 1`` convolutions (``1 -> w0 -> ... -> w[-1] -> 1``).
    :type widths: tuple[int, ...]

    :param beta: Softplus sharpness. Defaults to :py:data:`deqmd.constants.SOFTPLUS_BETA`.
    :type beta: float, optional

    :param final_scale: Multiplier on the He-style initialization of the last layer. Defaults to 0.1, which starts
        the regularizer close to neutral.
    :type final_scale: float, optional
    """

    kind: str
    widths: tuple[int, ...]
    beta: float = SOFTPLUS_BETA
    final_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
        if self.kind not in ('scalar', 'red'):
            raise DomainError(f'Unknown architecture kind "{self.kind}"')
        if self.kind == 'scalar' and len(self.widths) != 3:
            raise DomainError('The scalar network takes exactly three hidden widths')
        if not self.widths or min(self.widths) < 1:
            raise DomainError(f'Invalid widths {self.widths}')

    @property
    def key(self) -> str:
        """A stable text form, stored in checkpoints."""
        return f'{self.kind}:{",".join(str(w) for w in self.widths)}:beta={self.beta!r}:final={self.final_scale!r}'

    @classmethod
    def from_key(cls, key: str) -> 'Architecture':
        try:
            kind, widths, beta, final = key.split(':')
            return cls(
                kind=kind,
                widths=tuple(int(w) for w in widths.split(',')),
                beta=float(beta.removeprefix('beta=')),
                final_scale=float(final.removeprefix('final=')),
            )
        except ValueError as ex:
            raise LayoutMismatchError(f'Unreadable architecture key "{key}"') from ex

    def build(self, seed: Seed = None) -> nn.Module:
        """Constructs the network, initialized from ``seed`` (zeros when ``seed`` is None)."""
        network = ScalarNet(self) if self.kind == 'scalar' else DnCNN(self)
        assert_smooth(network)
        _initialize(network, seed, self.final_scale)
        return network


DEQ_S_ARCH = Architecture('scalar', (16, 16, 8))  #: Desk-scale scalar network
DEQ_RED_ARCH = Architecture('red', (16, 16, 16, 16))  #: Desk-scale residual denoiser with five convolutions


def _conv(in_channels: int, out_channels: int) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, 3, padding=1, padding_mode='circular', dtype=torch.float64)


class ScalarNet(nn.Module):
    """Convolutions with Softplus activations and a residual skip, global mean pooling and a linear head. Takes a
    ``(batch, 1, height, width)`` tensor and returns one value per batch entry."""

    def __init__(self, arch: Architecture):
        super().__init__()
        w0, w1, w2 = arch.widths
        self.conv1 = _conv(1, w0)
        self.conv2 = _conv(w0, w1)
        self.conv3 = _conv(w1, w2)
        self.skip = nn.Conv2d(w0, w1, 1, dtype=torch.float64) if w0 != w1 else None
        self.act = nn.Softplus(beta=arch.beta, threshold=SOFTPLUS_THRESHOLD)
        self.head = nn.Linear(w2, 1, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z1 = self.act(self.conv1(x))
        z2 = self.act(self.conv2(z1)) + (z1 if self.skip is None else self.skip(z1))
        z3 = self.act(self.conv3(z2))
        return self.head(z3.mean(dim=(2, 3)))[:, 0]

    def final_layers(self) -> list[nn.Module]:
        return [self.head]


class DnCNN(nn.Module):
    """A plain convolutional denoiser with a global residual connection: ``N(x) = x + body(x)``."""

    def __init__(self, arch: Architecture):
        super().__init__()
        channels = [1, *arch.widths, 1]
        self.convs = nn.ModuleList(_conv(c_in, c_out) for c_in, c_out in zip(channels[:-1], channels[1:]))
        self.act = nn.Softplus(beta=arch.beta, threshold=SOFTPLUS_THRESHOLD)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        """``body(x) = N(x) - x``"""
        z = x
        for conv in self.convs[:-1]:
            z = self.act(conv(z))
        return self.convs[-1](z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.residual(x)

    def final_layers(self) -> list[nn.Module]:
        return [self.convs[-1]]


#: Every module type allowed inside a learnable network. Anything else (ReLU, max pooling) would break smoothness.
SMOOTH_PRIMITIVES = (nn.Conv2d, nn.Linear, nn.Softplus, nn.ModuleList, ScalarNet, DnCNN)


def assert_smooth(network: nn.Module) -> None:
    for module in network.modules():
        if not isinstance(module, SMOOTH_PRIMITIVES):
            raise DomainError(f'{type(module).__name__} is not an allowed primitive in a learnable regularizer')


def _initialize(network: nn.Module, seed: Seed | None, final_scale: float) -> None:
    finals = {id(p) for layer in network.final_layers() for p in layer.parameters()}
    generator = seed.torch_generator() if seed is not None else None
    with torch.no_grad():
        for name, param in network.named_parameters():
            if generator is None or name.endswith('bias'):
                param.zero_()
                continue
            fan_in = param[0].numel()
            std = np.sqrt(2.0 / fan_in) * (final_scale if id(param) in finals else 1.0)
            param.normal_(0.0, std, generator=generator)


@dataclass(frozen=True)
class ParamSlot:
    """Where one named tensor lives inside a flat :py:class:`ParamVector`."""

    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat float64 parameter vector plus the layout mapping named tensors to slices of it.

    :param values: The flat parameters.
    :type values: numpy.ndarray

    :param layout: Slots in network order.
    :type layout: tuple[ParamSlot, ...]

    :param arch: The architecture the layout belongs to; None for parameter-free regularizers.
    :type arch: Architecture, optional
    """

    values: np.ndarray
    layout: tuple[ParamSlot, ...]
    arch: Architecture | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        expected = sum(slot.size for slot in self.layout)
        if values.size != expected:
            raise LayoutMismatchError(f'Layout describes {expected} parameters but {values.size} were given')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        for slot in self.layout:
            if slot.name == name:
                return self.values[slot.offset : slot.offset + slot.size].reshape(slot.shape)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> 'ParamVector':
        """A vector with this layout holding ``values``."""
        return ParamVector(values, self.layout, self.arch)

    def zeros_like(self) -> 'ParamVector':
        return self.with_values(np.zeros_like(self.values))

    def dot(self, other: 'ParamVector') -> float:
        self.require_layout(other)
        return float(self.values @ other.values)

    def require_layout(self, other: 'ParamVector') -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError('Parameter vectors have different layouts')

    @property
    def arch_hash(self) -> bytes:
        """SHA-256 digest over the architecture key and the layout."""
        description = (self.arch.key if self.arch else '') + '|' + ';'.join(
            f'{slot.name}{slot.shape}@{slot.offset}' for slot in self.layout
        )
        return hashlib.sha256(description.encode()).digest()

    @classmethod
    def from_module(cls, module: nn.Module | None, arch: Architecture = None) -> 'ParamVector':
        if module is None:
            return cls(np.zeros(0), (), arch)
        slots, offset, chunks = [], 0, []
        for name, param in module.named_parameters():
            slots.append(ParamSlot(name, tuple(param.shape), offset))
            offset += param.numel()
            chunks.append(param.detach().reshape(-1).numpy())
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(slots), arch)


@dataclass(frozen=True, eq=False)
class TapeGradients:
    """Cotangents produced by replaying a :py:class:`Tape`."""

    x: np.ndarray
    params: ParamVector


class Tape:
    """Records one forward evaluation of a function of an image (and of a network's parameters) so that vector-Jacobian
    products with respect to both can be taken. A tape may be replayed once; it frees its graph afterwards.

    Use :py:meth:`Tape.record` rather than the constructor.

    :param inputs: The leaf tensor the function was evaluated at.
    :type inputs: torch.Tensor

    :param output: Result of the evaluation.
    :type output: torch.Tensor

    :param module: Network whose parameters the output depends on, or None.
    :type module: torch.nn.Module, optional

    :param layout: Empty parameter vector describing ``module``'s layout.
    :type layout: ParamVector
    """

    def __init__(self, inputs: torch.Tensor, output: torch.Tensor, module: nn.Module | None, layout: ParamVector):
        self.inputs = inputs
        self.output = output
        self.module = module
        self.layout = layout
        self.evaluations = 1  #: Number of function applications recorded on this tape
        self.consumed = False

    @classmethod
    def record(
        cls,
        fn: Callable[[torch.Tensor], torch.Tensor],
        x: np.ndarray,
        module: nn.Module | None = None,
        arch: Architecture = None,
    ) -> 'Tape':
        """Evaluates ``fn`` at ``x`` with gradient tracking on."""
        inputs = torch.tensor(x, dtype=torch.float64, requires_grad=True)
        with torch.enable_grad():
            output = fn(inputs)
        return cls(inputs, output, module, ParamVector.from_module(module, arch).zeros_like())

    @property
    def value(self) -> np.ndarray | float:
        out = self.output.detach().numpy()
        return float(out) if out.ndim == 0 else out

    def backward(self, cotangent: float | np.ndarray = 1.0) -> TapeGradients:
        """Replays the tape with the given output cotangent.

        :raises StaleTapeError: On a second replay.
        :raises ShapeMismatchError: If the cotangent doesn't match the output.
        """
        if self.consumed:
            raise StaleTapeError('This tape has already been replayed')
        self.consumed = True
        cot = torch.tensor(np.asarray(cotangent, dtype=np.float64))
        if cot.shape != self.output.shape:
            raise ShapeMismatchError(f'Cotangent shape {tuple(cot.shape)} != output shape {tuple(self.output.shape)}')
        params = list(self.module.parameters()) if self.module is not None else []
        grads = torch.autograd.grad(self.output, [self.inputs, *params], grad_outputs=cot, allow_unused=True)
        x_bar = grads[0].detach().numpy() if grads[0] is not None else np.zeros(tuple(self.inputs.shape))
        chunks = [
            (g if g is not None else torch.zeros_like(p)).detach().reshape(-1).numpy()
            for g, p in zip(grads[1:], params)
        ]
        theta_bar = self.layout.with_values(np.concatenate(chunks) if chunks else np.zeros(0))
        return TapeGradients(x=x_bar, params=theta_bar)


class Regularizer(ABC):
    """Common interface of all regularizers. Pixel arguments are ``(height, width, channels)`` arrays or
    :py:class:`deqmd.Image` objects; channels are regularized independently and summed."""

    kind: str = None

    @abstractmethod
    def value_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """``R(x)`` as a differentiable torch scalar."""
        raise NotImplementedError()

    @property
    def module(self) -> nn.Module | None:
        """The network holding the parameters, if any."""
        return None

    @property
    def arch(self) -> Architecture | None:
        return None

    @property
    def params(self) -> ParamVector:
        return ParamVector.from_module(self.module, self.arch)

    def set_params(self, theta: ParamVector) -> None:
        """Loads ``theta`` into the network.

        :raises LayoutMismatchError: If ``theta``'s layout doesn't match.
        """
        current = self.params
        current.require_layout(theta)
        if theta.arch_hash != current.arch_hash:
            raise LayoutMismatchError('Parameter vector belongs to a different architecture')
        if self.module is not None:
            torch.nn.utils.vector_to_parameters(torch.tensor(theta.values), self.module.parameters())

    def record(self, x: Image | np.ndarray) -> Tape:
        """Evaluates ``R`` at ``x`` on a fresh :py:class:`Tape`."""
        return Tape.record(self.value_tensor, _pixels(x), self.module, self.arch)

    def value(self, x: Image | np.ndarray) -> float:
        with torch.no_grad():
            return float(self.value_tensor(torch.tensor(_pixels(x))))

    def grad_x(self, x: Image | np.ndarray) -> np.ndarray:
        return self.record(x).backward(1.0).x

    def value_and_grad(self, x: Image | np.ndarray) -> tuple[float, np.ndarray]:
        tape = self.record(x)
        value = tape.value
        return value, tape.backward(1.0).x

    def vjp_params(self, x: Image | np.ndarray, cotangent: float = 1.0) -> ParamVector:
        return self.record(x).backward(cotangent).params

    def grad_tensor(self, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
        """``grad R(x)`` on a tensor, itself differentiable in ``x`` and in the parameters when ``create_graph``."""
        if not x.requires_grad:
            x = x.requires_grad_(True)
        with torch.enable_grad():
            (grad,) = torch.autograd.grad(self.value_tensor(x), x, create_graph=create_graph)
        return grad

    @property
    def n_trainable(self) -> int:
        return len(self.params)


def _pixels(x: Image | np.ndarray) -> np.ndarray:
    return x.data if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    # (height, width, channels) -> (channels, 1, height, width)
    return x.permute(2, 0, 1).unsqueeze(1)


class SmoothedTV(Regularizer):
    """``lam * TV_eps(x)``. Fixed; has no parameters.

    :param lam: Regularization weight, non-negative.
    :type lam: float

    :param eps: Smoothing term. Defaults to :py:data:`deqmd.constants.TV_EPS`.
    :type eps: float, optional
    """

    kind = 'tv'

    def __init__(self, lam: float, eps: float = TV_EPS):
        if lam < 0 or not eps > 0:
            raise DomainError(f'SmoothedTV needs lam >= 0 and eps > 0, got {lam} and {eps}')
        self.lam = lam
        self.eps = eps

    def value_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return self.lam * tv_smoothed_tensor(x, self.eps)

    def value(self, x: Image | np.ndarray) -> float:
        return self.lam * tv_smoothed_value(x, self.eps)

    def grad_x(self, x: Image | np.ndarray) -> np.ndarray:
        return self.lam * tv_smoothed_grad(x, self.eps)

    def value_and_grad(self, x: Image | np.ndarray) -> tuple[float, np.ndarray]:
        return self.value(x), self.grad_x(x)

    def __repr__(self):
        return f'SmoothedTV(lam={self.lam}, eps={self.eps})'


class NetworkRegularizer(Regularizer):
    """Base for the learnable regularizers.

    :param arch: Network shape.
    :type arch: Architecture

    :param seed: Initialization seed; None initializes all weights to zero. Defaults to None.
    :type seed: deqmd.Seed, optional
    """

    def __init__(self, arch: Architecture, seed: Seed = None):
        self._arch = arch
        self.network = arch.build(seed)

    @property
    def module(self) -> nn.Module:
        return self.network

    @property
    def arch(self) -> Architecture:
        return self._arch

    @classmethod
    def from_params(cls, theta: ParamVector) -> 'NetworkRegularizer':
        """Rebuilds the regularizer a parameter vector was taken from."""
        if theta.arch is None:
            raise LayoutMismatchError('Parameter vector carries no architecture')
        reg = REGULARIZER_CLASSES[theta.arch.kind](theta.arch)
        reg.set_params(theta)
        return reg

    def __repr__(self):
        return f'{type(self).__name__}({self._arch.key}, {self.n_trainable} parameters)'


class ScalarNetRegularizer(NetworkRegularizer):
    """DEQ-S: ``R_theta(x)`` is the output of :py:class:`ScalarNet`, summed over channels."""

    kind = 'scalar'

    def __init__(self, arch: Architecture = DEQ_S_ARCH, seed: Seed = None):
        if arch.kind != 'scalar':
            raise LayoutMismatchError(f'{arch.key} is not a scalar network')
        super().__init__(arch, seed)

    def value_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return self.network(_as_batch(x)).sum()


class RedRegularizer(NetworkRegularizer):
    """DEQ-RED: ``R_theta(x) = 0.5 * ||x - N_theta(x)||^2`` for the residual denoiser :py:class:`DnCNN`."""

    kind = 'red'

    def __init__(self, arch: Architecture = DEQ_RED_ARCH, seed: Seed = None):
        if arch.kind != 'red':
            raise LayoutMismatchError(f'{arch.key} is not a denoiser')
        super().__init__(arch, seed)

    def value_tensor(self, x: torch.Tensor) -> torch.Tensor:
        residual = self.network.residual(_as_batch(x))
        return 0.5 * (residual * residual).sum()

    def denoise_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return self.network(_as_batch(x)).squeeze(1).permute(1, 2, 0)

    def denoise(self, x: Image | np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.denoise_tensor(torch.tensor(_pixels(x))).numpy()


REGULARIZER_CLASSES = {'scalar': ScalarNetRegularizer, 'red': RedRegularizer}


def build_regularizer(kind: str, seed: Seed = None, tv_lambda: float = 1.0, tv_eps: float = TV_EPS) -> Regularizer:
    """Factory used by the harness.

    :param kind: ``tv``, ``scalar`` or ``red``.
    :type kind: str
    """
    match kind:
        case 'tv':
            return SmoothedTV(tv_lambda, tv_eps)
        case 'scalar':
            return ScalarNetRegularizer(DEQ_S_ARCH, seed)
        case 'red':
            return RedRegularizer(DEQ_RED_ARCH, seed)
    raise DomainError(f'Unknown regularizer kind "{kind}"')


def scalar_net_value(theta: ParamVector, x: Image | np.ndarray) -> float:
    """DEQ-S value of ``x`` under parameters ``theta``.

    :raises LayoutMismatchError: If ``theta`` is not a scalar-network vector.
    """
    if theta.arch is None or theta.arch.kind != 'scalar':
        raise LayoutMismatchError('theta does not describe a scalar network')
    return NetworkRegularizer.from_params(theta).value(x)


def red_value(theta: ParamVector, x: Image | np.ndarray) -> float:
    """DEQ-RED value of ``x`` under parameters ``theta``."""
    if theta.arch is None or theta.arch.kind != 'red':
        raise LayoutMismatchError('theta does not describe a denoiser')
    return NetworkRegularizer.from_params(theta).value(x)


def denoiser_apply(theta: ParamVector, x: Image) -> Image:
    """``N_theta(x)``."""
    if theta.arch is None or theta.arch.kind != 'red':
        raise LayoutMismatchError('theta does not describe a denoiser')
    return x.like(NetworkRegularizer.from_params(theta).denoise(x))


def grad_x(reg: Regularizer, x: Image) -> Image:
    """``grad R(x)``: analytic for TV, reverse mode for networks."""
    return x.like(reg.grad_x(x))


def vjp_params(reg: Regularizer, x: Image, cotangent: float = 1.0) -> ParamVector:
    """``cotangent * dR(x)/dtheta`` as a parameter vector with ``reg``'s layout."""
    return reg.vjp_params(x, cotangent)


_CHECKPOINT_HEADER = struct.Struct('<4s32sQI')


def save_params(theta: ParamVector, path: str | Path) -> Path:
    """Writes a checkpoint: magic ``DEQP``, the 32-byte architecture digest, the parameter count, the architecture key,
    then the parameters as little-endian f64.

    :raises LayoutMismatchError: For an empty or architecture-less vector.
    """
    if len(theta) == 0 or theta.arch is None:
        raise LayoutMismatchError('Refusing to checkpoint an empty parameter vector')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    key = theta.arch.key.encode()
    header = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, theta.arch_hash, len(theta), len(key))
    path.write_bytes(header + key + theta.values.astype('<f8').tobytes())
    return path


def load_params(path: str | Path, arch: Architecture = None) -> ParamVector:
    """Reads a checkpoint written by :py:func:`save_params`.

    :param arch: When given, the checkpoint must belong to this architecture. Defaults to None.
    :type arch: Architecture, optional

    :raises LayoutMismatchError: On an architecture mismatch or an empty checkpoint.
    :raises ImageFormatError: On a corrupt file.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _CHECKPOINT_HEADER.size:
        raise ImageFormatError(f'{path} is too short to be a checkpoint')
    magic, digest, count, key_len = _CHECKPOINT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ImageFormatError(f'{path} is not a checkpoint')
    if count == 0:
        raise LayoutMismatchError(f'{path} holds no parameters')
    key_end = _CHECKPOINT_HEADER.size + key_len
    stored_arch = Architecture.from_key(raw[_CHECKPOINT_HEADER.size : key_end].decode())
    if len(raw) - key_end != 8 * count:
        raise ImageFormatError(f'{path} declares {count} parameters but holds {(len(raw) - key_end) // 8}')
    template = ParamVector.from_module(stored_arch.build(None), stored_arch)
    theta = template.with_values(np.frombuffer(raw, dtype='<f8', offset=key_end).astype(np.float64))
    if theta.arch_hash != digest:
        raise LayoutMismatchError(f'{path} has a corrupt architecture digest')
    if arch is not None and ParamVector.from_module(arch.build(None), arch).arch_hash != digest:
        raise LayoutMismatchError(f'{path} holds {stored_arch.key}, expected {arch.key}')
    return theta
