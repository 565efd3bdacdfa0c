"""Non-Euclidean geometry for mirror descent: Legendre potentials with their mirror maps, Bregman divergences and
projections, the Kullback-Leibler fidelity, and utilities around relative smoothness (the NoLip condition).

Two potentials are supported. Burg's entropy ``h(x) = -sum(log x)`` lives on the open positive orthant and is the
geometry mirror descent runs in. The half squared norm is the Euclidean reference case.
"""

import logging
import numpy as np
import torch

from dataclasses import dataclass, field
from deqmd import Image, Seed
from deqmd.constants import CONVEXITY_SLACK
from deqmd.errors import DomainError, ShapeMismatchError
from deqmd.forward import ConvolutionOperator
from scipy.special import kl_div
from typing import Callable


log = logging.getLogger(__name__)

BURG = 'burg'
HALF_SQUARED_NORM = 'half_squared_norm'


def _pixels(x: Image | np.ndarray) -> np.ndarray:
    return x.data if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class Potential:
    """A Legendre function ``h`` together with ``grad h`` and its inverse ``grad h*``. The methods act on raw arrays;
    the module-level functions wrap them for :py:class:`deqmd.Image` arguments.

    :param kind: Either ``burg`` or ``half_squared_norm``.
    :type kind: str
    """

    kind: str

    def __post_init__(self):
        if self.kind not in (BURG, HALF_SQUARED_NORM):
            raise DomainError(f'Unknown potential "{self.kind}"')

    @property
    def domain(self) -> str:
        return 'x > 0' if self.kind == BURG else 'all reals'

    def _require_positive(self, x: np.ndarray, what: str = 'x') -> None:
        if self.kind == BURG and not np.all(x > 0):
            raise DomainError(f'{what} has {np.count_nonzero(x <= 0)} non-positive pixel(s), outside dom h')

    def value(self, x: np.ndarray) -> float:
        self._require_positive(x)
        if self.kind == BURG:
            return float(-np.log(x).sum())
        return float(0.5 * np.sum(x * x))

    def grad(self, x: np.ndarray) -> np.ndarray:
        self._require_positive(x)
        return -1.0 / x if self.kind == BURG else np.array(x, dtype=np.float64)

    def grad_conjugate(self, u: np.ndarray) -> np.ndarray:
        if self.kind == BURG:
            if not np.all(u < 0):
                raise DomainError(f'{np.count_nonzero(u >= 0)} mirror coordinate(s) outside dom grad h* = {{u < 0}}')
            return -1.0 / u
        return np.array(u, dtype=np.float64)

    def divergence(self, x1: np.ndarray, x2: np.ndarray) -> float:
        """``D_h(x1, x2) = h(x1) - h(x2) - <grad h(x2), x1 - x2>``. Under Burg's entropy this equals
        ``sum(r - log r - 1)`` with ``r = x1 / x2``, which is what gets evaluated, since it never cancels."""
        if x1.shape != x2.shape:
            raise ShapeMismatchError(f'Cannot compare shapes {x1.shape} and {x2.shape}')
        self._require_positive(x1, 'x1')
        self._require_positive(x2, 'x2')
        if self.kind == BURG:
            ratio = x1 / x2
            return float(np.sum((ratio - 1.0) - np.log(ratio)))
        diff = x1 - x2
        return float(0.5 * np.sum(diff * diff))


BURG_ENTROPY = Potential(BURG)  #: Burg's entropy
EUCLIDEAN = Potential(HALF_SQUARED_NORM)  #: Half squared Euclidean norm


def potential_value(h: Potential, x: Image) -> float:
    """Evaluates ``h(x)``.

    :raises DomainError: For a non-positive pixel under Burg's entropy.
    """
    return h.value(_pixels(x))


def mirror_map(h: Potential, x: Image) -> Image:
    """``grad h(x)``: ``-1/x`` under Burg's entropy, the identity otherwise."""
    return Image(h.grad(_pixels(x)))


def inverse_mirror_map(h: Potential, u: Image) -> Image:
    """``grad h*(u)``: ``-1/u`` under Burg's entropy (which needs ``u < 0``), the identity otherwise."""
    return Image(h.grad_conjugate(_pixels(u)))


def bregman_divergence(h: Potential, x1: Image, x2: Image) -> float:
    """``D_h(x1, x2)``, always non-negative and zero only when ``x1 == x2``."""
    return h.divergence(_pixels(x1), _pixels(x2))


def box_bregman_prox(h: Potential, x: Image, a: float) -> Image:
    """The Bregman projection of ``x`` onto the box ``[0, a]^n`` under Burg's entropy. For positive input the lower
    bound is inactive and the projection reduces to the Euclidean one, ``min(x, a)``.

    :raises DomainError: If ``h`` is not Burg's entropy, ``a <= 0``, or ``x`` has a non-positive pixel.
    """

    if h.kind != BURG:
        raise DomainError('The closed-form box prox is derived for Burg entropy')
    if not a > 0:
        raise DomainError(f'The box bound must be positive, got {a}')
    pixels = _pixels(x)
    h._require_positive(pixels)
    return Image(np.minimum(pixels, a))


@dataclass(frozen=True, eq=False)
class KlFidelity:
    """The Poisson data term ``KL(y, alpha A x) = sum(y log(y / (alpha A x)) + alpha A x - y)``, with ``0 log 0 = 0``.

    With ``alpha = 1`` this is the plain ``KL(y, A x)``. Carrying ``alpha`` lets ``x`` stay in ``[0, 1]`` while ``y``
    holds raw counts.

    :param y: Observed counts, non-negative.
    :type y: deqmd.Image

    :param op: The forward operator.
    :type op: deqmd.forward.ConvolutionOperator

    :param alpha: Photon intensity of the measurement. Defaults to 1.0.
    :type alpha: float, optional
    """

    y: Image
    op: ConvolutionOperator
    alpha: float = 1.0
    _positive: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.y.require_shape(self.op.image_shape)
        if np.any(self.y.data < 0):
            raise DomainError('Observed counts must be non-negative')
        if not self.alpha > 0:
            raise DomainError(f'alpha must be positive, got {self.alpha}')
        object.__setattr__(self, '_positive', self.y.data > 0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``alpha A x``, checked to be positive wherever ``y`` is."""
        ax = self.alpha * self.op.apply_array(x)
        if np.any(ax[self._positive] <= 0):
            raise DomainError('(A x)_i must be positive wherever y_i > 0')
        return ax

    def value(self, x: np.ndarray) -> float:
        return float(kl_div(self.y.data, self.forward(x)).sum())

    def gradient(self, x: np.ndarray) -> np.ndarray:
        ax = self.forward(x)
        ratio = np.divide(self.y.data, ax, out=np.zeros_like(ax), where=self._positive)
        return self.alpha * self.op.adjoint_array(1.0 - ratio)

    def value_decrease(self, x: np.ndarray, t: np.ndarray) -> float:
        """``KL(x) - KL(t)``, evaluated from ``alpha A (t - x)`` so that close points don't cancel catastrophically."""
        ax = self.forward(x)
        self.forward(t)
        delta = self.alpha * self.op.apply_array(t - x)
        relative = np.divide(delta, ax, out=np.zeros_like(ax), where=self._positive)
        logs = np.where(self._positive, self.y.data * np.log1p(relative), 0.0)
        return float(np.sum(logs - delta))

    def gradient_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """The gradient on a torch tensor, differentiable in ``x``."""
        y = torch.tensor(self.y.data)
        ax = self.alpha * self.op.apply_tensor(x)
        # x >= eps and a kernel of positive mass keep alpha A x > 0 everywhere
        ratio = y / ax
        return self.alpha * self.op.adjoint_tensor(1.0 - ratio)


def kl_value(f: KlFidelity, x: Image) -> float:
    """Evaluates the fidelity at ``x``.

    :raises DomainError: If ``(A x)_i <= 0`` where ``y_i > 0``.
    """
    return f.value(_pixels(x))


def kl_gradient(f: KlFidelity, x: Image) -> Image:
    """``alpha A^T (1 - y / (alpha A x))``.

    :raises DomainError: If ``(A x)_i <= 0`` where ``y_i > 0``.
    """
    return Image(f.gradient(_pixels(x)))


def nolip_constant_kl(y: Image) -> float:
    """``||y||_1``, the smallest constant ``L`` the relative smoothness argument gives for ``KL(y, A .)``
    with respect to Burg's entropy. It does not depend on ``A`` or on ``alpha``."""
    return float(np.abs(_pixels(y)).sum())


@dataclass
class ConvexityReport:
    """Outcome of :py:func:`check_relative_convexity`."""

    n_trials: int
    violations: int = 0
    worst_excess: float = -np.inf  #: Largest observed ``g(mid) - chord``; positive means a violation
    witness: tuple | None = None  #: ``(x1, x2, t)`` achieving ``worst_excess``

    @property
    def ok(self) -> bool:
        return self.violations == 0


def check_relative_convexity(
    h: Potential,
    f_value_fn: Callable[[np.ndarray], float],
    L: float,
    region: tuple[float, float, tuple],
    n_trials: int,
    seed: Seed,
    slack: float = CONVEXITY_SLACK,
) -> ConvexityReport:
    """Samples random segments in a positive box and tests convexity of ``g = L h - f`` along each of them:
    ``g(t x1 + (1 - t) x2) <= t g(x1) + (1 - t) g(x2) + slack``. This is a diagnostic, not a proof.

    :param h: The reference potential.
    :type h: Potential

    :param f_value_fn: Evaluates ``f`` on a raw array.
    :type f_value_fn: Callable

    :param L: Candidate relative smoothness constant, non-negative.
    :type L: float

    :param region: ``(low, high, shape)`` of the box segments are drawn in.
    :type region: tuple

    :param n_trials: Number of segments.
    :type n_trials: int

    :param seed: Root of the sampling stream.
    :type seed: deqmd.Seed

    :param slack: Roundoff allowance. Defaults to :py:data:`deqmd.constants.CONVEXITY_SLACK`.
    :type slack: float, optional

    :rtype: ConvexityReport
    """

    low, high, shape = region
    if not 0 < low < high:
        raise DomainError(f'The sampling region must be a positive box, got ({low}, {high})')
    if L < 0:
        raise DomainError(f'L must be non-negative, got {L}')

    def g(z: np.ndarray) -> float:
        return L * h.value(z) - f_value_fn(z)

    rng = seed.generator()
    report = ConvexityReport(n_trials=n_trials)
    for _ in range(n_trials):
        x1 = rng.uniform(low, high, size=shape)
        x2 = rng.uniform(low, high, size=shape)
        t = rng.uniform(0.0, 1.0)
        excess = g(t * x1 + (1.0 - t) * x2) - (t * g(x1) + (1.0 - t) * g(x2))
        if excess > slack:
            report.violations += 1
        if excess > report.worst_excess:
            report.worst_excess = excess
            report.witness = (x1, x2, t)
    log.debug(f'Convexity check with L={L:.4g}: {report.violations}/{n_trials} violation(s)')
    return report
