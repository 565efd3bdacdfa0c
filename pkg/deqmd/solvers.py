"""The forward pass: mirror descent in Burg geometry with a backtracking step size, iterated to a fixed point, plus
initialization strategies and the Richardson-Lucy baseline.

One mirror step for ``Psi = KL(y, alpha A .) + R + box`` has a closed form under Burg's entropy. With
``g = grad KL(x) + grad R(x)`` the pre-projection point is ``x / (1 + tau x g)``, which exists only while
``1 + tau x g > 0``; the box projection is then a plain ``min(., a)``.
"""

import csv
import logging
import numpy as np
import torch

from dataclasses import dataclass, field
from deqmd import Image, Seed, clamp_positive
from deqmd.bregman import BURG_ENTROPY, KlFidelity, nolip_constant_kl
from deqmd.constants import CONVEXITY_SLACK, MAX_BACKTRACK_SHRINKS, MD_DEFAULTS, POSITIVITY_EPS, RL_BASELINE_ITERS
from deqmd.errors import BacktrackingError, DomainError, EmptyStreamError, StepInfeasibleError
from deqmd.forward import ConvolutionOperator
from deqmd.metrics import psnr
from deqmd.regularizers import Regularizer, SmoothedTV
from pathlib import Path
from typing import Callable, Iterable, Iterator


log = logging.getLogger(__name__)

INIT_STRATEGIES = ('adjoint', 'random', 'tv', 'rl', 'warm')  #: Names accepted by :py:func:`initialize`


@dataclass(frozen=True)
class MdConfig:
    """Settings of the mirror descent forward pass. Defaults come from :py:data:`deqmd.constants.MD_DEFAULTS`.

    :param a: Upper bound of the box ``[0, a]^n``.
    :type a: float

    :param tau0: First step size tried.
    :type tau0: float

    :param bt_gamma: Sufficient-decrease factor in ``(0, 1)``.
    :type bt_gamma: float

    :param bt_eta: Shrink factor in ``(0, 1)``.
    :type bt_eta: float

    :param tol: Stop once ``||x_next - x|| / ||x_next||`` falls below this.
    :type tol: float

    :param max_iters: Iteration cap.
    :type max_iters: int

    :param warm_start_tau: Start each search from the previously accepted step instead of ``tau0``.
    :type warm_start_tau: bool

    :param grow_every: With a warm start, try a larger step after this many accepted steps. 0 disables growth.
    :type grow_every: int

    :param grow_factor: How much larger.
    :type grow_factor: float

    :param eps: Positivity floor applied after each projection.
    :type eps: float
    """

    a: float = MD_DEFAULTS['a']
    tau0: float = MD_DEFAULTS['tau0']
    bt_gamma: float = MD_DEFAULTS['bt_gamma']
    bt_eta: float = MD_DEFAULTS['bt_eta']
    tol: float = MD_DEFAULTS['tol']
    max_iters: int = MD_DEFAULTS['max_iters']
    warm_start_tau: bool = MD_DEFAULTS['warm_start_tau']
    grow_every: int = MD_DEFAULTS['grow_every']
    grow_factor: float = MD_DEFAULTS['grow_factor']
    eps: float = POSITIVITY_EPS

    def __post_init__(self):
        problems = []
        if not self.a > 0:
            problems.append(f'a={self.a} must be positive')
        if not self.tau0 > 0:
            problems.append(f'tau0={self.tau0} must be positive')
        if not 0 < self.bt_gamma < 1:
            problems.append(f'bt_gamma={self.bt_gamma} must lie in (0, 1)')
        if not 0 < self.bt_eta < 1:
            problems.append(f'bt_eta={self.bt_eta} must lie in (0, 1)')
        if not self.tol > 0:
            problems.append(f'tol={self.tol} must be positive')
        if self.max_iters < 1:
            problems.append(f'max_iters={self.max_iters} must be at least 1')
        if self.grow_every < 0 or self.grow_factor < 1:
            problems.append('grow_every must be >= 0 and grow_factor >= 1')
        if not 0 < self.eps < self.a:
            problems.append(f'eps={self.eps} must lie in (0, a)')
        if problems:
            raise DomainError('Invalid MdConfig: ' + '; '.join(problems))


@dataclass(frozen=True, eq=False)
class Objective:
    """``Psi(x) = KL(y, alpha A x) + R(x) + indicator of [0, a]^n``.

    :param fidelity: The data term.
    :type fidelity: deqmd.bregman.KlFidelity

    :param regularizer: The regularization term.
    :type regularizer: deqmd.regularizers.Regularizer

    :param a: Box upper bound. Defaults to 1.0.
    :type a: float, optional
    """

    fidelity: KlFidelity
    regularizer: Regularizer
    a: float = 1.0

    def psi(self, x: np.ndarray) -> float:
        """Infinite outside ``(0, a]^n``."""
        if np.any(x <= 0) or np.any(x > self.a):
            return np.inf
        return self.fidelity.value(x) + self.regularizer.value(x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.fidelity.gradient(x) + self.regularizer.grad_x(x)

    def value_and_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        reg_value, reg_grad = self.regularizer.value_and_grad(x)
        return self.fidelity.value(x) + reg_value, self.fidelity.gradient(x) + reg_grad

    def decrease(self, x: np.ndarray, t: np.ndarray) -> float:
        """``Psi(x) - Psi(t)`` for two points in the box, without cancellation in the KL part."""
        return self.fidelity.value_decrease(x, t) + self.regularizer.value(x) - self.regularizer.value(t)

    def layer_tensor(self, x: torch.Tensor, tau: float, eps: float = POSITIVITY_EPS) -> torch.Tensor:
        """One application of the mirror descent layer on a tensor, differentiable in ``x`` and in the regularizer's
        parameters. Clamped coordinates get a zero derivative."""
        g = self.fidelity.gradient_tensor(x) + self.regularizer.grad_tensor(x, create_graph=True)
        return torch.clamp(x / (1.0 + tau * x * g), min=eps, max=self.a)

    @property
    def y_l1(self) -> float:
        return nolip_constant_kl(self.fidelity.y)


def _mirror_update(x: np.ndarray, g: np.ndarray, tau: float, a: float, eps: float) -> tuple[np.ndarray, int]:
    denominator = 1.0 + tau * x * g
    if np.any(denominator <= 0):
        raise StepInfeasibleError(f'Step {tau:.4g} leaves dom grad h* at {np.count_nonzero(denominator <= 0)} pixel(s)')
    z = np.minimum(x / denominator, a)
    clamped = int(np.count_nonzero(z < eps))
    return np.maximum(z, eps), clamped


def md_step(obj: Objective, x: Image, tau: float, eps: float = POSITIVITY_EPS) -> Image:
    """One mirror descent step ``min(x / (1 + tau x g), a)``, floored at ``eps``.

    :raises DomainError: If ``tau <= 0`` or ``x`` has a non-positive pixel.
    :raises StepInfeasibleError: If ``1 + tau x g <= 0`` anywhere.
    """
    if not tau > 0:
        raise DomainError(f'tau must be positive, got {tau}')
    if np.any(x.data <= 0):
        raise DomainError('md_step needs a strictly positive point')
    return x.like(_mirror_update(x.data, obj.gradient(x.data), tau, obj.a, eps)[0])


@dataclass(frozen=True)
class StepOutcome:
    """One accepted backtracking step."""

    x: np.ndarray
    tau: float
    shrinks: int
    decrease: float  #: ``Psi(x) - Psi(x_next)``
    bound: float  #: ``(gamma / tau) D_h(x_next, x)``, which ``decrease`` covers up to the slack
    clamped: int


def _backtrack(
    obj: Objective, x: np.ndarray, grad: np.ndarray, tau: float, cfg: MdConfig
) -> StepOutcome:
    for shrinks in range(MAX_BACKTRACK_SHRINKS + 1):
        try:
            t, clamped = _mirror_update(x, grad, tau, obj.a, cfg.eps)
        except StepInfeasibleError:
            tau *= cfg.bt_eta
            continue
        decrease = obj.decrease(x, t)
        bound = cfg.bt_gamma / tau * BURG_ENTROPY.divergence(t, x)
        if decrease + CONVEXITY_SLACK >= bound:
            return StepOutcome(x=t, tau=tau, shrinks=shrinks, decrease=decrease, bound=bound, clamped=clamped)
        tau *= cfg.bt_eta
    raise BacktrackingError(
        f'No acceptable step after {MAX_BACKTRACK_SHRINKS} shrinks (last tau {tau:.3g}); the gradient may be wrong'
    )


def backtrack_step(obj: Objective, x: Image, tau_in: float, cfg: MdConfig) -> tuple[Image, float]:
    """Tries ``tau_in, tau_in * eta, tau_in * eta^2, ...`` and returns the first feasible step that satisfies
    ``Psi(x) - Psi(x_next) >= (gamma / tau) D_h(x_next, x)``.

    :raises BacktrackingError: After more than :py:data:`deqmd.constants.MAX_BACKTRACK_SHRINKS` shrinks.
    """
    if not tau_in > 0:
        raise DomainError(f'tau must be positive, got {tau_in}')
    _, grad = obj.value_and_gradient(x.data)
    outcome = _backtrack(obj, x.data, grad, tau_in, cfg)
    return x.like(outcome.x), outcome.tau


@dataclass
class SolveReport:
    """Per-iteration trace of a solve. Row 0 describes the starting point; its step size and relative change are NaN.

    :param final: The last iterate.
    :type final: deqmd.Image
    """

    final: Image = None
    psi: list[float] = field(default_factory=list)
    tau: list[float] = field(default_factory=list)
    rel_change: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    decrease_bound: list[float] = field(default_factory=list)
    shrinks: list[int] = field(default_factory=list)
    converged: bool = False
    clamp_events: int = 0
    y_l1: float = np.nan  #: ``||y||_1`` of the measurement, for step-size normalization
    alpha: float = 1.0

    def record(self, psi: float, tau: float, rel_change: float, psnr_db: float, bound: float, shrinks: int):
        self.psi.append(psi)
        self.tau.append(tau)
        self.rel_change.append(rel_change)
        self.psnr.append(psnr_db)
        self.decrease_bound.append(bound)
        self.shrinks.append(shrinks)

    @property
    def iterations(self) -> int:
        return max(len(self.psi) - 1, 0)

    @property
    def tau_final(self) -> float:
        return self.tau[-1] if self.iterations else np.nan

    def accepted_taus(self) -> np.ndarray:
        return np.asarray(self.tau[1:], dtype=np.float64)

    def to_csv(self, path: str | Path) -> Path:
        """Writes ``k, psi, tau, rel_change, psnr, tau_l1, tau_l1_unscaled``. The last two are ``tau * ||y||_1`` for
        the counts as measured and for the counts divided by ``alpha``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(['k', 'psi', 'tau', 'rel_change', 'psnr', 'tau_l1', 'tau_l1_unscaled'])
            for k, (psi_k, tau_k, rel_k, psnr_k) in enumerate(zip(self.psi, self.tau, self.rel_change, self.psnr)):
                writer.writerow(
                    [
                        k,
                        repr(float(psi_k)),
                        repr(float(tau_k)),
                        repr(float(rel_k)),
                        repr(float(psnr_k)),
                        repr(float(tau_k * self.y_l1)),
                        repr(float(tau_k * self.y_l1 / self.alpha)),
                    ]
                )
        return path


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / np.linalg.norm(new))


def solve_fixed_point(obj: Objective, x0: Image, cfg: MdConfig = None, reference: Image = None) -> SolveReport:
    """Iterates :py:func:`backtrack_step` from ``x0`` until the relative change drops below ``cfg.tol`` or
    ``cfg.max_iters`` steps have been taken.

    :param obj: The objective.
    :type obj: Objective

    :param x0: Starting point, clamped into ``[eps, a]`` on entry.
    :type x0: deqmd.Image

    :param cfg: Solver settings. Defaults to ``MdConfig()``.
    :type cfg: MdConfig, optional

    :param reference: Ground truth, used only to fill the PSNR column. Defaults to None.
    :type reference: deqmd.Image, optional

    :raises BacktrackingError: If a step search fails.

    :rtype: SolveReport
    """

    cfg = cfg or MdConfig(a=obj.a)
    x = np.clip(x0.data, cfg.eps, obj.a)

    def quality(arr: np.ndarray) -> float:
        return psnr(x0.like(arr), reference) if reference is not None else np.nan

    psi_x, grad = obj.value_and_gradient(x)
    report = SolveReport(y_l1=obj.y_l1, alpha=obj.fidelity.alpha)
    report.record(psi_x, np.nan, np.nan, quality(x), np.nan, 0)
    tau = cfg.tau0
    for k in range(1, cfg.max_iters + 1):
        step = _backtrack(obj, x, grad, tau, cfg)
        if step.clamped:
            report.clamp_events += step.clamped
            log.debug(f'Iteration {k}: positivity floor applied to {step.clamped} pixel(s)')
        rel = _relative_change(step.x, x)
        x = step.x
        psi_x, grad = obj.value_and_gradient(x)
        report.record(psi_x, step.tau, rel, quality(x), step.bound, step.shrinks)
        log.debug(f'Iteration {k}: psi={psi_x:.10g} tau={step.tau:.4g} rel_change={rel:.3g}')
        if rel < cfg.tol:
            report.converged = True
            break
        tau = step.tau if cfg.warm_start_tau else cfg.tau0
        if cfg.warm_start_tau and cfg.grow_every and k % cfg.grow_every == 0:
            tau *= cfg.grow_factor

    report.final = x0.like(x)
    if report.converged:
        log.debug(f'Converged after {report.iterations} iteration(s), psi={psi_x:.10g}')
    else:
        log.info(f'Stopped at max_iters={cfg.max_iters} with relative change {report.rel_change[-1]:.3g}')
    return report


def fixed_point_residual(obj: Objective, x: Image, tau: float, eps: float = POSITIVITY_EPS) -> float:
    """``||f(x) - x||_inf / ||x||_inf`` for one layer application ``f`` with step ``tau``."""
    moved = md_step(obj, x, tau, eps)
    return float(np.max(np.abs(moved.data - x.data)) / np.max(np.abs(x.data)))


def initialize(
    strategy: str,
    y: Image,
    op: ConvolutionOperator,
    seed: Seed = None,
    alpha: float = 1.0,
    a: float = 1.0,
    tv_lambda: float = 1.0,
    rl_iters: int = 10,
    previous: Image = None,
    cfg: MdConfig = None,
) -> Image:
    """Builds a starting point for the forward pass.

    :param strategy: One of:

        - ``adjoint``: ``clip(A^T y / alpha, eps, a)``
        - ``random``: i.i.d. ``U(0, 1)`` pixels from ``seed``, scaled by ``a`` and floored at ``eps``
        - ``tv``: the KL + ``tv_lambda`` TV reconstruction, solved by mirror descent from the adjoint start
        - ``rl``: the ``rl_iters``-th Richardson-Lucy iterate
        - ``warm``: ``previous``, clamped into the box
    :type strategy: str

    :raises DomainError: For an unknown strategy or missing strategy inputs.

    :rtype: deqmd.Image
    """

    eps = cfg.eps if cfg else POSITIVITY_EPS
    match strategy:
        case 'adjoint':
            return y.like(np.clip(op.adjoint_array(y.data) / alpha, eps, a))
        case 'random':
            if seed is None:
                raise DomainError('Random initialization needs a seed')
            draws = seed.generator().uniform(0.0, 1.0, size=y.shape)
            return y.like(np.maximum(a * draws, eps))
        case 'tv':
            obj = Objective(KlFidelity(y, op, alpha), SmoothedTV(tv_lambda), a)
            start = initialize('adjoint', y, op, alpha=alpha, a=a, cfg=cfg)
            return solve_fixed_point(obj, start, cfg or MdConfig(a=a)).final
        case 'rl':
            return richardson_lucy(y, op, rl_iters, alpha=alpha).final
        case 'warm':
            if previous is None:
                raise DomainError('Warm initialization needs a previous reconstruction')
            previous.require_shape(y.shape)
            return y.like(np.clip(previous.data, eps, a))
    raise DomainError(f'Unknown initialization strategy "{strategy}"')


def richardson_lucy_iterates(
    y: Image, op: ConvolutionOperator, K: int, x_init: Image = None, alpha: float = 1.0
) -> Iterator[tuple[int, Image]]:
    """Yields ``(k, x_k)`` for ``k = 0 .. K`` of ``x <- x / (A^T 1) * A^T(y / (alpha A x))``. The default start is the
    constant image at ``mean(y) / alpha``. Iterates are floored at the positivity epsilon."""

    if K < 0:
        raise DomainError(f'K must be non-negative, got {K}')
    if np.any(y.data < 0):
        raise DomainError('Observed counts must be non-negative')
    if x_init is None:
        x_init = Image.full(y.shape, float(y.data.mean()) / alpha)
    x = clamp_positive(x_init).data
    yield 0, y.like(x)
    normalizer = op.adjoint_ones
    for k in range(1, K + 1):
        ax = alpha * op.apply_array(x)
        ratio = np.divide(y.data, ax, out=np.zeros_like(ax), where=ax > 0)
        x = np.maximum(x / normalizer * op.adjoint_array(ratio), POSITIVITY_EPS)
        yield k, y.like(x)


def richardson_lucy(
    y: Image,
    op: ConvolutionOperator,
    K: int = RL_BASELINE_ITERS,
    x_init: Image = None,
    alpha: float = 1.0,
    reference: Image = None,
) -> SolveReport:
    """Runs ``K`` Richardson-Lucy updates. The report's ``psi`` column holds ``KL(y, alpha A x_k)``.

    :rtype: SolveReport
    """
    fidelity = KlFidelity(y, op, alpha)
    report = SolveReport(y_l1=nolip_constant_kl(y), alpha=alpha)
    previous = None
    for k, x in richardson_lucy_iterates(y, op, K, x_init, alpha):
        rel = _relative_change(x.data, previous) if previous is not None else np.nan
        quality = psnr(x, reference) if reference is not None else np.nan
        report.record(fidelity.value(x.data), np.nan, rel, quality, np.nan, 0)
        report.final = x
        previous = x.data
    return report


def best_iterate_selector(
    report_stream: Iterable[tuple[int, Image]], reference: Image, metric: Callable[[Image, Image], float] = psnr
) -> tuple[int, Image]:
    """Picks the iterate scoring highest against ``reference``; ties go to the smallest ``k``.

    :raises EmptyStreamError: If the stream yields nothing.
    """
    best = None
    for k, image in report_stream:
        score = metric(image, reference)
        if best is None or score > best[0]:
            best = (score, k, image)
    if best is None:
        raise EmptyStreamError('No iterates to choose from')
    return best[1], best[2]

