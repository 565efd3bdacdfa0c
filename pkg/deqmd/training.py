"""End-to-end learning of regularizer parameters with Jacobian-free backpropagation.

Each training sample runs the forward pass to a fixed point without tracking gradients. Then a single layer
application at that point is recorded on a :py:class:`deqmd.regularizers.Tape`. The loss cotangent is pulled back
through that one application to get the parameter gradient, so memory does not grow with the number of forward
iterations.
"""

import csv
import logging
import numpy as np
import time
import torch

from dataclasses import dataclass, field
from deqmd import Image, Seed, progress_enabled
from deqmd.bregman import KlFidelity
from deqmd.constants import ADAM_BETAS, ADAM_EPS, TRAIN_DEFAULTS, TV_EPS
from deqmd.errors import DeqMdError, DomainError, ShapeMismatchError
from deqmd.forward import ConvolutionOperator, Observation
from deqmd.metrics import psnr
from deqmd.regularizers import (
    NetworkRegularizer,
    ParamVector,
    RedRegularizer,
    Regularizer,
    Tape,
    build_regularizer,
    save_params,
    tv_smoothed_grad,
    tv_smoothed_value,
)
from deqmd.solvers import MdConfig, Objective, fixed_point_residual, initialize, solve_fixed_point
from pathlib import Path
from tqdm import tqdm
from typing import Callable


log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Settings for :py:func:`train` and :py:func:`pretrain_denoiser`. Defaults come from
    :py:data:`deqmd.constants.TRAIN_DEFAULTS`.

    :param epochs: Passes over the training set.
    :type epochs: int

    :param lr: ADAM learning rate, halved once ``lr_milestone`` epochs have completed.
    :type lr: float

    :param loss_tv_lambda: Weight of the TV term in the supervised loss.
    :type loss_tv_lambda: float

    :param clip_norm: Global gradient norm cap applied before each ADAM step. 0 disables clipping.
    :type clip_norm: float

    :param checkpoint_every: Save parameters every this many epochs into ``checkpoint_dir``. 0 disables checkpoints.
    :type checkpoint_every: int

    :param warm_restart: Start each sample's forward pass from its reconstruction in the previous epoch.
    :type warm_restart: bool

    :param init: Initialization strategy of the forward pass. Defaults to ``adjoint``.
    :type init: str

    :param solver: Forward pass settings.
    :type solver: deqmd.solvers.MdConfig
    """

    epochs: int = TRAIN_DEFAULTS['epochs']
    lr: float = TRAIN_DEFAULTS['lr']
    lr_milestone: int = TRAIN_DEFAULTS['lr_milestone']
    loss_tv_lambda: float = TRAIN_DEFAULTS['loss_tv_lambda']
    clip_norm: float = TRAIN_DEFAULTS['clip_norm']
    checkpoint_every: int = TRAIN_DEFAULTS['checkpoint_every']
    checkpoint_dir: Path = None
    pretrain_epochs: int = TRAIN_DEFAULTS['pretrain_epochs']
    pretrain_sigma: float = TRAIN_DEFAULTS['pretrain_sigma']
    warm_restart: bool = TRAIN_DEFAULTS['warm_restart']
    init: str = 'adjoint'
    seed: Seed = field(default_factory=lambda: Seed(0))
    solver: MdConfig = field(default_factory=MdConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError(f'epochs must be at least 1, got {self.epochs}')
        if not self.lr > 0:
            raise DomainError(f'lr must be positive, got {self.lr}')
        if self.loss_tv_lambda < 0 or self.clip_norm < 0 or self.checkpoint_every < 0:
            raise DomainError('loss_tv_lambda, clip_norm and checkpoint_every must be non-negative')

    def lr_at(self, epoch: int) -> float:
        """Piecewise-constant schedule: ``lr`` for the first ``lr_milestone`` epochs, half of it afterwards."""
        return self.lr if epoch < self.lr_milestone else 0.5 * self.lr


class AdamState:
    """ADAM moments for one parameter vector, kept in a ``torch.optim.Adam`` over a flat float64 tensor.

    :param theta: Parameters the optimizer will update; fixes the layout.
    :type theta: deqmd.regularizers.ParamVector

    :param lr: Initial learning rate.
    :type lr: float
    """

    def __init__(self, theta: ParamVector, lr: float, betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.layout = theta.zeros_like()
        self.flat = torch.nn.Parameter(torch.tensor(theta.values, dtype=torch.float64))
        self.optimizer = torch.optim.Adam([self.flat], lr=lr, betas=betas, eps=eps)

    def _moment(self, name: str) -> np.ndarray:
        state = self.optimizer.state.get(self.flat, {})
        if name not in state:
            return np.zeros(len(self.layout))
        return state[name].detach().numpy().copy()

    @property
    def first_moment(self) -> np.ndarray:
        return self._moment('exp_avg')

    @property
    def second_moment(self) -> np.ndarray:
        return self._moment('exp_avg_sq')

    @property
    def step(self) -> int:
        state = self.optimizer.state.get(self.flat, {})
        return int(state['step']) if 'step' in state else 0


def adam_step(
    state: AdamState, theta: ParamVector, grad: ParamVector, lr: float, clip_norm: float = 0.0
) -> tuple[ParamVector, AdamState]:
    """One bias-corrected ADAM update of ``theta`` along ``grad``.

    :param clip_norm: When positive, rescale ``grad`` to at most this global norm first. Defaults to 0.
    :type clip_norm: float, optional

    :raises LayoutMismatchError: If ``theta``, ``grad`` and the state disagree on layout.
    """
    state.layout.require_layout(theta)
    theta.require_layout(grad)
    with torch.no_grad():
        state.flat.copy_(torch.from_numpy(theta.values.copy()))
    state.flat.grad = torch.tensor(grad.values, dtype=torch.float64)
    if clip_norm > 0:
        torch.nn.utils.clip_grad_norm_([state.flat], clip_norm)
    for group in state.optimizer.param_groups:
        group['lr'] = lr
    state.optimizer.step()
    return theta.with_values(state.flat.detach().numpy().copy()), state


def supervised_loss(x_inf: Image, x_star: Image, lam: float, eps: float = TV_EPS) -> tuple[float, Image]:
    """``||x_inf - x_star||^2 + lam * TV_eps(x_inf)`` and its gradient with respect to ``x_inf``.

    :raises ShapeMismatchError: If the shapes differ.
    """
    if x_inf.shape != x_star.shape:
        raise ShapeMismatchError(f'Cannot compare {x_inf.shape} with {x_star.shape}')
    diff = x_inf.data - x_star.data
    value = float(np.sum(diff * diff)) + lam * tv_smoothed_value(x_inf, eps)
    return value, x_inf.like(2.0 * diff + lam * tv_smoothed_grad(x_inf, eps))


@dataclass(frozen=True, eq=False)
class JfbGradient:
    """Result of :py:func:`jfb_gradient`."""

    params: ParamVector
    residual: float  #: ``||f(x_inf) - x_inf||_inf / ||x_inf||_inf``
    not_converged: bool  #: Set when ``residual`` exceeds ten times the tolerance
    evaluations: int  #: Layer applications recorded on the tape; always 1


def _network(obj: Objective):
    reg = obj.regularizer
    return reg.module, reg.arch


def jfb_gradient(
    obj: Objective, x_inf: Image, tau_final: float, loss_cotangent: Image, tol: float = MdConfig.tol
) -> JfbGradient:
    """Pulls ``loss_cotangent`` back through one layer application at ``x_inf`` to the regularizer's parameters.

    :param obj: The objective whose regularizer is being trained.
    :type obj: deqmd.solvers.Objective

    :param x_inf: The forward pass result.
    :type x_inf: deqmd.Image

    :param tau_final: The last accepted step size of the forward pass.
    :type tau_final: float

    :param loss_cotangent: ``d loss / d x_inf``.
    :type loss_cotangent: deqmd.Image

    :param tol: Forward pass tolerance, used to flag points that are not fixed points. Defaults to the solver default.
    :type tol: float, optional

    :rtype: JfbGradient
    """

    loss_cotangent.require_shape(x_inf.shape)
    residual = fixed_point_residual(obj, x_inf, tau_final)
    not_converged = residual > 10 * tol
    if not_converged:
        log.warning(f'JFB gradient taken at a point with fixed-point residual {residual:.3g} > {10 * tol:.3g}')
    module, arch = _network(obj)
    tape = Tape.record(lambda x: obj.layer_tensor(x, tau_final), x_inf.data, module, arch)
    params = tape.backward(loss_cotangent.data).params
    return JfbGradient(params=params, residual=residual, not_converged=not_converged, evaluations=tape.evaluations)


@dataclass
class TrainLog:
    """One row per completed epoch, numbered from 0."""

    train_loss: list[float] = field(default_factory=list)
    val_psnr: list[float] = field(default_factory=list)
    mean_fp_iters: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def record(self, loss: float, val: float, iters: float, seconds: float) -> None:
        self.train_loss.append(loss)
        self.val_psnr.append(val)
        self.mean_fp_iters.append(iters)
        self.seconds.append(seconds)

    def __len__(self) -> int:
        return len(self.train_loss)

    @property
    def best_epoch(self) -> int:
        """First epoch with the highest validation PSNR."""
        return int(np.argmax(self.val_psnr))

    def to_csv(self, path: str | Path, include_time: bool = True) -> Path:
        """Writes ``epoch, train_loss, val_psnr, mean_fp_iters, seconds``. ``include_time=False`` leaves out the
        wall-clock column so reruns produce identical files."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = ['epoch', 'train_loss', 'val_psnr', 'mean_fp_iters'] + (['seconds'] if include_time else [])
        with open(path, 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for epoch in range(len(self)):
                row = [epoch, repr(self.train_loss[epoch]), repr(self.val_psnr[epoch]), repr(self.mean_fp_iters[epoch])]
                if include_time:
                    row.append(f'{self.seconds[epoch]:.3f}')
                writer.writerow(row)
        return path


def _objective(sample: Observation, op: ConvolutionOperator, reg: Regularizer, cfg: TrainConfig) -> Objective:
    return Objective(KlFidelity(sample.observed, op, sample.alpha), reg, cfg.solver.a)


def _start(sample: Observation, op: ConvolutionOperator, cfg: TrainConfig, previous: Image = None) -> Image:
    if previous is not None:
        return initialize('warm', sample.observed, op, alpha=sample.alpha, a=cfg.solver.a, previous=previous)
    return initialize(
        cfg.init, sample.observed, op, seed=sample.seed, alpha=sample.alpha, a=cfg.solver.a, cfg=cfg.solver
    )


def reconstruct(sample: Observation, op: ConvolutionOperator, reg: Regularizer, cfg: TrainConfig):
    """Runs the forward pass on one sample.

    :rtype: deqmd.solvers.SolveReport
    """
    obj = _objective(sample, op, reg, cfg)
    return solve_fixed_point(obj, _start(sample, op, cfg), cfg.solver, reference=sample.clean)


def validate(val_set: list[Observation], op: ConvolutionOperator, reg: Regularizer, cfg: TrainConfig) -> float:
    """Mean PSNR of the forward pass over ``val_set``."""
    if not val_set:
        return np.nan
    scores = [psnr(reconstruct(sample, op, reg, cfg).final, sample.clean) for sample in val_set]
    return float(np.mean(scores))


def train(
    dataset: list[Observation],
    val_set: list[Observation],
    reg_kind: str | NetworkRegularizer,
    op: ConvolutionOperator,
    cfg: TrainConfig,
) -> tuple[ParamVector, TrainLog]:
    """Trains a learnable regularizer with one ADAM update per sample.

    :param dataset: Training pairs. Must not be empty.
    :type dataset: list[deqmd.forward.Observation]

    :param val_set: Validation pairs, scored by mean PSNR after every epoch.
    :type val_set: list[deqmd.forward.Observation]

    :param reg_kind: ``scalar`` or ``red`` to start from a fresh network seeded from ``cfg.seed``, or an existing
        network regularizer (for example a pretrained denoiser). An existing regularizer is updated in place.
    :type reg_kind: str | deqmd.regularizers.NetworkRegularizer

    :param op: The forward operator shared by every sample.
    :type op: deqmd.forward.ConvolutionOperator

    :param cfg: Training settings.
    :type cfg: TrainConfig

    :return: The parameters with the best validation PSNR, and the per-epoch log.
    :rtype: tuple[deqmd.regularizers.ParamVector, TrainLog]
    """

    if not dataset:
        raise DomainError('Cannot train on an empty dataset')
    reg = build_regularizer(reg_kind, cfg.seed.derive(0)) if isinstance(reg_kind, str) else reg_kind
    if not isinstance(reg, NetworkRegularizer):
        raise DomainError(f'{reg!r} has no trainable parameters')
    theta = reg.params
    state = AdamState(theta, cfg.lr)
    history = TrainLog()
    best_theta, best_psnr = theta, -np.inf
    previous = [None] * len(dataset)

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = cfg.lr_at(epoch)
        losses, iterations = [], []
        bar = tqdm(dataset, desc=f'epoch {epoch}', leave=False, disable=not progress_enabled())
        for idx, sample in enumerate(bar):
            obj = _objective(sample, op, reg, cfg)
            try:
                report = solve_fixed_point(obj, _start(sample, op, cfg, previous[idx]), cfg.solver)
            except DeqMdError as ex:
                log.error(f'Epoch {epoch}: forward pass failed on sample {idx}, abandoning the epoch: {ex}')
                break
            if cfg.warm_restart:
                previous[idx] = report.final
            loss, cotangent = supervised_loss(report.final, sample.clean, cfg.loss_tv_lambda)
            grad = jfb_gradient(obj, report.final, report.tau_final, cotangent, cfg.solver.tol)
            theta, state = adam_step(state, theta, grad.params, lr, cfg.clip_norm)
            reg.set_params(theta)
            losses.append(loss)
            iterations.append(report.iterations)
            bar.set_postfix(loss=f'{loss:.4g}', iters=report.iterations)

        val = validate(val_set, op, reg, cfg)
        seconds = time.perf_counter() - started
        history.record(
            float(np.mean(losses)) if losses else np.nan,
            val,
            float(np.mean(iterations)) if iterations else np.nan,
            seconds,
        )
        log.info(
            f'Epoch {epoch}: loss={history.train_loss[-1]:.6g} val_psnr={val:.3f} dB '
            f'mean_iters={history.mean_fp_iters[-1]:.1f} ({seconds:.1f}s)'
        )
        if val > best_psnr or best_psnr == -np.inf:
            best_theta, best_psnr = theta, val
        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            save_params(theta, Path(cfg.checkpoint_dir) / f'epoch-{epoch:03d}.deqp')

    return best_theta, history


def pretrain_denoiser(
    clean_patches: list[Image],
    sigma: float,
    epochs: int,
    cfg: TrainConfig,
    reg: RedRegularizer = None,
) -> tuple[ParamVector, list[float]]:
    """Trains the gradient-step denoiser ``D(x) = x - grad R(x)`` of a RED regularizer on Gaussian denoising:
    ``||D(x* + n) - x*||^2`` with ``n ~ N(0, sigma^2)``.

    :param clean_patches: Training targets.
    :type clean_patches: list[deqmd.Image]

    :param sigma: Noise standard deviation.
    :type sigma: float

    :param epochs: Passes over the patches.
    :type epochs: int

    :param cfg: Supplies the learning rate and the seed.
    :type cfg: TrainConfig

    :param reg: The regularizer to pretrain in place. Defaults to a fresh one seeded from ``cfg.seed``.
    :type reg: deqmd.regularizers.RedRegularizer, optional

    :raises DomainError: If ``reg`` is not a RED regularizer.

    :return: Pretrained parameters and the mean loss of each epoch.
    :rtype: tuple[deqmd.regularizers.ParamVector, list[float]]
    """

    reg = reg if reg is not None else RedRegularizer(seed=cfg.seed.derive(0))
    if not isinstance(reg, RedRegularizer):
        raise DomainError('Denoiser pre-training needs a RED regularizer')
    if sigma < 0 or epochs < 1:
        raise DomainError(f'Need sigma >= 0 and epochs >= 1, got {sigma} and {epochs}')
    optimizer = torch.optim.Adam(reg.network.parameters(), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    losses = []
    for epoch in tqdm(range(epochs), desc='pretraining', leave=False, disable=not progress_enabled()):
        epoch_losses = []
        for idx, patch in enumerate(clean_patches):
            noise = cfg.seed.derive(1, epoch, idx).generator().normal(0.0, sigma, size=patch.shape)
            noisy = torch.tensor(patch.data + noise, requires_grad=True)
            optimizer.zero_grad()
            denoised = noisy - reg.grad_tensor(noisy, create_graph=True)
            loss = ((denoised - torch.tensor(patch.data)) ** 2).sum()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        losses.append(float(np.mean(epoch_losses)))
        log.info(f'Pretraining epoch {epoch}: loss={losses[-1]:.6g}')
    return reg.params, losses


def estimate_spectral_norm(
    fn: Callable[[torch.Tensor], torch.Tensor], x: Image, n_power_iters: int, seed: Seed
) -> float:
    """Estimates ``||d fn / d x||_2`` at ``x`` by power iteration on ``J^T J``, with Jacobian-vector products from
    torch's double-backward trick and vector-Jacobian products from reverse mode."""

    point = x.tensor()
    v = torch.from_numpy(seed.generator().standard_normal(x.shape))
    v = v / torch.linalg.vector_norm(v)
    estimate = 0.0
    for _ in range(n_power_iters):
        _, jv = torch.autograd.functional.jvp(fn, point, v)
        estimate = float(torch.linalg.vector_norm(jv))
        if estimate == 0.0:
            break
        _, jtjv = torch.autograd.functional.vjp(fn, point, jv)
        v = jtjv / torch.linalg.vector_norm(jtjv)
    return estimate


def estimate_layer_spectral_norm(obj: Objective, x_inf: Image, tau: float, n_power_iters: int, seed: Seed) -> float:
    """``||d f / d x||_2`` of one layer application ``f`` at ``x_inf``. Logged for diagnosis; values above 1 are not
    an error."""
    estimate = estimate_spectral_norm(lambda x: obj.layer_tensor(x, tau), x_inf, n_power_iters, seed)
    log.info(f'Layer Jacobian spectral norm estimate at tau={tau:.4g}: {estimate:.4f}')
    return estimate
