"""Experiment orchestration: configuration files, the desk-scale dataset, baselines tuned by oracle PSNR, and the
``simulate``, ``train``, ``reconstruct``, ``evaluate`` and ``benchmark`` commands.

A configuration is a single YAML file of flat dotted keys, for example:

.. code-block:: yaml

    seed: 7
    kernel.kind: gaussian
    alpha: 100
    regularizer.kind: red
    train.epochs: 20

Nested mappings are accepted too and read as the same dotted keys. Every command writes into an output directory and
leaves a snapshot of the effective configuration there as ``config.yaml``. A directory holding such a snapshot is
protected: commands refuse to write into it again unless ``DEQMD_ALLOW_OVERWRITE`` is true or ``force`` is set.
"""

import csv
import logging
import numpy as np
import time
import yaml

from dataclasses import dataclass, field
from deqmd import Image, Seed, env_var_is_true
from deqmd.bregman import KlFidelity
from deqmd.constants import MD_DEFAULTS, RL_BASELINE_ITERS, TRAIN_DEFAULTS, TV_EPS, TV_LAMBDA_GRID
from deqmd.errors import ConfigError, CorruptDataError, DomainError, EmptyStreamError, ShapeMismatchError
from deqmd.forward import (
    ConvolutionOperator,
    NoiseConfig,
    Observation,
    kernel_from_spec,
    make_dataset,
    read_manifest,
    write_manifest,
)
from deqmd.imagefiles import LUMA_WEIGHTS, load_image, save_image
from deqmd.metrics import psnr, ssim
from deqmd.regularizers import (
    DEQ_RED_ARCH,
    DEQ_S_ARCH,
    NetworkRegularizer,
    Regularizer,
    SmoothedTV,
    build_regularizer,
    load_params,
    save_params,
)
from deqmd.solvers import (
    MdConfig,
    Objective,
    SolveReport,
    best_iterate_selector,
    initialize,
    richardson_lucy_iterates,
    solve_fixed_point,
)
from deqmd.training import TrainConfig, pretrain_denoiser, train
from functools import cached_property
from multiprocessing import Pool
from pathlib import Path
from typing import Any


log = logging.getLogger(__name__)

#: Every recognized configuration key, mapped to ``(type, default)``. Types are ``int``, ``float``, ``bool``, ``str``,
#: ``floats`` (a list of numbers) and ``strs`` (a list of strings).
CONFIG_SCHEMA: dict[str, tuple[str, Any]] = {
    'seed': ('int', 0),
    'output_dir': ('str', 'out'),
    'kernel.kind': ('str', 'gaussian'),
    'kernel.size': ('int', None),
    'kernel.sigma': ('float', None),
    'kernel.path': ('str', None),
    'kernel.method': ('str', 'direct'),
    'alpha': ('float', 100.0),
    'regularizer.kind': ('str', 'red'),
    'regularizer.tv_lambda': ('float', 1.0),
    'regularizer.tv_eps': ('float', TV_EPS),
    **{f'solver.{name}': (type(value).__name__, value) for name, value in MD_DEFAULTS.items()},
    'solver.init': ('str', 'adjoint'),
    'solver.init_tv_lambda': ('float', 1.0),
    'solver.init_rl_iters': ('int', 10),
    **{f'train.{name}': (type(value).__name__, value) for name, value in TRAIN_DEFAULTS.items()},
    'train.pretrain': ('bool', False),
    'data.images': ('strs', []),
    'data.manifest': ('str', None),
    'data.patch_size': ('int', 32),
    'data.n_train': ('int', 20),
    'data.n_val': ('int', 6),
    'data.n_test': ('int', 6),
    'baselines.rl_iters': ('int', RL_BASELINE_ITERS),
    'baselines.tv_lambdas': ('floats', list(TV_LAMBDA_GRID)),
    'benchmark.workers': ('int', 1),
    'benchmark.scalar_checkpoint': ('str', None),
    'benchmark.red_checkpoint': ('str', None),
}

#: Keys restricted to a fixed set of values
CONFIG_CHOICES = {
    'kernel.kind': ('gaussian', 'uniform', 'delta', 'file'),
    'kernel.method': ('direct', 'fft'),
    'regularizer.kind': ('tv', 'scalar', 'red'),
    'solver.init': ('adjoint', 'random', 'tv', 'rl'),
}


def _flatten_nodes(node: yaml.MappingNode, prefix: str = ''):
    for key_node, value_node in node.value:
        name = f'{prefix}{key_node.value}'
        if isinstance(value_node, yaml.MappingNode):
            yield from _flatten_nodes(value_node, f'{name}.')
        else:
            yield name, value_node, key_node.start_mark.line + 1


def _construct(node: yaml.Node) -> Any:
    loader = yaml.SafeLoader('')
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def _coerce(key: str, raw: Any, line: int = None) -> Any:
    kind, default = CONFIG_SCHEMA[key]
    if raw is None:
        return default

    def is_number(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    match kind:
        case 'int':
            ok = isinstance(raw, int) and not isinstance(raw, bool)
        case 'float':
            ok = is_number(raw)
            raw = float(raw) if ok else raw
        case 'bool':
            ok = isinstance(raw, bool)
        case 'str':
            ok = isinstance(raw, str)
        case 'floats':
            ok = isinstance(raw, list) and all(is_number(v) for v in raw)
            raw = [float(v) for v in raw] if ok else raw
        case 'strs':
            ok = isinstance(raw, list) and all(isinstance(v, str) for v in raw)
    if not ok:
        raise ConfigError(f'"{key}" expects a value of type {kind}, got {raw!r}', line)
    if key in CONFIG_CHOICES and raw not in CONFIG_CHOICES[key]:
        raise ConfigError(f'"{key}" must be one of {", ".join(CONFIG_CHOICES[key])}, got "{raw}"', line)
    return raw


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """The effective settings of one experiment. Use :py:func:`load_config` or :py:meth:`from_dict` to build one.

    :param values: Every key of :py:data:`CONFIG_SCHEMA` with its value.
    :type values: dict[str, Any]

    :param lines: Line each key was set on in the source file, for error messages.
    :type lines: dict[str, int]
    """

    values: dict[str, Any]
    lines: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        # Building the typed views validates cross-field ranges
        for key, build in (('solver', lambda: self.md_config), ('train', lambda: self.train_config())):
            try:
                build()
            except DomainError as ex:
                line = min((v for k, v in self.lines.items() if k.startswith(f'{key}.')), default=None)
                raise ConfigError(str(ex), line) from ex
        if self['alpha'] <= 0:
            raise ConfigError('alpha must be positive', self.lines.get('alpha'))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def from_dict(cls, values: dict[str, Any] = None) -> 'ExperimentConfig':
        """Builds a configuration from flat dotted keys, filling in defaults.

        :raises ConfigError: For unknown keys or wrongly typed values.
        """
        values = values or {}
        unknown = sorted(set(values) - set(CONFIG_SCHEMA))
        if unknown:
            raise ConfigError(f'Unknown configuration key(s): {", ".join(unknown)}')
        return cls({key: _coerce(key, values.get(key)) for key in CONFIG_SCHEMA})

    def with_overrides(self, **overrides) -> 'ExperimentConfig':
        """A copy with some dotted keys replaced (pass them as a dict via ``**{'train.epochs': 2}``)."""
        values = dict(self.values)
        for key, value in overrides.items():
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f'Unknown configuration key: {key}')
            values[key] = _coerce(key, value)
        return ExperimentConfig(values, self.lines)

    @property
    def seed(self) -> Seed:
        return Seed(self['seed'])

    @property
    def md_config(self) -> MdConfig:
        return MdConfig(**{name: self[f'solver.{name}'] for name in MD_DEFAULTS})

    def train_config(self, checkpoint_dir: Path = None) -> TrainConfig:
        return TrainConfig(
            **{name: self[f'train.{name}'] for name in TRAIN_DEFAULTS},
            checkpoint_dir=checkpoint_dir,
            seed=self.seed.derive(3),
            solver=self.md_config,
        )

    def operator(self, shape: tuple) -> ConvolutionOperator:
        kernel = kernel_from_spec(self['kernel.kind'], self['kernel.size'], self['kernel.sigma'], self['kernel.path'])
        return ConvolutionOperator(kernel, shape, self['kernel.method'])

    def snapshot(self) -> str:
        """The configuration as flat YAML, keys sorted."""
        return yaml.safe_dump(dict(self.values), sort_keys=True, default_flow_style=False)


def load_config(path: str | Path) -> ExperimentConfig:
    """Reads an experiment configuration file.

    :raises ConfigError: For YAML syntax errors, unknown or repeated keys and wrongly typed values, naming the line.
    """

    with open(path, 'r') as fh:
        text = fh.read()
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as ex:
        line = ex.problem_mark.line + 1 if ex.problem_mark else None
        raise ConfigError(f'{path} is not valid YAML: {ex.problem}', line) from ex
    if root is None:
        return ExperimentConfig.from_dict({})
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f'{path} must hold a mapping of keys to values', root.start_mark.line + 1)

    values, lines = {}, {}
    for key, node, line in _flatten_nodes(root):
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f'Unknown configuration key "{key}"', line)
        if key in values:
            raise ConfigError(f'"{key}" is set twice (first on line {lines[key]})', line)
        values[key] = _coerce(key, _construct(node), line)
        lines[key] = line
    for key, (_, default) in CONFIG_SCHEMA.items():
        values.setdefault(key, default)
    return ExperimentConfig(values, lines)


class ExperimentProject:
    """One experiment: a configuration plus the output directory its commands write into.

    :param config_path: Configuration file. None uses the defaults.
    :type config_path: str | pathlib.Path, optional

    :param output_dir: Overrides ``output_dir`` from the file. Defaults to None.
    :type output_dir: str | pathlib.Path, optional

    :param seed: Overrides ``seed`` from the file. Defaults to None.
    :type seed: int, optional

    :param force: Write into a protected output directory anyway. Defaults to False.
    :type force: bool, optional

    :param config: An already built configuration, used instead of reading ``config_path``. Defaults to None.
    :type config: ExperimentConfig, optional
    """

    def __init__(
        self,
        config_path: str | Path = None,
        output_dir: str | Path = None,
        seed: int = None,
        force: bool = False,
        config: ExperimentConfig = None,
    ):
        self.config_path = Path(config_path) if config_path else None
        self.force = force
        self._base_config = config
        self._overrides = {}
        if output_dir is not None:
            self._overrides['output_dir'] = str(output_dir)
        if seed is not None:
            self._overrides['seed'] = int(seed)

    @cached_property
    def config(self) -> ExperimentConfig:
        """The effective configuration, read once."""
        base = self._base_config
        if base is None:
            base = load_config(self.config_path) if self.config_path else ExperimentConfig.from_dict({})
        return base.with_overrides(**self._overrides) if self._overrides else base

    @property
    def output_dir(self) -> Path:
        return Path(self.config['output_dir'])

    @property
    def protect_outputs(self) -> bool:
        """An output directory is protected once it holds a configuration snapshot, unless ``force`` was given or
        ``DEQMD_ALLOW_OVERWRITE`` is true."""
        if not (self.output_dir / 'config.yaml').exists():
            return False
        return not (self.force or env_var_is_true('DEQMD_ALLOW_OVERWRITE'))

    def prepare(self) -> Path:
        """Creates the output directory and snapshots the configuration into it.

        :raises ConfigError: If the directory is protected.
        """
        if self.protect_outputs:
            raise ConfigError(
                f'{self.output_dir} already holds experiment outputs. To overwrite them, pass --force or export '
                'DEQMD_ALLOW_OVERWRITE=True'
            )
        self.output_dir.mkdir(parents=True, exist_ok=True)
        (self.output_dir / 'config.yaml').write_text(self.config.snapshot())
        return self.output_dir

    @cached_property
    def datasets(self) -> dict[str, list[Observation]]:
        """``train``, ``val`` and ``test`` splits, regenerated deterministically from the configuration."""
        return build_datasets(self.config)

    @cached_property
    def operator(self) -> ConvolutionOperator:
        return self.config.operator(self.image_shape)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        size = self.config['data.patch_size']
        return (size, size, 1)

    @property
    def test_set(self) -> list[Observation]:
        """The ``data.manifest`` pairs when that key is set, otherwise the generated test split."""
        manifest = self.config['data.manifest']
        if manifest:
            pairs = read_manifest(manifest)
            for pair in pairs:
                pair.observed.require_shape(self.image_shape)
            return pairs
        return self.datasets['test']


def extract_patches(images: list[Image], patch_size: int, count: int, seed: Seed) -> list[Image]:
    """Crops ``count`` grayscale ``patch_size`` x ``patch_size`` patches at random positions, cycling through
    ``images``. Color images are converted to luminance first.

    :raises ShapeMismatchError: If an image is smaller than a patch.
    :raises EmptyStreamError: If there are no images.
    """

    if not images:
        raise EmptyStreamError('No images to crop patches from')
    gray = [img.data[:, :, 0] if img.channels == 1 else img.data[:, :, :3] @ LUMA_WEIGHTS for img in images]
    for idx, img in enumerate(gray):
        if min(img.shape) < patch_size:
            raise ShapeMismatchError(f'Image {idx} of shape {img.shape} is smaller than a {patch_size} patch')
    rng = seed.generator()
    patches = []
    for i in range(count):
        img = gray[i % len(gray)]
        row = int(rng.integers(0, img.shape[0] - patch_size + 1))
        col = int(rng.integers(0, img.shape[1] - patch_size + 1))
        patches.append(Image(np.clip(img[row : row + patch_size, col : col + patch_size], 0.0, 1.0)))
    return patches


def synthetic_images(count: int, size: int, seed: Seed) -> list[Image]:
    """Piecewise-smooth test images: a random linear ramp with a few flat rectangles and disks on top, in
    ``[0.05, 0.95]``."""

    rng = seed.generator()
    rows, cols = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing='ij')
    images = []
    for _ in range(count):
        img = rng.uniform(0.2, 0.5) + rng.uniform(-0.2, 0.2) * rows + rng.uniform(-0.2, 0.2) * cols
        for _ in range(int(rng.integers(2, 6))):
            level = rng.uniform(0.05, 0.95)
            r0, c0 = rng.uniform(0, 1, size=2)
            extent = rng.uniform(0.1, 0.4)
            if rng.uniform() < 0.5:
                mask = (np.abs(rows - r0) < extent / 2) & (np.abs(cols - c0) < extent / 2)
            else:
                mask = (rows - r0) ** 2 + (cols - c0) ** 2 < (extent / 2) ** 2
            img = np.where(mask, level, img)
        images.append(Image(np.clip(img, 0.05, 0.95)))
    return images


def build_datasets(config: ExperimentConfig) -> dict[str, list[Observation]]:
    """Cuts (or synthesizes) the clean patches, splits them and simulates the measurements."""

    sizes = {split: config[f'data.n_{split}'] for split in ('train', 'val', 'test')}
    total = sum(sizes.values())
    patch = config['data.patch_size']
    if config['data.images']:
        sources = [load_image(path) for path in config['data.images']]
        clean = extract_patches(sources, patch, total, config.seed.derive(1))
    else:
        clean = synthetic_images(total, patch, config.seed.derive(1))
    op = config.operator((patch, patch, 1))
    noise = NoiseConfig(config['alpha'])
    splits, start = {}, 0
    for idx, (split, n) in enumerate(sizes.items()):
        splits[split] = make_dataset(clean[start : start + n], op, noise, config.seed.derive(2, idx))
        start += n
    return splits


def tune_tv_lambda(
    y: Image, op: ConvolutionOperator, x_star: Image, grid: list[float], alpha: float = 1.0, cfg: MdConfig = None
) -> tuple[float, SolveReport]:
    """Solves the KL + TV problem for each weight in ``grid`` and keeps the one with the best PSNR against
    ``x_star``; ties go to the smallest weight. Returns the winning weight and the report of its solve.

    :raises EmptyStreamError: If ``grid`` is empty.
    """

    if not grid:
        raise EmptyStreamError('The regularization grid is empty')
    cfg = cfg or MdConfig()
    start = initialize('adjoint', y, op, alpha=alpha, a=cfg.a, cfg=cfg)
    best = None
    for lam in sorted(grid):
        obj = Objective(KlFidelity(y, op, alpha), SmoothedTV(lam), cfg.a)
        report = solve_fixed_point(obj, start, cfg)
        score = psnr(report.final, x_star)
        log.debug(f'KL+TV with lambda={lam:g}: {score:.3f} dB')
        if best is None or score > best[0]:
            best = (score, lam, report)
    return best[1], best[2]


@dataclass(frozen=True)
class MetricsRow:
    """Quality of one reconstruction."""

    method: str
    image: int
    psnr: float
    ssim: float
    iterations: int
    seconds: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.psnr) and np.isfinite(self.ssim)):
            raise CorruptDataError(f'{self.method} on image {self.image} produced psnr={self.psnr} ssim={self.ssim}')


METRICS_FIELDS = ['method', 'image', 'psnr', 'ssim', 'iterations']


def write_metrics(rows: list[MetricsRow], path: Path) -> Path:
    """Writes one line per row. Wall time is logged rather than written, so reruns produce identical files."""
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_FIELDS)
        for row in rows:
            writer.writerow([row.method, row.image, f'{row.psnr:.6f}', f'{row.ssim:.6f}', row.iterations])
    return path


def summarize(rows: list[MetricsRow]) -> dict[str, dict[str, float]]:
    """Mean PSNR, SSIM and iteration count per method, in order of first appearance."""
    methods = list(dict.fromkeys(row.method for row in rows))
    summary = {}
    for method in methods:
        chosen = [row for row in rows if row.method == method]
        summary[method] = {
            'psnr': float(np.mean([row.psnr for row in chosen])),
            'ssim': float(np.mean([row.ssim for row in chosen])),
            'iterations': float(np.mean([row.iterations for row in chosen])),
        }
    return summary


def _write_table(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


@dataclass(frozen=True, eq=False)
class BenchmarkJob:
    """One (method, image) reconstruction, self-contained so it can run in a worker process."""

    method: str
    index: int
    sample: Observation
    op: ConvolutionOperator
    md: MdConfig
    regularizer: Regularizer = None
    rl_iters: int = RL_BASELINE_ITERS
    tv_lambdas: tuple[float, ...] = TV_LAMBDA_GRID
    init: str = 'adjoint'


def run_job(job: BenchmarkJob) -> tuple[MetricsRow, Image]:
    """Reconstructs one image with one method and scores it."""
    started = time.perf_counter()
    y, clean, alpha = job.sample.observed, job.sample.clean, job.sample.alpha
    match job.method:
        case 'observed':
            image, iterations = y.like(np.clip(y.data / alpha, 0.0, 1.0)), 0
        case 'rl':
            iterations, image = best_iterate_selector(
                richardson_lucy_iterates(y, job.op, job.rl_iters, alpha=alpha), clean
            )
        case 'kl_tv':
            _, report = tune_tv_lambda(y, job.op, clean, list(job.tv_lambdas), alpha, job.md)
            image, iterations = report.final, report.iterations
        case _:
            obj = Objective(KlFidelity(y, job.op, alpha), job.regularizer, job.md.a)
            x0 = initialize(job.init, y, job.op, seed=job.sample.seed, alpha=alpha, a=job.md.a, cfg=job.md)
            report = solve_fixed_point(obj, x0, job.md)
            image, iterations = report.final, report.iterations
    seconds = time.perf_counter() - started
    row = MetricsRow(job.method, job.index, psnr(image, clean), ssim(image, clean), int(iterations), seconds)
    log.debug(f'{job.method} on image {job.index}: {row.psnr:.3f} dB in {seconds:.2f}s')
    return row, image


def run_jobs(jobs: list[BenchmarkJob], workers: int = 1) -> list[tuple[MetricsRow, Image]]:
    """Runs jobs, in a process pool when ``workers > 1``. Results come back in job order either way."""
    if workers > 1 and len(jobs) > 1:
        with Pool(workers) as pool:
            return pool.map(run_job, jobs)
    return [run_job(job) for job in jobs]


def _network_regularizer(kind: str, checkpoint: str | Path) -> NetworkRegularizer:
    arch = DEQ_S_ARCH if kind == 'scalar' else DEQ_RED_ARCH
    return NetworkRegularizer.from_params(load_params(checkpoint, arch))


def experiment_regularizer(project: ExperimentProject, checkpoint: str | Path = None) -> Regularizer:
    """The configured regularizer: smoothed TV from the configuration, or a network loaded from ``checkpoint``.

    :raises ConfigError: If a network regularizer is configured but no checkpoint given.
    """
    config = project.config
    kind = config['regularizer.kind']
    if kind == 'tv':
        if checkpoint:
            log.warning('Ignoring the checkpoint: the TV regularizer has no learned parameters')
        return SmoothedTV(config['regularizer.tv_lambda'], config['regularizer.tv_eps'])
    if not checkpoint:
        raise ConfigError(f'regularizer.kind={kind} needs a checkpoint')
    return _network_regularizer(kind, checkpoint)


def cmd_simulate(project: ExperimentProject) -> dict[str, Path]:
    """Simulates the train, validation and test pairs and writes each split with its manifest.

    :return: Manifest path of each split.
    :rtype: dict[str, pathlib.Path]
    """
    out = project.prepare()
    manifests = {
        split: write_manifest(pairs, out / 'data' / split, prefix=split) for split, pairs in project.datasets.items()
    }
    log.info(f'Simulated {sum(len(p) for p in project.datasets.values())} pair(s) into {out / "data"}')
    return manifests


def _train_kind(project: ExperimentProject, kind: str, out: Path) -> tuple[NetworkRegularizer, Path]:
    config, data = project.config, project.datasets
    cfg = config.train_config(checkpoint_dir=out / 'checkpoints' / kind)
    reg = build_regularizer(kind, cfg.seed.derive(0))
    if kind == 'red' and config['train.pretrain']:
        patches = [pair.clean for pair in data['train']]
        theta, losses = pretrain_denoiser(patches, cfg.pretrain_sigma, cfg.pretrain_epochs, cfg, reg)
        _write_table(out / f'pretrain_log_{kind}.csv', ['epoch', 'loss'], [[i, repr(v)] for i, v in enumerate(losses)])
    theta, history = train(data['train'], data['val'], reg, project.operator, cfg)
    history.to_csv(out / f'train_log_{kind}.csv', include_time=False)
    checkpoint = save_params(theta, out / f'checkpoint_{kind}.deqp')
    reg.set_params(theta)
    log.info(f'Best {kind} model: epoch {history.best_epoch} at {history.val_psnr[history.best_epoch]:.3f} dB')
    return reg, checkpoint


def cmd_train(project: ExperimentProject) -> Path:
    """Trains the configured network regularizer and writes its best checkpoint and training log.

    :return: The checkpoint path.
    :rtype: pathlib.Path
    """
    kind = project.config['regularizer.kind']
    if kind == 'tv':
        raise ConfigError('regularizer.kind=tv has nothing to train')
    out = project.prepare()
    return _train_kind(project, kind, out)[1]


def _reconstruct_all(project: ExperimentProject, reg: Regularizer, out: Path) -> list[MetricsRow]:
    config = project.config
    md = config.md_config
    rows = []
    for idx, sample in enumerate(project.test_set):
        obj = Objective(KlFidelity(sample.observed, project.operator, sample.alpha), reg, md.a)
        x0 = initialize(
            config['solver.init'],
            sample.observed,
            project.operator,
            seed=sample.seed,
            alpha=sample.alpha,
            a=md.a,
            tv_lambda=config['solver.init_tv_lambda'],
            rl_iters=config['solver.init_rl_iters'],
            cfg=md,
        )
        started = time.perf_counter()
        report = solve_fixed_point(obj, x0, md, reference=sample.clean)
        seconds = time.perf_counter() - started
        save_image(report.final, out / 'reconstructions' / f'test-{idx:03d}.deqf')
        save_image(report.final, out / 'reconstructions' / f'test-{idx:03d}.png')
        report.to_csv(out / 'reports' / f'test-{idx:03d}.csv')
        rows.append(
            MetricsRow(
                config['regularizer.kind'],
                idx,
                psnr(report.final, sample.clean),
                ssim(report.final, sample.clean),
                report.iterations,
                seconds,
            )
        )
        log.info(f'Test image {idx}: {rows[-1].psnr:.3f} dB after {report.iterations} iteration(s) ({seconds:.2f}s)')
    return rows


def cmd_reconstruct(project: ExperimentProject, checkpoint: str | Path = None) -> Path:
    """Reconstructs the test set with the configured regularizer. Learned regularizers take no tuning parameters at
    this stage; everything comes from the checkpoint.

    :return: Directory of the reconstructions.
    :rtype: pathlib.Path
    """
    reg = experiment_regularizer(project, checkpoint)
    out = project.prepare()
    _reconstruct_all(project, reg, out)
    return out / 'reconstructions'


def cmd_evaluate(project: ExperimentProject, checkpoint: str | Path = None) -> Path:
    """Reconstructs the test set and scores every reconstruction.

    :return: Path of ``metrics.csv``.
    :rtype: pathlib.Path
    """
    reg = experiment_regularizer(project, checkpoint)
    out = project.prepare()
    rows = _reconstruct_all(project, reg, out)
    for method, means in summarize(rows).items():
        log.info(f'{method}: mean PSNR {means["psnr"]:.3f} dB, mean SSIM {means["ssim"]:.4f}')
    return write_metrics(rows, out / 'metrics.csv')


BENCHMARK_METHODS = ('observed', 'rl', 'kl_tv', 'scalar', 'red')  #: Rows of the benchmark, in output order
INIT_STUDY = ('adjoint', 'random', 'tv', 'rl')  #: Initializations compared by the benchmark


def cmd_benchmark(project: ExperimentProject) -> Path:
    """Compares the observed images, oracle-stopped Richardson-Lucy, oracle-tuned KL + TV and both learned
    regularizers on the test set. Learned regularizers come from ``benchmark.<kind>_checkpoint`` or are trained on
    the spot.

    Writes ``benchmark.csv`` (one row per method and image), ``summary.csv`` (means per method),
    ``parameters.csv`` (tunable and trainable parameter counts per method) and ``initializations.csv`` (forward pass
    iterations and PSNR of the DEQ-RED model under each initialization).

    :return: Path of ``summary.csv``.
    :rtype: pathlib.Path
    """

    config = project.config
    out = project.prepare()
    md = config.md_config
    networks = {}
    for kind in ('scalar', 'red'):
        checkpoint = config[f'benchmark.{kind}_checkpoint']
        networks[kind] = _network_regularizer(kind, checkpoint) if checkpoint else _train_kind(project, kind, out)[0]

    jobs = [
        BenchmarkJob(
            method=method,
            index=idx,
            sample=sample,
            op=project.operator,
            md=md,
            regularizer=networks.get(method),
            rl_iters=config['baselines.rl_iters'],
            tv_lambdas=tuple(config['baselines.tv_lambdas']),
        )
        for method in BENCHMARK_METHODS
        for idx, sample in enumerate(project.test_set)
    ]
    results = run_jobs(jobs, config['benchmark.workers'])
    rows = [row for row, _ in results]
    for row, image in results:
        save_image(image, out / 'images' / f'{row.method}-{row.image:03d}.png')
    write_metrics(rows, out / 'benchmark.csv')

    summary = summarize(rows)
    for method, means in summary.items():
        log.info(f'{method}: {means["psnr"]:.3f} dB, SSIM {means["ssim"]:.4f}, {means["iterations"]:.1f} iteration(s)')
    summary_path = _write_table(
        out / 'summary.csv',
        ['method', 'psnr', 'ssim', 'iterations'],
        [[m, f'{s["psnr"]:.6f}', f'{s["ssim"]:.6f}', f'{s["iterations"]:.2f}'] for m, s in summary.items()],
    )

    _write_table(
        out / 'parameters.csv',
        ['method', 'tunable_parameters', 'trainable_weights'],
        [
            ['rl', 1, 0],
            ['kl_tv', 1, 0],
            ['scalar', 0, networks['scalar'].n_trainable],
            ['red', 0, networks['red'].n_trainable],
        ],
    )

    init_jobs = [
        BenchmarkJob(
            method='red', index=idx, sample=sample, op=project.operator, md=md, regularizer=networks['red'], init=init
        )
        for init in INIT_STUDY
        for idx, sample in enumerate(project.test_set)
    ]
    init_rows = [row for row, _ in run_jobs(init_jobs, config['benchmark.workers'])]
    n = len(project.test_set)
    _write_table(
        out / 'initializations.csv',
        ['init', 'mean_iterations', 'mean_psnr'],
        [
            [
                init,
                f'{np.mean([r.iterations for r in init_rows[i * n : (i + 1) * n]]):.2f}',
                f'{np.mean([r.psnr for r in init_rows[i * n : (i + 1) * n]]):.6f}',
            ]
            for i, init in enumerate(INIT_STUDY)
        ],
    )
    return summary_path
