import csv
import numpy as np
import pytest

from conftest import make_problem
from dataclasses import dataclass
from deqmd import Image, Seed
from deqmd.bregman import BURG_ENTROPY, KlFidelity
from deqmd.constants import POSITIVITY_EPS
from deqmd.errors import BacktrackingError, DomainError, EmptyStreamError, StepInfeasibleError
from deqmd.forward import ConvolutionOperator, NoiseConfig, gaussian_kernel, sample_poisson
from deqmd.regularizers import SmoothedTV
from deqmd.solvers import (
    MdConfig,
    Objective,
    backtrack_step,
    best_iterate_selector,
    fixed_point_residual,
    initialize,
    md_step,
    richardson_lucy,
    richardson_lucy_iterates,
    solve_fixed_point,
)


@dataclass(frozen=True, eq=False)
class ConstantGradient(Objective):
    g: float = 0.0

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.full_like(x, self.g)


@dataclass(frozen=True, eq=False)
class NeverDecreasing(Objective):
    def value_and_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return 0.0, np.ones_like(x)

    def decrease(self, x: np.ndarray, t: np.ndarray) -> float:
        return -1.0


TOY_ALPHAS = (100.0, 60.0, 40.0, 100.0, 60.0)


@pytest.fixture(scope='module')
def toy_solves():
    """Full solves of KL + TV on five 32x32 Gaussian-blur problems."""
    op = ConvolutionOperator(gaussian_kernel(11, 1.2), (32, 32, 1))
    solves = []
    for idx, alpha in enumerate(TOY_ALPHAS):
        clean, observed = make_problem(op, alpha, Seed(500 + idx))
        obj = Objective(KlFidelity(observed, op, alpha), SmoothedTV(0.5, eps=1e-4))
        start = initialize('adjoint', observed, op, alpha=alpha)
        solves.append((obj, solve_fixed_point(obj, start, MdConfig(), reference=clean), clean, observed))
    return solves


def test_md_step_closed_form():
    x = Image.full((2, 2), 0.5)
    np.testing.assert_allclose(md_step(ConstantGradient(None, None, 1.0, g=1.0), x, 1.0).data, 1.0 / 3.0)
    np.testing.assert_array_equal(md_step(ConstantGradient(None, None, 1.0, g=0.0), x, 1.0).data, 0.5)
    # the mirror point lands at 1.0 and the box caps it at a = 0.8
    np.testing.assert_array_equal(md_step(ConstantGradient(None, None, 0.8, g=-1.0), x, 1.0).data, 0.8)


def test_md_step_floors_at_eps():
    x = Image.full((2, 2), 1e-3)
    stepped = md_step(ConstantGradient(None, None, 1.0, g=1e12), x, 1.0)
    np.testing.assert_array_equal(stepped.data, POSITIVITY_EPS)


def test_md_step_rejects_infeasible_and_invalid_steps():
    x = Image.full((2, 2), 0.5)
    with pytest.raises(StepInfeasibleError):
        md_step(ConstantGradient(None, None, 1.0, g=-1.0), x, 2.0)
    with pytest.raises(DomainError):
        md_step(ConstantGradient(None, None, 1.0), x, 0.0)
    with pytest.raises(DomainError):
        md_step(ConstantGradient(None, None, 1.0), Image(np.array([[0.5, 0.0]])), 1.0)


def test_md_config_validation():
    for bad in ({'bt_gamma': 1.0}, {'bt_eta': 0.0}, {'tau0': -1.0}, {'max_iters': 0}, {'a': 1e-9}):
        with pytest.raises(DomainError):
            MdConfig(**bad)


def test_backtracking_accepts_small_steps_immediately(gaussian_op, toy_problem):
    _, observed = toy_problem
    obj = Objective(KlFidelity(observed, gaussian_op, 100.0), SmoothedTV(0.5))
    x = initialize('adjoint', observed, gaussian_op, alpha=100.0)
    _, tau = backtrack_step(obj, x, 1e-6, MdConfig())
    assert tau == 1e-6


def test_backtracking_shrinks_large_steps(gaussian_op, toy_problem):
    _, observed = toy_problem
    obj = Objective(KlFidelity(observed, gaussian_op, 100.0), SmoothedTV(0.5))
    x = initialize('adjoint', observed, gaussian_op, alpha=100.0)
    cfg = MdConfig()
    nxt, tau = backtrack_step(obj, x, 1e6, cfg)
    shrinks = np.log(tau / 1e6) / np.log(cfg.bt_eta)
    assert tau < 1e6 and shrinks == pytest.approx(round(shrinks))
    decrease = obj.psi(x.data) - obj.psi(nxt.data)
    assert decrease + 1e-9 >= cfg.bt_gamma / tau * BURG_ENTROPY.divergence(nxt.data, x.data)


def test_backtracking_gives_up():
    with pytest.raises(BacktrackingError):
        backtrack_step(NeverDecreasing(None, None, 1.0), Image.full((2, 2), 0.5), 1.0, MdConfig())


def test_unregularized_solve_recovers_noiseless_image(delta_op, seed):
    clean = make_problem(delta_op, 100.0, seed)[0]
    observed = Image(100.0 * clean.data)
    obj = Objective(KlFidelity(observed, delta_op, 100.0), SmoothedTV(0.0))
    report = solve_fixed_point(obj, Image.full(clean.shape, 0.5), MdConfig(tol=1e-8, max_iters=3000))
    assert np.max(np.abs(report.final.data - clean.data)) < 1e-3


def test_solves_descend_monotonically(toy_solves):
    for _, report, _, _ in toy_solves:
        for k in range(1, len(report.psi)):
            assert report.decrease_bound[k] >= 0.0
            assert report.psi[k] + report.decrease_bound[k] <= report.psi[k - 1] + 1e-9


def test_solves_reach_a_fixed_point(toy_solves):
    for obj, report, _, _ in toy_solves:
        assert report.converged
        assert report.iterations <= 2000
        assert report.rel_change[-1] < 2.5e-5
        assert fixed_point_residual(obj, report.final, report.tau_final) < 2.5e-4
        assert np.all(report.final.data > 0) and np.all(report.final.data <= 1.0)


def test_backtracked_steps_beat_the_worst_case_bound(toy_solves):
    for obj, report, _, _ in toy_solves:
        geometric_mean = np.exp(np.mean(np.log(report.accepted_taus())))
        assert geometric_mean * obj.y_l1 >= 1.0


def test_solve_improves_on_the_observation(toy_solves):
    for _, report, _, _ in toy_solves:
        assert report.psnr[-1] > report.psnr[0]


def test_report_csv(toy_solves, tmp_path):
    obj, report, _, _ = toy_solves[0]
    path = report.to_csv(tmp_path / 'trace.csv')
    with open(path, newline='') as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == report.iterations + 1
    assert rows[0]['tau'] == 'nan'
    last = rows[-1]
    assert float(last['tau_l1']) == pytest.approx(report.tau_final * obj.y_l1)
    assert float(last['tau_l1_unscaled']) == pytest.approx(report.tau_final * obj.y_l1 / 100.0)


def test_initialize_strategies(gaussian_op, toy_problem, seed):
    _, observed = toy_problem
    adjoint = initialize('adjoint', observed, gaussian_op, alpha=100.0)
    expected = np.clip(gaussian_op.adjoint_array(observed.data) / 100.0, POSITIVITY_EPS, 1.0)
    np.testing.assert_array_equal(adjoint.data, expected)

    random = initialize('random', observed, gaussian_op, seed=seed)
    np.testing.assert_array_equal(random.data, initialize('random', observed, gaussian_op, seed=seed).data)
    assert random.data.min() >= POSITIVITY_EPS and random.data.max() <= 1.0

    rl = initialize('rl', observed, gaussian_op, alpha=100.0, rl_iters=5)
    np.testing.assert_array_equal(rl.data, richardson_lucy(observed, gaussian_op, 5, alpha=100.0).final.data)

    warm = initialize('warm', observed, gaussian_op, previous=Image.full(observed.shape, 2.0))
    np.testing.assert_array_equal(warm.data, 1.0)


def test_tv_initialization_stays_in_the_box(small_op, seed):
    _, observed = make_problem(small_op, 60.0, seed)
    start = initialize('tv', observed, small_op, alpha=60.0, tv_lambda=0.5, cfg=MdConfig(max_iters=50))
    assert start.shape == observed.shape
    assert start.data.min() >= POSITIVITY_EPS and start.data.max() <= 1.0


def test_initialize_errors(gaussian_op, toy_problem):
    _, observed = toy_problem
    with pytest.raises(DomainError):
        initialize('random', observed, gaussian_op)
    with pytest.raises(DomainError):
        initialize('warm', observed, gaussian_op)
    with pytest.raises(DomainError):
        initialize('zeros', observed, gaussian_op)


def test_richardson_lucy_delta_kernel_is_exact_in_one_step(delta_op, seed):
    counts = sample_poisson(Image.full((16, 16), 0.5), NoiseConfig(5.0), seed)
    assert np.any(counts.data == 0)
    iterates = dict(richardson_lucy_iterates(counts, delta_op, 1))
    np.testing.assert_allclose(iterates[1].data, np.maximum(counts.data, POSITIVITY_EPS), rtol=1e-12)


def test_richardson_lucy_kl_is_monotone_on_noiseless_data(gaussian_op, toy_problem):
    clean, _ = toy_problem
    report = richardson_lucy(gaussian_op.apply(clean), gaussian_op, 100, reference=clean)
    assert report.iterations == 100
    assert all(later <= earlier + 1e-9 for earlier, later in zip(report.psi, report.psi[1:]))
    assert report.psnr[-1] > report.psnr[0]


def test_richardson_lucy_rejects_bad_input(small_op):
    with pytest.raises(DomainError):
        next(richardson_lucy_iterates(Image(-np.ones((16, 16))), small_op, 3))
    with pytest.raises(DomainError):
        next(richardson_lucy_iterates(Image(np.ones((16, 16))), small_op, -1))


def test_best_iterate_selector_prefers_the_earliest_tie():
    reference = Image.full((4, 4), 0.5)
    stream = [
        (0, Image.full((4, 4), 0.2)),
        (1, Image.full((4, 4), 0.45)),
        (2, Image.full((4, 4), 0.45)),
        (3, Image.full((4, 4), 0.9)),
    ]
    k, image = best_iterate_selector(iter(stream), reference)
    assert k == 1 and image is stream[1][1]
    with pytest.raises(EmptyStreamError):
        best_iterate_selector(iter([]), reference)


def test_oracle_stopped_richardson_lucy(gaussian_op, toy_problem):
    clean, observed = toy_problem
    k, best = best_iterate_selector(richardson_lucy_iterates(observed, gaussian_op, 60, alpha=100.0), clean)
    assert 0 < k <= 60
    assert best.shape == clean.shape
