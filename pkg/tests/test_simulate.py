import numpy as np
import pytest
from scipy.special import expit

from msplogit.model import Cluster, ClusteredDataset, Theta
from msplogit.optimize import FitOptions
from msplogit.simulate import (
    SimulationDesign,
    percentile_table,
    run_replication,
    run_study,
    simulate_responses,
)

from conftest import make_dataset, separation_dataset


def _rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


class TestSimulateResponses:
    def test_degenerate_probabilities(self):
        template = make_dataset(k=5, n_i=10, p=1, seed=0)
        truth = Theta(np.array([-50.0]), np.array([-10.0]))
        sim = simulate_responses(template, truth, _rng(1))
        assert sim.y.sum() == 0.0

    def test_mean_concentration(self):
        rows, k = 1_000_000, 1000
        clusters = tuple(
            Cluster(np.zeros(rows // k), np.ones((rows // k, 1)), np.ones((rows // k, 1)))
            for _ in range(k)
        )
        template = ClusteredDataset(clusters)
        sim = simulate_responses(template, Theta(np.zeros(1), np.array([-10.0])), _rng(7))
        assert abs(sim.y.mean() - 0.5) < 0.002

    def test_within_cluster_correlation_against_mc_oracle(self):
        # Direct vectorized Monte-Carlo oracle for corr(y1, y2) within a
        # cluster of size 2 under beta=0, sigma=2.
        oracle_rng = np.random.default_rng(12345)
        n = 10_000_000
        u = 2.0 * oracle_rng.standard_normal(n)
        p = expit(u)
        y1 = oracle_rng.random(n) < p
        y2 = oracle_rng.random(n) < p
        oracle_corr = np.corrcoef(y1, y2)[0, 1]

        k = 200_000
        clusters = tuple(Cluster(np.zeros(2), np.ones((2, 1)), np.ones((2, 1))) for _ in range(k))
        template = ClusteredDataset(clusters)
        sim = simulate_responses(template, Theta(np.zeros(1), np.array([np.log(2.0)])), _rng(9))
        pairs = sim.y.reshape(k, 2)
        sim_corr = np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1]
        assert abs(sim_corr - oracle_corr) < 0.01
        assert sim_corr > 0

    def test_deterministic_given_state(self):
        template = make_dataset(k=4, n_i=5, p=2, seed=2)
        truth = Theta(np.array([0.2, -0.4]), np.array([0.3]))
        a = simulate_responses(template, truth, _rng(42))
        b = simulate_responses(template, truth, _rng(42))
        assert np.array_equal(a.y, b.y)


class TestPercentileTable:
    def test_constant_sample(self):
        table = percentile_table(np.full(10, 3.25))
        assert np.allclose(table, 3.25)

    def test_median_of_centered_range(self):
        sample = np.arange(1, 101, dtype=float) - 50.5
        table = percentile_table(sample, probs=(50.0,))
        assert table[0] == pytest.approx(0.0, abs=1e-12)

    def test_normal_tail_quantile(self):
        rng = np.random.default_rng(3)
        sample = rng.standard_normal(100_000)
        table = percentile_table(sample, probs=(95.0,))
        assert table[0] == pytest.approx(1.645, abs=0.02)

    def test_empty_marker(self):
        table = percentile_table(np.empty(0))
        assert np.isnan(table).all()
        assert table.shape == (7,)


def small_design(R=3, seed=11, methods=None):
    template = make_dataset(k=5, n_i=6, p=2, seed=1)
    truth = Theta(np.array([0.4, -0.8]), np.array([-0.2]))
    if methods is None:
        methods = (FitOptions(method="mspl", quadrature=20),)
    return SimulationDesign(
        template=template, theta_true=truth, replications=R, seed=seed, methods=methods
    )


class TestRunStudy:
    def test_single_replication_degenerate_summary(self):
        design = small_design(R=1)
        summary = run_study(design)
        ms = summary.methods["mspl"]
        assert ms.retained == 1
        assert np.allclose(ms.variance, 0.0)
        assert np.allclose(ms.bias, ms.estimates[0] - summary.truth)
        assert np.allclose(ms.mse, ms.bias**2)

    def test_mse_decomposition(self):
        design = small_design(R=12)
        summary = run_study(design)
        ms = summary.methods["mspl"]
        assert np.abs(ms.mse - (ms.bias**2 + ms.variance)).max() < 1e-10

    def test_bitwise_reproducibility(self):
        design = small_design(R=6)
        a = run_study(design)
        b = run_study(design)
        for label in a.methods:
            assert np.array_equal(a.methods[label].estimates, b.methods[label].estimates)
            assert np.array_equal(a.methods[label].ses, b.methods[label].ses)
            assert np.array_equal(a.methods[label].coverage, b.methods[label].coverage)

    def test_order_independence(self):
        design = small_design(R=6)
        summary = run_study(design)
        order = [3, 0, 5, 1, 4, 2]
        records = [None] * 6
        for r in order:
            records[r] = run_replication(design, r)
        estimates = np.array([rec[0][0] for rec in records])
        assert np.array_equal(estimates, np.vstack([
            run_replication(design, r)[0][0] for r in range(6)
        ]))
        assert np.array_equal(summary.methods["mspl"].estimates, estimates[
            np.array([rec[0][3] and not rec[0][4] for rec in records])
        ])

    def test_worker_count_does_not_change_results(self):
        design = small_design(R=6)
        serial = run_study(design, workers=1)
        parallel = run_study(design, workers=2)
        for label in serial.methods:
            assert np.array_equal(
                serial.methods[label].estimates, parallel.methods[label].estimates
            )

    def test_per_method_discard_policy(self):
        # On separated data the unpenalized fit gets discarded while the
        # penalized one is retained, within the same replications.
        template = separation_dataset()
        truth = Theta(np.array([0.0, 4.0]), np.array([-0.5]))
        design = SimulationDesign(
            template=template,
            theta_true=truth,
            replications=6,
            seed=5,
            methods=(
                FitOptions(method="mspl", quadrature=20),
                FitOptions(method="ml", quadrature=20),
            ),
        )
        summary = run_study(design)
        assert summary.methods["mspl"].retained == 6
        assert summary.methods["ml"].retained < 6

    def test_design_validation(self):
        with pytest.raises(ValueError):
            small_design(R=0)
        template = make_dataset(k=5, n_i=6, p=2, seed=1)
        with pytest.raises(ValueError):
            SimulationDesign(
                template=template,
                theta_true=Theta(np.zeros(3), np.zeros(1)),
                replications=2,
                seed=0,
                methods=(FitOptions(),),
            )
