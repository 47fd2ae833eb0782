import numpy as np
import pytest
from scipy import stats

from cdiff.errors import (
    InfeasiblePointError,
    ModelDomainMismatchError,
    UnsupportedDomainError,
)
from cdiff.evaluation import KernelSpec, mmd2
from cdiff.geometry import make_domain, make_simplex
from cdiff.sampling import (
    LowTempConfig,
    Mixture,
    backward_sample,
    check_method,
    default_mixture,
    forward_chain,
    forward_record,
    forward_slices,
    hit_and_run,
    lowtemp_lambda,
    make_synthetic_dataset,
    rejection_uniform,
    reverse_chain,
    score_multiplier,
    stratified_steps,
    uniform_reference,
)
from cdiff.schedule import NoiseSchedule
from cdiff.score import ScoreModel


class ZeroRng:
    def standard_normal(self, shape):
        return np.zeros(shape)


def zero_model(domain):
    model = ScoreModel.init(domain, np.random.default_rng(0), 1, 4)
    model.params = model.params.zeros_like()
    model.meta["domain_hash"] = domain.hash()
    return model


class TestHitAndRun:
    def test_zero_steps(self):
        x0 = np.array([0.2, 0.3])
        np.testing.assert_array_equal(hit_and_run(make_simplex(2), x0, 0, None), x0)

    def test_one_step_on_interval_is_uniform(self):
        dom = make_domain("interval")
        X = hit_and_run(dom.constrained, np.full((20_000, 1), 0.9), 1, np.random.default_rng(0))
        assert stats.kstest(X[:, 0], "uniform").pvalue > 0.01

    def test_mmd_decreases_with_steps(self):
        rng = np.random.default_rng(1)
        cset = make_simplex(2)
        ref = rejection_uniform(cset, 3000, rng)
        x0 = np.full((3000, 2), 0.05)
        kernel = KernelSpec(bandwidth=0.2)
        vals = [mmd2(hit_and_run(cset, x0, k, rng), ref, kernel) for k in (1, 10, 50)]
        assert vals[0] > vals[1] > vals[2]
        assert abs(mmd2(hit_and_run(cset, x0, 200, rng), ref, kernel)) < 1e-3

    def test_exterior_start(self):
        with pytest.raises(InfeasiblePointError):
            hit_and_run(make_simplex(2), np.array([0.8, 0.8]), 3, np.random.default_rng(0))


class TestUniformReference:
    def test_torus(self):
        X = uniform_reference(make_domain("torus", dim=2), 10_000, np.random.default_rng(2))
        for j in range(2):
            assert stats.kstest(X[:, j], stats.uniform(0, 2 * np.pi).cdf).pvalue > 0.01

    def test_disc_annulus_counts(self):
        from cdiff.geometry import ConstraintSet, SphereConstraint
        disc = ConstraintSet(2, spheres=[SphereConstraint([0.0, 0.0], 1.0)])
        X = uniform_reference(disc, 100_000, np.random.default_rng(3))
        r = np.linalg.norm(X, axis=1)
        assert np.all(r < 1)
        # area fraction of r < 0.5 is 1/4
        assert abs(np.mean(r < 0.5) - 0.25) < 0.005

    def test_simplex_mean(self):
        X = uniform_reference(make_domain("simplex", dim=2), 100_000, np.random.default_rng(4))
        np.testing.assert_allclose(X.mean(axis=0), [1 / 3, 1 / 3], atol=0.01)

    def test_product_domain(self):
        dom = make_domain("hypercube", dim=2, periodic_dims=1)
        X = uniform_reference(dom, 5000, np.random.default_rng(5))
        assert X.shape == (5000, 3)
        assert np.all(dom.contains(X))

    def test_unbounded(self):
        from cdiff.geometry import ConstraintSet
        half = ConstraintSet.from_arrays([[1.0, 0.0]], [1.0])
        with pytest.raises(UnsupportedDomainError):
            uniform_reference(half, 10, np.random.default_rng(0))


class TestForward:
    def test_stratified_steps(self):
        sched = NoiseSchedule(N=1000)
        steps = stratified_steps(5000, 4, sched, np.random.default_rng(0))
        for j in range(4):
            assert steps[:, j].min() >= 250 * j + 1
            assert steps[:, j].max() <= 250 * (j + 1)

    def test_single_slice(self):
        dom = make_domain("simplex", dim=2)
        data = np.full((50, 2), 0.3)
        sl = forward_slices(data, "reflected", dom, NoiseSchedule(N=100), 1,
                            np.random.default_rng(1))
        assert len(sl) == 50
        np.testing.assert_array_equal(sl.origin_index, np.arange(50))
        assert np.all((sl.times > 0) & (sl.times <= 1))

    @pytest.mark.parametrize("method", ["reflected", "barrier"])
    def test_slices_are_interior(self, method):
        dom = make_domain("hypercube", dim=3)
        data = np.random.default_rng(2).uniform(-0.9, 0.9, size=(500, 3))
        sl = forward_slices(data, method, dom, NoiseSchedule(N=200), 4, np.random.default_rng(3))
        assert len(sl) == 2000
        assert np.all(dom.contains(sl.states, margin=-1e-12))
        np.testing.assert_array_equal(sl.origin_index, np.repeat(np.arange(500), 4))

    def test_exterior_data_rejected(self):
        with pytest.raises(InfeasiblePointError):
            forward_slices(np.array([[1.5]]), "reflected", make_domain("interval"),
                           NoiseSchedule(N=10), 2, np.random.default_rng(0))

    def test_record_shapes_and_callback(self):
        dom = make_domain("interval")
        sched = NoiseSchedule(N=40)
        data = np.full((6, 1), 0.4)
        steps = np.tile([5, 40], (6, 1))
        rec = forward_record(data, "reflected", dom, sched, steps, np.random.default_rng(7))
        got = {}
        forward_chain(data, "reflected", dom, sched, ZeroRng(),
                      record=lambda k, X: got.setdefault(k, X))
        assert sorted(got) == list(range(1, 41))
        assert rec.shape == (6, 2, 1)
        assert np.all(dom.contains(rec.reshape(-1, 1)))

    def test_record_rejects_bad_steps(self):
        with pytest.raises(ValueError):
            forward_record(np.full((1, 1), 0.4), "reflected", make_domain("interval"),
                           NoiseSchedule(N=10), np.array([[3, 2]]), np.random.default_rng(0))

    @pytest.mark.parametrize("method", ["reflected", "barrier"])
    def test_terminal_marginal_is_uniform(self, method):
        dom = make_domain("interval")
        sched = NoiseSchedule(T=5.0, N=5000)
        data = np.full((5000, 1), 0.1)
        steps = np.full((5000, 1), sched.N)
        X = forward_record(data, method, dom, sched, steps, np.random.default_rng(8))[:, 0, 0]
        assert stats.kstest(X, "uniform").pvalue > 0.001


class TestSynthetic:
    def test_component_weight(self):
        dom = make_domain("hypercube", dim=2)
        _, labels = make_synthetic_dataset(dom, default_mixture(dom), 100_000,
                                           np.random.default_rng(0), return_labels=True)
        assert abs(np.mean(labels == 0) - 0.7) < 0.01

    def test_vanishing_variance(self):
        dom = make_domain("simplex", dim=3)
        mix = Mixture(((0.1, 0.2, 0.3),), (1.0,), 1e-24)
        X = make_synthetic_dataset(dom, mix, 100, np.random.default_rng(1))
        np.testing.assert_allclose(X, np.tile([0.1, 0.2, 0.3], (100, 1)), atol=1e-10)

    def test_exterior_centre(self):
        dom = make_domain("interval")
        with pytest.raises(InfeasiblePointError):
            make_synthetic_dataset(dom, Mixture(((1.2,),), (1.0,)), 10, np.random.default_rng(0))

    def test_samples_inside(self):
        dom = make_domain("simplex", dim=3)
        X = make_synthetic_dataset(dom, default_mixture(dom), 20_000, np.random.default_rng(2))
        assert np.all(dom.contains(X, margin=-1e-12))

    def test_default_mixtures(self):
        cube = default_mixture(make_domain("hypercube", dim=2))
        assert cube.centers == ((0.5, 0.5), (-0.5, -0.5)) and cube.weights == (0.7, 0.3)
        simplex = default_mixture(make_domain("simplex", dim=2))
        np.testing.assert_allclose(simplex.centers, [[0.7, 0.1], [0.1, 0.7]])
        assert simplex.sigma2 == 0.01

    def test_mixture_roundtrip(self):
        mix = default_mixture(make_domain("simplex", dim=3))
        again = Mixture.from_dict(mix.to_dict())
        np.testing.assert_allclose(again.centers, mix.centers)
        assert again.weights == mix.weights


class TestLowTemp:
    def test_validation(self):
        with pytest.raises(ValueError):
            LowTempConfig(lambda0=0.5)
        with pytest.raises(ValueError):
            LowTempConfig(psi=-1.0)

    def test_lambda_endpoints(self):
        sched = NoiseSchedule()
        lt = LowTempConfig(lambda0=4.0)
        assert lowtemp_lambda(lt, sched, 0.0) == pytest.approx(4.0)
        assert lowtemp_lambda(lt, sched, 1.0) == pytest.approx(1.0, abs=0.02)
        assert lowtemp_lambda(LowTempConfig(), sched, 0.3) == pytest.approx(1.0)

    def test_multiplier(self):
        sched = NoiseSchedule()
        lt = LowTempConfig(lambda0=2.0, psi=0.5)
        assert score_multiplier(lt, sched, 0.4) == pytest.approx(
            lowtemp_lambda(lt, sched, 0.4) + 0.5)

    def test_reverse_drift_uses_multiplier(self):
        dom = make_domain("torus", dim=1)
        sched = NoiseSchedule(N=50)
        lt = LowTempConfig(lambda0=3.0)
        out = reverse_chain(lambda tau, X: np.full_like(X, 0.01), "reflected", dom, sched,
                            np.array([[1.0]]), ZeroRng(), lt)
        tau = sched.T - np.arange(50) * sched.gamma
        shift = np.sum(sched.gamma * sched.beta(tau) * lowtemp_lambda(lt, sched, tau) * 0.01)
        assert out[0, 0] == pytest.approx(1.0 + shift, abs=1e-12)

    def test_psi_scales_noise(self):
        dom = make_domain("torus", dim=1)
        sched = NoiseSchedule(N=20)
        x0 = np.full((20_000, 1), np.pi)
        out = reverse_chain(lambda tau, X: np.zeros_like(X), "reflected", dom, sched, x0,
                            np.random.default_rng(4), LowTempConfig(psi=0.5), t_stop=0.9)
        tau = sched.T - np.arange(2) * sched.gamma
        var = 1.5 * np.sum(sched.gamma * sched.beta(tau))
        assert np.var(out) == pytest.approx(var, rel=0.05)


class TestBackwardSample:
    def test_domain_mismatch(self):
        model = zero_model(make_domain("hypercube", dim=2))
        with pytest.raises(ModelDomainMismatchError):
            backward_sample(model, "reflected", make_domain("simplex", dim=2), NoiseSchedule(N=5),
                            10, rng=np.random.default_rng(0))

    def test_zero_score_keeps_uniform(self):
        dom = make_domain("interval")
        X = backward_sample(zero_model(dom), "reflected", dom, NoiseSchedule(N=100), 5000,
                            rng=np.random.default_rng(1))
        assert stats.kstest(X[:, 0], "uniform").pvalue > 0.001

    def test_workers_do_not_change_output(self):
        dom = make_domain("simplex", dim=2)
        model = ScoreModel.init(dom, np.random.default_rng(0), 1, 8)
        kw = dict(n=300, rng=None, chunk=64)
        a = backward_sample(model, "barrier", dom, NoiseSchedule(N=20), workers=1,
                            **{**kw, "rng": np.random.default_rng(2)})
        b = backward_sample(model, "barrier", dom, NoiseSchedule(N=20), workers=3,
                            **{**kw, "rng": np.random.default_rng(2)})
        np.testing.assert_array_equal(a, b)
        assert np.all(dom.contains(a))


class TestCheckMethod:
    def test_unknown(self):
        with pytest.raises(ValueError):
            check_method("langevin", make_domain("interval"))

    def test_barrier_needs_linear(self):
        with pytest.raises(UnsupportedDomainError):
            check_method("barrier", make_domain("cholesky_ball", dim=2, C=1.0))
