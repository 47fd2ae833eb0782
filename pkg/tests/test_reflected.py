import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cdiff.errors import InfeasiblePointError, RunawayReflectionError
from cdiff.geometry import (
    ConstraintSet,
    DomainSpec,
    SphereConstraint,
    make_domain,
    make_hypercube,
    make_interval,
    make_simplex,
)
from cdiff.reflected import (
    reflect_batch,
    reflect_batch_compiled,
    reflect_chain_compiled,
    reflect_domain_batch,
    reflected_backward_step,
    reflected_forward_path,
    reflected_random_walk,
    reflected_step,
)
from cdiff.schedule import NoiseSchedule


class ZeroRng:
    """Stands in for a Generator whose normal draws are all zero."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def disc_in_square():
    cset = make_hypercube(2)
    return ConstraintSet(2, cset.linear, [SphereConstraint([0.3, 0.0], 1.0)])


class TestReflectedStep:
    def test_single_bounce(self):
        tr = reflected_step(np.array([0.8]), np.array([0.5]), make_interval())
        assert tr.endpoint[0] == pytest.approx(0.7, abs=1e-11)
        assert tr.bounces == 1
        assert tr.path_length_used == pytest.approx(0.5, abs=1e-10)

    def test_short_step_is_translation(self):
        x = np.array([0.1, -0.2])
        tr = reflected_step(x, np.array([0.05, 0.3]), make_hypercube(2))
        np.testing.assert_allclose(tr.endpoint, [0.15, 0.1], atol=1e-15)
        assert tr.bounces == 0

    def test_torus_wraps(self):
        tr = reflected_step(np.array([6.0]), np.array([0.5]), make_domain("torus", dim=1))
        assert tr.endpoint[0] == pytest.approx(6.5 - 2 * np.pi, abs=1e-12)
        assert tr.bounces == 0

    def test_many_bounces_in_interval(self):
        # 0.5 + 10.25 unfolds to 0.75 after five full traversals of length 2
        tr = reflected_step(np.array([0.5]), np.array([10.25]), make_interval())
        assert tr.endpoint[0] == pytest.approx(0.75, abs=1e-9)
        assert tr.bounces == 10

    def test_sphere_reflection(self):
        cset = ConstraintSet(2, spheres=[SphereConstraint([0.0, 0.0], 1.0)])
        tr = reflected_step(np.array([0.0, 0.0]), np.array([1.5, 0.0]), cset)
        np.testing.assert_allclose(tr.endpoint, [0.5, 0.0], atol=1e-10)
        assert tr.bounces == 1

    def test_corner_hit_stays_inside(self):
        dom = make_hypercube(2)
        tr = reflected_step(np.array([0.5, 0.5]), np.array([0.7, 0.7]), dom)
        assert dom.contains(tr.endpoint, margin=-1e-9)
        np.testing.assert_allclose(tr.endpoint, [0.8, 0.8], atol=1e-9)

    def test_product_domain(self):
        dom = make_domain("interval", periodic_dims=1)
        tr = reflected_step(np.array([0.8, 6.0]), np.array([0.5, 0.5]), dom)
        assert tr.endpoint[0] == pytest.approx(0.7, abs=1e-11)
        assert tr.endpoint[1] == pytest.approx(6.5 - 2 * np.pi, abs=1e-12)
        assert tr.path_length_used == pytest.approx(np.hypot(0.5, 0.5), abs=1e-10)

    def test_rejects_exterior_start(self):
        with pytest.raises(InfeasiblePointError):
            reflected_step(np.array([1.2]), np.array([0.1]), make_interval())

    def test_runaway(self):
        X = np.array([[0.5]])
        with pytest.raises(RunawayReflectionError):
            reflect_batch_compiled(X, np.array([[100.0]]), make_interval(), max_bounces=10)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-0.99, 0.99), min_size=2, max_size=2),
           st.lists(st.floats(-5, 5), min_size=2, max_size=2))
    def test_arclength_and_containment(self, x, v):
        cset = disc_in_square()
        x = np.array(x)
        if not cset.contains(x):
            return
        tr = reflected_step(x, np.array(v), cset)
        assert tr.path_length_used == pytest.approx(np.linalg.norm(v), abs=1e-10)
        assert cset.contains(tr.endpoint, margin=-1e-9)


class TestCompiledAgainstReference:
    @pytest.mark.parametrize("make", [lambda: make_hypercube(3), lambda: make_simplex(3),
                                      disc_in_square])
    def test_same_endpoints(self, make):
        cset = make()
        rng = np.random.default_rng(7)
        from cdiff.sampling import rejection_uniform
        X = rejection_uniform(cset, 500, rng)
        V = 0.8 * rng.standard_normal(X.shape)
        ref, ref_b, _ = reflect_batch(X, V, cset)
        out, b = reflect_batch_compiled(X, V, cset)
        np.testing.assert_allclose(out, ref, atol=1e-10)
        np.testing.assert_array_equal(b, ref_b)

    def test_chain_records_requested_steps(self):
        dom = make_domain("hypercube", dim=2)
        rng = np.random.default_rng(0)
        X = np.zeros((3, 2))
        V = 0.1 * rng.standard_normal((5, 2, 3))
        steps = np.array([[1, 3], [2, 2], [5, 5]])
        final, rec, _ = reflect_chain_compiled(X, V, np.ones(5), dom, rec_steps=steps)
        Y = X.copy()
        states = []
        for k in range(5):
            Y, _ = reflect_domain_batch(Y, V[k].T, dom)
            states.append(Y)
        for i in range(3):
            for j in range(2):
                np.testing.assert_allclose(rec[i, j], states[steps[i, j] - 1][i], atol=1e-15)
        np.testing.assert_allclose(final, states[-1], atol=1e-15)

    def test_inputs_not_modified(self):
        X = np.full((4, 1), 0.5)
        reflect_domain_batch(X, np.full((4, 1), 0.7), make_interval())
        np.testing.assert_array_equal(X, 0.5)


class TestWalks:
    def test_zero_noise_constant_path(self):
        path = reflected_random_walk(np.array([0.3, 0.1]), lambda t, x: np.zeros_like(x),
                                     NoiseSchedule(N=20), make_hypercube(2), ZeroRng())
        assert path.shape == (21, 2)
        np.testing.assert_array_equal(path, np.tile([0.3, 0.1], (21, 1)))

    def test_drift_only_walk(self):
        sched = NoiseSchedule.constant(T=1.0, N=10)
        path = reflected_random_walk(np.array([0.5]), lambda t, x: np.ones_like(x), sched,
                                     make_interval(), ZeroRng())
        # five steps reach the wall, then each push of 0.1 bounces back and forth
        np.testing.assert_allclose(path[1:6, 0], [0.6, 0.7, 0.8, 0.9, 1.0], atol=1e-9)
        np.testing.assert_allclose(path[6:, 0], [0.9, 1.0, 0.9, 1.0, 0.9], atol=1e-9)

    def test_forward_path_stays_inside(self):
        rng = np.random.default_rng(1)
        dom = make_domain("simplex", dim=3)
        X = reflected_forward_path(np.full((2000, 3), 0.2), NoiseSchedule(N=200), dom, rng)
        assert np.all(dom.contains(X, margin=-1e-9))

    def test_backward_step_zero_score_is_noise(self):
        sched = NoiseSchedule()
        x = np.full((4, 2), 0.1)
        out_a = reflected_backward_step(x, 0.2, np.zeros_like(x), sched, make_hypercube(2),
                                        np.random.default_rng(5))
        z = np.random.default_rng(5).standard_normal(x.shape)
        gb = sched.gamma * sched.beta(sched.T - 0.2)
        np.testing.assert_allclose(out_a, x + np.sqrt(gb) * z, atol=1e-14)

    def test_periodic_marginal_uniform(self):
        rng = np.random.default_rng(2)
        dom = DomainSpec(None, 1)
        X = reflected_forward_path(np.full((10_000, 1), 1.0), NoiseSchedule.constant(T=20, N=100),
                                   dom, rng)
        assert np.all((X >= 0) & (X < 2 * np.pi))
        assert stats.kstest(X[:, 0], stats.uniform(0, 2 * np.pi).cdf).statistic < 0.02

    def test_boundary_hits_are_rare(self):
        rng = np.random.default_rng(3)
        cset = make_hypercube(2)
        X = rng.uniform(-1, 1, size=(1_000_000, 2))
        V = 0.1 * rng.standard_normal(X.shape)
        out, _ = reflect_batch_compiled(X, V, cset)
        on_surface = np.min(cset.b - out @ cset.A.T, axis=1) < 1e-9
        assert on_surface.mean() < 1e-3
        assert np.all(cset.contains(out, margin=-1e-9))
