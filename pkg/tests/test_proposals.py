import numpy as np
import pytest

from bridgesim.auxiliary import (
    LinearAuxiliary,
    backward_tables_closed,
    simple_auxiliary,
)
from bridgesim.linalg_ode import expm, solve_lyapunov
from bridgesim.proposals import (
    adjusted_residual_v1,
    adjusted_residual_v2,
    delyon_hu,
    guided,
    kappa,
    lna_conditional_mean,
    lna_residual,
    residual,
)
from bridgesim.reference import (
    EXAMPLES,
    ExampleTag,
    ou_bridge_exact,
    ou_bridge_mean,
    ou_model,
    ou_sine_model,
    sine_model,
)
from bridgesim.sde_core import (
    BridgeSpec,
    DiffusionModel,
    TimeGrid,
    linear_model,
    sample_wiener,
    solve_flow,
)


def brownian_model(d=1, sigma=1.0):
    return linear_model(np.zeros((d, d)), np.zeros(d), sigma * np.eye(d), "brownian")


def state_dependent_model():
    """Non-constant dispersion, for checks that must hold beyond constant sigma."""

    def drift(t, x):
        x = np.asarray(x)
        return -np.sin(2 * np.pi * x) - 0.3 * x

    def dispersion(t, x):
        return (0.2 + 0.1 * np.cos(np.asarray(x)) + 0.05 * t)[..., None]

    return DiffusionModel(1, 1, drift, dispersion, name="state-dependent")


def simple_guided(model, spec, grid, dW):
    flow = solve_flow(model, spec.u, grid)
    table = backward_tables_closed(simple_auxiliary(model, spec, flow), grid, spec)
    return guided(model, spec, grid, dW, table)


@pytest.fixture
def grid():
    return TimeGrid.uniform(1.0, h=1e-3)


def test_kappa():
    spec = BridgeSpec([0.0], [2.0], 4.0)
    np.testing.assert_array_equal(kappa(spec, 3.0, np.array([1.0])), [1.0])


class TestDelyonHu:
    def test_zero_noise_is_straight_line(self, grid):
        m = brownian_model(sigma=0.0)
        spec = BridgeSpec([0.5], [2.0], 1.0)
        p = delyon_hu(m, spec, grid, sample_wiener(grid, 1, 0))
        np.testing.assert_allclose(p.states[:, 0], 0.5 + 1.5 * grid.nodes, atol=1e-12)

    def test_lambda_zero_ignores_drift(self, grid):
        spec = BridgeSpec([0.0], [1.0], 1.0)
        dW = sample_wiener(grid, 1, 3, 4)
        a = delyon_hu(sine_model(0.5), spec, grid, dW, lam=0)
        b = delyon_hu(brownian_model(sigma=0.5), spec, grid, dW, lam=0)
        np.testing.assert_array_equal(a.states, b.states)

    def test_lambda_one_uses_drift(self, grid):
        spec = BridgeSpec([0.0], [1.0], 1.0)
        dW = sample_wiener(grid, 1, 3, 4)
        a = delyon_hu(ou_model(2.0, 0.5), spec, grid, dW, lam=0)
        b = delyon_hu(ou_model(2.0, 0.5), spec, grid, dW, lam=1)
        assert np.abs(a.states - b.states).max() > 1e-3

    def test_bad_lambda(self, grid):
        with pytest.raises(ValueError):
            delyon_hu(brownian_model(), BridgeSpec([0.0], [1.0], 1.0), grid, sample_wiener(grid, 1, 0), lam=2)


class TestResidual:
    def test_forms_agree(self):
        ex = EXAMPLES[ExampleTag.OU_SINE]
        m, spec = ex.model(), ex.spec()
        g = TimeGrid.uniform(spec.T, h=1e-3)
        dW = sample_wiener(g, 1, 8, 20)
        a = residual(m, spec, g, dW, form="residual")
        b = residual(m, spec, g, dW, form="direct")
        assert np.abs(a.states - b.states).max() <= 1e-12

    def test_driftless_is_delyon_hu(self, grid):
        m = brownian_model(sigma=0.7)
        spec = BridgeSpec([0.3], [-1.0], 1.0)
        dW = sample_wiener(grid, 1, 2, 10)
        a = residual(m, spec, grid, dW)
        b = delyon_hu(m, spec, grid, dW, lam=0)
        assert np.abs(a.states - b.states).max() <= 1e-12

    def test_sine_example_reduces_to_pure_pulling(self, grid):
        m = sine_model(0.5)
        spec = BridgeSpec([0.0], [1.0], 1.0)
        dW = sample_wiener(grid, 1, 2, 10)
        a = residual(m, spec, grid, dW)
        b = delyon_hu(m, spec, grid, dW, lam=0)
        assert np.abs(a.states - b.states).max() <= 1e-12

    def test_endpoint_and_start(self, grid):
        m = ou_model(1.0, 0.3)
        spec = BridgeSpec([0.2], [0.9], 1.0)
        p = residual(m, spec, grid, sample_wiener(grid, 1, 1, 5))
        assert np.all(p.states[:, -1, 0] == 0.9)
        assert np.all(p.states[:, 0, 0] == 0.2)

    def test_unknown_form(self, grid):
        with pytest.raises(ValueError):
            residual(ou_model(), BridgeSpec([0.0], [1.0], 1.0), grid, sample_wiener(grid, 1, 0), form="x")


def _linear_bridge_mean(B, beta, a, u, v, T, t):
    """Gaussian conditioning on the joint law of (X_t, X_T), via expm/Lyapunov."""
    lam = solve_lyapunov(B, a)
    mu = np.linalg.solve(B, -beta)

    def mean(s):
        return expm(B * s) @ (u - mu) + mu

    def cov(s):
        E = expm(B * s)
        return lam - E @ lam @ E.T

    cross = cov(t) @ expm(B * (T - t)).T
    return mean(t) + cross @ np.linalg.solve(cov(T), v - mean(T))


class TestLNAResidual:
    def test_linear_model_mean_is_exact_bridge_mean(self):
        B = np.array([[-1.0, 0.5], [-0.3, -0.8]])
        beta = np.array([0.2, -0.1])
        s = np.array([[0.5, 0.0], [0.1, 0.4]])
        m = linear_model(B, beta, s)
        T = 1.5
        spec = BridgeSpec([1.0, -0.5], [0.2, 0.7], T)
        g = TimeGrid.uniform(T, h=1e-3)
        z = lna_conditional_mean(m, spec, g)
        for i in (0, 300, 750, 1400, 1500):
            want = _linear_bridge_mean(B, beta, s @ s.T, spec.u, spec.v, T, g.nodes[i])
            np.testing.assert_allclose(z[i], want, atol=1e-9)

    def test_ou_mean(self):
        ex = EXAMPLES[ExampleTag.OU]
        spec = ex.spec()
        g = TimeGrid.uniform(spec.T, h=1e-3)
        z = lna_conditional_mean(ex.model(), spec, g)
        np.testing.assert_allclose(z, ou_bridge_mean(2.0, spec, g.nodes), atol=1e-9)

    def test_constant_drift_gives_time_weighted_conditioning(self):
        def drift(t, x):
            return np.full(np.shape(x), 0.4)

        def dispersion(t, x):
            return np.full(np.shape(x)[:-1] + (1, 1), 1.0 + t)

        m = DiffusionModel(1, 1, drift, dispersion, lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)))
        T = 1.0
        spec = BridgeSpec([0.0], [1.0], T)
        g = TimeGrid.uniform(T, 1000)
        z = lna_conditional_mean(m, spec, g)
        P = ((1 + g.nodes) ** 3 - 1) / 3
        want = 0.4 * g.nodes + P / P[-1] * (1.0 - 0.4 * T)
        np.testing.assert_allclose(z[:, 0], want, atol=1e-11)

    def test_zero_noise_path_is_the_mean(self, grid):
        m = ou_sine_model(0.3)
        spec = BridgeSpec([0.3], [1.0], 1.0)
        z = lna_conditional_mean(m, spec, grid)
        dW = sample_wiener(grid, 1, 0)
        p = lna_residual(m, spec, grid, type(dW)(0.0 * dW.increments))
        np.testing.assert_array_equal(p.states, z)

    def test_endpoint(self):
        ex = EXAMPLES[ExampleTag.OU_SINE]
        m, spec = ex.model(), ex.spec()
        g = TimeGrid.uniform(spec.T, h=1e-2)
        p = lna_residual(m, spec, g, sample_wiener(g, 1, 1, 3))
        assert np.all(p.states[:, -1, 0] == spec.v[0])


class TestGuided:
    def test_brownian_table_is_delyon_hu(self, grid):
        m = brownian_model(2)
        spec = BridgeSpec([0.0, 0.0], [1.0, -1.0], 1.0)
        table = backward_tables_closed(LinearAuxiliary.brownian(2), grid, spec)
        dW = sample_wiener(grid, 2, 5, 6)
        a = guided(m, spec, grid, dW, table)
        b = delyon_hu(m, spec, grid, dW, lam=0)
        assert np.abs(a.states - b.states).max() <= 1e-12

    def test_matching_ou_auxiliary_is_exact_bridge(self):
        ex = EXAMPLES[ExampleTag.OU]
        spec = ex.spec()
        g = TimeGrid.uniform(spec.T, h=1e-3)
        table = backward_tables_closed(LinearAuxiliary.constant([[-2.0]], [0.0], [[0.1]]), g, spec)
        dW = sample_wiener(g, 1, 12, 20)
        a = guided(ex.model(), spec, g, dW, table)
        b = ou_bridge_exact(2.0, 0.1, spec, g, dW)
        assert np.abs(a.states - b.states).max() <= 1e-9

    def test_simple_auxiliary_drift_formula(self):
        m = state_dependent_model()
        spec = BridgeSpec([0.1], [0.8], 2.0)
        g = TimeGrid.uniform(spec.T, 200)
        flow = solve_flow(m, spec.u, g)
        table = backward_tables_closed(simple_auxiliary(m, spec, flow), g, spec)
        dW = sample_wiener(g, 1, 1)
        p = guided(m, spec, g, dW, table)
        i = 57
        t, x, h = g.nodes[i], p.states[i], g.steps[i]
        integral = flow.states[-1] - flow.states[i]
        drift = m.b(t, x) + m.a(t, x)[0] @ np.linalg.inv(m.a(spec.T, spec.v)) @ (spec.v - x - integral) / (spec.T - t)
        want = x + drift * h + m.sigma(t, x)[0] @ dW.increments[i]
        np.testing.assert_allclose(p.states[i + 1], want, rtol=1e-13)

    def test_grid_mismatch(self, grid):
        spec = BridgeSpec([0.0], [1.0], 1.0)
        table = backward_tables_closed(LinearAuxiliary.brownian(1), TimeGrid.uniform(1.0, 10), spec)
        with pytest.raises(ValueError):
            guided(brownian_model(), spec, grid, sample_wiener(grid, 1, 0), table)


class TestAdjustedResidual:
    @pytest.mark.parametrize("tag", list(ExampleTag))
    def test_v2_is_simple_guided(self, tag):
        ex = EXAMPLES[tag]
        m, spec = ex.model(), ex.spec()
        g = TimeGrid.uniform(spec.T, h=1e-3)
        dW = sample_wiener(g, 1, 17, 10)
        a = adjusted_residual_v2(m, spec, g, dW)
        b = simple_guided(m, spec, g, dW)
        assert np.abs(a.states - b.states).max() <= 1e-9

    def test_v2_is_simple_guided_for_state_dependent_sigma(self):
        m = state_dependent_model()
        spec = BridgeSpec([0.1], [0.8], 2.0)
        g = TimeGrid.uniform(spec.T, h=1e-3)
        dW = sample_wiener(g, 1, 4, 10)
        assert np.abs(adjusted_residual_v2(m, spec, g, dW).states
                      - simple_guided(m, spec, g, dW).states).max() <= 1e-9

    def test_v1_linear_model_is_simple_guided(self):
        m = linear_model([[-1.0, 0.4], [0.0, -0.5]], [0.2, 0.0], [[0.3, 0.0], [0.1, 0.2]])
        spec = BridgeSpec([1.0, 0.0], [0.0, 1.0], 1.0)
        g = TimeGrid.uniform(1.0, h=1e-3)
        dW = sample_wiener(g, 2, 3, 10)
        assert np.abs(adjusted_residual_v1(m, spec, g, dW).states
                      - simple_guided(m, spec, g, dW).states).max() <= 1e-9

    def test_v1_equals_v2_for_constant_sigma(self, grid):
        m = sine_model(0.5)
        spec = BridgeSpec([0.0], [1.0], 1.0)
        dW = sample_wiener(grid, 1, 3, 5)
        assert np.abs(adjusted_residual_v1(m, spec, grid, dW).states
                      - adjusted_residual_v2(m, spec, grid, dW).states).max() <= 1e-12

    def test_v1_driftless_is_residual(self, grid):
        m = brownian_model(sigma=0.4)
        spec = BridgeSpec([0.0], [1.0], 1.0)
        dW = sample_wiener(grid, 1, 3, 5)
        assert np.abs(adjusted_residual_v1(m, spec, grid, dW).states
                      - residual(m, spec, grid, dW).states).max() <= 1e-12

    def test_v1_differs_from_residual_by_drift_term(self, grid):
        m = sine_model(0.5)
        spec = BridgeSpec([0.0], [1.0], 1.0)
        dW = sample_wiener(grid, 1, 3)
        a = adjusted_residual_v1(m, spec, grid, dW).states[:, 0]
        r = residual(m, spec, grid, dW).states[:, 0]
        # x(t) = 0 and b(0) = 0, so both agree at t_1 and then split by -sin(2 pi X_1) h
        assert a[1] == r[1]
        assert a[2] - r[2] == pytest.approx(-np.sin(2 * np.pi * a[1]) * 1e-3, rel=1e-9)

    def test_v1_rejects_state_dependent_sigma(self, grid):
        m = state_dependent_model()
        with pytest.raises(ValueError, match="v2"):
            adjusted_residual_v1(m, BridgeSpec([0.1], [0.8], 1.0), grid, sample_wiener(grid, 1, 0))


@pytest.mark.parametrize("sim", [
    lambda m, s, g, w: delyon_hu(m, s, g, w, 0),
    lambda m, s, g, w: delyon_hu(m, s, g, w, 1),
    residual, lna_residual, adjusted_residual_v1, adjusted_residual_v2, simple_guided,
])
def test_every_proposal_ends_at_v(sim):
    ex = EXAMPLES[ExampleTag.OU_SINE]
    m, spec = ex.model(), ex.spec()
    g = TimeGrid.uniform(spec.T, h=1e-2)
    p = sim(m, spec, g, sample_wiener(g, 1, 2, 7))
    assert np.all(p.states[:, -1, :] == spec.v)
    assert np.all(p.states[:, 0, :] == spec.u)


def test_guided_mean_path_closer_to_true_bridge_than_residual():
    ex = EXAMPLES[ExampleTag.OU]
    m, spec = ex.model(), ex.spec()
    g = TimeGrid.uniform(spec.T, h=1e-3)
    dW = sample_wiener(g, 1, 99, 1000)
    ref = ou_bridge_mean(2.0, spec, g.nodes)[:, 0]
    d_guided = np.abs(simple_guided(m, spec, g, dW).states[:, :, 0].mean(0) - ref).max()
    d_resid = np.abs(residual(m, spec, g, dW).states[:, :, 0].mean(0) - ref).max()
    assert d_guided < d_resid
