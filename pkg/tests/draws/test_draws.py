from efficient_vb.draws import DrawSet, state_column_names
from efficient_vb.eis import ProxyParams, StateApprox, calibrate
from efficient_vb.exceptions import ParameterDomainError
from efficient_vb.model import get_model, simulate
from efficient_vb.model.sv import SvModel
from efficient_vb.vb import VariationalParams
import numpy as np
import pytest

LGSS_PARAMS = np.array([0.5, 0.8, 0.6, 0.3])


def test_state_column_names():
    assert state_column_names(2, 1) == ["x[1]", "x[2]"]
    assert state_column_names(2, 2) == ["x[1,1]", "x[1,2]", "x[2,1]", "x[2,2]"]


def test_shape_validation():
    with pytest.raises(ParameterDomainError):
        DrawSet(names=["a", "b"], values=np.zeros((3, 1)))
    with pytest.raises(ParameterDomainError):
        DrawSet(names=["a"], values=np.zeros((0, 1)))
    with pytest.raises(ParameterDomainError):
        DrawSet(names=["a"], values=np.zeros((3, 1)), states=np.zeros((3, 4)))


def test_csv_with_states(tmp_path):
    rng = np.random.default_rng(0)
    draws = DrawSet(
        names=["x_bar", "rho"], values=rng.standard_normal((4, 2)), method="mcmc", states=rng.standard_normal((4, 3, 2))
    )
    draws.to_csv(str(tmp_path / "draws.csv"))
    draws.states_to_csv(str(tmp_path / "states.csv"))

    loaded = DrawSet.from_csv(str(tmp_path / "draws.csv"), "mcmc", str(tmp_path / "states.csv"), dim_state=2)

    assert loaded.names == ["x_bar", "rho"]
    assert list(draws.state_frame().columns[:2]) == ["x[1,1]", "x[1,2]"]
    np.testing.assert_allclose(loaded.values, draws.values)
    np.testing.assert_allclose(loaded.states, draws.states)


def test_state_frame_needs_states():
    with pytest.raises(ParameterDomainError):
        DrawSet(names=["a"], values=np.zeros((2, 1))).state_frame()


def test_from_variational_with_state_approximation():
    model = SvModel()
    params = np.array([-1.0, 0.95, 0.25])
    data, _ = simulate(model, params, 30, seed=1)
    proxy = ProxyParams(values=params)
    approx = StateApprox(model=model, data=data, proxy=proxy, kernel=calibrate(model, data, proxy, seed=0))
    lam = VariationalParams.initial(model.transform(params), n_factors=1, scale=0.05)

    draws = DrawSet.from_variational(
        model, lam, 200, np.random.default_rng(3), state_source=approx, n_state_draws=7, method="efficient-vb"
    )

    assert draws.names == ["x_bar", "rho", "sigma"]
    assert draws.values.shape == (200, 3)
    assert draws.states.shape == (7, 30, 1)
    assert np.all(draws.column("sigma") > 0.0)
    assert draws.means()["rho"] == pytest.approx(0.95, abs=0.02)


def test_from_variational_with_exact_sampler():
    model = get_model("lgss")
    data, _ = simulate(model, LGSS_PARAMS, 15, seed=2)
    lam = VariationalParams.initial(model.transform(LGSS_PARAMS), n_factors=1)

    draws = DrawSet.from_variational(
        model, lam, 10, np.random.default_rng(0), state_source=model.exact_state_sampler(data), n_state_draws=12
    )

    assert draws.states.shape == (12, 15, 1)
    assert draws.names == ["x_bar", "rho", "sigma", "obs_var"]


def test_from_variational_without_states():
    model = SvModel()
    lam = VariationalParams.initial(model.transform(np.array([-1.0, 0.9, 0.3])), n_factors=1)

    draws = DrawSet.from_variational(model, lam, 5, np.random.default_rng(0))

    assert draws.states is None
