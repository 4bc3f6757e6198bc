import json

import numpy as np
import pytest

from specfim.exceptions import ConfigError, ModelError
from specfim.model import (
    MimoSystem,
    ParameterIndex,
    RationalTF,
    freq_response,
    horner,
    load_system,
    param_gradient,
    save_system,
    system_from_dict,
)


def test_horner_matches_polyval():
    c = [1.5, -2.0, 0.5, 3.0]
    s = np.array([0.3j, 1 + 2j, -0.7])
    assert np.allclose(horner(c, s), np.polyval(c[::-1], s))


@pytest.mark.parametrize(
    "num, den, msg",
    [
        ([1.0], [1.0, 2.0], "monic"),
        ([1.0, 1.0], [1.0, 1.0], "strictly proper"),
        ([1.0], [-1.0, 1.0], "unstable"),
        ([1.0], [1.0, 0.0, 1.0], "unstable"),  # poles on the imaginary axis
        ([np.nan], [1.0, 1.0], "non-finite"),
    ],
)
def test_rational_tf_rejects(num, den, msg):
    with pytest.raises(ModelError, match=msg):
        RationalTF(num, den)


def test_reference_dc_gains(actual):
    assert actual[0, 0].dc_gain() == pytest.approx(3.2 / 1.5)
    assert actual[0, 1].dc_gain() == pytest.approx(3.1)
    assert (actual.p, actual.r) == (2, 2)


def test_parameter_index_order(actual):
    idx = ParameterIndex.from_system(actual)
    assert len(idx) == 12
    assert idx.labels()[:3] == ["b11^0", "a11^0", "a11^1"]
    assert np.allclose(idx.values(actual)[:3], [3.2, 1.5, 1.6])
    theta = idx.values(actual)
    theta2 = theta * 1.01
    assert np.allclose(idx.values(idx.with_values(actual, theta2)), theta2)


def test_param_gradient_matches_finite_differences(nominal):
    idx = ParameterIndex.from_system(nominal)
    w = np.linspace(-1, 1, 7)
    g = param_gradient(nominal, idx, w, 1.3)
    theta = idx.values(nominal)
    eps = 1e-6
    for l in range(len(idx)):
        tp, tm = theta.copy(), theta.copy()
        tp[l] += eps
        tm[l] -= eps
        fd = (freq_response(idx.with_values(nominal, tp), w, 1.3) - freq_response(idx.with_values(nominal, tm), w, 1.3)) / (2 * eps)
        assert np.allclose(g[:, l], fd, atol=1e-7, rtol=1e-6)


def test_freq_response_scalar():
    sys = MimoSystem([[RationalTF([2.0], [1.0, 1.0])]])
    G = freq_response(sys, np.array([0.0, 1.0]), 2.0)
    assert np.allclose(G[:, 0, 0], [2.0, 2.0 / (1 + 2j)])


def test_system_json_roundtrip(tmp_path, actual):
    path = tmp_path / "sys.json"
    save_system(actual, path)
    again = load_system(path)
    assert again.to_dict() == actual.to_dict()


def test_system_from_dict_errors():
    with pytest.raises(ConfigError):
        system_from_dict({"p": 1, "r": 2, "entries": [[{"num": [1], "den": [1, 1]}]]})
    with pytest.raises(ModelError, match=r"entry \(1,1\)"):
        system_from_dict({"p": 1, "r": 1, "entries": [[{"num": [1], "den": [1, -1, 1]}]]})
    with pytest.raises(ConfigError):
        system_from_dict({"p": 1})


def test_load_system_bad_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_system(p)


def test_to_dict_is_json_serializable(nominal):
    json.dumps(nominal.to_dict())
