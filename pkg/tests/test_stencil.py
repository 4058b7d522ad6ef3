import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helmdd.schemas import validate
from helmdd.stencil import (BelowNyquist, FitConfig, StencilWeights, WeightTable, build_weight_table,
                            constant_table, dispersion_objective, fibonacci_directions, fit_weights,
                            numerical_phase_velocity)

DIRS = fibonacci_directions(96)
AXIAL = np.array([1.0, 0.0, 0.0])
# closed-form 7-point value (2/theta) sin(theta/2) at theta = pi/2
CLASSICAL_AXIAL_G4 = 0.9003163161571062


def test_directions_are_unit_and_spread():
    assert DIRS.shape == (96, 3)
    assert np.allclose(np.linalg.norm(DIRS, axis=1), 1.0)
    assert abs(DIRS.mean(axis=0)).max() < 0.02


@pytest.mark.parametrize("w", [StencilWeights.classical(), StencilWeights((0.3, 0.5, 0.2), (0.6, 0.3, 0.05, 0.05))])
def test_continuum_limit(w):
    assert np.abs(numerical_phase_velocity(w, 1000.0, DIRS) - 1).max() <= 1e-5


def test_classical_axial_closed_form():
    assert numerical_phase_velocity(StencilWeights.classical(), 4.0, AXIAL) == pytest.approx(CLASSICAL_AXIAL_G4, abs=1e-14)


def test_phase_velocity_rejects():
    with pytest.raises(BelowNyquist):
        numerical_phase_velocity(StencilWeights.classical(), 2.0, AXIAL)
    with pytest.raises(ValueError):
        numerical_phase_velocity(StencilWeights.classical(), 4.0, [1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        StencilWeights((1.0, 0.0), (1.0, 0.0, 0.0, 0.0))


@given(a=st.floats(-1, 2), b=st.floats(-1, 2), m1=st.floats(0.2, 1), m2=st.floats(0, 0.5), m3=st.floats(0, 0.3))
def test_consistency_any_admissible_weights(a, b, m1, m2, m3):
    w = StencilWeights((a, b, 1 - a - b), (m1, m2, m3, 1 - m1 - m2 - m3))
    assert np.abs(numerical_phase_velocity(w, 1e4, DIRS) - 1).max() <= 1e-6


@pytest.fixture(scope="module")
def fitted4():
    return fit_weights(4.0)


def test_fit_constraints(fitted4):
    assert sum(fitted4.w) == pytest.approx(1.0, abs=1e-12)
    assert sum(fitted4.wm) == pytest.approx(1.0, abs=1e-12)


def test_fit_dispersion_at_coarsest_sampling(fitted4):
    err = np.abs(numerical_phase_velocity(fitted4, 4.0, DIRS) - 1)
    assert err.max() <= 1e-2


def test_fit_beats_classical(fitted4):
    assert dispersion_objective(fitted4, 4.0, DIRS) <= dispersion_objective(StencilWeights.classical(), 4.0, DIRS)
    classical_worst = np.abs(numerical_phase_velocity(StencilWeights.classical(), 4.0, DIRS) - 1).max()
    assert classical_worst > 0.09


def test_fit_rejects_undersampled():
    with pytest.raises(ValueError):
        fit_weights(3.0)


def test_table_nodes_clamp_and_midpoint(table):
    G = np.array(table.G_values)
    assert G[0] == 4.0 and G[-1] == 40.0 and np.all(np.diff(G) > 0)
    i = 7
    assert table.lookup(G[i]) == table.weights[i]
    assert table.lookup(2.5) == table.weights[0]
    assert table.lookup(1e3) == table.weights[-1]
    mid = 2.0 / (1.0 / G[i] + 1.0 / G[i + 1])
    got = table.lookup(mid).as_array()
    expect = 0.5 * (table.weights[i].as_array() + table.weights[i + 1].as_array())
    assert np.allclose(got, expect, atol=1e-13)


def test_table_covers_range_within_tolerance(table):
    for G in np.linspace(4, 40, 37):
        assert np.abs(numerical_phase_velocity(table.lookup(G), G, DIRS) - 1).max() <= 1e-2


def test_table_json_round_trip(tmp_path, table):
    doc = json.loads(table.to_json())
    validate(doc, "weight_table")
    table.save(tmp_path / "t.json")
    back = WeightTable.load(tmp_path / "t.json")
    assert back.G_values == table.G_values and back.weights == table.weights


def test_table_rejects_bad_range():
    with pytest.raises(ValueError):
        build_weight_table(3.0, 40.0, 5)
    with pytest.raises(ValueError):
        build_weight_table(10.0, 5.0, 5)


def test_small_table_and_constant_table():
    t = build_weight_table(4.0, 8.0, 3, FitConfig(n_directions=48))
    assert len(t.weights) == 3
    c = constant_table(StencilWeights.classical())
    assert c.lookup(17.0) == StencilWeights.classical()
