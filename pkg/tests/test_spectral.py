from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _support import random_transfer_pair
from czplab.errors import (DegenerateDenominator, IllConditioned, InvalidArgument,
                           NonDecayingMode, SingularPole)
from czplab.linsys import SpectralDecomposition, build_wave_system_1d, eigendecompose, integrate
from czplab.spectral import (ComplexSpectrum, FrequencyGrid, RationalFunction,
                             analytic_fourier_double_sided, analytic_fourier_single_sided,
                             canonical_grid, decay_horizon, exact_rational,
                             numeric_fourier_single_sided, transfer_function)


def test_canonical_grid():
    g = canonical_grid()
    assert g.count == 69
    assert g.values[0] == pytest.approx(0.2) and g.values[-1] == pytest.approx(7.0)


@pytest.mark.parametrize("values", [[1.0], [1.0, 1.0], [0.0, np.nan], [2.0, 1.0]])
def test_grid_validation(values):
    with pytest.raises(InvalidArgument):
        FrequencyGrid(np.array(values))


def test_single_mode_closed_form():
    # scalar system x' = -a x  ->  X(w) = x0 / (i w + a)
    a = 0.7
    spec = eigendecompose(np.array([[-a]]))
    grid = FrequencyGrid(np.linspace(0, 3, 7))
    got = analytic_fourier_single_sided(spec, [2.0], grid).values[0]
    assert np.allclose(got, 2.0 / (1j * grid.values + a))
    dbl = analytic_fourier_double_sided(spec, [2.0], grid).values[0]
    assert np.allclose(dbl, 2.0 * 2 * a / (a * a + grid.values**2))


def test_non_decaying_mode_rejected():
    spec = eigendecompose(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    with pytest.raises(NonDecayingMode):
        analytic_fourier_single_sided(spec, [1.0, 0.0], FrequencyGrid([0.0, 1.0]))


def test_numeric_transform_requires_decayed_tail():
    sys_ = build_wave_system_1d(4, 1.0, 0.1)
    traj = integrate(sys_, np.ones(8), 0.01, 5.0)
    with pytest.raises(InvalidArgument) as info:
        numeric_fourier_single_sided(traj, FrequencyGrid([0.0, 1.0]))
    assert info.value.context["required_horizon"] > 5.0


def test_numeric_matches_analytic_small_system():
    sys_ = build_wave_system_1d(3, 1.0, 0.8)
    spec = eigendecompose(sys_)
    x0 = np.array([1.0, -0.5, 0.2, 0.0, 0.3, 0.0])
    traj = integrate(sys_, x0, 2e-3, decay_horizon(spec))
    grid = FrequencyGrid(np.linspace(0, 3, 16))
    q = numeric_fourier_single_sided(traj, grid).values
    a = analytic_fourier_single_sided(spec, x0, grid).values
    assert np.linalg.norm(q - a) / np.linalg.norm(a) < 1e-5


def test_transfer_function_degenerate_denominator():
    spec = eigendecompose(build_wave_system_1d(3, 1.0, 0.3))
    phi = analytic_fourier_single_sided(spec, np.ones(6), FrequencyGrid([0.0, 1.0]))
    with pytest.raises(DegenerateDenominator):
        transfer_function(np.ones(6), np.zeros(6), phi)


def test_rational_function_evaluation_and_singular_pole():
    rf = RationalFunction(2.0, [1.0 + 1j], [3.0 + 0.5j])
    w = np.array([0.0, 2.0])
    assert np.allclose(rf.evaluate(w), 2.0 * (w - (1 + 1j)) / (w - (3 + 0.5j)))
    with pytest.raises(SingularPole):
        rf.evaluate([3.0 + 0.5j])


def test_rational_function_canonical_root_order():
    a = RationalFunction(1.0, [2.0, 1.0 + 1j, 1.0 - 1j], [])
    b = RationalFunction(1.0, [1.0 - 1j, 2.0, 1.0 + 1j], [])
    assert np.array_equal(a.zeros, b.zeros)
    assert a.zeros[0] == 1.0 - 1j


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000))
def test_exact_rational_matches_transfer_function(seed):
    system, x0, b1, b2, rng = random_transfer_pair(seed, 10)
    spec = eigendecompose(system)
    grid = FrequencyGrid(np.sort(rng.uniform(0, 5, 40)) + np.arange(40) * 1e-6)
    want = transfer_function(b1, b2, analytic_fourier_single_sided(spec, x0, grid)).values
    rf = exact_rational(spec, x0, b1, b2)
    got = rf.evaluate(grid.values)
    assert np.max(np.abs(got - want) / np.abs(want)) < 1e-6


def test_pencil_and_companion_agree():
    system, x0, b1, b2, _ = random_transfer_pair(11, 8)
    spec = eigendecompose(system)
    a = exact_rational(spec, x0, b1, b2, method="pencil")
    b = exact_rational(spec, x0, b1, b2, method="companion")
    w = np.linspace(0.1, 4, 30)
    assert np.allclose(a.evaluate(w), b.evaluate(w), rtol=1e-8)
    assert a.k1 == b.k1 and a.k2 == b.k2


def test_companion_route_refuses_large_systems():
    spec = eigendecompose(build_wave_system_1d(40, 1.0, 0.2))
    x = np.ones(80)
    with pytest.raises(IllConditioned):
        exact_rational(spec, x, x, x + 1, method="companion")


def test_identical_functionals_cancel_to_constant():
    system, x0, b1, _, _ = random_transfer_pair(5, 6)
    rf = exact_rational(eigendecompose(system), x0, b1, 3.0 * b1)
    assert rf.k1 == 0 and rf.k2 == 0
    assert rf.c0 == pytest.approx(1.0 / 3.0)


def test_degree_bound():
    system, x0, b1, b2, _ = random_transfer_pair(7, 12)
    rf = exact_rational(eigendecompose(system), x0, b1, b2)
    assert rf.k1 <= system.state_dim - 1 and rf.k2 <= system.state_dim - 1


def test_complex_spectrum_csv_round_trip():
    g = FrequencyGrid(np.array([0.1, 0.2, 0.30000000000000004]))
    s = ComplexSpectrum(g, np.array([1 / 3 + 2j, -1e-300 + 0j, np.pi - np.e * 1j]))
    back = ComplexSpectrum.from_csv(s.to_csv())
    assert np.array_equal(back.values, s.values)
    assert np.array_equal(back.grid.values, g.values)


def test_spectral_decomposition_reconstruct():
    a = np.array([[-1.0, 2.0], [-3.0, -0.5]])
    spec = eigendecompose(a)
    assert isinstance(spec, SpectralDecomposition)
    assert np.allclose(spec.reconstruct(), a)
