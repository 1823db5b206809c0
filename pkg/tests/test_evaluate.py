import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fringelab.classical import PhaseField, ValidationError, ft_demod, phase_from_phasor, wft_demod
from fringelab.evaluate import (
    EVAL_MARGIN, REFERENCE_SPHERE_DISTANCE_MM, REFERENCE_SPHERE_RADII_MM, FitError, HeightModel,
    compare_methods, evaluation_mask, fit_sphere, phase_error, phase_to_height, sphere_metrology,
    two_sphere_scene,
)
from fringelab.synth import NoiseSpec, gen_dataset, random_scene


def sphere_points(n, center, radius, rng, hemisphere=True):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if hemisphere:
        v[:, 2] = np.abs(v[:, 2])
    return np.asarray(center) + radius * v


# --- phase_error ------------------------------------------------------------

def test_identical_maps_have_zero_error(rng):
    p = PhaseField(rng.uniform(-np.pi, np.pi, (32, 32)))
    rep = phase_error(p, p, np.ones((32, 32), bool))
    assert rep.mae == 0 and rep.rmse == 0 and rep.max_abs == 0


def test_quarter_turn_offset(rng):
    gt = rng.uniform(-np.pi, np.pi, (32, 32))
    rep = phase_error(PhaseField(gt + np.pi / 2), PhaseField(gt), np.ones((32, 32), bool))
    assert rep.mae == pytest.approx(np.pi / 2, abs=1e-12)


def test_margin_pixel_count():
    mask = np.ones((32, 20), bool)
    mask[10, 10] = False
    rep = phase_error(PhaseField(np.zeros((32, 20))), PhaseField(np.zeros((32, 20))), mask)
    assert rep.masked_pixel_count == (32 - 2 * EVAL_MARGIN) * (20 - 2 * EVAL_MARGIN) - 1
    assert rep.masked_pixel_count == evaluation_mask(mask).sum()


def test_phase_error_failures():
    z = PhaseField(np.zeros((16, 16)))
    with pytest.raises(ValidationError):
        phase_error(z, z, np.zeros((16, 16), bool))
    with pytest.raises(ValidationError):
        phase_error(z, PhaseField(np.zeros((16, 16)), wrapped=False), np.ones((16, 16), bool))
    with pytest.raises(ValidationError):
        phase_error(z, PhaseField(np.zeros((16, 8))), np.ones((16, 16), bool))


def test_unwrapped_error_counts_full_cycles():
    a = PhaseField(np.full((16, 16), 2 * np.pi), wrapped=False)
    b = PhaseField(np.zeros((16, 16)), wrapped=False)
    assert phase_error(a, b, np.ones((16, 16), bool)).mae == pytest.approx(2 * np.pi)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), c=st.floats(-10, 10))
def test_error_symmetry_and_offset_invariance(seed, c):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-np.pi, np.pi, (2, 16, 16))
    mask = r.random((16, 16)) > 0.2
    mask[8, 8] = True
    ab = phase_error(PhaseField(a), PhaseField(b), mask, margin=0).mae
    ba = phase_error(PhaseField(b), PhaseField(a), mask, margin=0).mae
    shifted = phase_error(PhaseField(a + c), PhaseField(b + c), mask, margin=0).mae
    assert ab == pytest.approx(ba, abs=1e-12)
    assert ab == pytest.approx(shifted, abs=1e-9)


# --- height model -------------------------------------------------------------

def test_reference_phase_is_zero_plane():
    ref = np.linspace(0, 10, 64).reshape(8, 8)
    pts = phase_to_height(PhaseField(ref, wrapped=False), HeightModel(2.0, 0.5, ref))
    assert not np.any(pts[:, 2])
    assert pts.shape == (64, 3)
    assert pts[9].tolist() == [0.5, 0.5, 0.0]


def test_linear_height_example():
    pts = phase_to_height(PhaseField(np.full((4, 4), 10.0), wrapped=False), HeightModel(0.1, 1.0))
    np.testing.assert_allclose(pts[:, 2], 1.0, rtol=0, atol=1e-15)


def test_wrapped_input_rejected():
    with pytest.raises(ValidationError):
        phase_to_height(PhaseField(np.zeros((4, 4))), HeightModel(1.0, 1.0))


def test_sphere_phase_round_trip():
    model = HeightModel(2.5, 0.7, np.zeros((64, 64)))
    yy, xx = np.mgrid[0:64, 0:64] * 0.7
    z = np.sqrt(np.maximum(25.4 ** 2 - (xx - 22) ** 2 - (yy - 22) ** 2, 0))
    pts = phase_to_height(PhaseField(model.phase_of_height(z), wrapped=False), model)
    assert np.max(np.abs(pts[:, 2] - z.ravel())) <= 1e-9


# --- sphere fit -----------------------------------------------------------------

def test_exact_hemisphere(rng):
    fit = fit_sphere(sphere_points(2000, (3.0, -2.0, 50.0), 25.4, rng))
    assert abs(fit.radius - 25.4) <= 1e-9
    assert fit.rms_residual <= 1e-9
    np.testing.assert_allclose(fit.center, (3.0, -2.0, 50.0), atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_noisy_sphere(seed):
    r = np.random.default_rng(seed)
    pts = sphere_points(10_000, (0.0, 0.0, 0.0), 25.4, r)
    pts += r.normal(0, 0.01, pts.shape)
    assert abs(fit_sphere(pts).radius - 25.4) <= 0.01


def test_coplanar_points_fail(rng):
    pts = np.column_stack([rng.normal(size=(100, 2)), np.zeros(100)])
    with pytest.raises(FitError):
        fit_sphere(pts)
    with pytest.raises(FitError):
        fit_sphere(pts[:3])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), t=st.tuples(*[st.floats(-100, 100)] * 3), s=st.floats(0.1, 10))
def test_fit_equivariance(seed, t, s):
    r = np.random.default_rng(seed)
    pts = sphere_points(200, r.normal(size=3), 5.0, r) + r.normal(0, 0.05, (200, 3))
    base = fit_sphere(pts)
    moved = fit_sphere(pts + np.asarray(t))
    scaled = fit_sphere(pts * s)
    np.testing.assert_allclose(moved.center, np.asarray(base.center) + t, atol=1e-9)
    assert scaled.radius == pytest.approx(s * base.radius, rel=1e-9)


# --- scenes and comparisons --------------------------------------------------------

def test_two_sphere_geometry():
    scene = two_sphere_scene()
    assert scene.radii_mm == REFERENCE_SPHERE_RADII_MM
    assert scene.distance_mm == pytest.approx(REFERENCE_SPHERE_DISTANCE_MM, abs=1e-12)


def test_noiseless_metrology_is_exact():
    res = sphere_metrology(two_sphere_scene(), NoiseSpec(0.0, quantize=False))
    assert max(abs(e) for e in res.radius_errors_mm) <= 1e-6
    assert abs(res.distance_error_mm) <= 1e-6
    assert res.unwrap_warning is None


def test_comparison_on_smooth_noiseless_scene(tmp_path):
    spec = random_scene(2, kind="smooth")
    samples = gen_dataset([spec], NoiseSpec(0.0, quantize=False))
    methods = {
        "ps": lambda s: s.phase_gt,
        "ft": lambda s: phase_from_phasor(ft_demod(s.fringe, spec.carrier_frequency)),
        "wft": lambda s: phase_from_phasor(wft_demod(s.fringe)),
    }
    comp = compare_methods(samples, methods, tmp_path)
    assert all(v < 0.02 for v in comp.aggregate.values())
    assert comp.ordering[0] == "ps"
    with open(tmp_path / "comparison.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["ps", "ft", "wft"]
    assert float(rows[0]["mae_rad"]) == 0
    for m in methods:
        assert (tmp_path / f"{samples[0].sample_id}_{m}_err.png").exists()


def test_empty_method_list():
    with pytest.raises(ValidationError):
        compare_methods([], {})
