import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fringelab.classical import ValidationError, phase_from_phasor, ps_phasor, wrap
from fringelab.synth import (
    Bump, Composite, Flat, GaussianBumps, NoiseSpec, Plane, SceneSpec, SmoothField,
    Step, carrier_phase, degrade, gen_dataset, illumination, phase_surface, random_scene,
    scene_from_dict, scene_to_dict, synth_fringe, synth_stack, total_phase,
)


def flat_spec(a=100.0, b=50.0, carrier=0.0, surface=None, size=16):
    return SceneSpec(size, size, surface or Flat(), SmoothField(a), SmoothField(b), carrier)


def test_flat_surface_is_zero():
    assert np.all(phase_surface(SceneSpec()).values == 0)


def test_gaussian_bump_peak():
    spec = SceneSpec(surface=GaussianBumps((Bump((64.0, 64.0), 3.0, 20.0),)))
    phi = phase_surface(spec).values
    assert abs(phi[64, 64] - 3.0) <= 1e-12
    assert phi.max() == phi[64, 64]


def test_step_has_two_levels():
    spec = SceneSpec(surface=Step(4.0, 64.0))
    values, counts = np.unique(phase_surface(spec).values, return_counts=True)
    assert list(values) == [0.0, 4.0]
    assert counts.min() > 0


def test_composite_with_step_has_discontinuity():
    spec = random_scene(3, kind="step")
    phi = phase_surface(spec).values
    assert np.max(np.abs(np.diff(phi, axis=1))) > 1.5


def test_invalid_dimensions():
    with pytest.raises(ValidationError):
        phase_surface(SceneSpec(width=7, height=16))
    with pytest.raises(ValidationError):
        SceneSpec(width=4, height=4).validate()


def test_render_out_of_range_rejected():
    with pytest.raises(ValidationError):
        flat_spec(a=200.0, b=90.0).validate()
    with pytest.raises(ValidationError):
        flat_spec(a=40.0, b=50.0).validate()


def test_synth_fringe_examples():
    spec = flat_spec()
    phi0 = phase_surface(spec)
    assert np.all(synth_fringe(phi0, spec, 0.0) == 150.0)
    spec_q = flat_spec(surface=Plane(np.pi / 2))
    out = synth_fringe(phase_surface(spec_q), spec_q, np.pi / 2)
    np.testing.assert_allclose(out, 150.0, atol=1e-12)


def test_synth_fringe_dimension_mismatch():
    spec = flat_spec()
    with pytest.raises(ValidationError):
        synth_fringe(np.zeros((8, 8)), spec, 0.0)


def test_opposite_shifts_sum_to_twice_background():
    spec = random_scene(11)
    phi = phase_surface(spec)
    a, _ = illumination(spec)
    total = synth_fringe(phi, spec, 0.0) + synth_fringe(phi, spec, np.pi)
    np.testing.assert_allclose(total, 2 * a, atol=1e-12)


def test_stack_examples():
    spec = random_scene(5)
    phi = phase_surface(spec)
    stack = synth_stack(phi, spec, 12)
    assert len(stack) == 12
    assert np.array_equal(stack[0], synth_fringe(phi, spec, 0.0))
    a, _ = illumination(spec)
    assert np.max(np.abs(np.mean(stack, axis=0) - a)) <= 1e-12

    spec4 = flat_spec()
    seq = [img[3, 3] for img in synth_stack(phase_surface(spec4), spec4, 4)]
    np.testing.assert_allclose(seq, [150, 100, 50, 100], atol=1e-12)

    with pytest.raises(ValidationError):
        synth_stack(phi, spec, 2)


def test_degrade_rounding_and_clipping():
    assert degrade(np.array([[100.4]]), NoiseSpec(0.0, 8), 0)[0, 0] == 100
    assert degrade(np.array([[300.0]]), NoiseSpec(0.0, 8, clip=True), 0)[0, 0] == 255


def test_degrade_noise_statistics():
    out = degrade(np.full((100, 1000), 128.0), NoiseSpec(2.0, 8), 99)
    assert abs(out.mean() - 128) <= 0.05
    assert abs(out.std() - 2) <= 0.05


def test_degrade_is_seeded():
    img = np.full((32, 32), 100.0)
    a = degrade(img, NoiseSpec(2.0), 4)
    assert np.array_equal(a, degrade(img, NoiseSpec(2.0), 4))
    assert not np.array_equal(a, degrade(img, NoiseSpec(2.0), 5))


def test_noise_spec_validation():
    with pytest.raises(ValidationError):
        NoiseSpec(-1.0)
    with pytest.raises(ValidationError):
        NoiseSpec(1.0, bit_depth=17)


def test_dataset_flat_scene_phase_matches_carrier():
    spec = SceneSpec(seed=1)
    (s,) = gen_dataset([spec], NoiseSpec(0.0, quantize=False))
    expected = wrap(carrier_phase(spec))
    err = np.abs(wrap(s.phase_gt.values - expected))[s.modulation_mask]
    assert s.modulation_mask.all()
    assert err.max() <= 1e-6
    assert np.all(s.fringe == synth_fringe(phase_surface(spec), spec, 0.0))


def test_dataset_count_matches_desk_scale():
    scenes = [SceneSpec(8, 8, seed=i, carrier_frequency=2.0) for i in range(960)]
    assert len(gen_dataset(scenes, NoiseSpec(2.0), n_steps=3)) == 960


def test_dataset_mask_threshold_above_modulation_is_degenerate():
    (s,) = gen_dataset([SceneSpec(16, 16)], NoiseSpec(0.0), mask_threshold=1000.0)
    assert not s.modulation_mask.any()
    assert s.degenerate


def test_dataset_labels_come_from_degraded_frames():
    spec = random_scene(21)
    (s,) = gen_dataset([spec], NoiseSpec(2.0))
    assert np.all(s.fringe == np.rint(s.fringe))
    assert s.phase_gt.values.min() > -np.pi and s.phase_gt.values.max() <= np.pi
    assert s.background_gt.shape == s.fringe.shape == s.modulation_mask.shape


def test_dataset_rejects_small_n():
    with pytest.raises(ValidationError):
        gen_dataset([SceneSpec()], NoiseSpec(), n_steps=2)


def test_random_scene_kinds_and_roundtrip():
    for kind in ("smooth", "step", "isolated"):
        spec = random_scene(8, kind=kind)
        spec.validate()
        back = scene_from_dict(scene_to_dict(spec))
        assert back == spec
        assert np.array_equal(phase_surface(back).values, phase_surface(spec).values)
    iso = random_scene(8, kind="isolated")
    assert isinstance(iso.surface, Composite)
    _, b = illumination(iso)
    assert b.min() < 10 < b.max()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 13))
def test_noiseless_stack_identities(seed, n):
    spec = random_scene(seed, 32, 32, 8)
    phi = phase_surface(spec)
    stack = synth_stack(phi, spec, n)
    a, b = illumination(spec)
    arr = np.array(stack)
    assert np.max(np.abs(arr.mean(axis=0) - a)) <= 1e-12
    assert np.all(arr >= a - b - 1e-9) and np.all(arr <= a + b + 1e-9)
    est = phase_from_phasor(ps_phasor(stack)).values
    sel = b > 0
    assert np.max(np.abs(wrap(est - total_phase(spec)))[sel]) <= 1e-9


def test_rendering_is_deterministic():
    spec = random_scene(77)
    a = gen_dataset([spec], NoiseSpec(2.0))[0]
    b = gen_dataset([spec], NoiseSpec(2.0))[0]
    assert a.fringe.tobytes() == b.fringe.tobytes()
    assert a.phase_gt.values.tobytes() == b.phase_gt.values.tobytes()
