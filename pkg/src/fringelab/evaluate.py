"""Phase-error statistics, idealized phase-to-height conversion and sphere metrology."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion

from . import io
from .classical import PhaseField, ValidationError, ps_phase, ps_phasor, wrap
from .synth import Composite, Ellipse, NoiseSpec, SceneObject, SceneSpec, SmoothField, SphereCap, render_stack
from .unwrap import FrequencyPair, unwrap_with_order

EVAL_MARGIN = 4
REFERENCE_SPHERE_RADII_MM = (25.398, 25.403)
REFERENCE_SPHERE_DISTANCE_MM = 100.688


class FitError(ValueError):
    """Point set cannot determine a sphere."""


@dataclass
class ErrorReport:
    method: str
    mae: float
    rmse: float
    max_abs: float
    masked_pixel_count: int
    error_map: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False, default=None)

    def row(self, scene_id) -> dict:
        return {"scene_id": scene_id, "method": self.method, "mae_rad": f"{self.mae:.9g}",
                "rmse_rad": f"{self.rmse:.9g}", "max_abs_rad": f"{self.max_abs:.9g}",
                "masked_pixels": self.masked_pixel_count}


CSV_FIELDS = ["scene_id", "method", "mae_rad", "rmse_rad", "max_abs_rad", "masked_pixels"]


def evaluation_mask(mask, margin: int = EVAL_MARGIN) -> np.ndarray:
    out = np.array(mask, dtype=bool, copy=True)
    if margin > 0:
        out[:margin] = False
        out[-margin:] = False
        out[:, :margin] = False
        out[:, -margin:] = False
    return out


def phase_error(pred: PhaseField, gt: PhaseField, mask, method: str = "",
                margin: int = EVAL_MARGIN) -> ErrorReport:
    """Error statistics over ``mask`` minus a border of ``margin`` pixels.

    Wrapped inputs are compared through ``|wrap(pred - gt)|`` so 2pi jumps
    do not count as error.
    """
    if pred.shape != gt.shape or np.shape(mask) != pred.shape:
        raise ValidationError("prediction, ground truth and mask must share a shape")
    if pred.wrapped != gt.wrapped:
        raise ValidationError("cannot compare a wrapped with an unwrapped phase map")
    diff = pred.values - gt.values
    err = np.abs(wrap(diff)) if pred.wrapped else np.abs(diff)
    region = evaluation_mask(mask, margin)
    n = int(region.sum())
    if n == 0:
        raise ValidationError("empty evaluation mask")
    sel = err[region]
    return ErrorReport(method, float(sel.mean()), float(np.sqrt(np.mean(sel ** 2))),
                       float(sel.max()), n, np.where(region, err, 0.0), region)


# --------------------------------------------------------------------------- geometry

@dataclass
class HeightModel:
    """Linear phase-to-height map ``z = k * (Phi - Phi_ref)`` on a uniform lateral grid."""

    k_mm_per_rad: float
    lateral_mm_per_px: float
    reference: np.ndarray = field(repr=False, default=None)

    def height(self, phase: PhaseField) -> np.ndarray:
        if phase.wrapped:
            raise ValidationError("phase_to_height needs unwrapped phase")
        ref = 0.0 if self.reference is None else self.reference
        return self.k_mm_per_rad * (phase.values - ref)

    def phase_of_height(self, z) -> np.ndarray:
        ref = 0.0 if self.reference is None else self.reference
        return np.asarray(z) / self.k_mm_per_rad + ref


def phase_to_height(phase: PhaseField, model: HeightModel, mask=None) -> np.ndarray:
    """(N, 3) point cloud in mm, one point per selected pixel (row-major order)."""
    z = model.height(phase)
    rows, cols = np.indices(z.shape)
    sel = np.ones(z.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    s = model.lateral_mm_per_px
    return np.column_stack([cols[sel] * s, rows[sel] * s, z[sel]]).astype(np.float64)


@dataclass
class SphereFit:
    center: tuple[float, float, float]
    radius: float
    rms_residual: float
    point_count: int

    def to_dict(self) -> dict:
        return {"center_mm": list(self.center), "radius_mm": self.radius,
                "rms_residual_mm": self.rms_residual, "point_count": self.point_count}


def _algebraic_sphere(p: np.ndarray):
    # |p|^2 = 2 c.p + (r^2 - |c|^2) is linear in (c, d)
    a = np.column_stack([2 * p, np.ones(len(p))])
    b = np.sum(p * p, axis=1)
    sol, _, rank, sv = np.linalg.lstsq(a, b, rcond=None)
    if rank < 4 or sv[-1] <= 1e-10 * sv[0]:
        raise FitError("points are coplanar or otherwise degenerate")
    c = sol[:3]
    r2 = sol[3] + c @ c
    if r2 <= 0:
        raise FitError("algebraic fit produced a non-positive radius")
    return c, math.sqrt(r2)


def fit_sphere(points, iterations: int = 50, tol: float = 1e-14) -> SphereFit:
    """Least-squares sphere: algebraic initial guess refined by Gauss-Newton on
    the geometric residuals ``|p - c| - r``."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) < 4:
        raise FitError("need at least 4 points in 3-D")
    # centring keeps the normal equations well conditioned for offset clouds
    origin = p.mean(axis=0)
    q = p - origin
    c, r = _algebraic_sphere(q)
    for _ in range(iterations):
        d = q - c
        dist = np.linalg.norm(d, axis=1)
        if np.any(dist == 0):
            break
        res = dist - r
        jac = np.column_stack([-d / dist[:, None], -np.ones(len(q))])
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        c = c + step[:3]
        r = r + step[3]
        if np.max(np.abs(step)) <= tol * max(1.0, abs(r)):
            break
    res = np.linalg.norm(q - c, axis=1) - r
    center = c + origin
    return SphereFit(tuple(float(v) for v in center), float(abs(r)),
                     float(np.sqrt(np.mean(res ** 2))), len(p))


# --------------------------------------------------------------------------- sphere scene

@dataclass
class SphereScene:
    """Two ceramic-sphere stand-ins seen through an idealized height model."""

    spec_high: SceneSpec
    spec_low: SceneSpec
    model: HeightModel
    centers_mm: list
    radii_mm: tuple
    supports: list = field(repr=False)
    f_high: float = 64.0
    f_low: float = 1.0

    @property
    def distance_mm(self) -> float:
        return float(np.linalg.norm(np.subtract(self.centers_mm[0], self.centers_mm[1])))


def two_sphere_scene(width: int = 256, height: int = 128, f_high: float = 64.0,
                     lateral_mm_per_px: float = 0.7, k_mm_per_rad: float = 2.5,
                     radii_mm=REFERENCE_SPHERE_RADII_MM, distance_mm: float = REFERENCE_SPHERE_DISTANCE_MM,
                     support_fraction: float = 0.8, seed: int = 0) -> SphereScene:
    """Scene with two sphere caps whose centres lie on the z = 0 reference plane.

    Only the central ``support_fraction`` of each cap is lit; the rest of
    the frame is a dim, low-modulation backdrop.
    """
    s = lateral_mm_per_px
    cx0 = (width - 1) / 2
    cy = (height - 1) / 2
    half = distance_mm / (2 * s)
    centers_px = [(cx0 - half, cy), (cx0 + half, cy)]
    x = np.arange(width, dtype=np.float64)

    def spec_at(freq, seed_offset):
        rad_per_px = s / k_mm_per_rad * (freq / f_high)
        objects = tuple(
            SceneObject((SphereCap(c, r / s, rad_per_px),),
                        Ellipse(c[0], c[1], support_fraction * r / s, support_fraction * r / s))
            for c, r in zip(centers_px, radii_mm))
        return SceneSpec(width, height, Composite(objects), SmoothField(110.0), SmoothField(90.0),
                         float(freq), int(seed) * 2 + seed_offset)

    spec_high = spec_at(f_high, 0)
    spec_low = spec_at(1.0, 1)
    reference = np.broadcast_to(2 * np.pi * f_high * x / width, (height, width)).copy()
    model = HeightModel(k_mm_per_rad, s, reference)
    yy, xx = np.mgrid[0:height, 0:width]
    supports = [(xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= (support_fraction * r / s) ** 2
                for c, r in zip(centers_px, radii_mm)]
    centers_mm = [(c[0] * s, c[1] * s, 0.0) for c in centers_px]
    return SphereScene(spec_high, spec_low, model, centers_mm, tuple(radii_mm), supports,
                       float(f_high), 1.0)


@dataclass
class MetrologyResult:
    fits: list
    radius_errors_mm: list
    distance_mm: float
    distance_error_mm: float
    unwrap_warning: str | None = None

    def to_dict(self) -> dict:
        return {"spheres": [f.to_dict() for f in self.fits],
                "radius_errors_mm": self.radius_errors_mm,
                "center_distance_mm": self.distance_mm,
                "center_distance_error_mm": self.distance_error_mm,
                "unwrap_warning": self.unwrap_warning}


def sphere_metrology(scene: SphereScene, noise: NoiseSpec, demod_high=None, n_steps: int = 12,
                     erode_px: int = 2, mask_threshold: float = 10.0) -> MetrologyResult:
    """Demodulate -> unwrap -> height -> per-sphere fit.

    ``demod_high`` maps the high-frequency N-step stack to a wrapped
    PhaseField; the default is N-step phase shifting. Single-frame methods
    just use ``stack[0]``. The unit-frequency anchor is always phase shifted.
    """
    stack_h = render_stack(scene.spec_high, noise, n_steps)
    stack_l = render_stack(scene.spec_low, noise, n_steps)
    phi_h = ps_phase(stack_h) if demod_high is None else demod_high(stack_h)
    phi_l = ps_phase(stack_l)
    mod = ps_phasor(stack_h).modulation()
    lit = mod >= mask_threshold
    pair = FrequencyPair(scene.f_high, scene.f_low, phi_h, phi_l)
    unwrapped = unwrap_with_order(pair, lit)
    fits = []
    for support in scene.supports:
        region = binary_erosion(support, iterations=erode_px) & lit if erode_px else support & lit
        fits.append(fit_sphere(phase_to_height(unwrapped.phase, scene.model, region)))
    radius_errors = [f.radius - r for f, r in zip(fits, scene.radii_mm)]
    dist = float(np.linalg.norm(np.subtract(fits[0].center, fits[1].center)))
    return MetrologyResult(fits, radius_errors, dist, dist - scene.distance_mm, unwrapped.warning)


# --------------------------------------------------------------------------- method comparison

@dataclass
class Comparison:
    reports: list
    aggregate: dict
    ordering: list

    def rows(self):
        return [r.row(sid) for sid, r in self.reports]


def compare_methods(samples, methods: dict, out_dir=None, margin: int = EVAL_MARGIN,
                    heatmap_max: float | None = None) -> Comparison:
    """Run each method on each sample and score it against the sample's PS phase.

    ``methods`` maps a name to a callable ``sample -> PhaseField``.
    Aggregate MAE is the mean of per-scene MAEs.
    """
    if not methods:
        raise ValidationError("no methods to compare")
    reports = [(s.sample_id, phase_error(fn(s), s.phase_gt, s.modulation_mask, name, margin))
               for s in samples for name, fn in methods.items()]
    return _finish(reports, list(methods), out_dir, heatmap_max)


def compare_predictions(samples, predictions: dict, out_dir=None, margin: int = EVAL_MARGIN,
                        heatmap_max: float | None = None) -> Comparison:
    """Like ``compare_methods`` but with precomputed phase lists, one per method."""
    if not predictions:
        raise ValidationError("no methods to compare")
    reports = [(s.sample_id, phase_error(preds[i], s.phase_gt, s.modulation_mask, name, margin))
               for i, s in enumerate(samples) for name, preds in predictions.items()]
    return _finish(reports, list(predictions), out_dir, heatmap_max)


def _write_heatmaps(out_dir, reports, heatmap_max):
    # one colour scale for the whole comparison so maps are comparable side by side
    hi = heatmap_max if heatmap_max is not None else max(r.max_abs for _, r in reports)
    for sid, r in reports:
        io.save_png_heatmap(Path(out_dir) / f"{sid}_{r.method}_err.png", r.error_map, 0.0, hi, r.mask)


def _finish(reports, names, out_dir, heatmap_max=None) -> Comparison:
    aggregate = {n: float(np.mean([r.mae for _, r in reports if r.method == n])) for n in names}
    ordering = sorted(names, key=lambda n: aggregate[n])
    comp = Comparison(reports, aggregate, ordering)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_heatmaps(out_dir, reports, heatmap_max)
        write_error_csv(Path(out_dir) / "comparison.csv", comp.rows())
    return comp


def write_error_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
