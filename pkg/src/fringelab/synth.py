"""Synthetic phase surfaces, carrier fringe rendering and labeled datasets.

Scenes stand in for projector/camera captures: a horizontal carrier of
``carrier_frequency`` fringes per image width is modulated by an object
phase, rendered as ``I = A + B cos(phi_total - delta)``, degraded with
Gaussian noise and quantized.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .classical import (
    PhaseField, PhasorField, ValidationError, phase_from_phasor, ps_background, ps_phasor,
)

DEFAULT_SIZE = 128
DEFAULT_CARRIER = 32.0
DEFAULT_MASK_THRESHOLD = 10.0


# --------------------------------------------------------------------------- surfaces

@dataclass(frozen=True)
class Flat:
    kind = "flat"


@dataclass(frozen=True)
class Bump:
    center: tuple[float, float]
    amplitude: float
    sigma: float


@dataclass(frozen=True)
class GaussianBumps:
    bumps: tuple[Bump, ...]
    kind = "gaussian-bumps"


@dataclass(frozen=True)
class Step:
    """Adds ``height`` rad on the far side of a straight edge.

    The edge passes through x = ``edge`` on the image's middle row; its
    normal makes ``angle`` rad with +x.
    """

    height: float
    edge: float
    angle: float = 0.0
    kind = "step"


@dataclass(frozen=True)
class Plane:
    offset: float = 0.0
    gx: float = 0.0
    gy: float = 0.0
    kind = "plane"


@dataclass(frozen=True)
class SphereCap:
    """Height-map of a sphere seen from above, converted to phase.

    ``center``/``radius`` are in px; ``rad_per_px`` converts height in px
    to object phase. Outside the disc the cap contributes nothing.
    """

    center: tuple[float, float]
    radius: float
    rad_per_px: float
    kind = "sphere"


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    ax: float
    ay: float
    angle: float = 0.0

    def contains(self, xx, yy):
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (xx - self.cx) * c + (yy - self.cy) * s
        v = -(xx - self.cx) * s + (yy - self.cy) * c
        return (u / self.ax) ** 2 + (v / self.ay) ** 2 <= 1.0


@dataclass(frozen=True)
class SceneObject:
    parts: tuple = ()
    support: Ellipse | None = None


@dataclass(frozen=True)
class Composite:
    """Objects over a dim reference plane.

    Outside every support the phase is 0 and A, B are scaled by the
    ``outside_*`` factors, so isolated objects sit on a low-modulation
    backdrop. Later objects occlude earlier ones.
    """

    objects: tuple[SceneObject, ...]
    outside_background: float = 0.3
    outside_modulation: float = 0.05
    kind = "composite"


@dataclass(frozen=True)
class SmoothField:
    """``mean * (1 + c . [u, v, u^2, u*v, v^2])`` with u, v in [-1, 1] across the frame."""

    mean: float
    coeffs: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)

    def evaluate(self, height: int, width: int) -> np.ndarray:
        u = np.linspace(-1, 1, width)[None, :]
        v = np.linspace(-1, 1, height)[:, None]
        c = self.coeffs
        poly = 1 + c[0] * u + c[1] * v + c[2] * u * u + c[3] * u * v + c[4] * v * v
        return self.mean * poly


@dataclass(frozen=True)
class SceneSpec:
    width: int = DEFAULT_SIZE
    height: int = DEFAULT_SIZE
    surface: object = field(default_factory=Flat)
    background_field: SmoothField = SmoothField(110.0)
    modulation_field: SmoothField = SmoothField(90.0)
    carrier_frequency: float = DEFAULT_CARRIER
    seed: int = 0
    max_intensity: float = 255.0

    def validate(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ValidationError(f"scene must be at least 8x8, got {self.width}x{self.height}")
        a, b = illumination(self)
        if np.any(b < 0):
            raise ValidationError("modulation B must be non-negative")
        if np.any(a - b < -1e-9) or np.any(a + b > self.max_intensity + 1e-9):
            raise ValidationError("A +/- B leaves the sensor range; render would clip")


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.0
    bit_depth: int = 8
    clip: bool = True
    quantize: bool = True

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValidationError("gaussian_sigma must be >= 0")
        if not 1 <= self.bit_depth <= 16:
            raise ValidationError("bit_depth must be in [1, 16]")

    @property
    def max_value(self) -> int:
        return 2 ** self.bit_depth - 1


# --------------------------------------------------------------------------- rendering

def _grid(spec: SceneSpec):
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    return xx, yy


def _part_phase(part, xx, yy, spec: SceneSpec) -> np.ndarray:
    if isinstance(part, Flat):
        return np.zeros_like(xx)
    if isinstance(part, GaussianBumps):
        out = np.zeros_like(xx)
        for bp in part.bumps:
            r2 = (xx - bp.center[0]) ** 2 + (yy - bp.center[1]) ** 2
            out += bp.amplitude * np.exp(-r2 / (2 * bp.sigma ** 2))
        return out
    if isinstance(part, Step):
        cy = (spec.height - 1) / 2
        side = (xx - part.edge) * math.cos(part.angle) + (yy - cy) * math.sin(part.angle)
        return np.where(side >= 0, part.height, 0.0)
    if isinstance(part, Plane):
        return part.offset + part.gx * xx + part.gy * yy
    if isinstance(part, SphereCap):
        r2 = part.radius ** 2 - (xx - part.center[0]) ** 2 - (yy - part.center[1]) ** 2
        return part.rad_per_px * np.sqrt(np.clip(r2, 0, None))
    raise ValidationError(f"unknown surface part {part!r}")


def _composite_layout(spec: SceneSpec):
    """Object phase and boolean support for a composite surface."""
    xx, yy = _grid(spec)
    surf = spec.surface
    phase = np.zeros_like(xx)
    support = np.zeros(xx.shape, dtype=bool)
    for obj in surf.objects:
        inside = np.ones_like(support) if obj.support is None else obj.support.contains(xx, yy)
        obj_phase = np.zeros_like(xx)
        for part in obj.parts:
            obj_phase += _part_phase(part, xx, yy, spec)
        phase = np.where(inside, obj_phase, phase)
        support |= inside
    return phase, support


def object_support(spec: SceneSpec) -> np.ndarray:
    if isinstance(spec.surface, Composite):
        return _composite_layout(spec)[1]
    return np.ones((spec.height, spec.width), dtype=bool)


def illumination(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Background A and modulation B fields of a scene."""
    a = spec.background_field.evaluate(spec.height, spec.width)
    b = spec.modulation_field.evaluate(spec.height, spec.width)
    if isinstance(spec.surface, Composite):
        outside = ~object_support(spec)
        a = np.where(outside, a * spec.surface.outside_background, a)
        b = np.where(outside, b * spec.surface.outside_modulation, b)
    return a, b


def phase_surface(spec: SceneSpec) -> PhaseField:
    """Unwrapped object phase (carrier excluded)."""
    if spec.width < 8 or spec.height < 8:
        raise ValidationError(f"scene must be at least 8x8, got {spec.width}x{spec.height}")
    if isinstance(spec.surface, Composite):
        phase = _composite_layout(spec)[0]
    else:
        xx, yy = _grid(spec)
        phase = _part_phase(spec.surface, xx, yy, spec)
    return PhaseField(phase, wrapped=False)


def carrier_phase(spec: SceneSpec) -> np.ndarray:
    x = np.arange(spec.width, dtype=np.float64)
    return np.broadcast_to(2 * np.pi * spec.carrier_frequency * x / spec.width,
                           (spec.height, spec.width)).copy()


def total_phase(spec: SceneSpec) -> np.ndarray:
    return carrier_phase(spec) + phase_surface(spec).values


def synth_fringe(phase: PhaseField, spec: SceneSpec, delta: float) -> np.ndarray:
    """Noise-free fringe for object phase ``phase`` shifted by ``delta``."""
    values = phase.values if isinstance(phase, PhaseField) else np.asarray(phase, dtype=np.float64)
    if values.shape != (spec.height, spec.width):
        raise ValidationError(f"phase shape {values.shape} does not match scene "
                              f"{(spec.height, spec.width)}")
    a, b = illumination(spec)
    return a + b * np.cos(carrier_phase(spec) + values - delta)


def synth_stack(phase: PhaseField, spec: SceneSpec, n_steps: int) -> list[np.ndarray]:
    if n_steps < 3:
        raise ValidationError(f"n_steps must be >= 3, got {n_steps}")
    return [synth_fringe(phase, spec, 2 * np.pi * n / n_steps) for n in range(n_steps)]


def degrade(img, noise: NoiseSpec, seed) -> np.ndarray:
    """Additive Gaussian noise, optional clipping, then rounding to integer counts.

    ``noise.quantize = False`` skips the rounding (ideal, analog frames).
    """
    out = np.asarray(img, dtype=np.float64)
    if noise.gaussian_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, noise.gaussian_sigma, size=out.shape)
    if noise.clip:
        out = np.clip(out, 0, noise.max_value)
    return np.rint(out) if noise.quantize else out


# --------------------------------------------------------------------------- datasets

@dataclass
class Sample:
    fringe: np.ndarray
    background_gt: np.ndarray
    phasor_gt: PhasorField
    phase_gt: PhaseField
    modulation_mask: np.ndarray
    scene: SceneSpec | None = None
    sample_id: int = 0

    @property
    def degenerate(self) -> bool:
        return not bool(self.modulation_mask.any())


def frame_seed(scene_seed: int, frame: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(scene_seed), int(frame)])


def render_stack(spec: SceneSpec, noise: NoiseSpec, n_steps: int) -> list[np.ndarray]:
    """Degraded N-step stack; frame n is seeded from (scene seed, n)."""
    phase = phase_surface(spec)
    stack = synth_stack(phase, spec, n_steps)
    return [degrade(img, noise, frame_seed(spec.seed, n)) for n, img in enumerate(stack)]


def sample_from_stack(stack, mask_threshold: float = DEFAULT_MASK_THRESHOLD,
                      scene: SceneSpec | None = None, sample_id: int = 0) -> Sample:
    """Ground truth by phase shifting on the (already degraded) frames."""
    n = len(stack)
    phasor = ps_phasor(stack)
    mask = np.hypot(phasor.numerator, phasor.denominator) * (2.0 / n) >= mask_threshold
    return Sample(
        fringe=np.asarray(stack[0], dtype=np.float64),
        background_gt=ps_background(stack),
        phasor_gt=phasor,
        phase_gt=phase_from_phasor(phasor),
        modulation_mask=mask,
        scene=scene,
        sample_id=sample_id,
    )


def gen_dataset(scenes, noise: NoiseSpec, n_steps: int = 12,
                mask_threshold: float = DEFAULT_MASK_THRESHOLD) -> list[Sample]:
    if n_steps < 3:
        raise ValidationError(f"n_steps must be >= 3, got {n_steps}")
    out = []
    for i, spec in enumerate(scenes):
        spec.validate()
        out.append(sample_from_stack(render_stack(spec, noise, n_steps), mask_threshold,
                                     scene=spec, sample_id=i))
    return out


# --------------------------------------------------------------------------- scene distribution

def _random_illumination(rng, mean_a=110.0, mean_b=90.0):
    coeffs = tuple(float(c) for c in rng.uniform(-0.05, 0.05, size=5))
    contrast = float(rng.uniform(0.7, 1.0))
    return SmoothField(mean_a, coeffs), SmoothField(mean_b * contrast, coeffs)


def _random_bumps(rng, cx, cy, spread, budget, n_max=3):
    # sigma >= 1.6 * amplitude keeps each bump's slope under ~0.38 rad/px
    n = int(rng.integers(1, n_max + 1))
    amps = rng.dirichlet(np.ones(n)) * budget * rng.choice([-1, 1], size=n)
    bumps = []
    for amp in amps:
        sigma = float(rng.uniform(max(8.0, 1.6 * abs(amp)), max(12.0, 1.6 * abs(amp), spread)))
        center = (float(cx + rng.uniform(-spread, spread)), float(cy + rng.uniform(-spread, spread)))
        bumps.append(Bump(center, float(amp), sigma))
    return GaussianBumps(tuple(bumps))


def _random_step(rng, cx, width, max_height):
    height = float(rng.uniform(2.0, max_height)) * float(rng.choice([-1, 1]))
    return Step(height, float(cx + rng.uniform(-0.2, 0.2) * width), float(rng.uniform(-0.8, 0.8)))


def random_scene(seed: int, width: int = DEFAULT_SIZE, height: int = DEFAULT_SIZE,
                 carrier_frequency: float = DEFAULT_CARRIER, kind: str | None = None,
                 max_amplitude: float = 20.0, max_step: float = 8.0) -> SceneSpec:
    """Draw a scene: ``smooth`` full-frame bumps, ``step`` bumps with a
    depth discontinuity, or ``isolated`` elliptical objects on a dim backdrop."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))
    if kind is None:
        kind = str(rng.choice(["smooth", "step", "isolated"], p=[0.2, 0.3, 0.5]))
    bg, mod = _random_illumination(rng)
    scale = min(width, height)
    tilt = Plane(float(rng.uniform(-np.pi, np.pi)), float(rng.uniform(-0.05, 0.05)),
                 float(rng.uniform(-0.05, 0.05)))

    if kind in ("smooth", "step"):
        budget = float(rng.uniform(0.0, max_amplitude))
        parts = [tilt, _random_bumps(rng, width / 2, height / 2, 0.35 * scale, budget)]
        if kind == "step":
            parts.append(_random_step(rng, width / 2, width, max_step))
        surface = Composite((SceneObject(tuple(parts), None),))
    elif kind == "isolated":
        objects = []
        for _ in range(int(rng.integers(1, 4))):
            ax = float(rng.uniform(0.15, 0.4) * scale)
            ay = float(rng.uniform(0.15, 0.4) * scale)
            cx = float(rng.uniform(0.25, 0.75) * width)
            cy = float(rng.uniform(0.25, 0.75) * height)
            ell = Ellipse(cx, cy, ax, ay, float(rng.uniform(0, np.pi)))
            parts = [Plane(float(rng.uniform(-np.pi, np.pi)), float(rng.uniform(-0.05, 0.05)),
                           float(rng.uniform(-0.05, 0.05))),
                     _random_bumps(rng, cx, cy, 0.5 * min(ax, ay),
                                   float(rng.uniform(0.0, max_amplitude)), n_max=2)]
            if rng.random() < 0.4:
                parts.append(_random_step(rng, cx, width * 0.5, max_step))
            objects.append(SceneObject(tuple(parts), ell))
        surface = Composite(tuple(objects))
    else:
        raise ValidationError(f"unknown scene kind {kind!r}")
    return SceneSpec(width, height, surface, bg, mod, float(carrier_frequency), int(seed))


# --------------------------------------------------------------------------- serialization

_PART_TYPES = {cls.kind: cls for cls in (Flat, GaussianBumps, Step, Plane, SphereCap, Composite)}


def _part_to_dict(part) -> dict:
    if isinstance(part, Composite):
        return {"kind": "composite",
                "outside_background": part.outside_background,
                "outside_modulation": part.outside_modulation,
                "objects": [{"support": None if o.support is None else dataclasses.asdict(o.support),
                             "parts": [_part_to_dict(p) for p in o.parts]} for o in part.objects]}
    d = dataclasses.asdict(part)
    d["kind"] = part.kind
    return d


def _part_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "composite":
        objects = tuple(
            SceneObject(tuple(_part_from_dict(p) for p in o["parts"]),
                        None if o["support"] is None else Ellipse(**o["support"]))
            for o in d["objects"])
        return Composite(objects, d["outside_background"], d["outside_modulation"])
    if kind == "gaussian-bumps":
        return GaussianBumps(tuple(Bump(tuple(b["center"]), b["amplitude"], b["sigma"])
                                   for b in d["bumps"]))
    if kind == "sphere":
        d["center"] = tuple(d["center"])
    return _PART_TYPES[kind](**d)


def scene_to_dict(spec: SceneSpec) -> dict:
    return {
        "width": spec.width, "height": spec.height,
        "surface": _part_to_dict(spec.surface),
        "background_field": dataclasses.asdict(spec.background_field),
        "modulation_field": dataclasses.asdict(spec.modulation_field),
        "carrier_frequency": spec.carrier_frequency, "seed": spec.seed,
        "max_intensity": spec.max_intensity,
    }


def scene_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        width=int(d["width"]), height=int(d["height"]),
        surface=_part_from_dict(d["surface"]),
        background_field=SmoothField(d["background_field"]["mean"],
                                     tuple(d["background_field"]["coeffs"])),
        modulation_field=SmoothField(d["modulation_field"]["mean"],
                                     tuple(d["modulation_field"]["coeffs"])),
        carrier_frequency=float(d["carrier_frequency"]), seed=int(d["seed"]),
        max_intensity=float(d.get("max_intensity", 255.0)),
    )
