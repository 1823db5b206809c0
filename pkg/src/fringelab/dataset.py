"""Datasets on disk: a JSON manifest plus per-sample PGM/FPT1 files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import io
from .classical import PhaseField, PhasorField
from .config import RunConfig
from .synth import (
    NoiseSpec, Sample, random_scene, render_stack, sample_from_stack, scene_from_dict, scene_to_dict,
)

MANIFEST = "manifest.json"
SPLITS = ("train", "validation", "test")


def noise_from_config(cfg: RunConfig) -> NoiseSpec:
    return NoiseSpec(cfg["noise.sigma"], cfg["noise.bit_depth"], cfg["noise.clip"])


def scene_seeds(cfg: RunConfig) -> dict[str, list[int]]:
    """Per-split scene seeds; test seeds never overlap training ones."""
    n_train, n_val, n_test = cfg.split_counts()
    base = cfg["scenes.seed"] * 1_000_003
    seeds = [base + i for i in range(n_train + n_val + n_test)]
    return {"train": seeds[:n_train], "validation": seeds[n_train:n_train + n_val],
            "test": seeds[n_train + n_val:]}


def make_scene(cfg: RunConfig, seed: int):
    return random_scene(seed, cfg["scenes.width"], cfg["scenes.height"], cfg["scenes.carrier"],
                        max_amplitude=cfg["scenes.max_amplitude"], max_step=cfg["scenes.max_step"])


def build_sample(cfg: RunConfig, seed: int, sample_id: int = 0, with_stack: bool = False):
    spec = make_scene(cfg, seed)
    spec.validate()
    stack = render_stack(spec, noise_from_config(cfg), cfg["dataset.n_steps"])
    sample = sample_from_stack(stack, cfg["dataset.mask_threshold"], scene=spec, sample_id=sample_id)
    return (sample, stack) if with_stack else sample


def write_sample(directory: Path, sample: Sample, maxval: int, stack=None) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "fringe": "fringe.pgm",
        "background": "background.fpt",
        "numerator": "numerator.fpt",
        "denominator": "denominator.fpt",
        "phase": "phase.fpt",
        "mask": "mask.pgm",
    }
    io.save_pgm(directory / files["fringe"], sample.fringe, maxval)
    io.save_fpt1(directory / files["background"], sample.background_gt)
    io.save_fpt1(directory / files["numerator"], sample.phasor_gt.numerator)
    io.save_fpt1(directory / files["denominator"], sample.phasor_gt.denominator)
    io.save_fpt1(directory / files["phase"], sample.phase_gt.values)
    io.save_pgm(directory / files["mask"], sample.modulation_mask * 255)
    if stack is not None:
        files["stack"] = []
        for n, frame in enumerate(stack):
            name = f"frame_{n:02d}.pgm"
            io.save_pgm(directory / name, frame, maxval)
            files["stack"].append(name)
    return files


def generate(cfg: RunConfig, out_dir, with_stacks: bool = False) -> dict:
    """Render every split to ``out_dir`` and write the manifest. Deterministic per config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maxval = 2 ** cfg["noise.bit_depth"] - 1
    manifest = {"format": "fringelab-dataset-1", "n_steps": cfg["dataset.n_steps"],
                "intensity_scale": maxval,
                "split_counts": {k: len(v) for k, v in scene_seeds(cfg).items()},
                "samples": []}
    sample_id = 0
    for split, seeds in scene_seeds(cfg).items():
        for seed in seeds:
            sample, stack = build_sample(cfg, seed, sample_id, with_stack=True)
            rel = Path("samples") / f"{sample_id:05d}"
            files = write_sample(out / rel, sample, maxval, stack if with_stacks else None)
            manifest["samples"].append({
                "id": sample_id, "split": split, "seed": seed, "dir": rel.as_posix(),
                "files": files, "degenerate": sample.degenerate,
                "scene": scene_to_dict(sample.scene),
            })
            sample_id += 1
    cfg.write(out / "config.resolved")
    io.write_json(out / MANIFEST, manifest)
    return manifest


def read_sample(root: Path, entry: dict, n_steps: int) -> Sample:
    d = root / entry["dir"]
    f = entry["files"]
    phasor = PhasorField(io.load_fpt1(d / f["numerator"]), io.load_fpt1(d / f["denominator"]),
                         scale_c=n_steps / 2)
    return Sample(
        fringe=io.load_pgm(d / f["fringe"]),
        background_gt=io.load_fpt1(d / f["background"]).astype(np.float64),
        phasor_gt=phasor,
        phase_gt=PhaseField(io.load_fpt1(d / f["phase"]), wrapped=True),
        modulation_mask=io.load_pgm(d / f["mask"]) > 0,
        scene=scene_from_dict(entry["scene"]),
        sample_id=int(entry["id"]),
    )


def load(dataset_dir, splits=SPLITS) -> tuple[dict, dict[str, list[Sample]]]:
    root = Path(dataset_dir)
    manifest = io.read_json(root / MANIFEST)
    out = {s: [] for s in splits}
    for entry in manifest["samples"]:
        if entry["split"] in out:
            out[entry["split"]].append(read_sample(root, entry, manifest["n_steps"]))
    return manifest, out
