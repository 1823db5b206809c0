"""``fringelab`` command line: gen, train, demod, unwrap, eval, compare, info.

Exit codes: 0 success, 1 validation / missing input, 2 I/O failure,
3 numeric failure (non-finite loss). ``FRINGELAB_THREADS`` caps the
number of BLAS / torch threads.
"""

from __future__ import annotations

import os

_threads = os.environ.get("FRINGELAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__, dataset, io  # noqa: E402
from .classical import (  # noqa: E402
    ConfigurationError, PhaseField, PhasorField, ValidationError, WftParams, ft_demod,
    phase_from_phasor, ps_phasor, wft_demod,
)
from .config import DEFAULTS, RunConfig  # noqa: E402
from .evaluate import (  # noqa: E402
    FitError, compare_predictions, phase_error, sphere_metrology, two_sphere_scene, write_error_csv,
)
from .networks import (  # noqa: E402
    Cnn1Config, Cnn2Config, Normalization, TrainConfig, TrainingError, cnn1_forward, cnn2_forward,
    demod_neural, direct_forward, load_checkpoint, save_checkpoint, train_cnn1, train_cnn2, train_direct,
)
from .nn import get_conv_backend  # noqa: E402
from .synth import NoiseSpec  # noqa: E402
from .unwrap import FrequencyPair, unwrap_with_order  # noqa: E402

log = logging.getLogger("fringelab")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
TIMING = "timing.json"


class NumericFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip(), where="--set")
    return cfg


def _require(path, flag: str) -> Path:
    if path is None:
        raise ValidationError(f"missing required input {flag}")
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{flag}: {p} does not exist")
    return p


def _load_image(path: Path) -> np.ndarray:
    if path.suffix.lower() in (".pgm", ".pnm"):
        return io.load_pgm(path)
    return io.load_fpt1(path).astype(np.float64)


def _wft_for(cfg: RunConfig, width: int, carrier: float) -> WftParams:
    return WftParams.around_carrier(carrier, width, cfg["eval.wft_halfband"],
                                    window_sigma=cfg["eval.wft_sigma"],
                                    freq_step=cfg["eval.wft_step"],
                                    threshold=cfg["eval.wft_threshold"])


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_loss"])), repr(float(h["val_loss"]))])


def _train_config(cfg: RunConfig, epochs: int) -> TrainConfig:
    return TrainConfig(learning_rate=cfg["train.learning_rate"], batch_size=cfg["train.batch_size"],
                       epochs=epochs, seed=cfg["train.seed"],
                       validation_fraction=cfg["scenes.validation_fraction"],
                       patience=cfg["train.patience"])


# --------------------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.scenes is not None:
        if args.scenes < 3:
            raise ValidationError(f"--scenes must be at least 3, got {args.scenes}")
        cfg.set("scenes.count", args.scenes)
    if args.seed is not None:
        cfg.set("scenes.seed", args.seed)
    manifest = dataset.generate(cfg, args.out, with_stacks=args.stacks)
    counts = manifest["split_counts"]
    print(f"wrote {len(manifest['samples'])} samples to {args.out} "
          f"(train {counts['train']}, validation {counts['validation']}, test {counts['test']})")
    return EXIT_OK


# --------------------------------------------------------------------------- train

def _record_time(out: Path, name: str, seconds: float, fresh: bool = False) -> None:
    """Accumulate wall-clock training seconds per network across resumes.

    Timing is metadata, like a timestamp, and is not one of the
    deterministic outputs.
    """
    path = out / TIMING
    timing = io.read_json(path) if path.exists() else {}
    timing[name] = (0.0 if fresh else timing.get(name, 0.0)) + seconds
    io.write_json(path, timing)


def _train_one(name, out: Path, train_fn, resume_flag):
    ckpt = out / f"{name}.fpw"
    resume = load_checkpoint(ckpt) if resume_flag and ckpt.exists() else None
    start = resume.epoch if resume is not None else 0
    fresh = resume is None
    t0 = time.perf_counter()

    def save(model):
        save_checkpoint(ckpt, model)
        _write_history(out / f"history_{name}.csv", model.history)

    try:
        model = train_fn(resume, save)
    except TrainingError as exc:
        _record_time(out, name, time.perf_counter() - t0, fresh)
        if exc.model is not None:
            save(exc.model)
        raise NumericFailure(f"{name}: {exc}") from exc
    advanced = model.epoch > start
    if fresh or advanced:  # a resume with nothing left to train costs no training time
        _record_time(out, name, time.perf_counter() - t0, fresh)
    save(model)
    return model, advanced


def cmd_train(args) -> int:
    cfg = _config(args)
    data_dir = _require(args.dataset, "--dataset")
    if not (data_dir / dataset.MANIFEST).exists():
        raise ValidationError(f"--dataset: no {dataset.MANIFEST} in {data_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.no_ablation:
        cfg.set("train.ablation", False)
    cfg.write(out / "config.resolved")

    manifest, splits = dataset.load(data_dir, ("train", "validation"))
    samples = splits["train"] + splits["validation"]
    n_tr = len(splits["train"])
    split = (np.arange(n_tr), np.arange(n_tr, len(samples)))
    norm = Normalization(float(manifest["intensity_scale"]), int(manifest["n_steps"]))
    blocks = cfg["network.residual_blocks"]

    _, cnn1_changed = _train_one("cnn1", out, lambda resume, cb: train_cnn1(
        samples, _train_config(cfg, cfg["train.cnn1_epochs"]),
        Cnn1Config(cfg["network.cnn1_channels"], blocks), norm, split, resume, cb), args.resume)
    # CNN2 sees the frozen CNN1 exactly as written to disk; a CNN2 checkpoint
    # trained against an older CNN1 is stale and is not resumed
    cnn1 = load_checkpoint(out / "cnn1.fpw")
    _train_one("cnn2", out, lambda resume, cb: train_cnn2(
        samples, cnn1, _train_config(cfg, cfg["train.cnn2_epochs"]),
        Cnn2Config(cfg["network.cnn2_channels"], blocks), norm, split, resume, cb),
        args.resume and not cnn1_changed)
    if cfg["train.ablation"]:
        epochs = cfg["train.cnn1_epochs"] + cfg["train.cnn2_epochs"]
        _train_one("direct", out, lambda resume, cb: train_direct(
            samples, _train_config(cfg, epochs),
            Cnn2Config(cfg["network.cnn2_channels"], blocks, in_channels=1, out_channels=1),
            norm, split, resume, cb), args.resume)
    print(f"trained networks written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- demod

def _load_stack(stack_dir: Path) -> list[np.ndarray]:
    images = sorted(p for p in stack_dir.iterdir() if p.suffix.lower() in (".pgm", ".fpt"))
    # a dataset sample directory also holds fringe/mask images next to its frame_XX files
    frames = [p for p in images if p.name.startswith("frame_")] or images
    if not frames:
        raise ValidationError(f"--stack: no .pgm/.fpt frames in {stack_dir}")
    return [_load_image(p) for p in frames]


def _load_weights(weights_dir: Path):
    missing = [n for n in ("cnn1.fpw", "cnn2.fpw") if not (weights_dir / n).exists()]
    if missing:
        raise ValidationError(f"--weights: {weights_dir} lacks {', '.join(missing)}")
    return load_checkpoint(weights_dir / "cnn1.fpw"), load_checkpoint(weights_dir / "cnn2.fpw")


def demodulate(method: str, cfg: RunConfig, fringe=None, stack=None, weights=None,
               carrier: float | None = None) -> PhasorField | PhaseField:
    """Shared by ``demod`` and ``compare``; returns a PhasorField (or PhaseField for ``direct``)."""
    if method == "ps":
        return ps_phasor(stack)
    img = fringe if fringe is not None else (stack[0] if stack is not None else None)
    if img is None:
        raise ValidationError(f"method {method} needs --input or --stack")
    width = img.shape[1]
    carrier = carrier if carrier is not None else cfg["scenes.carrier"] * width / cfg["scenes.width"]
    if method == "ft":
        return ft_demod(img, carrier, cfg["eval.ft_bandwidth"], cfg["eval.ft_taper"])
    if method == "wft":
        return wft_demod(img, _wft_for(cfg, width, carrier))
    if method == "cnn":
        cnn1, cnn2 = weights
        return cnn2_forward(img, cnn1_forward(img, cnn1), cnn2)
    raise ValidationError(f"unknown method {method!r}")


def cmd_demod(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    stack = fringe = weights = None
    if args.method == "ps":
        stack = _load_stack(_require(args.stack, "--stack"))
    elif args.input is None and args.stack is not None:
        stack = _load_stack(_require(args.stack, "--stack"))
    else:
        fringe = _load_image(_require(args.input, "--input"))
    if args.method == "cnn":
        weights = _load_weights(_require(args.weights, "--weights"))
    phasor = demodulate(args.method, cfg, fringe, stack, weights, args.carrier)
    phase = phase_from_phasor(phasor)
    out.mkdir(parents=True, exist_ok=True)
    io.save_fpt1(out / "phase.fpt", phase.values)
    io.save_fpt1(out / "numerator.fpt", phasor.numerator)
    io.save_fpt1(out / "denominator.fpt", phasor.denominator)
    io.save_pgm(out / "valid.pgm", phase.valid * 255)
    io.save_png_gray(out / "phase.png", phase.values, -np.pi, np.pi)
    cfg.write(out / "config.resolved")
    print(f"{args.method} phase written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- unwrap / eval

def cmd_unwrap(args) -> int:
    high = PhaseField(_load_image(_require(args.high, "--high")), wrapped=True)
    low = PhaseField(_load_image(_require(args.low, "--low")), wrapped=args.f_low == 1)
    mask = _load_image(_require(args.mask, "--mask")) > 0 if args.mask else None
    res = unwrap_with_order(FrequencyPair(args.f_high, args.f_low, high, low), mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_fpt1(out / "unwrapped.fpt", res.phase.values)
    if args.order:
        io.save_fpt1(out / "order.fpt", res.order)
    io.write_json(out / "unwrap_report.json", {"warning": res.warning,
                                               "max_abs_residual": float(np.max(np.abs(res.residual)))})
    if res.warning:
        print(f"warning: {res.warning}", file=sys.stderr)
    print(f"unwrapped phase written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = _load_image(_require(args.pred, "--pred"))
    gt = _load_image(_require(args.gt, "--gt"))
    if pred.shape != gt.shape:
        raise ValidationError(f"--pred {pred.shape} and --gt {gt.shape} differ in shape")
    mask = _load_image(_require(args.mask, "--mask")) > 0 if args.mask else np.ones(gt.shape, bool)
    wrapped = not args.unwrapped
    rep = phase_error(PhaseField(pred, wrapped), PhaseField(gt, wrapped), mask, args.method,
                      args.margin)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_error_csv(out / "report.csv", [rep.row(args.scene_id)])
    io.write_json(out / "report.json", {k: v for k, v in rep.row(args.scene_id).items()})
    io.save_fpt1(out / f"{args.scene_id}_{args.method}_err.fpt", rep.error_map)
    io.save_png_heatmap(out / f"{args.scene_id}_{args.method}_err.png", rep.error_map, 0.0,
                        max(rep.max_abs, 1e-12), rep.mask)
    print(f"{args.method}: MAE {rep.mae:.6f} rad over {rep.masked_pixel_count} px")
    return EXIT_OK


# --------------------------------------------------------------------------- compare

def run_comparison(cfg: RunConfig, samples, weights=None, direct=None, out=None):
    """Score ft, wft and (given weights) cnn / direct on ``samples``; returns the Comparison."""
    fringes = np.stack([s.fringe for s in samples])
    preds = {
        "ft": [phase_from_phasor(demodulate("ft", cfg, f)) for f in fringes],
        "wft": [phase_from_phasor(demodulate("wft", cfg, f)) for f in fringes],
    }
    if weights is not None:
        preds["cnn"] = demod_neural(fringes, *weights)
    if direct is not None:
        preds["direct"] = direct_forward(fringes, direct)
    return compare_predictions(samples, preds, out, cfg["eval.margin"])


def run_metrology(cfg: RunConfig, weights=None) -> dict:
    scene = two_sphere_scene(cfg["metrology.width"], cfg["metrology.height"], cfg["metrology.carrier"],
                             cfg["metrology.lateral_mm_per_px"], cfg["metrology.k_mm_per_rad"],
                             seed=cfg["metrology.seed"])
    noise = NoiseSpec(cfg["metrology.noise_sigma"], cfg["noise.bit_depth"], cfg["noise.clip"])
    thr = cfg["dataset.mask_threshold"]
    results = {"ps": sphere_metrology(scene, noise, mask_threshold=thr)}
    if weights is not None:
        results["cnn"] = sphere_metrology(
            scene, noise, lambda st: demod_neural(st[0], *weights), mask_threshold=thr)
    return {"ground_truth": {"radii_mm": list(scene.radii_mm),
                             "center_distance_mm": scene.distance_mm},
            **{k: v.to_dict() for k, v in results.items()}}


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved")
    weights = direct = None
    if args.weights:
        wdir = _require(args.weights, "--weights")
        weights = _load_weights(wdir)
        if (wdir / "direct.fpw").exists():
            direct = load_checkpoint(wdir / "direct.fpw")
    elif args.require_cnn:
        raise ConfigurationError("cnn comparison requested but --weights not given")
    if args.dataset:
        _, splits = dataset.load(_require(args.dataset, "--dataset"), ("test",))
        samples = splits["test"]
    else:
        n_tr, n_val, _ = cfg.split_counts()
        seeds = dataset.scene_seeds(cfg)["test"]
        samples = [dataset.build_sample(cfg, s, n_tr + n_val + i) for i, s in enumerate(seeds)]
    comp = run_comparison(cfg, samples, weights, direct, out)
    metrology = run_metrology(cfg, weights)
    io.write_json(out / "spheres.json", metrology)
    summary = {"aggregate_mae_rad": comp.aggregate, "ordering": comp.ordering,
               "scenes": len(samples)}
    if weights is not None:
        agg = comp.aggregate
        summary["ordering_holds"] = agg["cnn"] < agg["wft"] < agg["ft"]
        if direct is not None:
            summary["pipeline_beats_direct"] = agg["cnn"] < agg["direct"]
    io.write_json(out / "summary.json", summary)
    for name in comp.ordering:
        print(f"{name:>7s}  MAE {comp.aggregate[name]:.4f} rad")
    return EXIT_OK


def cmd_info(args) -> int:
    print(f"fringelab {__version__}")
    print(f"conv backend: {get_conv_backend()}")
    print(f"threads cap (FRINGELAB_THREADS): {os.environ.get('FRINGELAB_THREADS', 'unset')}")
    print(f"config keys: {len(DEFAULTS)}")
    if args.defaults:
        print(RunConfig().dump(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fringelab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    g = sub.add_parser("gen", help="render a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--stacks", action="store_true", help="also write every phase-shifted frame")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train CNN1, then CNN2 (and the direct ablation)")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    t.add_argument("--no-ablation", action="store_true")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("demod", help="demodulate a fringe image or stack")
    common(d)
    d.add_argument("--method", choices=["ps", "ft", "wft", "cnn"], required=True)
    d.add_argument("--input", help="single fringe (.pgm or .fpt)")
    d.add_argument("--stack", help="directory of phase-shifted frames (frame_* files if present, "
                                   "else every .pgm/.fpt, sorted by name)")
    d.add_argument("--weights", help="directory holding cnn1.fpw and cnn2.fpw")
    d.add_argument("--carrier", type=float, help="carrier in fringes per image width")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_demod)

    u = sub.add_parser("unwrap", help="two-frequency temporal phase unwrapping")
    u.add_argument("--high", required=True)
    u.add_argument("--low", required=True)
    u.add_argument("--f-high", type=float, required=True)
    u.add_argument("--f-low", type=float, default=1.0)
    u.add_argument("--mask")
    u.add_argument("--order", action="store_true", help="also write the fringe-order map")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_unwrap)

    e = sub.add_parser("eval", help="phase error of a prediction against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mask")
    e.add_argument("--unwrapped", action="store_true")
    e.add_argument("--method", default="pred")
    e.add_argument("--scene-id", default="scene")
    e.add_argument("--margin", type=int, default=4)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="FT / WFT / CNN comparison and sphere metrology")
    common(c)
    c.add_argument("--dataset", help="dataset whose test split is scored (default: render from config)")
    c.add_argument("--weights")
    c.add_argument("--require-cnn", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("info", help="version, backend and configuration keys")
    i.add_argument("--defaults", action="store_true", help="print the default configuration")
    i.set_defaults(func=cmd_info)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except NumericFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ConfigurationError, FitError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    raise SystemExit(run())
