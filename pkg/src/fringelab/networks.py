"""Two-stage neural demodulation: fringe -> background -> (M, D) -> arctangent.

CNN1 regresses the background intensity from the raw fringe. CNN2 takes
the fringe plus CNN1's background and regresses the numerator and
denominator of the arctangent. A single-network fringe -> phase
regressor (``DirectNet``) is kept for the ablation comparison.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import io
from .classical import PhaseField, PhasorField, ValidationError, phase_from_phasor
from .nn import (
    Adam, Conv2d, Downsample2x, Module, ReLU, ResidualBlock, Sequential, Upsample2x, mse_loss,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Loss became non-finite; ``model`` holds the last finite weights."""

    def __init__(self, msg, model=None, history=None):
        super().__init__(msg)
        self.model = model
        self.history = history


@dataclass
class Normalization:
    """Maps intensities and phasor values to O(1) network targets."""

    intensity_scale: float = 255.0
    n_steps: int = 12

    @property
    def phasor_scale(self) -> float:
        return self.n_steps / 2 * self.intensity_scale


@dataclass
class Cnn1Config:
    base_channels: int = 32
    n_residual_blocks: int = 4
    kernel: int = 3

    def __post_init__(self):
        if self.n_residual_blocks != 4:
            log.warning("CNN1 built with %d residual blocks instead of 4", self.n_residual_blocks)


@dataclass
class Cnn2Config:
    base_channels: int = 32
    n_residual_blocks: int = 4
    kernel: int = 3
    in_channels: int = 2
    out_channels: int = 2


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    validation_fraction: float = 150 / 960
    patience: int = 20

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValidationError("validation_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")


# --------------------------------------------------------------------------- architectures

HEAD_INIT_SCALE = 0.1


def _shrink_head(conv: Conv2d) -> None:
    conv.weight.data *= HEAD_INIT_SCALE

class Cnn1(Module):
    """conv -> residual blocks -> conv -> linear conv to one channel."""

    def __init__(self, cfg: Cnn1Config | None = None, seed: int = 0):
        self.cfg = cfg or Cnn1Config()
        c, k = self.cfg.base_channels, self.cfg.kernel
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.net = Sequential(
            Conv2d(1, c, k, rng=rng), ReLU(),
            *[ResidualBlock(c, k, rng=rng, zero_init=True) for _ in range(self.cfg.n_residual_blocks)],
            Conv2d(c, c, k, rng=rng), ReLU(),
            Conv2d(c, 1, k, rng=rng),
        )
        _shrink_head(self.net.layers[-1])

    def parameters(self):
        return self.net.parameters()

    def forward(self, x):
        return self.net.forward(x)

    def backward(self, dy):
        return self.net.backward(dy)

    def spec(self):
        return {"kind": "cnn1", "config": asdict(self.cfg), "body": self.net.spec()}


class Cnn2(Module):
    """Two-scale network: a full-resolution path and a x2 down/up path, fused by concatenation."""

    def __init__(self, cfg: Cnn2Config | None = None, seed: int = 0):
        self.cfg = cfg or Cnn2Config()
        c, k, n = self.cfg.base_channels, self.cfg.kernel, self.cfg.n_residual_blocks
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.path1 = Sequential(Conv2d(self.cfg.in_channels, c, k, rng=rng), ReLU(),
                                *[ResidualBlock(c, k, rng=rng, zero_init=True) for _ in range(n)])
        self.path2 = Sequential(Downsample2x(self.cfg.in_channels, c, rng=rng), ReLU(),
                                *[ResidualBlock(c, k, rng=rng, zero_init=True) for _ in range(n)],
                                Upsample2x(c, c, rng=rng), ReLU())
        self.head = Sequential(Conv2d(2 * c, c, k, rng=rng), ReLU(),
                               Conv2d(c, self.cfg.out_channels, k, rng=rng))
        _shrink_head(self.head.layers[-1])

    def parameters(self):
        return self.path1.parameters() + self.path2.parameters() + self.head.parameters()

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValidationError(f"CNN2 needs even image dimensions, got {x.shape[2:]}")
        fused = np.concatenate([self.path1.forward(x), self.path2.forward(x)], axis=1)
        return self.head.forward(fused)

    def backward(self, dy):
        c = self.cfg.base_channels
        d = self.head.backward(dy)
        return self.path1.backward(d[:, :c]) + self.path2.backward(d[:, c:])

    def spec(self):
        return {"kind": "cnn2", "config": asdict(self.cfg),
                "path1": self.path1.spec(), "path2": self.path2.spec(), "head": self.head.spec()}


class DirectNet(Cnn2):
    """Ablation: the CNN2 topology mapping the fringe straight to phase / pi."""

    def __init__(self, cfg: Cnn2Config | None = None, seed: int = 0):
        base = cfg or Cnn2Config()
        super().__init__(replace(base, in_channels=1, out_channels=1), seed)

    def spec(self):
        return {**super().spec(), "kind": "direct"}


@dataclass
class TrainedModel:
    """A network plus everything needed to use or resume it."""

    net: Module
    norm: Normalization = field(default_factory=Normalization)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    epoch: int = 0
    optimizer: Adam | None = None
    history: list = field(default_factory=list)
    best_val: float = math.inf

    @property
    def kind(self) -> str:
        return self.net.spec()["kind"]


# --------------------------------------------------------------------------- inference

def _as_batch(images, dtype=np.float32):
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def _run(net: Module, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    outs = [net.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def _unwrap_model(m):
    return (m.net, m.norm) if isinstance(m, TrainedModel) else (m, Normalization())


def cnn1_forward(fringe, weights) -> np.ndarray:
    """Predicted background in intensity units; accepts one image or a stack."""
    net, norm = _unwrap_model(weights)
    x = _as_batch(fringe)
    if x.ndim != 3:
        raise ValidationError("fringe must be an image or a stack of images")
    y = _run(net, x[:, None] / norm.intensity_scale)[:, 0] * norm.intensity_scale
    return y[0] if np.ndim(fringe) == 2 else y


def _cnn2_raw(fringe, background, weights):
    net, norm = _unwrap_model(weights)
    f, b = _as_batch(fringe), _as_batch(background)
    if f.shape != b.shape:
        raise ValidationError(f"fringe {f.shape} and background {b.shape} differ in shape")
    x = np.stack([f, b], axis=1) / norm.intensity_scale
    return _run(net, x.astype(np.float32)) * norm.phasor_scale, norm


def cnn2_forward(fringe, background, weights):
    """Predicted (M, D) as a PhasorField with the phase-shifting scale c = N/2."""
    out, norm = _cnn2_raw(fringe, background, weights)
    fields = [PhasorField(o[0], o[1], scale_c=norm.n_steps / 2) for o in out]
    return fields[0] if np.ndim(fringe) == 2 else fields


def demod_neural(fringe, cnn1, cnn2):
    """End-to-end single-frame phase: arctangent of CNN2's (M, D)."""
    bg = cnn1_forward(fringe, cnn1)
    phasors = cnn2_forward(fringe, bg, cnn2)
    if isinstance(phasors, list):
        return [phase_from_phasor(p) for p in phasors]
    return phase_from_phasor(phasors)


def direct_forward(fringe, weights):
    net, norm = _unwrap_model(weights)
    x = _as_batch(fringe)[:, None] / norm.intensity_scale
    out = _run(net, x)[:, 0].astype(np.float64) * np.pi
    fields = [PhaseField(o, wrapped=True) for o in out]
    return fields[0] if np.ndim(fringe) == 2 else fields


# --------------------------------------------------------------------------- training

def split_indices(n: int, validation_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic disjoint (train, validation) index split."""
    if n < 2:
        raise ValidationError("need at least two samples to split")
    n_val = min(max(int(round(n * validation_fraction)), 1), n - 1)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _snapshot(net):
    return [p.data.copy() for p in net.parameters()]


def _restore(net, snap):
    for p, d in zip(net.parameters(), snap):
        p.data[...] = d


def _eval_loss(net, x, y, batch_size):
    total = 0.0
    for i in range(0, len(x), batch_size):
        loss, _ = mse_loss(net.forward(x[i:i + batch_size]), y[i:i + batch_size])
        total += loss * len(x[i:i + batch_size])
    return total / max(len(x), 1)


def fit(model: TrainedModel, x_train, y_train, x_val, y_val, epochs: int | None = None,
        on_epoch=None) -> TrainedModel:
    """Adam on MSE with early stopping on validation loss; best weights are kept.

    Resumes from ``model.epoch`` / ``model.optimizer`` when present, so
    epoch numbering continues across calls.
    """
    cfg = model.train_config
    net = model.net
    if len(x_train) == 0:
        raise ValidationError("empty training set")
    if model.optimizer is None:
        model.optimizer = Adam(net.parameters(), lr=cfg.learning_rate)
    opt = model.optimizer
    target_epoch = cfg.epochs if epochs is None else model.epoch + epochs
    best = _snapshot(net)
    stale = 0
    if model.history:
        stale = model.epoch - min(model.history, key=lambda h: h["val_loss"])["epoch"]
    while model.epoch < target_epoch and stale < cfg.patience:
        epoch = model.epoch + 1
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(len(x_train))
        last_good = _snapshot(net)
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            net.zero_grad()
            pred = net.forward(x_train[idx])
            loss, grad = mse_loss(pred, y_train[idx])
            if not math.isfinite(loss):
                _restore(net, last_good)
                raise TrainingError(f"non-finite loss at epoch {epoch}", model, model.history)
            net.backward(grad.astype(pred.dtype))
            opt.step()
            losses.append(loss * len(idx))
        train_loss = sum(losses) / len(order)
        val_loss = _eval_loss(net, x_val, y_val, cfg.batch_size) if len(x_val) else train_loss
        if not math.isfinite(val_loss):
            _restore(net, last_good)
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", model, model.history)
        model.epoch = epoch
        model.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("%s epoch %d train %.6g val %.6g", model.kind, epoch, train_loss, val_loss)
        if val_loss < model.best_val:
            model.best_val = val_loss
            best = _snapshot(net)
            stale = 0
        else:
            stale += 1
        if on_epoch is not None:
            on_epoch(model)
    _restore(net, best)
    return model


def _stack_inputs(samples, norm: Normalization):
    fr = np.stack([s.fringe for s in samples]).astype(np.float32) / norm.intensity_scale
    return fr[:, None]


def _split_samples(dataset, cfg, split):
    if not dataset:
        raise ValidationError("empty dataset")
    if split is None:
        split = split_indices(len(dataset), cfg.validation_fraction, cfg.seed)
    tr, va = split
    if set(map(int, tr)) & set(map(int, va)):
        raise ValidationError("train and validation indices overlap")
    return [dataset[i] for i in tr], [dataset[i] for i in va]


def train_cnn1(dataset, cfg: TrainConfig | None = None, net_cfg: Cnn1Config | None = None,
               norm: Normalization | None = None, split=None, resume: TrainedModel | None = None,
               on_epoch=None) -> TrainedModel:
    cfg = cfg or TrainConfig()
    norm = norm or Normalization()
    train, val = _split_samples(dataset, cfg, split)
    model = resume or TrainedModel(Cnn1(net_cfg, seed=cfg.seed), norm, cfg)
    model.train_config = cfg

    def xy(ss):
        y = np.stack([s.background_gt for s in ss]).astype(np.float32)[:, None] / norm.intensity_scale
        return _stack_inputs(ss, norm), y

    return fit(model, *xy(train), *xy(val), on_epoch=on_epoch)


def cnn2_inputs(samples, cnn1, norm: Normalization) -> np.ndarray:
    """Network input for CNN2: fringe and CNN1's predicted background, normalized."""
    fr = np.stack([s.fringe for s in samples]).astype(np.float32)
    bg = cnn1_forward(fr, cnn1)
    return np.stack([fr, bg], axis=1).astype(np.float32) / norm.intensity_scale


def train_cnn2(dataset, cnn1, cfg: TrainConfig | None = None, net_cfg: Cnn2Config | None = None,
               norm: Normalization | None = None, split=None, resume: TrainedModel | None = None,
               on_epoch=None) -> TrainedModel:
    """Train CNN2 on backgrounds predicted by a frozen CNN1."""
    cfg = cfg or TrainConfig()
    norm = norm or (cnn1.norm if isinstance(cnn1, TrainedModel) else Normalization())
    train, val = _split_samples(dataset, cfg, split)
    model = resume or TrainedModel(Cnn2(net_cfg, seed=cfg.seed), norm, cfg)
    model.train_config = cfg

    def xy(ss):
        y = np.stack([np.stack([s.phasor_gt.numerator, s.phasor_gt.denominator]) for s in ss])
        return cnn2_inputs(ss, cnn1, norm), (y / norm.phasor_scale).astype(np.float32)

    return fit(model, *xy(train), *xy(val), on_epoch=on_epoch)


def train_direct(dataset, cfg: TrainConfig | None = None, net_cfg: Cnn2Config | None = None,
                 norm: Normalization | None = None, split=None, resume: TrainedModel | None = None,
                 on_epoch=None) -> TrainedModel:
    """Ablation: regress the wrapped phase (scaled by 1/pi) directly from the fringe."""
    cfg = cfg or TrainConfig()
    norm = norm or Normalization()
    train, val = _split_samples(dataset, cfg, split)
    model = resume or TrainedModel(DirectNet(net_cfg, seed=cfg.seed), norm, cfg)
    model.train_config = cfg

    def xy(ss):
        y = np.stack([s.phase_gt.values for s in ss]).astype(np.float32)[:, None] / np.pi
        return _stack_inputs(ss, norm), y

    return fit(model, *xy(train), *xy(val), on_epoch=on_epoch)


# --------------------------------------------------------------------------- checkpoints

_ARCH = {"cnn1": (Cnn1, Cnn1Config), "cnn2": (Cnn2, Cnn2Config), "direct": (DirectNet, Cnn2Config)}


def save_checkpoint(path, model: TrainedModel) -> None:
    """FPW1 file: weights in declaration order, then Adam moments if present."""
    params = model.net.parameters()
    spec = model.net.spec()
    header = {
        "format": "FPW1",
        "kind": spec["kind"],
        "layers": spec,
        "net_config": spec["config"],
        "shapes": [list(p.shape) for p in params],
        "normalization": asdict(model.norm),
        "train_config": asdict(model.train_config),
        "seed": model.train_config.seed,
        "epoch": model.epoch,
        "step": model.optimizer.step_count if model.optimizer else 0,
        "optimizer": model.optimizer.state() if model.optimizer else None,
        "best_val": model.best_val if math.isfinite(model.best_val) else None,
        "history": model.history,
    }
    tensors = [p.data for p in params]
    if model.optimizer is not None:
        tensors += model.optimizer.m + model.optimizer.v
    io.save_fpw1(path, header, tensors)


def load_checkpoint(path) -> TrainedModel:
    header, tensors = io.load_fpw1(path)
    kind = header["kind"]
    if kind not in _ARCH:
        raise io.FormatError(f"unknown network kind {kind!r}")
    net_cls, cfg_cls = _ARCH[kind]
    tcfg = TrainConfig(**header["train_config"])
    net = net_cls(cfg_cls(**header["net_config"]), seed=tcfg.seed)
    params = net.parameters()
    if len(tensors) < len(params):
        raise io.FormatError(f"{path}: expected {len(params)} tensors, found {len(tensors)}")
    for p, t in zip(params, tensors):
        if p.shape != t.shape:
            raise io.FormatError(f"{path}: tensor shape {t.shape} != {p.shape}")
        p.data[...] = t
    model = TrainedModel(net, Normalization(**header["normalization"]), tcfg,
                         epoch=int(header["epoch"]), history=list(header.get("history", [])),
                         best_val=header.get("best_val") or math.inf)
    if header.get("optimizer") and len(tensors) == 3 * len(params):
        opt = Adam(params, lr=header["optimizer"]["lr"], beta1=header["optimizer"]["beta1"],
                   beta2=header["optimizer"]["beta2"], eps=header["optimizer"]["eps"])
        n = len(params)
        opt.load_state(header["optimizer"], tensors[n:2 * n], tensors[2 * n:])
        model.optimizer = opt
    return model


def clone(model: TrainedModel) -> TrainedModel:
    return copy.deepcopy(model)
