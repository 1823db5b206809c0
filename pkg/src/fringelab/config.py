"""Plain-text run configuration: ``section.key = value`` lines, ``#`` comments."""

from __future__ import annotations

from pathlib import Path

from .classical import ValidationError

# (default, type); bool values accept true/false/yes/no/1/0
DEFAULTS: dict[str, tuple[object, type]] = {
    "scenes.count": (1000, int),
    "scenes.train_fraction": (0.8, float),
    "scenes.validation_fraction": (0.15, float),
    "scenes.width": (128, int),
    "scenes.height": (128, int),
    "scenes.carrier": (32.0, float),
    "scenes.max_amplitude": (20.0, float),
    "scenes.max_step": (8.0, float),
    "scenes.seed": (0, int),
    "noise.sigma": (2.0, float),
    "noise.bit_depth": (8, int),
    "noise.clip": (True, bool),
    "dataset.n_steps": (12, int),
    "dataset.mask_threshold": (10.0, float),
    "network.cnn1_channels": (32, int),
    "network.cnn2_channels": (32, int),
    "network.residual_blocks": (4, int),
    "train.learning_rate": (1e-3, float),
    "train.batch_size": (8, int),
    "train.cnn1_epochs": (8, int),
    "train.cnn2_epochs": (20, int),
    "train.patience": (20, int),
    "train.seed": (0, int),
    "train.ablation": (True, bool),
    "eval.margin": (4, int),
    "eval.ft_bandwidth": (20.0, float),
    "eval.ft_taper": (4.0, float),
    "eval.wft_sigma": (3.0, float),
    "eval.wft_halfband": (0.8, float),
    "eval.wft_step": (0.1, float),
    "eval.wft_threshold": (6.0, float),
    "metrology.width": (256, int),
    "metrology.height": (128, int),
    "metrology.carrier": (64.0, float),
    "metrology.lateral_mm_per_px": (0.7, float),
    "metrology.k_mm_per_rad": (2.5, float),
    "metrology.noise_sigma": (2.0, float),
    "metrology.seed": (0, int),
}

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _convert(key: str, raw: str, where: str):
    kind = DEFAULTS[key][1]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ValidationError(f"{where}: bad value {raw!r} for {key} ({kind.__name__})") from None


class RunConfig(dict):
    """Resolved configuration; missing keys fall back to ``DEFAULTS``."""

    def __init__(self, values: dict | None = None):
        super().__init__({k: v for k, (v, _) in DEFAULTS.items()})
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value, where: str = "override"):
        if key not in DEFAULTS:
            raise ValidationError(f"{where}: unknown key {key!r}")
        self[key] = _convert(key, str(value), where) if isinstance(value, str) else DEFAULTS[key][1](value)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in body.split("=", 1))
            cfg.set(key, value, where=f"{source}:{lineno}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        return cls.parse(p.read_text(encoding="utf-8"), source=str(p))

    def dump(self) -> str:
        lines = ["# fully resolved fringelab run configuration"]
        section = None
        for key in DEFAULTS:
            sec = key.split(".", 1)[0]
            if sec != section:
                lines.append("")
                section = sec
            value = self[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    def split_counts(self) -> tuple[int, int, int]:
        """(train, validation, test) scene counts for ``scenes.count``."""
        n = self["scenes.count"]
        if n < 3:
            raise ValidationError(f"scenes.count must be at least 3, got {n}")
        n_val = max(1, int(round(n * self["scenes.validation_fraction"])))
        n_train = max(1, int(round(n * self["scenes.train_fraction"])))
        n_test = n - n_train - n_val
        if n_test < 1:
            n_train -= 1 - n_test
            n_test = 1
        if n_train < 1:
            raise ValidationError("split leaves no training scenes")
        return n_train, n_val, n_test
