"""Experiment configuration: flat key=value text with section prefixes.

Every stochastic stage carries an explicit seed, and serialization round-trips
losslessly (floats via repr), so a config file pins a whole run.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

# key -> default (the default's type is the key's type)
DEFAULTS: dict[str, object] = {
    "out_dir": "runs/exp",
    "seed": 0,
    "corpus.image_size": 32,
    "corpus.lesion_margin": 6,
    "corpus.seed": 0,
    "corpus.count_benign_a": 80,
    "corpus.count_benign_b": 80,
    "corpus.count_benign_c": 80,
    "corpus.count_malignant_a": 80,
    "corpus.count_malignant_b": 80,
    "corpus.count_malignant_c": 80,
    "split.train": 0.7,
    "split.val": 0.15,
    "split.test": 0.15,
    "split.seed": 1,
    "vae.epochs": 12,
    "vae.lr": 0.7,
    "vae.batch": 16,
    "vae.kl_weight": 1e-4,
    "vae.latent_channels": 4,
    "vae.seed": 2,
    "diffusion.steps": 10000,
    "diffusion.batch": 4,
    "diffusion.lr": 1e-4,
    "diffusion.momentum": 0.99,
    "diffusion.t": 200,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.05,
    "diffusion.base_channels": 48,
    "diffusion.cond_dim": 64,
    "diffusion.cond_gain": 4.0,
    "diffusion.seed": 3,
    "diffusion.cfg_dropout": 0.0,
    "diffusion.guidance_scale": 0.0,
    "diffusion.cross_attention": False,
    "sample.per_cell": 60,
    "sample.seed": 4,
    "classifier.tone.epochs": 30,
    "classifier.tone.lr": 3e-4,
    "classifier.tone.batch": 64,
    "classifier.tone.gamma": 2.0,
    "classifier.tone.alpha": "0.3,0.4,0.9",
    "classifier.tone.seed": 5,
    "classifier.disease.epochs": 30,
    "classifier.disease.lr": 3e-4,
    "classifier.disease.batch": 64,
    "classifier.disease.gamma": 2.0,
    "classifier.disease.alpha": "0.8",
    "classifier.disease.seed": 6,
    "mix.synthetic_ratio": 1.0,
    "evaluate.tone_source": "oracle",
    "metrics.msssim_pairs": 100,
    "metrics.msssim_seed": 7,
}


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


class ExperimentConfig:
    """Typed view over the flat key=value configuration."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        want = type(DEFAULTS[key])
        if isinstance(value, str) and want is not str:
            value = _parse_typed(key, value, want)
        if want is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, want):
            raise ConfigError(f"config key {key!r} expects {want.__name__}, got {value!r}")
        self.values[key] = value

    def __getitem__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def counts(self) -> dict:
        return {
            (d, t): self[f"corpus.count_{d}_{t.lower()}"]
            for d in ("benign", "malignant")
            for t in ("A", "B", "C")
        }

    def alpha(self, task: str):
        raw = self[f"classifier.{task}.alpha"]
        parts = [float(p) for p in raw.split(",") if p.strip()]
        return parts[0] if len(parts) == 1 else tuple(parts)

    def dump(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()[:12]

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            try:
                cfg.set(key.strip(), value.strip())
            except ConfigError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(path.read_text(encoding="utf-8"))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")


def _parse_typed(key: str, text: str, want: type):
    if want is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r} expects a boolean, got {text!r}")
    try:
        if want is int:
            return int(text)
        if want is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {want.__name__}, got {text!r}") from None
    return text
