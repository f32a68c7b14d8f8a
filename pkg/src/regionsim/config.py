"""Run configuration: typed defaults, dotted-key config files, digests.

Config files are flat ``section.key = value`` lines (``#`` comments). Every
key has a typed default below; unknown keys are errors so typos surface
immediately. Command-line flags override file values, and the effective
config is hashed into checkpoints and provenance records.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError
from .supervision import DEFAULT_TAUS, validate_schedule
from .synthcity import WorldSpec

TAU_START = DEFAULT_TAUS[0]
TAU_STEP = 0.01


@dataclass(frozen=True)
class RunConfig:
    generations: int = 4
    epochs: int = 5
    batch_tuples: int = 4
    k_positives: int = 10
    n_negatives: int = 10
    lam: float = 0.5
    taus: tuple[float, ...] = ()
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001
    seed: int = 0
    workers: int = 1
    freeze_early: bool = False
    use_regions: bool = True
    use_quarters: bool = True
    use_neg_regions: bool = True
    use_soft: bool = True
    const_tau: bool = False
    naive_topk: bool = False
    eval_out_dim: int = 64
    center_init_images: int = 16

    @classmethod
    def create(cls, **kw) -> "RunConfig":
        """Resolve ablation implications and the temperature schedule."""
        if kw.get("naive_topk"):
            kw["use_soft"] = False
            kw["use_regions"] = False
        if kw.get("use_regions") is False:
            kw["use_neg_regions"] = False  # no sub-regions means none anywhere
        cfg = cls(**kw)
        n_taus = cfg.generations - 1
        if cfg.const_tau:
            taus = (TAU_START,) * n_taus
        elif cfg.taus:
            taus = cfg.taus
        else:
            taus = tuple(round(TAU_START - TAU_STEP * i, 10) for i in range(n_taus))
        object.__setattr__(cfg, "taus", taus)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            if self.generations < 1:
                raise ConfigError(f"generations must be >= 1, got {self.generations}")
            for name in ("epochs", "batch_tuples", "k_positives", "n_negatives", "workers"):
                if getattr(self, name) < 1:
                    raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
            if self.lam < 0:
                raise ConfigError(f"lambda must be >= 0, got {self.lam}")
            if self.lr <= 0:
                raise ConfigError(f"learning rate must be positive, got {self.lr}")
            if not (0.0 <= self.momentum < 1.0):
                raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
            if self.weight_decay < 0:
                raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
            if self.seed < 0:
                raise ConfigError(f"seed must be non-negative, got {self.seed}")
            if self.eval_out_dim < 1:
                raise ConfigError(f"eval out_dim must be >= 1, got {self.eval_out_dim}")
            if self.center_init_images < 1:
                raise ConfigError("center_init_images must be >= 1")
            if len(self.taus) != self.generations - 1:
                raise ConfigError(
                    f"schedule needs {self.generations - 1} temperatures, got {len(self.taus)}"
                )
            if self.taus:
                validate_schedule(self.taus, strict=not self.const_tau)
        except ConfigError:
            raise
        except Exception as exc:  # schedule errors surface as config errors
            raise ConfigError(str(exc)) from exc

    def canonical_lines(self) -> list[str]:
        """Effective config as dotted-key lines the parser accepts back."""
        out = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "workers":
                continue  # execution detail; results must not depend on it
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(f"{x:.9g}" for x in v)
            out.append(f"{_FIELD_TO_KEY.get(f.name, 'train.' + f.name)} = {v}")
        return out


def config_digest(cfg: RunConfig, world_key: str = "") -> str:
    payload = "\n".join(cfg.canonical_lines() + [f"world_key = {world_key}"])
    return hashlib.sha256(payload.encode("ascii")).hexdigest()[:16]


def world_canonical_lines(spec: WorldSpec) -> list[str]:
    """World fields in the same dotted-key form the config parser accepts."""
    return [f"{key} = {getattr(spec, key.split('.', 1)[1])}" for key in sorted(_WORLD_KEYS)]


# Dotted-key schema: maps file keys onto WorldSpec and RunConfig fields.

_WORLD_KEYS = {
    "world.seed": int,
    "world.length_m": float,
    "world.window_m": float,
    "world.image_height": int,
    "world.image_width": int,
    "world.noise_sigma_m": float,
    "world.heading_balance": float,
    "world.n_train_queries": int,
    "world.n_train_gallery": int,
    "world.n_test_queries": int,
    "world.n_test_gallery": int,
}

_TRAIN_KEYS = {
    "train.generations": int,
    "train.epochs": int,
    "train.batch_tuples": int,
    "train.k_positives": int,
    "train.n_negatives": int,
    "train.lambda": float,
    "train.taus": "floats",
    "train.lr": float,
    "train.momentum": float,
    "train.weight_decay": float,
    "train.seed": int,
    "train.workers": int,
    "train.freeze_early": bool,
    "train.regions": bool,
    "train.quarters": bool,
    "train.neg_regions": bool,
    "train.soft": bool,
    "train.const_tau": bool,
    "train.naive_topk": bool,
    "eval.out_dim": int,
    "train.center_init_images": int,
}

_KEY_TO_FIELD = {
    "train.lambda": "lam",
    "train.regions": "use_regions",
    "train.quarters": "use_quarters",
    "train.neg_regions": "use_neg_regions",
    "train.soft": "use_soft",
    "eval.out_dim": "eval_out_dim",
}

_FIELD_TO_KEY = {field: key for key, field in _KEY_TO_FIELD.items()}


def _parse_value(key: str, text: str, kind):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "floats":
            return tuple(float(t) for t in text.split(",") if t.strip())
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config_text(text: str) -> dict:
    """Flat dotted keys to typed values; unknown keys are config errors."""
    known = dict(_WORLD_KEYS)
    known.update(_TRAIN_KEYS)
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, val, known[key])
    return values


def load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def world_spec_from(values: dict) -> WorldSpec:
    kw = {}
    for key, _ in _WORLD_KEYS.items():
        if key in values:
            kw[key.split(".", 1)[1]] = values[key]
    try:
        return WorldSpec(**kw)
    except Exception as exc:
        raise ConfigError(f"invalid world spec: {exc}") from exc


def run_config_from(values: dict) -> RunConfig:
    kw = {}
    for key in _TRAIN_KEYS:
        if key in values:
            field = _KEY_TO_FIELD.get(key, key.split(".", 1)[1])
            kw[field] = values[key]
    return RunConfig.create(**kw)
