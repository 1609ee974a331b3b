"""Experiment configuration as flat ``section.key = value`` text.

Format: one assignment per line, ``#`` starts a comment line, blank lines are
ignored. Every key must appear in :data:`SCHEMA`; keys left out keep their
defaults. Floats are written with ``repr`` so a dump parses back to the same
bits, and a dumped file re-dumps to the same bytes.

Keys (type, default):

    data.train, data.val, data.seed        int   scene counts and generator seed
    data.grid, data.feat_dim, data.categories, data.max_objects           int
    data.min_size, data.max_size, data.aspect_jitter, data.spread,
    data.noise, data.max_mutual_iou                                       float
    data.signature_seed                                                   int
    model.layers, model.queries, model.width, model.pe_width,
    model.stem_radius                                                     int
    model.pe_temperature, model.pe_cycles                                 float
    rank.enable_head, rank.enable_qrl                                     bool
    rank.positional_variant                  sort | recreate
    loss.enable_gcl                                                       bool
    loss.kind                                giou_focal | varifocal
    loss.target                              norm_giou_pow | iou_pow
    loss.target_power, loss.lambda_giou, loss.lambda_l1, loss.lambda_cls,
    loss.gamma                                                            float
    matcher.enable_hmc                                                    bool
    matcher.alpha, matcher.switch_fraction                                float
    matcher.high_order_base                  iou | norm_giou
    optim.lr, optim.clip_norm, optim.lr_drop_fraction, optim.lr_drop_factor
                                                                          float
    optim.steps, optim.batch_size                                         int
    eval.max_dets, eval.diag_scenes                                       int
    eval.lrp_tau                                                          float
    run.seed                                                              int
    run.out                                                               str
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

from .detector import ModelConfig
from .errors import ValidationError
from .losses import LOSS_KINDS, TARGET_KINDS, LossWeights
from .matching import HIGH_ORDER_BASES
from .rank import VARIANTS
from .scenes import GenConfig


class ConfigError(ValidationError):
    """Malformed config text, unknown key, or out-of-schema value."""


@dataclass(frozen=True)
class DataConfig:
    train: int = 2000
    val: int = 500
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)


@dataclass(frozen=True)
class EvalConfig:
    max_dets: int = 100
    lrp_tau: float = 0.5
    diag_scenes: int = 500


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        g, m = self.data.gen, self.model
        if (m.grid, m.feat_dim, m.categories) != (g.grid, g.feat_dim, g.num_categories):
            raise ConfigError("model grid/feature/category sizes must follow the data section")
        if self.data.train < 1 or self.data.val < 0:
            raise ConfigError("data.train must be >= 1 and data.val >= 0")

    def model_for_seed(self, seed: int | None = None) -> ModelConfig:
        return replace(self.model, seed=self.seed if seed is None else seed)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed))

    def with_model(self, **changes) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, **changes))


# key -> (path into ExperimentConfig, type, allowed values or None)
_B, _I, _F, _S = bool, int, float, str
SCHEMA: dict[str, tuple[tuple[str, ...], type, tuple | None]] = {
    "data.train": (("data", "train"), _I, None),
    "data.val": (("data", "val"), _I, None),
    "data.seed": (("data", "seed"), _I, None),
    "data.grid": (("data", "gen", "grid"), _I, None),
    "data.feat_dim": (("data", "gen", "feat_dim"), _I, None),
    "data.categories": (("data", "gen", "num_categories"), _I, None),
    "data.max_objects": (("data", "gen", "max_objects"), _I, None),
    "data.min_size": (("data", "gen", "min_size"), _F, None),
    "data.max_size": (("data", "gen", "max_size"), _F, None),
    "data.aspect_jitter": (("data", "gen", "aspect_jitter"), _F, None),
    "data.spread": (("data", "gen", "spread"), _F, None),
    "data.noise": (("data", "gen", "noise"), _F, None),
    "data.max_mutual_iou": (("data", "gen", "max_mutual_iou"), _F, None),
    "data.signature_seed": (("data", "gen", "signature_seed"), _I, None),
    "model.layers": (("model", "layers"), _I, None),
    "model.queries": (("model", "queries"), _I, None),
    "model.width": (("model", "width"), _I, None),
    "model.pe_width": (("model", "pe_width"), _I, None),
    "model.pe_temperature": (("model", "pe_temperature"), _F, None),
    "model.pe_cycles": (("model", "pe_cycles"), _F, None),
    "model.stem_radius": (("model", "stem_radius"), _I, None),
    "rank.enable_head": (("model", "rch"), _B, None),
    "rank.enable_qrl": (("model", "qrl"), _B, None),
    "rank.positional_variant": (("model", "positional_variant"), _S, VARIANTS),
    "loss.enable_gcl": (("model", "gcl"), _B, None),
    "loss.kind": (("model", "gcl_kind"), _S, LOSS_KINDS[1:]),
    "loss.target": (("model", "target_kind"), _S, TARGET_KINDS),
    "loss.target_power": (("model", "target_power"), _F, None),
    "loss.lambda_giou": (("model", "weights", "lambda_giou"), _F, None),
    "loss.lambda_l1": (("model", "weights", "lambda_l1"), _F, None),
    "loss.lambda_cls": (("model", "weights", "lambda_cls"), _F, None),
    "loss.gamma": (("model", "weights", "gamma"), _F, None),
    "matcher.enable_hmc": (("model", "hmc"), _B, None),
    "matcher.alpha": (("model", "alpha"), _F, None),
    "matcher.switch_fraction": (("model", "switch_fraction"), _F, None),
    "matcher.high_order_base": (("model", "high_order_base"), _S, HIGH_ORDER_BASES),
    "optim.lr": (("model", "lr"), _F, None),
    "optim.steps": (("model", "steps"), _I, None),
    "optim.batch_size": (("model", "batch_size"), _I, None),
    "optim.clip_norm": (("model", "clip_norm"), _F, None),
    "optim.lr_drop_fraction": (("model", "lr_drop_fraction"), _F, None),
    "optim.lr_drop_factor": (("model", "lr_drop_factor"), _F, None),
    "eval.max_dets": (("eval", "max_dets"), _I, None),
    "eval.lrp_tau": (("eval", "lrp_tau"), _F, None),
    "eval.diag_scenes": (("eval", "diag_scenes"), _I, None),
    "run.seed": (("seed",), _I, None),
    "run.out": (("out",), _S, None),
}

# keys that name where and with which seed a run happens, not what it computes
_RUN_KEYS = ("run.seed", "run.out")


def _get(obj, path):
    for part in path:
        obj = getattr(obj, part)
    return obj


def _format(value, typ) -> str:
    if typ is _B:
        return "true" if value else "false"
    if typ is _F:
        return repr(float(value))
    return str(value)


def _parse_value(key: str, text: str, typ, choices, lineno: int):
    where = f"line {lineno}: {key}"
    if typ is _B:
        if text not in ("true", "false"):
            raise ConfigError(f"{where}: expected true or false, got {text!r}")
        return text == "true"
    if typ is _I:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from None
    if typ is _F:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    if choices is not None and text not in choices:
        raise ConfigError(f"{where}: expected one of {choices}, got {text!r}")
    return text


def _flatten(cfg: ExperimentConfig) -> dict[str, object]:
    return {key: _get(cfg, path) for key, (path, _, _) in SCHEMA.items()}


def _build(values: dict[str, object]) -> ExperimentConfig:
    gen_kw, model_kw, weight_kw, data_kw, eval_kw, top_kw = {}, {}, {}, {}, {}, {}
    for key, (path, _, _) in SCHEMA.items():
        v = values[key]
        if path[0] == "data" and path[1] == "gen":
            gen_kw[path[2]] = v
        elif path[0] == "data":
            data_kw[path[1]] = v
        elif path[0] == "model" and path[1] == "weights":
            weight_kw[path[2]] = v
        elif path[0] == "model":
            model_kw[path[1]] = v
        elif path[0] == "eval":
            eval_kw[path[1]] = v
        else:
            top_kw[path[0]] = v
    gen = GenConfig(**gen_kw)
    try:
        weights = LossWeights(**weight_kw)
        model = ModelConfig(grid=gen.grid, feat_dim=gen.feat_dim, categories=gen.num_categories,
                            weights=weights, seed=top_kw["seed"], **model_kw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(model, DataConfig(gen=gen, **data_kw), EvalConfig(**eval_kw), **top_kw)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse config text; keys not mentioned keep the value from ``base`` (or the default)."""
    values = _flatten(base or default_config())
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        _, typ, choices = SCHEMA[key]
        values[key] = _parse_value(key, val, typ, choices, lineno)
    return _build(values)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text: every schema key, schema order, one per line."""
    flat = _flatten(cfg)
    return "".join(f"{k} = {_format(flat[k], SCHEMA[k][1])}\n" for k in SCHEMA)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def config_hash(cfg: ExperimentConfig, length: int = 12) -> str:
    """Digest of everything that determines results except the run seed and output root."""
    flat = _flatten(cfg)
    body = "".join(f"{k}={_format(flat[k], SCHEMA[k][1])}\n" for k in SCHEMA if k not in _RUN_KEYS)
    return hashlib.sha256(body.encode()).hexdigest()[:length]


__all__ = [
    "ConfigError",
    "DataConfig",
    "EvalConfig",
    "ExperimentConfig",
    "SCHEMA",
    "config_hash",
    "default_config",
    "dump_config",
    "load_config",
    "parse_config",
]
