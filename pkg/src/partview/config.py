"""Line-oriented ``key = value`` configuration with strict validation.

The format is deliberately dependency-free and bit-exact: ``#`` starts a
comment, lists are comma-separated, booleans are ``true``/``false``.
Unknown keys are rejected; every value is validated on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

from .errors import ConfigError

_MODES = ("full", "opa", "ova", "na", "nr")
_FAMILIES = ("chair", "table", "plane")


def _positive(name):
    def check(v):
        if v <= 0:
            raise ConfigError(f"{name} must be positive, got {v}")
    return check


def _in_open_unit(name):
    def check(v):
        if not (0.0 < v < 1.0):
            raise ConfigError(f"{name} must lie in (0, 1), got {v}")
    return check


def _at_least(name, lo):
    def check(v):
        if v < lo:
            raise ConfigError(f"{name} must be >= {lo}, got {v}")
    return check


def _in_open_range(name, lo, hi):
    def check(v):
        if not (lo < v < hi):
            raise ConfigError(f"{name} must lie in ({lo}, {hi}), got {v}")
    return check


@dataclass
class Config:
    """All pipeline hyperparameters; defaults follow the reference setting
    where one exists (views, s_d, lambda, psi, anchor scales/ratios, lr,
    batch) and desk-scale choices elsewhere."""

    views: int = 12
    image_size: int = 64
    feature_channels: int = 64
    k_parts: int = 5
    s_d: float = 0.7
    lambda_: float = 1.0
    psi: float = 1.0
    hidden_dim: int = 128
    anchor_scales: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0, 32.0])
    anchor_ratios: list = field(default_factory=lambda: ["1:1", "1:2", "2:1"])
    lr: float = 1e-5
    batch: int = 1
    seed: int = 0
    attention_mode: str = "full"
    rounds: int = 4
    epochs_per_phase: int = 5
    dataset_root: str = "data"
    out_dir: str = "out"
    # documented extensions beyond the core parameter table
    head_dim: int = 512
    smooth_l1: bool = False
    nms: bool = False
    nms_iou: float = 0.3
    anchor_batch: int = 64
    elevation_deg: float = 30.0
    camera_distance: float = 2.5
    fov_deg: float = 40.0
    family: str = "chair"
    shapes_per_subcategory: int = 20
    train_fraction: float = 0.75
    validation_fraction: float = 0.0
    recall_top_n: int = 20
    backbone_blocks: int = 3
    backbone_valid_conv: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


# file key -> (attribute, type tag, validator or None)
FIELDS: dict[str, tuple[str, str, object]] = {
    "views": ("views", "int", _at_least("views", 1)),
    "image_size": ("image_size", "int", _at_least("image_size", 16)),
    "feature_channels": ("feature_channels", "int", _at_least("feature_channels", 4)),
    "k_parts": ("k_parts", "int", _at_least("k_parts", 1)),
    "s_d": ("s_d", "float", _in_open_unit("s_d")),
    "lambda": ("lambda_", "float", _at_least("lambda", 0.0)),
    "psi": ("psi", "float", _at_least("psi", 0.0)),
    "hidden_dim": ("hidden_dim", "int", _at_least("hidden_dim", 1)),
    "anchor_scales": ("anchor_scales", "float_list", None),
    "anchor_ratios": ("anchor_ratios", "str_list", None),
    "lr": ("lr", "float", _positive("lr")),
    "batch": ("batch", "int", None),
    "seed": ("seed", "int", None),
    "attention_mode": ("attention_mode", "str", None),
    "rounds": ("rounds", "int", _at_least("rounds", 1)),
    "epochs_per_phase": ("epochs_per_phase", "int", _at_least("epochs_per_phase", 1)),
    "dataset_root": ("dataset_root", "str", None),
    "out_dir": ("out_dir", "str", None),
    "head_dim": ("head_dim", "int", _at_least("head_dim", 1)),
    "smooth_l1": ("smooth_l1", "bool", None),
    "nms": ("nms", "bool", None),
    "nms_iou": ("nms_iou", "float", _in_open_unit("nms_iou")),
    "anchor_batch": ("anchor_batch", "int", _at_least("anchor_batch", 2)),
    "elevation_deg": ("elevation_deg", "float", None),
    "camera_distance": ("camera_distance", "float", _positive("camera_distance")),
    "fov_deg": ("fov_deg", "float", _in_open_range("fov_deg", 0.0, 180.0)),
    "family": ("family", "str", None),
    "shapes_per_subcategory": ("shapes_per_subcategory", "int", _at_least("shapes_per_subcategory", 2)),
    "train_fraction": ("train_fraction", "float", _in_open_unit("train_fraction")),
    "validation_fraction": ("validation_fraction", "float", None),
    "recall_top_n": ("recall_top_n", "int", _at_least("recall_top_n", 1)),
    "backbone_blocks": ("backbone_blocks", "int", _at_least("backbone_blocks", 1)),
    "backbone_valid_conv": ("backbone_valid_conv", "bool", None),
    "adam_beta1": ("adam_beta1", "float", _in_open_unit("adam_beta1")),
    "adam_beta2": ("adam_beta2", "float", _in_open_unit("adam_beta2")),
    "adam_eps": ("adam_eps", "float", _positive("adam_eps")),
}


def _parse_value(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "float_list":
            return [float(v.strip()) for v in raw.split(",") if v.strip()]
        if kind == "str_list":
            return [v.strip() for v in raw.split(",") if v.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {kind})") from None


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float_list":
        return ", ".join(repr(float(v)) for v in value)
    if kind == "str_list":
        return ", ".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def validate(cfg: Config) -> Config:
    for key, (attr, kind, check) in FIELDS.items():
        value = getattr(cfg, attr)
        if check is not None:
            check(value)
    if cfg.batch != 1:
        raise ConfigError(f"batch must be 1 (one shape per step), got {cfg.batch}")
    if cfg.attention_mode.lower() not in _MODES:
        raise ConfigError(f"attention_mode must be one of {_MODES}, got {cfg.attention_mode!r}")
    if cfg.family not in _FAMILIES:
        raise ConfigError(f"family must be one of {_FAMILIES}, got {cfg.family!r}")
    if not cfg.anchor_scales or any(s <= 0 for s in cfg.anchor_scales):
        raise ConfigError(f"anchor_scales must be positive and non-empty: {cfg.anchor_scales}")
    if not (0.0 <= cfg.validation_fraction < 1.0):
        raise ConfigError(f"validation_fraction must lie in [0, 1), got {cfg.validation_fraction}")
    pool = 1 << cfg.backbone_blocks
    if cfg.image_size % pool != 0:
        raise ConfigError(f"image_size {cfg.image_size} not divisible by backbone stride {pool}")
    from .detector import parse_ratio
    for r in cfg.anchor_ratios:
        parse_ratio(r)
    return cfg


def parse_config(text: str) -> Config:
    cfg = Config()
    seen = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        attr, kind, _ = FIELDS[key]
        setattr(cfg, attr, _parse_value(key, kind, raw))
    return validate(cfg)


def serialize_config(cfg: Config) -> str:
    lines = []
    for key, (attr, kind, _) in FIELDS.items():
        lines.append(f"{key} = {_format_value(kind, getattr(cfg, attr))}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
