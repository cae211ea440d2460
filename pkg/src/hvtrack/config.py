"""Run configuration: one flat dataclass, serialized as ``key = value`` lines."""

import json
from dataclasses import dataclass, fields, asdict, replace

from .errors import ParseError


@dataclass
class Config:
    # geometry / pyramid
    template_size: int = 120
    levels: tuple = (30, 60, 120)
    stats_levels: tuple = (30, 60, 120)
    d_max: int = 4
    temperature: float = 0.1
    stats_temperature: float = 0.1
    entropy_fraction: float = 0.5
    inner_iterations: int = 1
    refine_iterations: int = 3
    gn_iterations: int = 5
    # heads
    head: str = "analytic"
    extractor: str = "filterbank"
    irls_iterations: int = 5
    residual_gate: float = 3.0
    ratio_gate: float = 0.0
    vis_threshold: float = 0.5
    refine_vis_cos: float = 0.5
    head_ridge: float = 1e-4
    # losses and optimizer
    lambda_d: float = 1.0
    lambda_m: float = 1.0
    lambda_v: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    decay_factor: float = 0.1
    decay_every: int = 5
    epochs: int = 10
    # confidence
    confidence_threshold: float = 0.5
    confidence_hidden: int = 16
    confidence_dropout: float = 0.5
    confidence_lr: float = 1e-3
    confidence_epochs: int = 150
    confidence_pairs: int = 600
    label_threshold: float = 5.0
    ring_capacity: int = 60
    reboot_ages: tuple = (2, 4, 8, 16, 32, 60)
    # data generation
    frame_size: int = 240
    perturbation: float = 32.0
    augment: bool = True
    max_occluders: int = 3
    occluder_area: tuple = (0.02, 0.2)
    occluder_vertices: tuple = (3, 8)
    occluder_fraction: float = -1.0  # >= 0 forces one occluder of that area fraction
    dataset_size: int = 20000
    split: tuple = (5, 1, 1)
    seed: int = 0

    def with_overrides(self, **kw):
        return replace(self, **kw)


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(name, raw, line=None):
    default = getattr(Config(), name)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(default, bool):
        if isinstance(value, str):
            value = value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ParseError(f"{name} expects a list", line)
        return tuple(value)
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ParseError(f"{name} expects an integer", line)
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ParseError(f"{name} expects a number", line)
        return float(value)
    return str(value)


def parse_config(text, base=None):
    cfg = base or Config()
    updates = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", no)
        key, raw = (t.strip() for t in line.split("=", 1))
        if key not in _FIELDS:
            raise ParseError(f"unknown config key {key!r}", no)
        updates[key] = _coerce(key, raw, no)
    return replace(cfg, **updates)


def load_config(path, base=None):
    with open(path) as fh:
        return parse_config(fh.read(), base)


def apply_overrides(cfg, pairs):
    """Apply ``key=value`` strings (e.g. from repeated --set flags)."""
    return parse_config("\n".join(pairs), cfg)


def dump_config(cfg):
    lines = []
    for name, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{name} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
