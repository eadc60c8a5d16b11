"""Run configuration: one flat record of every knob, with file IO.

Config files are a flat key = value subset of TOML (no tables): booleans,
integers, floats, and quoted strings. Unknown keys are rejected so stale
experiment files fail loudly. The effective config is echoed into every
output directory for diff-able experiment records.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class RunConfig:
    seed: int = 0

    # grouping and tokens
    n_groups: int = 256
    group_size: int = 32
    token_dim: int = 64
    feature_dim: int = 10          # random features per map (m)
    blocks: int = 4
    stage1_width: int = 128
    ff_ratio: int = 4
    eta: float = 10.0
    radius_mode: str = "per_center"  # or "global"

    # advisor
    alpha: float = 0.7
    beta: float = 0.7
    kaa_normalized: bool = False

    # ablation toggles
    kal_enabled: bool = True
    attention: str = "kaa"         # "kaa" or "linear"

    # numerics
    lambda_stab: float = 1e-6
    exp_clamp: float = 30.0
    dtype: str = "float32"

    # rehearsal perturbation
    epsilon: float = 0.1
    lambda_rpp: float = 1.0
    ascent_steps: int = 1
    ascent_step_size: float = 0.5

    # optimization
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    lr_drop_fraction: float = 0.8  # fraction of epochs before the drop
    lr_drop_factor: float = 0.1
    weight_decay: float = 0.01

    # scoring
    top_k_divisor: int = 100

    # synthetic stream defaults
    tasks: int = 3
    categories_per_task: int = 2
    points_per_cloud: int = 8192
    jitter_sigma: float = 0.002
    pose_randomization: bool = False
    train_per_category: int = 20
    test_normal_per_category: int = 10
    test_anomalous_per_category: int = 10
    defect_kinds: str = "bump,dent,noise_patch,hole"
    defect_amplitude: float = 0.3
    defect_extent: float = 0.12

    # execution
    threads: int = 1
    deterministic: bool = False

    def validate(self) -> "RunConfig":
        checks = [
            (self.n_groups >= 2, "n_groups must be >= 2"),
            (self.group_size >= 1, "group_size must be >= 1"),
            (self.token_dim >= 1, "token_dim must be >= 1"),
            (self.feature_dim >= 1, "feature_dim must be >= 1"),
            (self.blocks >= 1, "blocks must be >= 1"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (0.0 < self.beta <= 1.0, "beta must lie in (0, 1]"),
            (self.eta >= 0, "eta must be >= 0"),
            (self.epsilon >= 0, "epsilon must be >= 0"),
            (self.ascent_steps >= 0, "ascent_steps must be >= 0"),
            (0 < self.ascent_step_size <= 1, "ascent_step_size must lie in (0, 1]"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (0 <= self.lr_drop_fraction <= 1, "lr_drop_fraction must lie in [0, 1]"),
            (self.top_k_divisor >= 1, "top_k_divisor must be >= 1"),
            (self.tasks >= 1, "tasks must be >= 1"),
            (self.categories_per_task >= 1, "categories_per_task must be >= 1"),
            (self.points_per_cloud >= 64, "points_per_cloud must be >= 64"),
            (self.train_per_category >= 1, "train_per_category must be >= 1"),
            (self.threads >= 1, "threads must be >= 1"),
            (self.radius_mode in ("per_center", "global"), "radius_mode must be per_center or global"),
            (self.attention in ("kaa", "linear"), "attention must be kaa or linear"),
            (self.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for kind in self.defect_kind_list():
            if kind not in ("bump", "dent", "hole", "noise_patch"):
                raise ConfigError(f"unknown defect kind {kind!r}")
        return self

    def defect_kind_list(self) -> list[str]:
        return [k.strip() for k in self.defect_kinds.split(",") if k.strip()]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.token_dim,
            m=self.feature_dim,
            blocks=self.blocks,
            g=self.group_size,
            n_groups=self.n_groups,
            alpha=self.alpha,
            beta=self.beta,
            stage1_width=self.stage1_width,
            ff_ratio=self.ff_ratio,
            lambda_stab=self.lambda_stab,
            exp_clamp=self.exp_clamp,
            kal_enabled=self.kal_enabled,
            attention=self.attention,
            kaa_normalized=self.kaa_normalized,
            dtype=self.dtype,
        )

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for key, value in values.items():
            target = known[key].type
            try:
                coerced[key] = _coerce(value, target, key)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {exc}")
        return cls(**coerced).validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(parse_flat_toml(Path(path).read_text(), source=str(path)))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = dataclasses.asdict(self)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(merged)

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, str):
                text = f'"{v}"'
            else:
                text = repr(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def echo_to(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.toml"
        path.write_text(self.to_toml())
        return path


def _coerce(value, target: str, key: str):
    if target == "bool":
        if isinstance(value, bool):
            return value
        raise ValueError(f"expected a boolean, got {value!r}")
    if target == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected an integer, got {value!r}")
        return int(value)
    if target == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {value!r}")
        return float(value)
    if target == "str":
        if not isinstance(value, str):
            raise ValueError(f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config field type {target} for {key}")


def parse_flat_toml(text: str, source: str = "<config>") -> dict:
    """Parse the flat key = value subset of TOML used for run configs."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            raise ConfigError(f"{source}:{lineno}: tables are not supported in run configs")
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"{source}:{lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value, source, lineno)
    return out


def _parse_value(value: str, source: str, lineno: int):
    comment = _strip_trailing_comment(value)
    value = comment.strip()
    if not value:
        raise ConfigError(f"{source}:{lineno}: empty value")
    if value.startswith('"'):
        if not value.endswith('"') or len(value) < 2:
            raise ConfigError(f"{source}:{lineno}: unterminated string")
        return value[1:-1]
    if value == "true":
        return True
    if value == "false":
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{source}:{lineno}: cannot parse value {value!r}")


def _strip_trailing_comment(value: str) -> str:
    in_str = False
    for i, ch in enumerate(value):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return value[:i]
    return value
