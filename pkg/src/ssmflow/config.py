"""Model configuration and its flat ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .mamba import MambaConfig
from .polymamba import PolyMambaConfig
from .pulsemamba import PulseConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int = 128
    downsample: int = 8
    depth: int = 8
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    mlp_ratio: int = 4
    iters: int = 2
    use_aga: bool = True
    use_self: bool = True
    use_cross: bool = True
    use_mlp: bool = True
    use_pos: bool = True
    tie_cross: bool = False
    tie_directions: bool = False
    hidden_dim: int = 128
    motion_dim: int = 64
    radius: int = 4
    mamba_layers: int = 1
    pulse_bidirectional: bool = True
    detach_flow: bool = False
    pos_h: int = 8
    pos_w: int = 8
    max_pixels: int = 4096
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.downsample not in (4, 8):
            raise ConfigError(f"downsample must be 4 or 8, got {self.downsample}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and f.name not in ("depth", "iters", "radius", "seed") and v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
            if f.name in ("depth", "iters", "radius", "seed") and v < 0:
                raise ConfigError(f"{f.name} must be >= 0, got {v}")

    def mamba(self, bidirectional: bool = True) -> MambaConfig:
        return MambaConfig(
            d_state=self.d_state,
            expand=self.expand,
            conv_width=self.conv_width,
            tied=self.tie_directions,
            bidirectional=bidirectional,
        )

    def polymamba(self) -> PolyMambaConfig:
        return PolyMambaConfig(
            dim=self.dim,
            depth=self.depth,
            mlp_ratio=self.mlp_ratio,
            use_self=self.use_self,
            use_cross=self.use_cross,
            use_mlp=self.use_mlp,
            use_pos=self.use_pos,
            tie_cross=self.tie_cross,
            pos_hw=(self.pos_h, self.pos_w),
            mamba=self.mamba(),
        )

    def pulse(self) -> PulseConfig:
        return PulseConfig(
            feat_dim=self.dim,
            hidden_dim=self.hidden_dim,
            motion_dim=self.motion_dim,
            radius=self.radius,
            iters=self.iters,
            use_aga=self.use_aga,
            mamba_layers=self.mamba_layers,
            detach_flow=self.detach_flow,
            mamba=self.mamba(self.pulse_bidirectional),
        )

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    # -- text form ---------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: ModelConfig | None = None) -> ModelConfig:
        """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse(types[key], val, key)
        return cls(**values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> ModelConfig:
        return cls.from_text(Path(path).read_text())

    def diff(self, other: ModelConfig) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) != getattr(other, f.name)]


def _parse(kind: str, val: str, key: str):
    try:
        if kind == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(val)
        return val
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind}") from None


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale configuration used by the toy training runs."""
    base = dict(
        dim=64,
        downsample=4,
        depth=2,
        d_state=8,
        expand=2,
        iters=2,
        hidden_dim=64,
        motion_dim=32,
        radius=3,
        pos_h=8,
        pos_w=8,
        precision="float32",
    )
    base.update(overrides)
    return ModelConfig(**base)
