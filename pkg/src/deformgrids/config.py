"""Run configuration: one flat TOML table, every hyperparameter a named key."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, InputError
from .keyframe import KEY_GAMMA, KEY_RESOLUTION
from .metrics import DIAGONAL, EDGE, N_SAMPLES, THRESHOLDS
from .objective import ALPHA, W_ISOMETRY
from .optimizer import AFTER_ADAM, BEFORE_ADAM, OptimSchedule

BASE_EPOCHS = 2000
BASE_FRAMES = 17
MAX_EPOCHS = 10000


@dataclass
class RunConfig:
    # inputs
    frames: list[str] = field(default_factory=list)
    frames_glob: str = ""
    template: str = ""
    template_frame: int = -1  # -1: the selected keyframe
    output: str = "out"
    gt_meshes: list[str] = field(default_factory=list)
    tracks: str = ""
    # model
    levels: int = 10
    prune: bool = True
    alpha: float = ALPHA
    w_isometry: float = W_ISOMETRY
    keyframe_resolution: int = KEY_RESOLUTION
    keyframe_gamma: float = KEY_GAMMA
    # optimization
    lr: float = 5e-3
    lr_growth: float = 1.1
    lam: float = 0.25
    lam_growth: float = 1.5
    mesh_lr: float = 1e-4
    mesh_lam: float = 16.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 0  # 0: scale with sequence length
    precondition_order: str = AFTER_ADAM
    log_every: int = 10
    # ablation toggles
    precondition: bool = True
    multires: bool = True
    isometry: bool = True
    # run environment
    seed: int = 0
    threads: int = 1
    noise_pct: float = 0.0
    save_grids: str = ""
    load_grids: str = ""
    # evaluation
    eval_samples: int = N_SAMPLES
    thresholds: list[float] = field(default_factory=lambda: list(THRESHOLDS))
    f_basis: str = DIAGONAL

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative (0 selects the automatic budget)")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not 0.0 <= self.noise_pct < 100.0:
            raise ConfigError("noise_pct must lie in [0, 100)")
        if self.f_basis not in (DIAGONAL, EDGE):
            raise ConfigError(f"f_basis must be {DIAGONAL!r} or {EDGE!r}")
        if self.precondition_order not in (BEFORE_ADAM, AFTER_ADAM):
            raise ConfigError(f"precondition_order must be {BEFORE_ADAM!r} or {AFTER_ADAM!r}")
        if len(self.thresholds) != 2:
            raise ConfigError("thresholds needs exactly two values")
        if self.eval_samples < 1 or self.keyframe_resolution < 1:
            raise ConfigError("sample counts and resolutions must be positive")
        if not self.alpha > 0 or self.w_isometry < 0 or not self.keyframe_gamma >= 0:
            raise ConfigError("alpha must be positive; w_isometry and keyframe_gamma non-negative")
        try:
            self.schedule(1)
        except InputError as exc:
            raise ConfigError(str(exc)) from None

    # ---- derived values ---------------------------------------------------

    def grid_levels(self) -> list[int]:
        return list(range(1, self.levels + 1)) if self.multires else [self.levels]

    def resolved_epochs(self, n_frames: int) -> int:
        if self.epochs:
            return self.epochs
        return int(min(MAX_EPOCHS, max(BASE_EPOCHS, round(BASE_EPOCHS * n_frames / BASE_FRAMES))))

    def schedule(self, n_frames: int) -> OptimSchedule:
        return OptimSchedule(
            lr=self.lr, lr_growth=self.lr_growth, lam=self.lam, lam_growth=self.lam_growth,
            mesh_lr=self.mesh_lr, mesh_lam=self.mesh_lam, beta1=self.beta1, beta2=self.beta2,
            eps=self.eps, epochs=self.resolved_epochs(n_frames), precondition=self.precondition,
            precondition_order=self.precondition_order, log_every=self.log_every,
        )

    # ---- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        ref = cls()
        return cls(**{k: _coerce(k, v, getattr(ref, k)) for k, v in d.items()})

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_toml(p.read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    def with_overrides(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(d)


def _coerce(key: str, value, ref):
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(ref, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(ref, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(ref, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(ref, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        if key == "thresholds":
            return [_coerce(key + "[]", v, 0.0) for v in value]
        return [_coerce(key + "[]", v, "") for v in value]
    raise ConfigError(f"unsupported value for {key}")
