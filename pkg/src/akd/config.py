"""Run configuration: a JSON document mirroring :class:`RunConfig`."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from akd.data import GeneratorConfig, InvocationParams
from akd.distill import KD_WEIGHTS, DistillWeights
from akd.encoders import EncoderConfig, preset
from akd.errors import ConfigError

PIPELINES = ("baseline", "conventional_kd", "adaptive_kd")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    teacher_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-8


@dataclass
class PretrainConfig:
    steps: int = 600
    aux_examples: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    recon_weight: float = 1.0
    residual_target: bool = True
    seed: int = 1000


@dataclass
class DataConfig:
    train: str | None = None
    val: str | None = None
    test: str | None = None
    n_train: int = 2000
    n_test: int = 1500
    val_fraction: float = 0.1


@dataclass
class RunConfig:
    pipeline: str = "baseline"
    student: str | dict = "desk-student"
    teacher: str | dict = "desk-teacher"
    losses: str | None = None
    weights: DistillWeights = field(default_factory=DistillWeights)
    ed_target: str = "frames"
    adapter_depth: int = 2
    teacher_ce: bool = True
    epochs: int = 30
    batch_size: int = 32
    bucket: int = 8
    max_steps: int | None = None
    seed: int = 0
    context: int = 3
    cache_teacher: bool = True
    teacher_checkpoint: str | None = None
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self) -> None:
        if isinstance(self.weights, dict):
            self.weights = DistillWeights(**self.weights)
        if self.losses:
            self.weights = DistillWeights.from_row(self.losses, self.weights.lambda_ed or KD_WEIGHTS["lambda_ed"],
                                                   self.weights.lambda_pl or KD_WEIGHTS["lambda_pl"],
                                                   self.weights.lambda_ar or KD_WEIGHTS["lambda_ar"])
        for name, cls in (("optim", OptimConfig), ("pretrain", PretrainConfig), ("data", DataConfig)):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, _build(cls, v, name))
        if isinstance(self.generator, dict):
            self.generator = _build(GeneratorConfig, self.generator, "generator")
        self.validate()

    def validate(self) -> None:
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {self.pipeline!r}")
        if self.ed_target not in ("frames", "summary"):
            raise ConfigError("ed_target must be 'frames' or 'summary'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when set")
        if self.context < 0:
            raise ConfigError("context must be >= 0")
        self.student_config()
        self.teacher_config()

    def student_config(self) -> EncoderConfig:
        return _encoder(self.student, self.generator.dim * (2 * self.context + 1))

    def teacher_config(self) -> EncoderConfig:
        return _encoder(self.teacher, self.generator.dim * (2 * self.context + 1))

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"]["invocations"] = {k: asdict(v) for k, v in self.generator.invocations.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)


def _build(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _encoder(value, input_dim: int) -> EncoderConfig:
    """Resolve a preset name or field dict; desk presets follow the data's spliced width."""
    if isinstance(value, EncoderConfig):
        return value
    if isinstance(value, str):
        cfg = preset(value)
        return cfg if value.startswith("paper") else replace(cfg, input_dim=input_dim)
    if isinstance(value, dict):
        base = preset(value["preset"]) if "preset" in value else EncoderConfig(input_dim=input_dim)
        overrides = {k: v for k, v in value.items() if k != "preset"}
        try:
            return replace(base, **overrides)
        except TypeError as exc:
            raise ConfigError(f"encoder config: {exc}") from None
    raise ConfigError(f"encoder must be a preset name or a dict, got {type(value).__name__}")


def desk_config(pipeline: str = "baseline", losses: str | None = None, seed: int = 0, **changes) -> RunConfig:
    """Small configuration that trains in minutes on one CPU core."""
    weights = DistillWeights.from_row(losses) if losses else DistillWeights()
    return RunConfig(pipeline=pipeline, weights=weights, seed=seed, **changes)


def full_scale_config(pipeline: str = "adaptive_kd", student: str = "paper-conformer") -> RunConfig:
    """Full-scale hyperparameters: 40-D features spliced to 280-D, batch 256, 100 epochs."""
    return RunConfig(
        pipeline=pipeline,
        student=student,
        teacher="paper-teacher",
        weights=DistillWeights(**KD_WEIGHTS, use_ddsd=True, use_pl=True) if pipeline != "baseline"
        else DistillWeights(),
        epochs=100,
        batch_size=256,
        optim=OptimConfig(lr=1e-7, teacher_lr=1e-7),
        generator=GeneratorConfig(dim=40),
    )


__all__ = [
    "DataConfig",
    "InvocationParams",
    "OptimConfig",
    "PretrainConfig",
    "RunConfig",
    "desk_config",
    "full_scale_config",
]
