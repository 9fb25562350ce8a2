"""Run configuration: a TOML file validated against a strict schema before any work starts.

Every block is optional; unknown keys anywhere are rejected. Relative paths resolve against
the directory holding the config file.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Literal, Optional

import pydantic
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import InputError, ValidationError
from .evaluation import ALL_METHODS, VIDEO_METHODS, EvalSettings
from .filtering import DEFAULT_BOX_PAD, DEFAULT_R_GRID, SUBSETS
from .learning.svm import LAMBDA_GRID

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Paths(_Block):
    data: Path = Path("data")
    out: Path = Path("out")


class TrackerBlock(_Block):
    dist_threshold: float = Field(40.0, gt=0)
    max_staleness: int = Field(0, ge=0, description="frames; 0 means one second at the dataset fps")
    chest_index: int = Field(1, ge=0, lt=25)


class TrajectoryBlock(_Block):
    W: int = Field(5, gt=0)
    L: int = Field(15, gt=0)
    N: int = Field(32, gt=0)
    n_xy: int = Field(2, gt=0)
    n_t: int = Field(3, gt=0)
    n_scales: int = Field(8, gt=0)
    min_flow_var: float = Field(3 ** 0.5, gt=0)
    max_displacement: float = Field(50.0, gt=0)
    erratic_ratio: float = Field(0.7, gt=0)
    texture_quality: float = Field(0.001, gt=0)
    flow_levels: int = Field(3, ge=1)
    flow_radius: int = Field(3, ge=1)
    flow_block: int = Field(9, ge=3)

    def params(self):
        from .trajectories import TrajectoryParams
        keep = {k: v for k, v in self.model_dump().items() if not k.startswith("flow_")}
        return TrajectoryParams(**keep)


class FilterBlock(_Block):
    subset: str = "HandsAndHead"
    radius: float = Field(32.0, gt=0)
    r_grid: tuple[float, ...] = DEFAULT_R_GRID
    box_pad: float = Field(DEFAULT_BOX_PAD, ge=0)
    frame_window: int = Field(1, ge=0)

    @field_validator("subset")
    @classmethod
    def _known(cls, v):
        if v not in SUBSETS:
            raise ValueError(f"unknown subset {v!r}; expected one of {sorted(SUBSETS)}")
        return v

    @field_validator("r_grid")
    @classmethod
    def _grid(cls, v):
        if not v or min(v) <= 0:
            raise ValueError("r_grid needs positive radii")
        return v


class EncoderBlock(_Block):
    n_components: int = Field(16, ge=1)
    variance_keep: float = Field(0.95, gt=0, le=1)
    alpha: float = Field(0.5, gt=0, le=1)
    norm_order: Literal["power_l2", "l2_power"] = "power_l2"
    gmm_sample: int = Field(50000, ge=10)
    gmm_max_iter: int = Field(200, ge=1)


class LearnerBlock(_Block):
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    svm_epochs: int = Field(10, ge=1)
    inner_k: int = Field(4, ge=3)
    cnn_lr: float = Field(1e-3, gt=0)
    cnn_batch: int = Field(64, ge=1)
    cnn_max_epochs: int = Field(100, ge=1)
    cnn_patience: int = Field(10, ge=1)

    @field_validator("lambda_grid")
    @classmethod
    def _lams(cls, v):
        if not v or min(v) <= 0:
            raise ValueError("lambda_grid needs positive values")
        return v


class EvalBlock(_Block):
    k: int = Field(10, ge=2)
    methods: tuple[str, ...] = ALL_METHODS
    sample_p: float = Field(0.34, gt=0, le=1)
    fusion_video: str = "FV-HandsAndHead"
    n_bins: int = Field(10, ge=1)
    min_bin: int = Field(20, ge=1)

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        bad = [m for m in v if m not in ALL_METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; expected a subset of {list(ALL_METHODS)}")
        return tuple(m for m in ALL_METHODS if m in v)

    @field_validator("fusion_video")
    @classmethod
    def _fv(cls, v):
        if v not in VIDEO_METHODS:
            raise ValueError(f"fusion_video must be one of {list(VIDEO_METHODS)}")
        return v


class CameraBlock(_Block):
    id: str
    position: tuple[float, float, float]
    yaw_deg: float
    pitch_deg: float
    focal: float = Field(1400.0, gt=0)
    size: tuple[int, int] = (1920, 1080)


class SynthBlock(_Block):
    """Scene generator settings; unset fields keep the benchmark scene's values."""

    n_agents: int = Field(16, ge=1)
    duration: float = Field(192.0, gt=0)
    fps: float = Field(15.0, gt=0)
    mean_on: Optional[float] = Field(None, gt=0)
    mean_off: Optional[float] = Field(None, gt=0)
    gesture_gain: Optional[float] = Field(None, ge=0)
    contamination: float = Field(0.6, ge=0, le=1)
    keypoint_noise: Optional[float] = Field(None, ge=0)
    dropout: Optional[float] = Field(None, ge=0, lt=1)
    chest_dropout: Optional[float] = Field(None, ge=0, lt=1)
    accel_rate: Optional[float] = Field(None, gt=0)
    accel_gain: Optional[float] = Field(None, ge=0)
    accel_noise: Optional[float] = Field(None, ge=0)
    confuser_rate: Optional[float] = Field(None, ge=0)
    video_effect: Optional[float] = Field(None, ge=0)
    kind_separation: Optional[float] = Field(None, ge=0)
    agent_spread: Optional[float] = Field(None, ge=0)
    traj_rates: Optional[dict[str, float]] = None
    speech_shift: Optional[dict[str, float]] = None
    cameras: Optional[tuple[CameraBlock, ...]] = None

    @model_validator(mode="after")
    def _feasible(self):
        if self.contamination > 0 and self.n_agents < 2:
            raise ValueError("a contamination target needs at least two agents")
        return self

    def scene(self, seed: int):
        from .synth import KINDS, SceneConfig, benchmark_config
        d = {k: v for k, v in self.model_dump().items() if v is not None}
        for key in ("traj_rates", "speech_shift"):
            if key in d:
                bad = set(d[key]) - set(KINDS)
                if bad:
                    raise ValidationError(f"synth.{key}: unknown kinds {sorted(bad)}; expected {list(KINDS)}")
        if "cameras" in d:
            d["cameras"] = [dict(c) for c in d["cameras"]]
        base = benchmark_config(seed).to_dict()
        base.update(d)
        return SceneConfig.from_dict(base)


class RunConfig(_Block):
    seed: int = Field(0, ge=0)
    paths: Paths = Paths()
    tracker: TrackerBlock = TrackerBlock()
    trajectories: TrajectoryBlock = TrajectoryBlock()
    filter: FilterBlock = FilterBlock()
    encoder: EncoderBlock = EncoderBlock()
    learner: LearnerBlock = LearnerBlock()
    eval: EvalBlock = EvalBlock()
    synth: SynthBlock = SynthBlock()

    @model_validator(mode="after")
    def _cross(self):
        if "Multimodal" in self.eval.methods and (
                "CNN" not in self.eval.methods or self.eval.fusion_video not in self.eval.methods):
            raise ValueError("eval.methods: Multimodal needs CNN and eval.fusion_video enabled")
        return self

    def canonical(self) -> str:
        """Parameters only: where files live does not change what is computed."""
        return json.dumps(self.model_dump(mode="json", exclude={"paths"}), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def eval_settings(self) -> EvalSettings:
        e, enc, lr = self.eval, self.encoder, self.learner
        return EvalSettings(
            k=e.k, inner_k=lr.inner_k, seed=self.seed, methods=e.methods, n_components=enc.n_components,
            gmm_sample=enc.gmm_sample, gmm_max_iter=enc.gmm_max_iter, pca_keep=enc.variance_keep,
            alpha=enc.alpha, norm_order=enc.norm_order, lambda_grid=lr.lambda_grid,
            r_grid=self.filter.r_grid, sample_p=e.sample_p, svm_epochs=lr.svm_epochs,
            fusion_video=e.fusion_video, cnn_max_epochs=lr.cnn_max_epochs, cnn_patience=lr.cnn_patience,
            cnn_batch=lr.cnn_batch, cnn_lr=lr.cnn_lr, n_bins=e.n_bins, min_bin=e.min_bin)


def _format_errors(exc: pydantic.ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data: dict, base_dir=None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except pydantic.ValidationError as exc:
        raise ValidationError(f"invalid config: {_format_errors(exc)}") from None
    if base_dir is not None:
        base = Path(base_dir)
        paths = Paths(**{k: (v if v.is_absolute() else base / v) for k, v in cfg.paths})
        cfg = cfg.model_copy(update={"paths": paths})
    return cfg


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Read and validate ``path`` (defaults everywhere when None); ``seed`` overrides the file."""
    data, base = {}, Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise InputError(f"{p}: config file not found")
        try:
            with open(p, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{p}: invalid TOML ({exc})") from None
        base = p.resolve().parent
    if seed is not None:
        data = {**data, "seed": seed}
    return parse_config(data, base)
