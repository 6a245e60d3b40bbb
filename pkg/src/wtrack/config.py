"""Pipeline configuration loaded from ``config.json``."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import InvalidConfig


@dataclass
class SolverConfig:
    max_iters: int = 500
    step: float = 1.0
    tol: float = 1e-8
    grad_check: bool = False
    method: str = "lbfgs"
    history: int = 10
    gtol: float = 1e-12
    debug: bool = False

    def validate(self):
        if self.max_iters < 0:
            raise InvalidConfig("max_iters must be >= 0")
        if not self.step > 0:
            raise InvalidConfig("step must be > 0")
        if not self.tol >= 0:
            raise InvalidConfig("tol must be >= 0")
        if self.method not in ("lbfgs", "adaptive"):
            raise InvalidConfig(f"unknown solver method {self.method!r}")
        if self.history < 1:
            raise InvalidConfig("history must be >= 1")


@dataclass
class PipelineConfig:
    stride_s: int = 4
    inlier_tau: float = 0.1
    clip_len: int = 5
    epsilon: float = 0.1
    lambda_ba: float = 1.0
    lambda_dc: float = 1.0
    lambda_asap: float = 5.0
    lambda_arap: float = 100.0
    lambda_ts: float = 10.0
    component_min_size: int = 50
    downsample_varpi: int = 4
    knn_r: int = 4
    depth_knn_k: int = 4
    spawn_radius: float | None = None
    eps_num: float = 1e-8
    min_inliers: int = 6
    gating_rounds: int = 5
    log_every: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)

    @property
    def radius(self) -> float:
        return self.stride_s / 2.0 if self.spawn_radius is None else float(self.spawn_radius)

    def validate(self):
        for name in ("lambda_ba", "lambda_dc", "lambda_asap", "lambda_arap", "lambda_ts"):
            if not getattr(self, name) >= 0:
                raise InvalidConfig(f"{name} must be >= 0")
        if self.clip_len < 2:
            raise InvalidConfig("clip_len must be >= 2")
        if self.downsample_varpi < 1:
            raise InvalidConfig("downsample_varpi must be >= 1")
        if self.knn_r < 1 or self.depth_knn_k < 1:
            raise InvalidConfig("neighbor counts must be >= 1")
        if self.stride_s < 1:
            raise InvalidConfig("stride_s must be >= 1")
        if not self.inlier_tau > 0 or not self.epsilon > 0:
            raise InvalidConfig("inlier_tau and epsilon must be > 0")
        if self.component_min_size < 0:
            raise InvalidConfig("component_min_size must be >= 0")
        if self.min_inliers < 1 or self.gating_rounds < 1:
            raise InvalidConfig("min_inliers and gating_rounds must be >= 1")
        self.solver.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise InvalidConfig("config must be a JSON object")
        data = dict(data)
        solver_keys = {f.name for f in dataclasses.fields(SolverConfig)}
        top_keys = {f.name for f in dataclasses.fields(cls)} - {"solver"}
        solver_data = {}
        nested = data.pop("solver", {})
        if not isinstance(nested, dict):
            raise InvalidConfig("'solver' must be an object")
        solver_data.update(nested)
        kwargs = {}
        for key, value in data.items():
            if key in top_keys:
                kwargs[key] = value
            elif key in solver_keys:
                solver_data[key] = value
            else:
                raise InvalidConfig(f"unknown config key {key!r}")
        try:
            cfg = cls(**_coerce(cls, kwargs), solver=SolverConfig(**_coerce(SolverConfig, solver_data)))
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
        return cls.from_dict(data)


def _coerce(cls, values):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, value in values.items():
        kind = types[key]
        if isinstance(value, bool) and kind != "bool":
            raise InvalidConfig(f"{key}: expected {kind}, got bool")
        if kind == "int":
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if not isinstance(value, int):
                raise InvalidConfig(f"{key}: expected integer")
        elif kind == "float" or kind == "float | None":
            if value is None and kind == "float | None":
                pass
            elif isinstance(value, (int, float)):
                value = float(value)
            else:
                raise InvalidConfig(f"{key}: expected number")
        elif kind == "bool":
            if not isinstance(value, bool):
                raise InvalidConfig(f"{key}: expected boolean")
        elif kind == "str":
            if not isinstance(value, str):
                raise InvalidConfig(f"{key}: expected string")
        out[key] = value
    return out
