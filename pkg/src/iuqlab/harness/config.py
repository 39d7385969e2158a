"""Scenario configuration: TOML file -> validated pydantic tree.

Unknown keys are rejected everywhere. Validation errors are re-raised as
:class:`iuqlab.errors.ValidationError` with the dotted field path.
"""

import hashlib
import json
import sys
from pathlib import Path
from typing import Literal, Optional

import pydantic
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..errors import ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("circe", "circe-bias", "mle-map", "iprem", "dipe", "mcda", "mba", "sample-adjust")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioSection(_Strict):
    name: str
    seed: int = Field(0, ge=0, lt=2**64)
    description: str = ""


class ModelSection(_Strict):
    kind: Literal["affine", "exponential", "reflood"]
    S: Optional[list[list[float]]] = None
    B: Optional[list[list[float]]] = None
    c: Optional[list[float]] = None
    nominal: Optional[list[float]] = None
    rel_step: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _affine_needs_S(self):
        if self.kind == "affine" and not self.S:
            raise ValueError("affine model needs the sensitivity matrix S")
        return self


class TruthSection(_Strict):
    mean: list[float]
    var: list[float]
    transform: Optional[list[Literal["additive", "exponential"]]] = None

    @field_validator("var")
    @classmethod
    def _nonneg(cls, v):
        if any(x < 0 for x in v):
            raise ValueError("variances must be non-negative")
        return v


class ExperimentsSection(_Strict):
    designs: Optional[list[list[float]]] = None
    n_designs: Optional[int] = Field(None, ge=1)
    design_range: Optional[list[list[float]]] = None
    noise_sd: list[float]
    data_file: Optional[str] = None

    @field_validator("noise_sd")
    @classmethod
    def _nonneg(cls, v):
        if not v or any(x < 0 for x in v):
            raise ValueError("noise_sd must be a non-empty list of non-negative values")
        return v

    @model_validator(mode="after")
    def _some_designs(self):
        if self.designs is None and self.data_file is None and (
                self.n_designs is None or self.design_range is None):
            raise ValueError("give designs, n_designs with design_range, or data_file")
        return self


class CirceOptions(_Strict):
    transform: Optional[list[Literal["additive", "exponential", "auto"]]] = None
    outer_max: int = Field(10, ge=1)
    outer_tol: float = Field(1e-4, gt=0)
    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(10_000, ge=1)


class MleMapOptions(_Strict):
    prior_mean: Optional[list[float]] = None
    prior_kappa: Optional[list[float]] = None
    prior_scale: Optional[list[float]] = None
    prior_dof: Optional[list[float]] = None
    tol: float = Field(1e-8, gt=0)


class IpremOptions(_Strict):
    eta: float = Field(0.22, gt=0)
    lo: list[float]
    hi: list[float]
    n_grid: int = Field(9, ge=3)
    weights: Optional[list[float]] = None
    m: Optional[int] = Field(None, ge=3, le=14)


class DipeOptions(_Strict):
    parameter: int = Field(0, ge=0)
    lo: float
    hi: float
    n_grid: int = Field(41, ge=5)


class McdaOptions(_Strict):
    prior_mean: Optional[list[float]] = None
    prior_sd: list[float]
    alpha: Optional[float] = Field(None, ge=0)
    chain_length: int = Field(20_000, ge=10_000)
    n_probe: int = Field(16, ge=8)


class PriorEntry(_Strict):
    kind: Literal["uniform", "normal"]
    a: float
    b: float


class MbaOptions(_Strict):
    prior: list[PriorEntry]
    use_bias: bool = False
    use_surrogate: bool = False
    split_fraction: float = Field(0.8, gt=0.5, lt=0.95)
    chain_length: int = Field(20_000, ge=1000)
    burn_in: float = Field(0.2, ge=0, le=0.9)
    n_surrogate: Optional[int] = None


class SampleAdjustOptions(_Strict):
    lo: list[float]
    hi: list[float]
    n_samples: int = Field(125, ge=10)
    max_rounds: int = Field(10, ge=1)
    target: float = Field(1.0, gt=0, le=1)
    expansion: float = Field(1.25, gt=1)


class MethodSection(_Strict):
    name: Literal[METHODS]
    circe: CirceOptions = CirceOptions()
    mle_map: MleMapOptions = MleMapOptions()
    iprem: Optional[IpremOptions] = None
    dipe: Optional[DipeOptions] = None
    mcda: Optional[McdaOptions] = None
    mba: Optional[MbaOptions] = None
    sample_adjust: Optional[SampleAdjustOptions] = None

    @model_validator(mode="after")
    def _options_present(self):
        key = self.name.replace("-", "_")
        if key in ("iprem", "dipe", "mcda", "mba", "sample_adjust") and getattr(self, key) is None:
            raise ValueError(f"method {self.name!r} needs a [method.{key}] table")
        return self


class FuqSection(_Strict):
    n_samples: int = Field(1000, ge=200)
    target: float = Field(0.95, gt=0, le=1)


class OutputSection(_Strict):
    dir: str = "out"


class ScenarioConfig(_Strict):
    scenario: ScenarioSection
    model: ModelSection
    truth: TruthSection
    experiments: ExperimentsSection
    method: MethodSection
    fuq: FuqSection = FuqSection()
    output: OutputSection = OutputSection()

    def payload(self):
        """Canonical content used for hashing (output location excluded)."""
        d = self.model_dump(mode="json")
        d.pop("output", None)
        return d

    def config_hash(self):
        text = json.dumps(self.payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _field_path(loc):
    return ".".join(str(p) for p in loc)


def parse_config(data):
    try:
        return ScenarioConfig.model_validate(data)
    except pydantic.ValidationError as exc:
        err = exc.errors()[0]
        path = _field_path(err["loc"])
        msg = "field required" if err["type"] == "missing" else err["msg"]
        raise ValidationError(msg, field=path or "config") from None


def load_config(path):
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"cannot parse {path}: {exc}") from None
    cfg = parse_config(data)
    if cfg.experiments.data_file and not Path(cfg.experiments.data_file).is_absolute():
        cfg.experiments.data_file = str((path.parent / cfg.experiments.data_file).resolve())
    return cfg
