from __future__ import annotations

from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, model_validator

import SETTINGS


class ScenarioName(str, Enum):
    nonlinear = "nonlinear"
    linear = "linear"
    simple = "simple"
    null = "null"
    inter = "inter"
    interhide = "interhide"
    onetrt = "onetrt"
    twotrt = "twotrt"
    manybiom = "manybiom"
    nonlinearskew = "nonlinearskew"


class SecondStage(str, Enum):
    dpm = "dpm"
    simple = "simple"
    null = "null"


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario: ScenarioName
    c_z: float = 0.0
    c_u: float = 0.0
    n_treatments: int = Field(SETTINGS.N_TREATMENTS, ge=1)
    n_biomarkers: int = Field(SETTINGS.N_BIOMARKERS, ge=1)
    seed: int = Field(0, ge=0)
    marker_prevalences: tuple[float, ...] = SETTINGS.MARKER_PREVALENCES
    biomarker_uniform_mix: float = Field(SETTINGS.BIOMARKER_UNIFORM_MIX, ge=0.0, le=1.0)
    skew_shape: float = SETTINGS.SKEW_SHAPE

    @property
    def n_groups(self) -> int:
        return self.n_treatments * self.n_biomarkers

    @property
    def label(self) -> str:
        return f"{self.scenario.value}-{self.c_z:.1f}-{self.c_u:.1f}"


class CensorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lower: float = SETTINGS.CENSOR_LOWER
    upper: float = SETTINGS.CENSOR_UPPER

    @model_validator(mode="after")
    def _check_window(self) -> "CensorConfig":
        if not self.lower < self.upper:
            raise ValueError("censoring window needs lower < upper")
        return self


class TrialConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(SETTINGS.BATCH_SIZE, ge=1)
    horizon: int = Field(SETTINGS.HORIZON, ge=1)
    min_group_size: int = Field(SETTINGS.MIN_GROUP_SIZE, ge=0)
    stop_alpha_benefit: float = Field(SETTINGS.STOP_ALPHA_BENEFIT, gt=0.0, lt=1.0)
    stop_alpha_harm: float = Field(SETTINGS.STOP_ALPHA_HARM, gt=0.0, lt=1.0)
    min_interim_n: int = Field(SETTINGS.MIN_INTERIM_N, ge=2)
    futility_t: float = Field(SETTINGS.FUTILITY_T, ge=0.0)
    futility_min_n: int = Field(SETTINGS.FUTILITY_MIN_N, ge=2)
    randomization_floor: float = Field(SETTINGS.RANDOMIZATION_FLOOR, ge=0.0, lt=1.0)
    adaptive: bool = True
    enable_stopping: bool = True
    log_time_offset: float = SETTINGS.LOG_TIME_OFFSET
    sigma_s: float = Field(SETTINGS.SIGMA_S, gt=0.0)
    sigma_y: float = Field(SETTINGS.SIGMA_Y, gt=0.0)
    max_extra_enrollment: int = Field(SETTINGS.MAX_EXTRA_ENROLLMENT, ge=0)
    censor: CensorConfig | None = None


class ChainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_iter: int = Field(SETTINGS.N_ITER, ge=1)
    burn_in: int = Field(SETTINGS.BURN_IN, ge=0)
    thin: int = Field(SETTINGS.THIN, ge=1)
    k_init: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_lengths(self) -> "ChainConfig":
        if self.n_iter <= self.burn_in:
            raise ValueError("n_iter must exceed burn_in")
        return self

    @property
    def n_retained(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    @classmethod
    def quick(cls) -> "ChainConfig":
        return cls(n_iter=SETTINGS.QUICK_N_ITER, burn_in=SETTINGS.QUICK_BURN_IN, thin=SETTINGS.QUICK_THIN)


class DpmConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    second_stage: SecondStage = SecondStage.dpm
    chain: ChainConfig = Field(default_factory=ChainConfig)
    n_aux: int = Field(SETTINGS.N_AUX, ge=1)
    alpha_shape: float = Field(SETTINGS.ALPHA_PRIOR_SHAPE, gt=0.0)
    alpha_rate: float = Field(SETTINGS.ALPHA_PRIOR_RATE, gt=0.0)
    # Alternative readings of the concentration weight and the base-measure scale.
    literal_alpha: bool = False
    scale_matrix_inverted: bool = False
    simple_coef_prior_scale: float = Field(SETTINGS.SIMPLE_COEF_PRIOR_SCALE, gt=0.0)


class Stage1PriorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    nuisance_var: float = Field(SETTINGS.NUISANCE_VAR, gt=0.0)
    nuisance_cov: float = SETTINGS.NUISANCE_COV
    precision_shape: float = Field(SETTINGS.PRECISION_PRIOR_SHAPE, gt=0.0)
    precision_rate: float = Field(SETTINGS.PRECISION_PRIOR_RATE, gt=0.0)

    @model_validator(mode="after")
    def _check_pd(self) -> "Stage1PriorConfig":
        if abs(self.nuisance_cov) >= self.nuisance_var:
            raise ValueError("nuisance prior covariance must be positive definite")
        return self

    @classmethod
    def simulation(cls) -> "Stage1PriorConfig":
        return cls(nuisance_var=SETTINGS.SIMULATION_NUISANCE_VAR, nuisance_cov=SETTINGS.SIMULATION_NUISANCE_COV)


class RunManifest(BaseModel):
    root_seed: int = Field(SETTINGS.ROOT_SEED, ge=0)
    scenarios: list[ScenarioConfig] = Field(min_length=1)
    n_replicates: int = Field(SETTINGS.N_REPLICATES, ge=1)
    models: list[SecondStage] = Field(default_factory=lambda: [SecondStage.dpm, SecondStage.simple])
    chain: ChainConfig = Field(default_factory=ChainConfig)
    trial: TrialConfig = Field(default_factory=TrialConfig)
    stage1: Stage1PriorConfig = Field(default_factory=Stage1PriorConfig.simulation)
    n_aux: int = Field(SETTINGS.N_AUX, ge=1)
    alpha_shape: float = Field(SETTINGS.ALPHA_PRIOR_SHAPE, gt=0.0)
    alpha_rate: float = Field(SETTINGS.ALPHA_PRIOR_RATE, gt=0.0)
    literal_alpha: bool = False
    scale_matrix_inverted: bool = False
    output_dir: Path = Path(SETTINGS.OUTPUT_DIR)
    jobs: int = Field(SETTINGS.JOBS, ge=1)

    def dpm_config(self, second_stage: SecondStage) -> DpmConfig:
        return DpmConfig(
            second_stage=second_stage,
            chain=self.chain,
            n_aux=self.n_aux,
            alpha_shape=self.alpha_shape,
            alpha_rate=self.alpha_rate,
            literal_alpha=self.literal_alpha,
            scale_matrix_inverted=self.scale_matrix_inverted,
        )
