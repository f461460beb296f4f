"""
Application Configuration Management
Centralized configuration with validation and environment support
"""
import hashlib
import json
from pathlib import Path
from typing import List, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from exceptions import ArtifactIOException, ConfigException

load_dotenv()


class Settings(BaseSettings):
    """Process settings read from the environment"""

    model_config = SettingsConfigDict(
        env_prefix="HEADEDIT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # Application
    APP_NAME: str = "HeadEdit Lab"
    APP_VERSION: str = "1.0.0"
    ENVIRONMENT: str = "development"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None
    LOG_JSON: bool = False

    # Output
    OUT_DIR: str = "runs"

    @field_validator("ENVIRONMENT")
    @classmethod
    def validate_environment(cls, v):
        """Validate environment value"""
        allowed = ["development", "testing", "production"]
        if v not in allowed:
            raise ValueError(f"ENVIRONMENT must be one of {allowed}")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v):
        """Validate log level"""
        allowed = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        v = v.upper()
        if v not in allowed:
            raise ValueError(f"LOG_LEVEL must be one of {allowed}")
        return v


class ModelConfig(BaseModel):
    """Toy decoder-only transformer shape"""

    n_layers: int = Field(default=4, ge=1)
    n_heads: int = Field(default=4, ge=1)
    head_dim: int = Field(default=8, ge=1)
    vocab_size: int = Field(default=64, ge=2)
    context_len: int = Field(default=32, ge=2)
    mlp_ratio: float = Field(default=4.0, gt=0)
    seed: int = 0
    init_std: float = Field(default=0.1, gt=0)

    @property
    def hidden_dim(self) -> int:
        return self.head_dim * self.n_heads

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.hidden_dim * self.mlp_ratio)))

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads


class PretrainConfig(BaseModel):
    """Next-token pretraining of the base model"""

    epochs: int = Field(default=40, ge=1)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    log_every: int = Field(default=50, ge=1)


class WorldConfig(BaseModel):
    """Synthetic truthfulness world"""

    n_subjects: int = Field(default=40, ge=2)
    n_values: int = Field(default=16, ge=2)
    misconception_fraction: float = Field(default=0.5, ge=0, le=1)
    p_mis: float = Field(default=0.7, ge=0, le=1)
    p_abstain: float = Field(default=0.0, ge=0, le=1)
    n_documents: int = Field(default=800, ge=1)
    facts_per_doc: int = Field(default=3, ge=1)
    n_mc_distractors: int = Field(default=2, ge=0)
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)

    @field_validator("split")
    @classmethod
    def validate_split(cls, v):
        """Split fractions must be positive and sum to one"""
        if any(f <= 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")
        return v

    @property
    def vocab_needed(self) -> int:
        # Q, A, end-of-answer, abstain + values + subjects
        return 4 + self.n_values + self.n_subjects


class ProbeConfig(BaseModel):
    """Logistic-regression probing and ITI vector construction"""

    l2: float = Field(default=1e-3, ge=0)
    max_steps: int = Field(default=10_000, ge=1)
    tol: float = Field(default=1e-6, gt=0)
    step_size: float = Field(default=0.5, gt=0)
    val_fraction: float = Field(default=0.2, gt=0, lt=1)
    split_seed: int = 0
    random_questions_per_subject: int = Field(default=4, ge=1)
    normalize_direction: bool = True
    top_k: int = Field(default=4, ge=1)


class EditConfig(BaseModel):
    """Representation-edit switches"""

    edit_prompt_positions: bool = True
    constant_strength: bool = False


class AlignConfig(BaseModel):
    """IPO training recipe"""

    tau_grid: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=4, ge=1)
    lr_all_heads: float = Field(default=1e-4, gt=0)
    lr_multi_head: float = Field(default=5e-4, gt=0)
    lr_single_head: float = Field(default=2e-3, gt=0)
    lr_scale: float = Field(default=1.0, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(default=0.0, ge=0)
    init_std: float = Field(default=0.02, ge=0)

    @field_validator("tau_grid")
    @classmethod
    def validate_tau_grid(cls, v):
        if not v or any(t <= 0 for t in v):
            raise ValueError("tau_grid must be nonempty with tau > 0")
        return v

    def lr_for(self, n_masked: int, total_heads: int) -> float:
        """Learning rate for a mask of n_masked heads"""
        if n_masked >= total_heads:
            base = self.lr_all_heads
        elif n_masked == 1:
            base = self.lr_single_head
        else:
            base = self.lr_multi_head
        return base * self.lr_scale


class EvalConfig(BaseModel):
    """Evaluation metrics"""

    kl_direction: str = "post_pre"
    max_new: int = Field(default=2, ge=1)

    @field_validator("kl_direction")
    @classmethod
    def validate_kl_direction(cls, v):
        if v not in ("post_pre", "pre_post"):
            raise ValueError("kl_direction must be 'post_pre' or 'pre_post'")
        return v


CONDITIONS = ("iti_localized", "iti_random", "ipo_full", "ipo_localized", "ipo_random", "ipo_single")


class PlanConfig(BaseModel):
    """Which conditions to run and how many repeats"""

    k: int = Field(default=4, ge=1)
    n_random_sets: int = Field(default=16, ge=1)
    n_single_heads: int = Field(default=8, ge=1)
    alpha_grid: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0])
    seeds: List[int] = Field(default_factory=lambda: list(range(8)))
    conditions: List[str] = Field(default_factory=lambda: list(CONDITIONS))

    @field_validator("alpha_grid", "seeds")
    @classmethod
    def validate_nonempty(cls, v):
        if not v:
            raise ValueError("grid must be nonempty")
        return v

    @field_validator("conditions")
    @classmethod
    def validate_conditions(cls, v):
        unknown = [c for c in v if c not in CONDITIONS]
        if unknown:
            raise ValueError(f"unknown conditions {unknown}; allowed {list(CONDITIONS)}")
        return v


class LabConfig(BaseModel):
    """Everything an experiment needs, loadable from one JSON file"""

    model: ModelConfig = Field(default_factory=ModelConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    world: WorldConfig = Field(default_factory=WorldConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    edit: EditConfig = Field(default_factory=EditConfig)
    align: AlignConfig = Field(default_factory=AlignConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    plan: PlanConfig = Field(default_factory=PlanConfig)

    @model_validator(mode="after")
    def validate_consistency(self):
        """Cross-section checks"""
        if self.world.vocab_needed > self.model.vocab_size:
            raise ValueError(
                f"world needs {self.world.vocab_needed} tokens but vocab_size is {self.model.vocab_size}"
            )
        if self.plan.k > self.model.total_heads:
            raise ValueError(f"k={self.plan.k} exceeds {self.model.total_heads} heads")
        if self.probe.top_k > self.model.total_heads:
            raise ValueError(f"probe.top_k={self.probe.top_k} exceeds {self.model.total_heads} heads")
        return self

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form"""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_lab_config(path: Optional[Union[str, Path]] = None) -> LabConfig:
    """
    Load an experiment configuration

    Args:
        path: JSON file; defaults are used when None

    Returns:
        Validated LabConfig
    """
    if path is None:
        return LabConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactIOException(f"Cannot read config {path}: {e}", {"path": str(path)})
    try:
        return LabConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigException(f"Invalid config {path}", {"errors": e.errors(include_url=False)})


def parse_lab_config(data: dict) -> LabConfig:
    """Validate a config mapping, converting pydantic errors to ConfigException"""
    try:
        return LabConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigException("Invalid config", {"errors": e.errors(include_url=False)})


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get application settings"""
    return settings
