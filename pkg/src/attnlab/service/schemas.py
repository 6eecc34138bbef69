"""Request/response models for the HTTP service.

Every config model rejects unknown keys (``extra="forbid"``), so a typo in a
config file fails loudly at validation time instead of silently training the
wrong experiment.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..attention import GATE_KINDS, MECHANISMS
from ..models import PLACEMENTS, VARIANTS

Mechanism = Literal["static", "se", "sb", "dyconv"]
Gate = Literal["tanh", "sigmoid", "softmax", "relu", "none"]
Placement = Literal["c1", "c2", "c3"]

assert set(Mechanism.__args__) == set(MECHANISMS)
assert set(Gate.__args__) == set(GATE_KINDS)
assert set(Placement.__args__) == set(PLACEMENTS)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AttentionSpecModel(StrictModel):
    mechanism: Mechanism = "static"
    gate: Optional[Gate] = None
    placement: list[Placement] = Field(default=["c1", "c2", "c3"])
    balance_init: float = 0.1
    n_experts: int = Field(default=4, ge=1)
    temperature: float = Field(default=30.0, gt=0)
    branch_dropout: float = Field(default=0.0, ge=0.0, lt=1.0)


class ModelConfigModel(StrictModel):
    variant: Literal["imagenet", "cifar", "toy"] = "cifar"
    width_multiplier: float = Field(default=1.0, gt=0)
    num_classes: int = Field(default=10, ge=2)
    input_resolution: Optional[int] = Field(default=None, ge=8)
    classifier_dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    attention: AttentionSpecModel = Field(default_factory=AttentionSpecModel)
    seed: int = Field(default=0, ge=0)


assert set(ModelConfigModel.model_fields["variant"].annotation.__args__) == set(VARIANTS)


class TrainConfigModel(StrictModel):
    lr0: float = Field(ge=0)
    batch_size: int = Field(ge=2)
    epochs: int = Field(ge=1)
    schedule: Literal["linear", "cosine"] = "cosine"
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0, ge=0)
    subset_size: Optional[int] = Field(default=None, ge=10)
    test_subset_size: Optional[int] = Field(default=None, ge=10)
    attention_dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    augment: bool = True


class ExperimentConfig(StrictModel):
    """Top-level config document: model section plus optional train section."""

    model: ModelConfigModel = Field(default_factory=ModelConfigModel)
    train: Optional[TrainConfigModel] = None


# -- requests ---------------------------------------------------------------


class CostRequest(StrictModel):
    model: ModelConfigModel = Field(default_factory=ModelConfigModel)


class GradCheckRequest(StrictModel):
    mechanism: Mechanism = "sb"
    gate: Optional[Gate] = None
    trials: int = Field(default=20, ge=1, le=200)
    seed: int = Field(default=0, ge=0)
    eps: float = Field(default=1e-5, ge=1e-7, le=1e-3)


class SweepRequest(StrictModel):
    mechanism: Literal["se", "sb"] = "sb"
    gate: Optional[Gate] = None
    offsets: list[float] = Field(min_length=1)
    seed: int = Field(default=0, ge=0)
    channels: int = Field(default=8, ge=1)
    spatial: int = Field(default=6, ge=1)


class TrainRequest(StrictModel):
    config: ExperimentConfig
    data_dir: str


# -- responses --------------------------------------------------------------


class LayerCostModel(StrictModel):
    name: str
    type: str
    params: int
    multiplies: int
    adds: int


class CostResponse(StrictModel):
    params: int
    multiplies: int
    adds: int
    madds: int
    breakdown: list[LayerCostModel]


class GradCheckResponse(StrictModel):
    mechanism: str
    gate: str
    trials: int
    eps: float
    max_rel_err: float
    errors: list[float]
    threshold: float
    passed: bool


class SweepRow(StrictModel):
    offset: float
    trunk_grad_norm: float
    branch_grad_norm: float
    input_grad_norm: float


class SweepResponse(StrictModel):
    mechanism: str
    gate: str
    rows: list[SweepRow]


class EpochRecordModel(StrictModel):
    epoch: int
    lr: float
    train_loss: float
    test_acc: float
    lambda_min: Optional[float] = None
    lambda_mean: Optional[float] = None
    lambda_max: Optional[float] = None
    lambda_sites: Optional[dict[str, dict[str, float]]] = None


class TrainResponse(StrictModel):
    config: dict
    epochs: list[EpochRecordModel]
    final_test_acc: float
    duration_seconds: float


class HealthResponse(StrictModel):
    status: str
    version: str
