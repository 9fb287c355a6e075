"""Experiment configuration documents. Unknown keys are rejected at every level."""
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.services.duplex import Variant

SweepAxis = Literal["temperature", "array_size", "zero_fraction", "refresh_count", "pool_factor"]
ExperimentKind = Literal["lifetime", "schedule", "train", "compare", "sweep"]
ProfileName = Literal["camel", "sram"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    variant: Variant = Variant.DUDNN
    in_channels: int = Field(1, ge=1)
    image_size: int = Field(8, ge=2)
    num_blocks: int = Field(4, ge=1)
    backbone_channels: int = Field(4, ge=1)
    branch_channels: int = Field(4, ge=1)
    num_classes: int = Field(3, ge=2)
    pool_factor: int = Field(2, ge=1)
    kernel: int = Field(3, ge=1)
    branch_norm: bool = False
    bfp: bool = True
    dataset: Literal["textures", "blobs"] = "textures"
    n_samples: int = Field(384, ge=8)


class MemoryEnergyConfig(_Strict):
    sram_access: float = Field(1.0, ge=0)
    edram_access: float = Field(0.7, ge=0)
    dram_access: float = Field(100.0, ge=0)
    sram_leakage: float = Field(1e-3, ge=0)
    leakage_ratio: float = Field(3.5, gt=0)


class PeEnergyConfig(_Strict):
    active: float = Field(0.05, ge=0)
    gated: float = Field(0.0125, ge=0)
    skipped: float = Field(0.0025, ge=0)


class HardwareConfig(_Strict):
    profile: ProfileName = "camel"
    array_size: Optional[int] = Field(None, ge=1)
    transient_bank_bytes: Optional[int] = Field(None, ge=1)
    mode: Literal["analytical", "detailed"] = "analytical"
    convention: Literal["compact", "full"] = "full"
    temperature_c: float = 100.0
    retention_points: list[tuple[float, float]] = [(100.0, 3.35), (-30.0, 30.0)]
    refresh: bool = True
    forced_refreshes: Optional[int] = Field(None, ge=0)
    read_yield: float = Field(1.0, gt=0, le=1)
    zero_group_fraction: float = Field(0.0, ge=0, le=1)
    zero_mantissa_fraction: float = Field(0.0, ge=0, le=1)
    dram_access_cycles: float = Field(50.0, ge=0)
    refresh_cycles: float = Field(2.0, ge=0)
    memory_energy: MemoryEnergyConfig = MemoryEnergyConfig()
    pe_energy: PeEnergyConfig = PeEnergyConfig()


class TrainSection(_Strict):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)


class ExperimentSection(_Strict):
    kind: ExperimentKind = "lifetime"
    target_accuracy: float = Field(0.9, ge=0)
    variants: list[Variant] = list(Variant)
    profiles: list[ProfileName] = ["camel", "sram"]
    sweep_axis: Optional[SweepAxis] = None
    sweep_values: list[float] = []

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == "sweep" and (self.sweep_axis is None or not self.sweep_values):
            raise ValueError("a sweep needs sweep_axis and sweep_values")
        if self.kind == "compare" and len(self.variants) * len(self.profiles) < 2:
            raise ValueError("a comparison needs at least two cells")
        return self


class ExperimentConfig(_Strict):
    model: ModelConfig = ModelConfig()
    hardware: HardwareConfig = HardwareConfig()
    train: TrainSection = TrainSection()
    experiment: ExperimentSection = ExperimentSection()
    seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None
