"""
Trajectory models: the scene-aware network with its ablations, and the LSTM baseline.

Shape chain of the scene-aware network for a batch of B samples:
rasters (B, m, 2, H, W) -> scene features (B, m, 3) -> with positions (B, m, 5)
-> sequence features (B, L3, 2) -> refined (B, h, 2) -> trajectory (B, n, 2).
"""

import logging
import math
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import ShapeMismatch

logger = logging.getLogger(__name__)


class ModelKind(str, Enum):
    SAPI = "sapi"
    SAPI_NO_LRA = "sapi_no_lra"
    SAPI_NO_TRAFFIC = "sapi_no_traffic"
    LSTM = "lstm"


class Ablation(str, Enum):
    NONE = "none"
    NO_LRA = "no_lra"
    NO_TRAFFIC = "no_traffic"


LRA_CHANNEL = 0
TRAFFIC_CHANNEL = 1

KIND_ABLATION = {
    ModelKind.SAPI: Ablation.NONE,
    ModelKind.SAPI_NO_LRA: Ablation.NO_LRA,
    ModelKind.SAPI_NO_TRAFFIC: Ablation.NO_TRAFFIC,
}


class ModelConfig(BaseModel):
    """Layer sizes. Convolutions use same-length padding, so kernels must be odd."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    m: int = Field(12, ge=1)
    n: int = Field(15, ge=1)
    height_px: int = Field(200, gt=0)
    width_px: int = Field(200, gt=0)

    scene_conv3d_channels: int = Field(8, ge=1)
    scene_conv3d_kernel: Tuple[int, int, int] = (3, 5, 5)
    scene_pool: Tuple[int, int, int] = (1, 4, 4)
    scene_conv2d_channels: int = Field(16, ge=1)
    scene_conv2d_kernel: int = 3
    scene_fc_width: int = Field(128, ge=1)
    scene_features: int = Field(3, ge=3, le=3)

    seq_hidden: int = Field(64, ge=1)
    seq_conv_channels: int = Field(32, ge=1)
    seq_conv_kernel: int = 3
    seq_pool: int = Field(2, ge=1)
    seq_out_channels: int = Field(2, ge=2, le=2)

    refiner_width: int = Field(32, ge=1)

    decoder_hidden: int = Field(128, ge=1)
    decoder_fc: Tuple[int, int] = (128, 64)

    baseline_hidden: int = Field(1024, ge=1)
    baseline_fc: int = Field(128, ge=1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        kernels = [*self.scene_conv3d_kernel, self.scene_conv2d_kernel, self.seq_conv_kernel]
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise ValueError(f"kernel sizes must be odd and positive, got {kernels}")
        if self.scene_pool[0] != 1:
            raise ValueError("scene pooling must keep the time axis (window 1)")
        if min(self.pooled_size) < 1:
            raise ValueError(f"raster {self.height_px}x{self.width_px} too small for pooling")
        if self.sequence_length < 1:
            raise ValueError(f"m={self.m} too short for pool window {self.seq_pool}")
        return self

    @property
    def pooled_size(self) -> Tuple[int, int]:
        return self.height_px // self.scene_pool[1], self.width_px // self.scene_pool[2]

    @property
    def sequence_length(self) -> int:
        """L3, the number of rows the sequence encoder emits."""
        return self.m // self.seq_pool

    @classmethod
    def reduced(cls, **overrides) -> "ModelConfig":
        """Small configuration for gradient checks and quick tests."""
        values = dict(
            height_px=16,
            width_px=16,
            scene_conv3d_channels=2,
            scene_conv2d_channels=3,
            scene_fc_width=8,
            seq_hidden=6,
            seq_conv_channels=4,
            refiner_width=4,
            decoder_hidden=6,
            decoder_fc=(8, 8),
            baseline_hidden=8,
            baseline_fc=8,
        )
        values.update(overrides)
        return cls(**values)


def _check_shape(name: str, tensor: torch.Tensor, expected: Tuple[Optional[int], ...]) -> None:
    if tensor.dim() != len(expected) or any(
        want is not None and got != want for got, want in zip(tensor.shape, expected)
    ):
        shown = tuple("B" if w is None else w for w in expected)
        raise ShapeMismatch(f"{name} must have shape {shown}, got {tuple(tensor.shape)}")


class SceneEncoder(nn.Module):
    """3-D conv and average pool over the history, then per-step 2-D conv and two FC layers."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        kt, kh, kw = config.scene_conv3d_kernel
        self.conv3d = nn.Conv3d(
            2, config.scene_conv3d_channels, (kt, kh, kw), padding=(kt // 2, kh // 2, kw // 2)
        )
        self.pool = nn.AvgPool3d(config.scene_pool)
        k = config.scene_conv2d_kernel
        self.conv2d = nn.Conv2d(
            config.scene_conv3d_channels, config.scene_conv2d_channels, k, padding=k // 2
        )
        ph, pw = config.pooled_size
        self.fc1 = nn.Linear(config.scene_conv2d_channels * ph * pw, config.scene_fc_width)
        self.fc2 = nn.Linear(config.scene_fc_width, config.scene_features)
        self.relu = nn.ReLU()

    def forward(self, rasters: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        _check_shape("rasters", rasters, (None, cfg.m, 2, cfg.height_px, cfg.width_px))
        batch = rasters.shape[0]
        x = rasters.to(self.fc1.weight.dtype) / 255.0
        x = x.permute(0, 2, 1, 3, 4)
        x = self.pool(self.relu(self.conv3d(x)))
        channels, _, pooled_h, pooled_w = x.shape[1:]
        # squeeze: fold the time axis into the batch
        x = x.permute(0, 2, 1, 3, 4).reshape(batch * cfg.m, channels, pooled_h, pooled_w)
        x = self.relu(self.conv2d(x))
        x = self.relu(self.fc1(x.flatten(1)))
        return self.fc2(x).reshape(batch, cfg.m, cfg.scene_features)


class SequenceEncoder(nn.Module):
    """LSTM over the (m, 5) sequence, then conv, max-pool and a 2-channel conv."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        k = config.seq_conv_kernel
        self.lstm = nn.LSTM(config.scene_features + 2, config.seq_hidden, batch_first=True)
        self.conv1 = nn.Conv1d(config.seq_hidden, config.seq_conv_channels, k, padding=k // 2)
        self.pool = nn.MaxPool1d(config.seq_pool)
        self.conv2 = nn.Conv1d(config.seq_conv_channels, config.seq_out_channels, k, padding=k // 2)
        self.relu = nn.ReLU()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        width = self.config.scene_features + 2
        _check_shape("sequence input", features, (None, self.config.m, width))
        out, _ = self.lstm(features)
        x = self.pool(self.relu(self.conv1(out.transpose(1, 2))))
        return self.conv2(x).transpose(1, 2)


def refine(
    history: torch.Tensor, features: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor
) -> torch.Tensor:
    """
    Look-back refinement W1^T S + W2^T T3.

    Args:
        history: S, shape (B, m, 2) or (m, 2)
        features: T3, shape (B, L3, 2) or (L3, 2)
        w1: Weights of shape (m, h)
        w2: Weights of shape (L3, h)

    Returns:
        Refined features of shape (B, h, 2), or (h, 2) for unbatched input

    Raises:
        ShapeMismatch: If the shapes are incompatible
    """
    if w1.dim() != 2 or w2.dim() != 2 or w1.shape[1] != w2.shape[1]:
        raise ShapeMismatch(f"refiner weights {tuple(w1.shape)} and {tuple(w2.shape)} disagree")
    batched = history.dim() == 3
    if not batched:
        history, features = history.unsqueeze(0), features.unsqueeze(0)
    _check_shape("S", history, (None, w1.shape[0], 2))
    _check_shape("T3", features, (history.shape[0], w2.shape[0], 2))
    out = torch.einsum("mh,bmc->bhc", w1, history) + torch.einsum("lh,blc->bhc", w2, features)
    return out if batched else out.squeeze(0)


class Refiner(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        h = config.refiner_width
        self.w1 = nn.Parameter(torch.empty(config.m, h))
        self.w2 = nn.Parameter(torch.empty(config.sequence_length, h))
        for weight in (self.w1, self.w2):
            bound = 1.0 / math.sqrt(weight.shape[0])
            nn.init.uniform_(weight, -bound, bound)

    def forward(self, history: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        return refine(history, features, self.w1, self.w2)


class TrajectoryDecoder(nn.Module):
    """GRU over the h refined steps, then two FC layers and a linear n x 2 head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        fc1, fc2 = config.decoder_fc
        self.gru = nn.GRU(2, config.decoder_hidden, batch_first=True)
        self.fc1 = nn.Linear(config.decoder_hidden, fc1)
        self.fc2 = nn.Linear(fc1, fc2)
        self.head = nn.Linear(fc2, config.n * 2)
        self.relu = nn.ReLU()

    def forward(self, refined: torch.Tensor) -> torch.Tensor:
        _check_shape("refined features", refined, (None, self.config.refiner_width, 2))
        _, hidden = self.gru(refined)
        x = self.relu(self.fc1(hidden[-1]))
        x = self.relu(self.fc2(x))
        return self.head(x).reshape(-1, self.config.n, 2)


def apply_ablation(rasters: torch.Tensor, ablation: Ablation) -> torch.Tensor:
    """Zero the LRA or traffic channel of (B, m, 2, H, W) rasters; returns a copy when changed."""
    ablation = Ablation(ablation)
    if ablation == Ablation.NONE:
        return rasters
    channel = LRA_CHANNEL if ablation == Ablation.NO_LRA else TRAFFIC_CHANNEL
    out = rasters.clone()
    out[:, :, channel] = 0
    return out


class SapiNet(nn.Module):
    """Scene-aware predictor over rasters and history positions."""

    uses_rasters = True

    def __init__(self, config: ModelConfig, ablation: Ablation = Ablation.NONE):
        super().__init__()
        self.config = config
        self.ablation = Ablation(ablation)
        self.scene_encoder = SceneEncoder(config)
        self.sequence_encoder = SequenceEncoder(config)
        self.refiner = Refiner(config)
        self.decoder = TrajectoryDecoder(config)

    def scene_encode(self, rasters: torch.Tensor) -> torch.Tensor:
        return self.scene_encoder(rasters)

    def sequence_encode(self, features: torch.Tensor) -> torch.Tensor:
        return self.sequence_encoder(features)

    def refine(self, history: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        return self.refiner(history, features)

    def decode(self, refined: torch.Tensor) -> torch.Tensor:
        return self.decoder(refined)

    def forward(
        self, history: torch.Tensor, rasters: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """
        Predict future positions.

        Args:
            history: Ego-frame history positions (B, m, 2)
            rasters: History rasters (B, m, 2, H, W), uint8 or float in [0, 255]

        Returns:
            Ego-frame future positions (B, n, 2)
        """
        if rasters is None:
            raise ShapeMismatch("SapiNet needs history rasters")
        _check_shape("history", history, (None, self.config.m, 2))
        history = history.to(self.refiner.w1.dtype)
        scene = self.scene_encode(apply_ablation(rasters, self.ablation))
        features = self.sequence_encode(torch.cat([scene, history], dim=-1))
        return self.decode(self.refine(history, features))


class LstmBaseline(nn.Module):
    """Vanilla LSTM over history positions decoded by two FC layers."""

    uses_rasters = False

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.lstm = nn.LSTM(2, config.baseline_hidden, batch_first=True)
        self.fc = nn.Linear(config.baseline_hidden, config.baseline_fc)
        self.head = nn.Linear(config.baseline_fc, config.n * 2)
        self.relu = nn.ReLU()

    def forward(
        self, history: torch.Tensor, rasters: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        _check_shape("history", history, (None, self.config.m, 2))
        _, (hidden, _) = self.lstm(history.to(self.fc.weight.dtype))
        x = self.relu(self.fc(hidden[-1]))
        return self.head(x).reshape(-1, self.config.n, 2)


def build_model(kind: ModelKind, config: Optional[ModelConfig] = None, seed: int = 0) -> nn.Module:
    """
    Construct a model with seeded initialization.

    Args:
        kind: Model kind; the sapi_* kinds fix the ablation
        config: Layer sizes
        seed: Initialization seed

    Returns:
        SapiNet or LstmBaseline
    """
    kind = ModelKind(kind)
    config = config or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if kind == ModelKind.LSTM:
            model: nn.Module = LstmBaseline(config)
        else:
            model = SapiNet(config, KIND_ABLATION[kind])
    logger.info(f"Built {kind.value} model with {count_parameters(model):,} parameters")
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def predict_sample(model: nn.Module, sample) -> np.ndarray:
    """Run one Sample through a model; returns (n, 2) ego-frame positions."""
    history = torch.from_numpy(sample.history_positions.copy()).unsqueeze(0)
    rasters = None
    if getattr(model, "uses_rasters", False):
        rasters = torch.from_numpy(sample.raster_array()).unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(history, rasters)
    model.train(was_training)
    return out.squeeze(0).double().numpy()
