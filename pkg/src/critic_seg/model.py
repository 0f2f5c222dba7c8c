"""Hourglass network: shared convolutional encoder, mask decoder with skip
connections, and a value head predicting discounted reward.

The graph builder is parameterized by input size and channel list so the same
code path runs at 64x64 production shape and at small toy shapes in tests.
With n conv layers the encoder pools after the first n-1; the final conv is a
full-spatial valid convolution collapsing to a 1x1 bottleneck. The decoder
mirrors the encoder with nearest-neighbor upsampling and concatenated skips.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .containers import load_tensors, save_tensors
from .errors import NumericFaultError

VARIANTS = ("full", "frozen_encoder", "separate_critic", "no_inject")


@dataclass
class ModelSpec:
    input_size: int = 64
    encoder_channels: tuple = (40, 40, 40, 80, 160)
    kernel: int = 3
    critic_hidden: tuple = (160, 160)
    dropout_rate: float = 0.5
    leaky_slope: float = 0.01
    mask_bias_init: float = -2.5  # fresh models emit near-empty masks

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.critic_hidden = tuple(self.critic_hidden)

    @property
    def n_layers(self):
        return len(self.encoder_channels)

    @property
    def bottleneck_spatial(self):
        # spatial extent entering the last encoder conv, after n-1 poolings
        s = self.input_size >> (self.n_layers - 1)
        assert s >= 1, "too many layers for the input size"
        return s

    @property
    def dropout_layers(self):
        # after the activations of encoder layers n-2 and n-1 (3 and 4 of 5)
        return {self.n_layers - 2, self.n_layers - 1}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Encoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        chans = (3,) + spec.encoder_channels
        pad = spec.kernel // 2
        convs = []
        for i in range(spec.n_layers - 1):
            convs.append(nn.Conv2d(chans[i], chans[i + 1], spec.kernel, padding=pad))
        convs.append(nn.Conv2d(chans[-2], chans[-1], spec.bottleneck_spatial))
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(spec.leaky_slope)
        self.drop = nn.Dropout(spec.dropout_rate)

    def forward(self, x):
        """Returns (bottleneck NxCx1x1, skips) with one skip per pooled layer,
        taken after the activation at full pre-pool resolution."""
        spec = self.spec
        skips = []
        for i in range(spec.n_layers - 1):
            x = self.act(self.convs[i](x))
            skips.append(x)
            x = F.max_pool2d(x, 2)
            # dropout after pooling: dropping before the max would inflate
            # train-time statistics and skew eval-mode predictions
            if (i + 1) in spec.dropout_layers:
                x = self.drop(x)
        z = self.act(self.convs[-1](x))
        return z, skips


class Decoder(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        chans = spec.encoder_channels
        pad = spec.kernel // 2
        self.expand = nn.ConvTranspose2d(chans[-1], chans[-2], spec.bottleneck_spatial)
        convs = []
        for i in range(spec.n_layers - 2, 0, -1):
            convs.append(nn.Conv2d(chans[i] * 2, chans[i - 1], spec.kernel, padding=pad))
        convs.append(nn.Conv2d(chans[0] * 2, 1, spec.kernel, padding=pad))
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(spec.leaky_slope)

    def forward(self, z, skips):
        x = self.act(self.expand(z))
        for i, conv in enumerate(self.convs):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            skip = skips[len(skips) - 1 - i]
            x = torch.cat([x, skip], dim=1)
            x = conv(x)
            if i < len(self.convs) - 1:
                x = self.act(x)
        return torch.sigmoid(x)


class CriticHead(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        dims = (spec.encoder_channels[-1],) + spec.critic_hidden
        self.fcs = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
        self.out = nn.Linear(dims[-1], 1)
        self.act = nn.LeakyReLU(spec.leaky_slope)
        self.drop = nn.Dropout(spec.dropout_rate)

    def forward(self, z):
        x = z.flatten(1)
        for i, fc in enumerate(self.fcs):
            x = self.act(fc(x))
            if i == 0:
                x = self.drop(x)
        return self.out(x).squeeze(-1)


class CriticPath(nn.Module):
    """Encoder + critic head as one module; built on the fly so the training
    loop can evaluate values with parameters treated as constants."""

    def __init__(self, encoder, head):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x):
        z, _ = self.encoder(x)
        return self.head(z)


class CriticSegModel(nn.Module):
    def __init__(self, spec: ModelSpec, variant: str = "full"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.spec = spec
        self.variant = variant
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)
        self.critic_head = CriticHead(spec)
        # independent encoder for the mask branch, learned from scratch
        self.seg_encoder = Encoder(spec) if variant == "separate_critic" else None

    def mask_encoder(self):
        return self.seg_encoder if self.seg_encoder is not None else self.encoder

    def forward_mask(self, x):
        z, skips = self.mask_encoder()(x)
        m = self.decoder(z, skips)
        if not torch.isfinite(m).all():
            raise NumericFaultError("non-finite mask output")
        return m.squeeze(1)

    def forward_critic(self, x):
        v = CriticPath(self.encoder, self.critic_head)(x)
        if not torch.isfinite(v).all():
            raise NumericFaultError("non-finite critic output")
        return v


def init_model(spec: ModelSpec, variant: str = "full", seed: int = 0) -> CriticSegModel:
    """Deterministic fan-in-scaled initialization; the mask output layer is
    biased toward near-empty masks."""
    torch.manual_seed(seed)
    model = CriticSegModel(spec, variant)
    with torch.no_grad():
        out_conv = model.decoder.convs[-1]
        out_conv.weight.mul_(0.5)
        out_conv.bias.fill_(spec.mask_bias_init)
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_batch(images) -> torch.Tensor:
    """List of HxWx3 float arrays (or one NxHxWx3 array) -> NCHW float32."""
    arr = np.stack(images) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    t = torch.from_numpy(np.ascontiguousarray(arr)).float()
    return t.permute(0, 3, 1, 2)


def predict_values(model, images, batch_size: int = 256) -> np.ndarray:
    """Eval-mode critic values for a list/array of images."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.forward_critic(to_batch(images[i : i + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def predict_masks(model, images, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.forward_mask(to_batch(images[i : i + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def save_checkpoint(path, model: CriticSegModel, phase: str, epoch: int, seed: int, extra: dict | None = None) -> str:
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    meta = {
        "spec": model.spec.to_dict(),
        "variant": model.variant,
        "phase": phase,
        "epoch": epoch,
        "seed": seed,
        "dropout_placement": "after pooling",
    }
    if extra:
        meta.update(extra)
    return save_tensors(path, tensors, meta)


def load_checkpoint(path):
    tensors, meta = load_tensors(path)
    spec = ModelSpec.from_dict(meta["spec"])
    model = CriticSegModel(spec, meta["variant"])
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model, meta


def clone_model(model: CriticSegModel) -> CriticSegModel:
    return copy.deepcopy(model)


def with_variant(model: CriticSegModel, variant: str, seed: int = 0) -> CriticSegModel:
    """Re-tag a trained model with a phase-2 variant, keeping its weights.
    separate_critic gets a freshly initialized independent mask encoder."""
    torch.manual_seed(seed)
    out = CriticSegModel(model.spec, variant)
    out.encoder.load_state_dict(model.encoder.state_dict())
    out.decoder.load_state_dict(model.decoder.state_dict())
    out.critic_head.load_state_dict(model.critic_head.state_dict())
    return out
