"""Generator, regressor and critic networks plus conditioning helpers.

The generator is a U-Net producing an additive effect map ``dx`` bounded
to (-2, 2); the counterfactual image is ``x + dx``.  The regression target
pair ``(y, y_prime)`` enters the generator as three constant feature maps
concatenated at the bottleneck.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torchvision.models.resnet import BasicBlock
from torchvision.ops.misc import FrozenBatchNorm2d

from .errors import ConfigurationError, NumericalError


@dataclass(frozen=True)
class ConditioningStats:
    mean_y: float
    std_y: float

    def __post_init__(self):
        if not self.std_y > 0:
            raise ConfigurationError(f"std_y must be positive, got {self.std_y}")

    @classmethod
    def from_values(cls, y) -> "ConditioningStats":
        y = np.asarray(y, dtype=np.float64)
        return cls(float(y.mean()), float(y.std()))


def normalize_condition(y, y_prime, stats: ConditioningStats):
    """Return ``((y - m) / s, (y' - m) / s, (y' - y) / s)`` stacked on the last axis.

    Accepts python floats, numpy arrays or torch tensors; torch inputs give a
    float32 tensor.
    """
    m, s = stats.mean_y, stats.std_y
    if isinstance(y, torch.Tensor) or isinstance(y_prime, torch.Tensor):
        y = torch.as_tensor(y, dtype=torch.float64)
        y_prime = torch.as_tensor(y_prime, dtype=torch.float64)
        return torch.stack([(y - m) / s, (y_prime - m) / s, (y_prime - y) / s], dim=-1).float()
    y = np.asarray(y, dtype=np.float64)
    y_prime = np.asarray(y_prime, dtype=np.float64)
    return np.stack([(y - m) / s, (y_prime - m) / s, (y_prime - y) / s], axis=-1)


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GeneratorSpec:
    image_size: int = 224
    depth: int = 5
    base_channels: int = 32
    cond_channels: int = 3
    max_channels_factor: int = 8

    def __post_init__(self):
        if self.depth < 1 or self.image_size % (2 ** self.depth):
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by 2**depth={2 ** self.depth}"
            )

    def channels(self, level: int) -> int:
        return self.base_channels * min(2 ** level, self.max_channels_factor)


_MAP_BOUND = float(np.nextafter(np.float32(2.0), np.float32(0.0)))


def _act():
    return nn.LeakyReLU(0.2)


class UNetGenerator(nn.Module):
    """U-Net with one skip connection per resolution level.

    Encoder level 0 is a 3x3 convolution at full resolution; levels 1..depth
    halve the resolution with strided 4x4 convolutions.  The decoder mirrors
    this with nearest-neighbour upsampling followed by a 3x3 convolution
    (transposed convolutions left checkerboard artifacts in the maps),
    concatenating the encoder features of the same level after each step.  The output convolution is
    zero-initialised, so an untrained generator returns an all-zero map.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ch = spec.channels
        d = spec.depth
        self.enc0 = nn.Sequential(nn.Conv2d(1, ch(0), 3, padding=1), _act())
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch(i), ch(i + 1), 4, stride=2, padding=1), _act())
            for i in range(d)
        )
        self.bottleneck = nn.Sequential(
            nn.Conv2d(ch(d) + spec.cond_channels, ch(d), 3, padding=1), _act()
        )
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for i in reversed(range(d)):
            in_ch = ch(d) if i == d - 1 else ch(i + 1)
            self.up.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(in_ch, ch(i), 3, padding=1), nn.ReLU()
            ))
            self.fuse.append(
                nn.Identity() if i == 0 else nn.Sequential(nn.Conv2d(2 * ch(i), ch(i), 3, padding=1), nn.ReLU())
            )
        self.out = nn.Conv2d(2 * ch(0), 1, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        n = self.spec.image_size
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2:] != (n, n):
            raise ValueError(f"expected input of shape (B, 1, {n}, {n}), got {tuple(x.shape)}")
        h = self.enc0(x)
        skips = [h]
        for layer in self.down:
            h = layer(h)
            skips.append(h)
        skips.pop()
        if self.spec.cond_channels:
            if cond is None or cond.shape != (x.shape[0], self.spec.cond_channels):
                raise ValueError(f"expected conditioning of shape ({x.shape[0]}, {self.spec.cond_channels})")
            planes = cond.to(h.dtype)[:, :, None, None].expand(-1, -1, *h.shape[2:])
            h = torch.cat([h, planes], dim=1)
        elif cond is not None:
            raise ValueError("this generator takes no conditioning input")
        h = self.bottleneck(h)
        for up, fuse in zip(self.up, self.fuse):
            h = torch.cat([up(h), skips.pop()], dim=1)
            h = fuse(h)
        # float32 tanh saturates to exactly 1; keep maps strictly inside (-2, 2)
        return torch.clamp(2.0 * torch.tanh(self.out(h)), -_MAP_BOUND, _MAP_BOUND)


def generator_forward(generator: nn.Module, x: torch.Tensor, cond: Optional[torch.Tensor]) -> torch.Tensor:
    return generator(x, cond)


def counterfactual(generator, x, y, y_prime, stats: ConditioningStats):
    """Return ``(x_prime, dx)`` with ``x_prime = x + generator(x, cond)``.

    ``dx`` is the change actually applied, ``x_prime - x``, which can differ
    from the raw generator output in the last bit after rounding.
    """
    cond = normalize_condition(torch.as_tensor(y), torch.as_tensor(y_prime), stats).to(x.device)
    x_prime = x + generator(x, cond)
    return x_prime, x_prime - x


# ---------------------------------------------------------------------------
# regressor / critic


@dataclass(frozen=True)
class RegressorSpec:
    """18-layer residual network with a single linear output.

    ``width`` is the channel count of the first stage (64 in the standard
    ResNet-18).  ``input_adaptation`` is ``"native"`` (one-channel first
    convolution) or ``"replicate"`` (gray channel copied to three inputs, as
    needed for three-channel pretrained weights).  ``norm`` selects
    ``"frozen_batch"`` for the regressor and ``"layer"`` or ``"none"`` for the
    baseline critic, whose gradient penalty forbids batch coupling.
    """

    width: int = 64
    input_adaptation: str = "native"
    norm: str = "frozen_batch"

    def __post_init__(self):
        if self.input_adaptation not in ("native", "replicate"):
            raise ConfigurationError(f"unknown input_adaptation {self.input_adaptation!r}")
        if self.norm not in ("frozen_batch", "batch", "layer", "none"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")


def critic_spec(width: int = 64) -> RegressorSpec:
    return RegressorSpec(width=width, input_adaptation="native", norm="layer")


def _norm_factory(kind: str):
    if kind in ("frozen_batch", "batch"):
        return nn.BatchNorm2d
    if kind == "layer":
        return lambda c: nn.GroupNorm(1, c)
    return lambda c: nn.Identity()


class ResNet18(nn.Module):
    """ResNet-18 layout with torchvision-compatible parameter names."""

    def __init__(self, spec: RegressorSpec):
        super().__init__()
        self.spec = spec
        norm = _norm_factory(spec.norm)
        w = spec.width
        in_ch = 3 if spec.input_adaptation == "replicate" else 1
        self.conv1 = nn.Conv2d(in_ch, w, 7, stride=2, padding=3, bias=False)
        self.bn1 = norm(w)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.inplanes = w
        self.layer1 = self._make_layer(w, 1, norm)
        self.layer2 = self._make_layer(2 * w, 2, norm)
        self.layer3 = self._make_layer(4 * w, 2, norm)
        self.layer4 = self._make_layer(8 * w, 2, norm)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(8 * w, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def _make_layer(self, planes, stride, norm):
        downsample = None
        if stride != 1 or self.inplanes != planes:
            downsample = nn.Sequential(nn.Conv2d(self.inplanes, planes, 1, stride=stride, bias=False), norm(planes))
        blocks = [BasicBlock(self.inplanes, planes, stride, downsample, norm_layer=norm)]
        self.inplanes = planes
        blocks.append(BasicBlock(planes, planes, norm_layer=norm))
        return nn.Sequential(*blocks)

    def forward(self, x):
        if self.spec.input_adaptation == "replicate" and x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        h = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        h = self.layer4(self.layer3(self.layer2(self.layer1(h))))
        return self.fc(torch.flatten(self.avgpool(h), 1)).squeeze(1)


def _replace_batchnorm(module: nn.Module):
    for name, child in module.named_children():
        if isinstance(child, nn.BatchNorm2d):
            frozen = FrozenBatchNorm2d(child.num_features, eps=child.eps)
            frozen.weight.copy_(child.weight.detach())
            frozen.bias.copy_(child.bias.detach())
            frozen.running_mean.copy_(child.running_mean)
            frozen.running_var.copy_(child.running_var)
            setattr(module, name, frozen)
        else:
            _replace_batchnorm(child)


@torch.no_grad()
def freeze_batchnorm(model: nn.Module) -> nn.Module:
    """Swap every BatchNorm2d for a FrozenBatchNorm2d carrying its current statistics."""
    _replace_batchnorm(model)
    return model


@torch.no_grad()
def calibrate_batchnorm(model: nn.Module, batches) -> nn.Module:
    """Set BatchNorm running statistics to the cumulative average over ``batches``.

    Used before freezing when no pretrained weights are supplied; with
    default statistics a frozen layer would be the identity.
    """
    bns = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
    if not bns:
        return model
    saved = [(m.momentum, m.training) for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
        m.train()
    for batch in batches:
        model(batch)
    for m, (momentum, training) in zip(bns, saved):
        m.momentum = momentum
        m.train(training)
    return model


def build_regressor(spec: RegressorSpec, pretrained_weights=None, calibration_batches=None) -> ResNet18:
    """Construct the regressor (or critic) for ``spec``.

    ``pretrained_weights`` is an optional torchvision-style state dict; its
    ``fc`` entries are dropped since the head is replaced by a single output.
    For ``norm="frozen_batch"`` the normalisation layers are frozen after
    loading weights or, failing that, after calibrating on
    ``calibration_batches``.
    """
    model = ResNet18(spec)
    if pretrained_weights is not None:
        state = {k: v for k, v in pretrained_weights.items() if not k.startswith("fc.")}
        missing, unexpected = model.load_state_dict(state, strict=False)
        if unexpected or any(not k.startswith("fc.") for k in missing):
            raise ConfigurationError(f"pretrained weights do not match: missing={missing} unexpected={unexpected}")
    elif calibration_batches is not None and spec.norm == "frozen_batch":
        calibrate_batchnorm(model, calibration_batches)
    if spec.norm == "frozen_batch":
        freeze_batchnorm(model)
    return model


def regressor_forward(regressor: nn.Module, x: torch.Tensor) -> torch.Tensor:
    out = regressor(x)
    bad = ~torch.isfinite(out)
    if bad.any():
        idx = torch.nonzero(bad).flatten().tolist()
        raise NumericalError(f"non-finite regressor output at batch indices {idx}", {"batch_indices": idx})
    return out


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def normalization_parameter_count(model: nn.Module) -> int:
    """Number of trainable scalars that live inside normalisation layers."""
    norm_types = (nn.BatchNorm2d, nn.GroupNorm, FrozenBatchNorm2d)
    return sum(
        p.numel()
        for m in model.modules()
        if isinstance(m, norm_types)
        for p in m.parameters(recurse=False)
        if p.requires_grad
    )


def spec_dict(spec) -> dict:
    return {"type": type(spec).__name__, **dataclasses.asdict(spec)}


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    return {"GeneratorSpec": GeneratorSpec, "RegressorSpec": RegressorSpec}[kind](**d)
