"""Model construction and activation capture.

Supports any torchvision classification architecture by name plus a small
builtin CNN ("tinycnn") that keeps tests fast.  Pretrained weights are used
when requested and available; otherwise weights are randomly initialized
from a fixed seed, which still gives a deterministic, genuinely
convolutional black box to attack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

# sensible probe points per architecture, shallow to deep
DEFAULT_LAYERS: Dict[str, Tuple[str, ...]] = {
    "tinycnn": ("conv1", "conv2", "fc"),
    "squeezenet1_0": ("features.3", "features.7", "features.12", "classifier.1"),
    "vgg16": ("features.4", "features.9", "features.16", "features.23", "features.30", "classifier.3"),
    "alexnet": ("features.2", "features.5", "features.12", "classifier.4"),
    "resnet18": ("layer1", "layer2", "layer3", "layer4", "fc"),
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ServerConfig:
    """What to serve: architecture, weights policy, exposed layers, preprocessing."""

    model: str = "squeezenet1_0"
    num_classes: int = 1000
    weights: str = "random"  # "random" (seeded) or "pretrained"
    seed: int = 0
    layers: Optional[Tuple[str, ...]] = None
    input_size: Tuple[int, int] = (224, 224)
    labels: Optional[Tuple[str, ...]] = None
    host: str = "127.0.0.1"
    port: int = 8008

    def __post_init__(self):
        if self.weights not in ("random", "pretrained"):
            raise ValueError(f"weights must be 'random' or 'pretrained', got {self.weights!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.labels is not None and len(self.labels) != self.num_classes:
            raise ValueError("labels length must match num_classes")

    @property
    def exposed_layers(self) -> Tuple[str, ...]:
        if self.layers is not None:
            return tuple(self.layers)
        return DEFAULT_LAYERS.get(self.model, ())

    @property
    def normalization(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        if self.model == "tinycnn":
            return ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
        return (IMAGENET_MEAN, IMAGENET_STD)


class TinyCnn(nn.Module):
    """Two conv blocks and a linear head; fast enough for request-level tests."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, kernel_size=5, stride=2, padding=2)
        self.act1 = nn.ReLU()
        self.conv2 = nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1)
        self.act2 = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d((4, 4))
        self.fc = nn.Linear(16 * 4 * 4, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act1(self.conv1(x))
        x = self.act2(self.conv2(x))
        x = self.pool(x).flatten(1)
        return self.fc(x)


def build_model(config: ServerConfig) -> nn.Module:
    """Construct the configured network in eval mode with fixed weights."""
    torch.manual_seed(config.seed)
    if config.model == "tinycnn":
        model: nn.Module = TinyCnn(config.num_classes)
    else:
        import torchvision.models

        weights = "DEFAULT" if config.weights == "pretrained" else None
        model = torchvision.models.get_model(
            config.model, weights=weights, num_classes=config.num_classes
        )
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model


class ActivationCapture:
    """Forward hooks that collect flattened activations for the exposed layers."""

    def __init__(self, model: nn.Module, layer_names: Sequence[str]):
        self.layer_names = list(layer_names)
        self._outputs: Dict[str, torch.Tensor] = {}
        self._handles = []
        for name in self.layer_names:
            module = model.get_submodule(name)
            self._handles.append(module.register_forward_hook(self._make_hook(name)))

    def _make_hook(self, name: str):
        def hook(_module, _inputs, output):
            self._outputs[name] = output.detach()

        return hook

    def collect(self) -> List[Tuple[str, List[float]]]:
        collected = []
        for name in self.layer_names:
            values = self._outputs[name].flatten().tolist()
            collected.append((name, values))
        self._outputs.clear()
        return collected

    def remove(self) -> None:
        for handle in self._handles:
            handle.remove()
        self._handles = []
