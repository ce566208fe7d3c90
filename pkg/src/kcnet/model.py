"""Dual-head CNN: one shared ResNet34-topology backbone, two classifier heads.

The backbone uses torchvision's parameter naming (``conv1``, ``bn1``,
``layer1`` .. ``layer4``) so an ImageNet ResNet34 state dict loads directly
when ``width=64``. Narrower widths and truncated stage counts exist for
desk-scale runs on CPU.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from torchvision.models.resnet import BasicBlock, conv1x1

log = logging.getLogger(__name__)

RESNET34_LAYERS = (3, 4, 6, 3)
HEADS = ("axial", "tangential")


@dataclass
class ModelConfig:
    resolution: int = 512
    width: int = 64
    n_stages: int = 4
    hidden: int = 128
    dropout_p: float = 0.5
    seed: int = 0
    frozen_stages: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 1 <= self.n_stages <= 4:
            raise ValueError(f"n_stages must be in 1..4, got {self.n_stages}")
        self.frozen_stages = tuple(sorted(set(self.frozen_stages)))

    @property
    def feature_dim(self) -> int:
        return self.width * 2 ** (self.n_stages - 1)


class Backbone(nn.Module):
    def __init__(self, width: int = 64, n_stages: int = 4):
        super().__init__()
        self.inplanes = width
        self.conv1 = nn.Conv2d(3, width, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.n_stages = n_stages
        for i, blocks in enumerate(RESNET34_LAYERS[:n_stages]):
            stride = 1 if i == 0 else 2
            setattr(self, f"layer{i + 1}", self._make_layer(width * 2**i, blocks, stride))
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = width * 2 ** (n_stages - 1)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _make_layer(self, planes: int, blocks: int, stride: int) -> nn.Sequential:
        downsample = None
        if stride != 1 or self.inplanes != planes:
            downsample = nn.Sequential(conv1x1(self.inplanes, planes, stride), nn.BatchNorm2d(planes))
        layers = [BasicBlock(self.inplanes, planes, stride, downsample)]
        self.inplanes = planes
        layers += [BasicBlock(planes, planes) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def stage_modules(self, stage: int) -> list[nn.Module]:
        """Modules owned by a stage. The stem belongs to stage 1."""
        if stage == 1:
            return [self.conv1, self.bn1, self.layer1]
        return [getattr(self, f"layer{stage}")]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for i in range(1, self.n_stages + 1):
            x = getattr(self, f"layer{i}")(x)
        return torch.flatten(self.avgpool(x), 1)


class ClassifierHead(nn.Module):
    """FC -> ReLU -> dropout, twice, then a 2-way softmax."""

    def __init__(self, in_dim: int, hidden: int = 128, dropout_p: float = 0.5):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, 2)
        self.drop1 = nn.Dropout(dropout_p)
        self.drop2 = nn.Dropout(dropout_p)

    def features(self, z: torch.Tensor) -> torch.Tensor:
        # FC2 post-ReLU activation, taken before its dropout
        h = self.drop1(torch.relu(self.fc1(z)))
        return torch.relu(self.fc2(h))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.out(self.drop2(self.features(z))), dim=1)


class DualHeadModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.width, config.n_stages)
        f = self.backbone.out_dim
        self.head_axial = ClassifierHead(f, config.hidden, config.dropout_p)
        self.head_tangential = ClassifierHead(f, config.hidden, config.dropout_p)

    def head(self, name: str) -> ClassifierHead:
        if name not in HEADS:
            raise ValueError(f"unknown head {name!r}; expected one of {HEADS}")
        return self.head_axial if name == "axial" else self.head_tangential

    def _check(self, x: torch.Tensor) -> None:
        r = self.config.resolution
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (r, r):
            raise ValueError(f"expected input of shape (B, 3, {r}, {r}), got {tuple(x.shape)}")

    def forward(self, axial: torch.Tensor, tangential: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(axial)
        self._check(tangential)
        if axial.shape[0] != tangential.shape[0]:
            raise ValueError("axial and tangential batches differ in size")
        z = self.backbone(torch.cat([axial, tangential]))
        za, zt = z.split(axial.shape[0])
        return self.head_axial(za), self.head_tangential(zt)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen stages keep their BatchNorm running statistics fixed
        for s in self.config.frozen_stages:
            for m in self.backbone.stage_modules(s):
                m.eval()
        return self


def build_model(config: ModelConfig | None = None) -> DualHeadModel:
    config = config or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = DualHeadModel(config)
    if config.frozen_stages:
        apply_freeze(model, config.frozen_stages)
    return model


def head_param_count(feature_dim: int, hidden: int = 128) -> int:
    return (feature_dim * hidden + hidden) + (hidden * hidden + hidden) + (hidden * 2 + 2)


def apply_freeze(model: DualHeadModel, stages) -> DualHeadModel:
    stages = tuple(sorted(set(stages)))
    bad = [s for s in stages if not 1 <= s <= model.config.n_stages]
    if bad:
        raise ValueError(f"invalid stage indices {bad} for a {model.config.n_stages}-stage backbone")
    for s in range(1, model.config.n_stages + 1):
        for m in model.backbone.stage_modules(s):
            for p in m.parameters():
                p.requires_grad_(s not in stages)
    model.config.frozen_stages = stages
    model.train(model.training)
    return model


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def stage_state(model: DualHeadModel, stage: int) -> dict[str, torch.Tensor]:
    """Snapshot (params and buffers) of one backbone stage, cloned."""
    out = {}
    for i, m in enumerate(model.backbone.stage_modules(stage)):
        for k, v in m.state_dict().items():
            out[f"{i}.{k}"] = v.detach().clone()
    return out


class BackboneWeightError(ValueError):
    pass


def load_backbone_weights(model: DualHeadModel, weights: str | Path | dict | None) -> dict[str, list[str]]:
    """Copy backbone tensors from an archive (path or state dict).

    Keys may be bare torchvision names (``layer1.0.conv1.weight``) or
    prefixed with ``backbone.``. Extra keys such as ``fc.*`` are ignored and
    reported. Missing or mis-shaped backbone tensors raise. ``None`` or a
    missing path keeps the random initialization and logs a warning.
    """
    if weights is None or (not isinstance(weights, dict) and not Path(weights).exists()):
        log.warning("no backbone weights at %s; keeping random initialization", weights)
        return {"missing": [], "mismatched": [], "unexpected": [], "fallback": ["random_init"]}
    if not isinstance(weights, dict):
        weights = torch.load(weights, map_location="cpu", weights_only=True)
        if "state_dict" in weights and isinstance(weights["state_dict"], dict):
            weights = weights["state_dict"]
    src = {k.removeprefix("backbone."): v for k, v in weights.items()}
    target = model.backbone.state_dict()
    missing = [k for k in target if k not in src]
    mismatched = [k for k in target if k in src and tuple(src[k].shape) != tuple(target[k].shape)]
    unexpected = sorted(k for k in src if k not in target)
    if missing or mismatched:
        raise BackboneWeightError(
            "backbone archive incompatible; missing: "
            + ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
            + "; shape mismatch: " + ", ".join(mismatched)
        )
    model.backbone.load_state_dict({k: src[k] for k in target})
    return {"missing": [], "mismatched": [], "unexpected": unexpected, "fallback": []}


@torch.no_grad()
def extract_features(model: DualHeadModel, x: torch.Tensor, head: str) -> torch.Tensor:
    """FC2 activations (B x hidden) for one head, in eval mode."""
    h = model.head(head)
    was_training = model.training
    model.eval()
    try:
        model._check(x)
        return h.features(model.backbone(x))
    finally:
        model.train(was_training)


def save_checkpoint(model: DualHeadModel, path: str | Path, **meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config)
    cfg["frozen_stages"] = list(cfg["frozen_stages"])
    torch.save({"config": cfg, "meta": meta, "state_dict": model.state_dict()}, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[DualHeadModel, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    cfg = dict(blob["config"])
    cfg["frozen_stages"] = tuple(cfg["frozen_stages"])
    model = build_model(ModelConfig(**cfg))
    model.load_state_dict(blob["state_dict"])
    return model, blob.get("meta", {})
