"""
Residual 2D U-Net with a feature-tap API, feature aggregation for the domain
discriminator, gradient reversal, and flat-blob checkpointing.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ArchConfig",
    "TapSet",
    "ResUNet",
    "FeatureAggregator",
    "DomainDiscriminator",
    "ModelBundle",
    "grad_reverse",
    "aggregate_features",
    "save_checkpoint",
    "load_checkpoint",
]

ENCODER_SITES = ("encoder_0", "encoder_1", "encoder_2", "encoder_3", "encoder_4")
DECODER_SITES = ("decoder_3", "decoder_2", "decoder_1", "decoder_0")


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    base_width: int = 16
    depth: int = 4
    agg_channels: int = 32


class TapSet:
    """Ordered (site, feature map) pairs, shallow to deep in execution order."""

    def __init__(self, items: list[tuple[str, torch.Tensor]]):
        sites = [s for s, _ in items]
        if len(set(sites)) != len(sites):
            raise ValueError("tap sites must be unique")
        self.items = items

    @property
    def sites(self) -> list[str]:
        return [s for s, _ in self.items]

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def get(self, site: str) -> torch.Tensor:
        for s, t in self.items:
            if s == site:
                return t
        raise KeyError(site)

    def select(self, site_filter: str) -> "TapSet":
        """Subset by site prefix: "encoder", "decoder", or "output"."""
        kept = [(s, t) for s, t in self.items if s.startswith(site_filter)]
        if not kept:
            raise ValueError(f"no taps match site filter {site_filter!r}")
        return TapSet(kept)


class ResidualBlock(nn.Module):
    """Pre-activation residual block with a 1x1 projection when widths differ."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.proj = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.relu(self.bn1(x)))
        h = self.conv2(F.relu(self.bn2(h)))
        return self.proj(x) + h


def _stage(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(ResidualBlock(in_ch, out_ch), ResidualBlock(out_ch, out_ch))


class ResUNet(nn.Module):
    """Residual U-Net (depth 4, base width 16) exposing encoder/decoder taps.

    forward() returns (logits, TapSet) where the taps are every encoder stage
    output, every decoder stage output, and the final logits. Input spatial
    sizes must be divisible by 2**depth.
    """

    def __init__(self, config: ArchConfig = ArchConfig()):
        super().__init__()
        self.config = config
        w = config.base_width
        widths = [w * (2**i) for i in range(config.depth + 1)]  # 16,32,64,128,256
        self.enc_stages = nn.ModuleList()
        prev = config.in_channels
        for width in widths:
            self.enc_stages.append(_stage(prev, width))
            prev = width
        self.pool = nn.MaxPool2d(2)
        self.dec_stages = nn.ModuleList()
        for i in range(config.depth - 1, -1, -1):
            # upsampled deeper features concatenated with the skip connection
            self.dec_stages.append(_stage(widths[i + 1] + widths[i], widths[i]))
        self.head = nn.Conv2d(w, 1, 1)

    def _check_input(self, x: torch.Tensor) -> None:
        factor = 2**self.config.depth
        if x.ndim != 4 or x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(
                f"input must be (B, C, H, W) with H, W divisible by {factor}, got {tuple(x.shape)}"
            )

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Encoder stage outputs, shallow to deep (cheap path for encoder taps)."""
        self._check_input(x)
        feats = []
        h = x
        for i, stage in enumerate(self.enc_stages):
            if i > 0:
                h = self.pool(h)
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, TapSet]:
        feats = self.encode(x)
        taps = [(f"encoder_{i}", f) for i, f in enumerate(feats)]
        h = feats[-1]
        for j, stage in enumerate(self.dec_stages):
            skip = feats[len(feats) - 2 - j]
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = stage(torch.cat([h, skip], dim=1))
            taps.append((f"decoder_{len(self.dec_stages) - 1 - j}", h))
        logits = self.head(h)
        taps.append(("output", logits))
        return logits, TapSet(taps)


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; multiplies the gradient by -lam on the way back."""
    if lam < 0:
        raise ValueError(f"reversal weight must be >= 0, got {lam}")
    return GradReverse.apply(x, lam)


class FeatureAggregator(nn.Module):
    """Learned 1x1 projections + resize-to-coarsest + channel concatenation.

    One projection per tap site is created lazily from the architecture
    config so the module owns parameters for exactly the sites it serves.
    """

    def __init__(self, sites: list[str], channels: list[int], agg_channels: int = 32):
        super().__init__()
        if len(sites) != len(channels):
            raise ValueError("one channel count per site required")
        self.agg_channels = agg_channels
        self.proj = nn.ModuleDict(
            {site: nn.Conv2d(ch, agg_channels, 1) for site, ch in zip(sites, channels)}
        )

    def forward(self, taps: TapSet) -> torch.Tensor:
        selected = [(s, t) for s, t in taps if s in self.proj]
        if not selected:
            raise ValueError("no taps match this aggregator's sites")
        target = min((t.shape[-2], t.shape[-1]) for _, t in selected)
        outs = []
        for site, t in selected:
            p = self.proj[site](t)
            if (p.shape[-2], p.shape[-1]) != target:
                p = F.interpolate(p, size=target, mode="bilinear", align_corners=False)
            outs.append(p)
        return torch.cat(outs, dim=1)


def aggregate_features(taps: TapSet, site_filter: str, aggregator: FeatureAggregator) -> torch.Tensor:
    """Aggregate the taps selected by ``site_filter`` ("encoder"/"decoder")."""
    return aggregator(taps.select(site_filter))


class DomainDiscriminator(nn.Module):
    """Domain classifier over aggregated feature maps.

    Three stride-2 convolutions (64/128/128) with leaky rectification and
    average pooling, then global average pooling and a 64-unit head emitting
    one logit per item (sigmoid -> probability of the sharp domain).
    """

    def __init__(self, in_channels: int):
        super().__init__()
        widths = (64, 128, 128)
        layers: list[nn.Module] = []
        prev = in_channels
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.AvgPool2d(2, ceil_mode=True),
            ]
            prev = w
        self.features = nn.Sequential(*layers)
        self.fc1 = nn.Linear(prev, 64)
        self.fc2 = nn.Linear(64, 1)

    def forward(self, agg: torch.Tensor) -> torch.Tensor:
        h = self.features(agg)
        h = h.mean(dim=(-2, -1))
        h = F.leaky_relu(self.fc1(h), 0.2)
        return self.fc2(h).squeeze(-1)


@dataclass
class ModelBundle:
    """Segmentation trunk plus (optional) adversarial heads."""

    segmenter: ResUNet
    aggregator: FeatureAggregator | None = None
    discriminator: DomainDiscriminator | None = None

    def modules_dict(self) -> dict[str, nn.Module]:
        mods: dict[str, nn.Module] = {"segmenter": self.segmenter}
        if self.aggregator is not None:
            mods["aggregator"] = self.aggregator
        if self.discriminator is not None:
            mods["discriminator"] = self.discriminator
        return mods

    def parameters(self):
        for m in self.modules_dict().values():
            yield from m.parameters()

    def train(self) -> None:
        for m in self.modules_dict().values():
            m.train()

    def eval(self) -> None:
        for m in self.modules_dict().values():
            m.eval()


def build_adversarial_heads(
    model: ResUNet, site_filter: str
) -> tuple[FeatureAggregator, DomainDiscriminator]:
    """Construct the aggregator+discriminator pair for a tap-site filter."""
    w = model.config.base_width
    depth = model.config.depth
    if site_filter == "encoder":
        sites = list(ENCODER_SITES[: depth + 1])
        channels = [w * (2**i) for i in range(depth + 1)]
    elif site_filter == "decoder":
        sites = list(DECODER_SITES[:depth])
        channels = [w * (2**i) for i in range(depth - 1, -1, -1)]
    else:
        raise ValueError(f"site_filter must be encoder|decoder, got {site_filter!r}")
    agg = FeatureAggregator(sites, channels, model.config.agg_channels)
    disc = DomainDiscriminator(model.config.agg_channels * len(sites))
    return agg, disc


# --------------------------------------------------------------------------
# Checkpoints: flat little-endian float32 blob + JSON manifest.
# --------------------------------------------------------------------------


def save_checkpoint(
    path_stem: str | Path,
    bundle: ModelBundle,
    iteration: int,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` (flat float32 params) and ``<stem>.json``."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    chunks: list[np.ndarray] = []
    tensors = []
    offset = 0
    for mod_name, module in bundle.modules_dict().items():
        for key, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f4")
            chunks.append(arr.ravel())
            tensors.append(
                {
                    "name": f"{mod_name}.{key}",
                    "shape": list(tensor.shape),
                    "dtype": str(tensor.dtype).replace("torch.", ""),
                    "offset": offset,
                    "numel": int(arr.size),
                }
            )
            offset += int(arr.size)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    bin_path = stem.with_suffix(".bin")
    blob.tofile(bin_path)
    manifest = {
        "format": "kerneladapt-checkpoint-v1",
        "arch": asdict(bundle.segmenter.config),
        "heads": sorted(bundle.modules_dict().keys()),
        "iteration": iteration,
        "tensors": tensors,
        "rng": _encode_rng(rng_state),
        "extra": extra or {},
    }
    json_path = stem.with_suffix(".json")
    with open(json_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return bin_path, json_path


def _encode_rng(rng_state: dict | None) -> dict | None:
    if rng_state is None:
        return None
    out = {}
    for key, val in rng_state.items():
        if isinstance(val, torch.Tensor):
            out[key] = {
                "kind": "torch",
                "b64": base64.b64encode(val.numpy().tobytes()).decode(),
            }
        else:
            out[key] = {"kind": "json", "value": val}
    return out


def _decode_rng(enc: dict | None) -> dict | None:
    if enc is None:
        return None
    out = {}
    for key, val in enc.items():
        if val["kind"] == "torch":
            out[key] = torch.from_numpy(
                np.frombuffer(base64.b64decode(val["b64"]), dtype=np.uint8).copy()
            )
        else:
            out[key] = val["value"]
    return out


def load_checkpoint(path_stem: str | Path) -> tuple[ModelBundle, dict]:
    """Rebuild a ModelBundle from ``<stem>.bin`` + ``<stem>.json``."""
    stem = Path(path_stem)
    with open(stem.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    blob = np.fromfile(stem.with_suffix(".bin"), dtype="<f4")
    model = ResUNet(ArchConfig(**manifest["arch"]))
    bundle = ModelBundle(segmenter=model)
    if "aggregator" in manifest["heads"]:
        site_filter = manifest["extra"].get("site_filter", "encoder")
        agg, disc = build_adversarial_heads(model, site_filter)
        bundle.aggregator = agg
        bundle.discriminator = disc if "discriminator" in manifest["heads"] else None
    states: dict[str, dict[str, torch.Tensor]] = {name: {} for name in manifest["heads"]}
    for entry in manifest["tensors"]:
        mod_name, key = entry["name"].split(".", 1)
        flat = blob[entry["offset"] : entry["offset"] + entry["numel"]]
        arr = flat.reshape(entry["shape"]).copy()
        dtype = getattr(torch, entry["dtype"])
        states[mod_name][key] = torch.from_numpy(arr).to(dtype)
    for mod_name, module in bundle.modules_dict().items():
        module.load_state_dict(states[mod_name])
    bundle.eval()
    manifest["rng_state"] = _decode_rng(manifest.get("rng"))
    return bundle, manifest
