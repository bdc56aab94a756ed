"""Generator, PatchGAN discriminator, feature extractors and checkpoint files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

DEPTH = 7
GENERATOR_CHANNELS = {(3, 1), (4, 3), (3, 3), (4, 1)}


class CheckpointMismatch(ValueError):
    pass


def spec_hash(spec) -> str:
    payload = json.dumps({"type": type(spec).__name__, **asdict(spec)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    out_channels: int = 1
    base_width: int = 64
    skip_connections: bool = True

    def __post_init__(self):
        if (self.in_channels, self.out_channels) not in GENERATOR_CHANNELS:
            raise ValueError(
                f"unsupported generator channels {self.in_channels}->{self.out_channels}; "
                f"expected one of {sorted(GENERATOR_CHANNELS)}"
            )
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 4
    base_width: int = 64
    # Stride-2 blocks; 4 turns a 256x256 input into a 16x16 score grid.
    n_downsample: int = 4

    def __post_init__(self):
        if self.in_channels < 2:
            raise ValueError("discriminator sees condition + candidate, so in_channels >= 2")

    def output_grid(self, height: int, width: int) -> tuple[int, int]:
        f = 2**self.n_downsample
        return height // f, width // f


@dataclass(frozen=True)
class FeatureExtractorSpec:
    kind: str = "deterministic_standin"
    tap_layers: tuple = (0, 1, 2, 3)
    seed: int = 1234
    widths: tuple = (16, 32, 64, 64)
    zero_bias: bool = False
    weights_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("deterministic_standin", "pretrained_vgg19"):
            raise ValueError(f"unknown feature extractor kind {self.kind!r}")
        if not self.tap_layers:
            raise ValueError("tap_layers must be nonempty")


# ---------------------------------------------------------------------------
# Generator


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class _Down(nn.Module):
    def __init__(self, cin, cout, norm=True):
        super().__init__()
        layers = [nn.Conv2d(cin, cout, 4, stride=2, padding=1)]
        if norm:
            layers.append(nn.InstanceNorm2d(cout))
        layers.append(nn.LeakyReLU(0.2))
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class _Up(nn.Module):
    def __init__(self, cin, cout, final=False):
        super().__init__()
        layers = [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)]
        if final:
            layers.append(nn.Sigmoid())
        else:
            layers += [nn.InstanceNorm2d(cout), nn.ReLU()]
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class Generator(nn.Module):
    """Seven-down / seven-up encoder-decoder with mirror skip connections.

    Takes and returns unit-range images; inputs whose sides are not a multiple
    of 128 are edge-padded before the encoder and cropped after the decoder.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        b = spec.base_width
        widths = [b * min(2**i, 8) for i in range(DEPTH)]
        self.down = nn.ModuleList()
        cin = spec.in_channels
        for i, w in enumerate(widths):
            # Outermost and innermost layers skip normalization; the innermost
            # map can be 1x1 where instance statistics are undefined.
            self.down.append(_Down(cin, w, norm=0 < i < DEPTH - 1))
            cin = w
        self.up = nn.ModuleList()
        skip = 2 if spec.skip_connections else 1
        for i in range(DEPTH - 1, 0, -1):
            up_in = widths[i] if i == DEPTH - 1 else widths[i] * skip
            self.up.append(_Up(up_in, widths[i - 1]))
        self.up.append(_Up(widths[0] * skip, spec.out_channels, final=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"generator expects {self.spec.in_channels} channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        m = 2**DEPTH
        ph, pw = (-h) % m, (-w) % m
        x = x * 2.0 - 1.0
        if ph or pw:
            x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="replicate")
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        skips.pop()
        for layer in self.up[:-1]:
            x = layer(x)
            if self.spec.skip_connections:
                x = torch.cat([x, skips.pop()], dim=1)
        x = self.up[-1](x)
        return x[..., ph // 2 : ph // 2 + h, pw // 2 : pw // 2 + w]


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Generator(spec)
        net.apply(_init_weights)
    return net


# ---------------------------------------------------------------------------
# Discriminator


class PatchDiscriminator(nn.Module):
    """Markovian discriminator: one sigmoid score per 16-pixel cell."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.in_channels
        for i in range(spec.n_downsample):
            cout = spec.base_width * min(2**i, 8)
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        layers += [nn.Conv2d(cin, 1, 3, stride=1, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, candidate: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        x = torch.cat([candidate, condition], dim=1)
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"discriminator expects {self.spec.in_channels} channels, got "
                f"{candidate.shape[1]} + {condition.shape[1]}"
            )
        return self.net(x * 2.0 - 1.0)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> PatchDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = PatchDiscriminator(spec)
        net.apply(_init_weights)
    return net


# ---------------------------------------------------------------------------
# Feature extractors


class StandInFeatures(nn.Module):
    """Fixed random conv stack; block i halves the resolution for i >= 1."""

    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        cin = 3
        for i, w in enumerate(spec.widths):
            conv = nn.Conv2d(cin, w, 3, stride=1 if i == 0 else 2, padding=1)
            blocks.append(nn.Sequential(conv, nn.ReLU()))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        if max(spec.tap_layers) >= len(blocks):
            raise ValueError(f"tap layer {max(spec.tap_layers)} beyond {len(blocks)} blocks")

    def forward(self, x):
        taps = set(self.spec.tap_layers)
        out = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in taps:
                out.append(x)
        return out


# relu1_1 .. relu5_1 in torchvision's vgg19().features
VGG19_TAPS = (1, 6, 11, 20, 29)


class VGG19Features(nn.Module):
    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        from torchvision.models import vgg19

        if not spec.weights_path or not Path(spec.weights_path).is_file():
            raise FileNotFoundError(
                "pretrained_vgg19 needs weights_path pointing at a local torchvision vgg19 state dict"
            )
        model = vgg19(weights=None)
        model.load_state_dict(torch.load(spec.weights_path, map_location="cpu"))
        last = max(spec.tap_layers)
        self.features = model.features[: last + 1]
        self.spec = spec
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        taps = set(self.spec.tap_layers)
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in taps:
                out.append(x)
        return out


def build_feature_extractor(spec: FeatureExtractorSpec | None = None) -> nn.Module:
    spec = spec or FeatureExtractorSpec()
    if spec.kind == "pretrained_vgg19":
        if spec.tap_layers == FeatureExtractorSpec.tap_layers:
            spec = FeatureExtractorSpec(**{**asdict(spec), "tap_layers": VGG19_TAPS})
        net = VGG19Features(spec)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            net = StandInFeatures(spec)
            for m in net.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    if spec.zero_bias:
                        nn.init.zeros_(m.bias)
                    else:
                        nn.init.uniform_(m.bias, -0.05, 0.05)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def extract_features(extractor: nn.Module, image: torch.Tensor) -> list[torch.Tensor]:
    """Tap activations for an NCHW image; one-channel input is replicated to RGB."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.shape[1] == 1:
        image = image.expand(-1, 3, -1, -1)
    elif image.shape[1] != 3:
        raise ValueError(f"feature extractor needs 1 or 3 channels, got {image.shape[1]}")
    return extractor(image)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    ckpt_path: Path
    manifest_path: Path
    manifest: dict = field(default_factory=dict)

    @property
    def weights_sha256(self) -> str:
        return self.manifest["weights_sha256"]


def weights_digest(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _paths(tag) -> tuple[Path, Path]:
    tag = Path(tag)
    return tag.with_name(tag.name + ".ckpt"), tag.with_name(tag.name + ".json")


_KINDS = {GeneratorSpec: "generator", DiscriminatorSpec: "discriminator"}


def save_checkpoint(net: nn.Module, tag, **extra) -> Checkpoint:
    """Write ``<tag>.ckpt`` (state dict) and ``<tag>.json`` (manifest)."""
    ckpt_path, manifest_path = _paths(tag)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    spec = net.spec
    manifest = {
        "kind": _KINDS[type(spec)],
        "spec": asdict(spec),
        "spec_hash": spec_hash(spec),
        "weights_sha256": weights_digest(net),
        **extra,
    }
    torch.save(net.state_dict(), ckpt_path)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return Checkpoint(ckpt_path, manifest_path, manifest)


def read_manifest(tag) -> dict:
    _, manifest_path = _paths(tag)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    return json.loads(manifest_path.read_text())


def load_checkpoint(tag, expected_spec=None):
    """Rebuild the network stored under ``tag``; returns (net, manifest).

    With ``expected_spec`` the stored spec hash must match it.
    """
    ckpt_path, _ = _paths(tag)
    manifest = read_manifest(tag)
    if manifest["kind"] == "generator":
        spec = GeneratorSpec(**manifest["spec"])
        net = Generator(spec)
    elif manifest["kind"] == "discriminator":
        spec = DiscriminatorSpec(**manifest["spec"])
        net = PatchDiscriminator(spec)
    else:
        raise CheckpointMismatch(f"unknown checkpoint kind {manifest['kind']!r}")
    if spec_hash(spec) != manifest["spec_hash"]:
        raise CheckpointMismatch(f"{tag}: manifest spec does not match its recorded hash")
    if expected_spec is not None and spec_hash(expected_spec) != manifest["spec_hash"]:
        raise CheckpointMismatch(f"{tag}: checkpoint was built for {spec}, not {expected_spec}")
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint weights not found: {ckpt_path}")
    net.load_state_dict(torch.load(ckpt_path, map_location="cpu"))
    net.eval()
    if weights_digest(net) != manifest["weights_sha256"]:
        raise CheckpointMismatch(f"{tag}: weights do not match the manifest digest")
    return net, manifest
