"""Toy ConvNeXt-style pyramid encoders, their checkpoints, and the specialist registry."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bands import BandSpec
from .tensorio import (
    ManifestError,
    load_state_into,
    load_tensors,
    read_manifest,
    save_tensors,
    write_manifest,
)

FeaturePyramid = list  # four tensors, strides (4, 8, 16, 32)


@dataclass(frozen=True)
class EncoderConfig:
    depths: tuple[int, ...] = (1, 1, 2, 1)
    dims: tuple[int, ...] = (8, 16, 32, 64)
    stem_stride: int = 4
    kernel_size: int = 7
    grn: bool = False

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.depths) != 4 or len(self.dims) != 4:
            raise ValueError("depths and dims must each have 4 entries")
        if min(self.depths) < 1 or min(self.dims) < 1:
            raise ValueError("depths and dims must be positive")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ValueError(f"dims must be strictly increasing, got {self.dims}")
        if self.stem_stride != 4:
            raise ValueError("stem_stride must be 4 so the pyramid strides are (4, 8, 16, 32)")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.stem_stride * 2**j for j in range(4))

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class GRN(nn.Module):
    """Global response normalization (ConvNeXtV2), channels-last."""

    def __init__(self, dim):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        gx = torch.norm(x, p=2, dim=(1, 2), keepdim=True)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class Block(nn.Module):
    def __init__(self, dim, kernel_size=7, grn=False):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.grn = GRN(4 * dim) if grn else nn.Identity()
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        y = self.dwconv(x).permute(0, 2, 3, 1)
        y = self.pwconv2(self.grn(self.act(self.pwconv1(self.norm(y)))))
        return x + y.permute(0, 3, 1, 2)


class PyramidNet(nn.Module):
    def __init__(self, in_chans: int, cfg: EncoderConfig):
        super().__init__()
        dims = cfg.dims
        self.downsample = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(in_chans, dims[0], cfg.stem_stride, stride=cfg.stem_stride), LayerNorm2d(dims[0]))]
        )
        for j in range(3):
            self.downsample.append(nn.Sequential(LayerNorm2d(dims[j]), nn.Conv2d(dims[j], dims[j + 1], 2, stride=2)))
        self.stages = nn.ModuleList(
            nn.Sequential(*[Block(dims[j], cfg.kernel_size, cfg.grn) for _ in range(cfg.depths[j])]) for j in range(4)
        )

    def forward(self, x) -> FeaturePyramid:
        feats = []
        for down, stage in zip(self.downsample, self.stages):
            x = stage(down(x))
            feats.append(x)
        return feats


@dataclass
class Provenance:
    dataset_name: str = ""
    task_kind: str = ""
    modality: str = ""
    n_train_samples: int = 0
    final_val_metric: float | None = None


class SpecialistEncoder(nn.Module):
    """A pyramid encoder plus the band layout it expects and where its weights came from."""

    def __init__(self, encoder_id: str, config: EncoderConfig, required_spec: BandSpec, provenance=None):
        super().__init__()
        self.encoder_id = encoder_id
        self.config = config
        self.required_spec = required_spec
        self.provenance = provenance or Provenance()
        self.net = PyramidNet(required_spec.count, config)
        self.frozen = False

    def freeze(self):
        self.frozen = True
        self.requires_grad_(False)
        return self

    def unfreeze(self):
        self.frozen = False
        self.requires_grad_(True)
        return self

    def forward(self, image) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != self.required_spec.count:
            raise ValueError(
                f"encoder {self.encoder_id} needs {self.required_spec.count} channels, got shape {tuple(image.shape)}"
            )
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input height/width must be divisible by 32, got {h}x{w}")
        return self.net(image)

    def weight_hash(self) -> str:
        return state_hash(self)


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_encoder(config: EncoderConfig, required_spec: BandSpec, seed: int, encoder_id="encoder") -> SpecialistEncoder:
    """Seeded construction; the same (config, spec, seed) always gives the same weights."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        enc = SpecialistEncoder(encoder_id, config, required_spec)
    finally:
        torch.random.set_rng_state(gen_state)
    return enc


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


_MANIFEST_KEYS = ("encoder_id", "config", "required_spec", "provenance", "tensors")


def save_checkpoint(encoder: SpecialistEncoder, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = save_tensors(path / "weights.bin", encoder.net.state_dict())
    write_manifest(
        path / "manifest",
        {
            "format_version": 1,
            "encoder_id": encoder.encoder_id,
            "config": asdict(encoder.config),
            "required_spec": list(encoder.required_spec.bands),
            "provenance": asdict(encoder.provenance),
            "frozen": encoder.frozen,
            "tensors": table,
        },
    )
    return path


def load_checkpoint(path) -> SpecialistEncoder:
    path = Path(path)
    man = read_manifest(path / "manifest", _MANIFEST_KEYS)
    try:
        cfg = EncoderConfig.from_dict(man["config"])
        spec = BandSpec(tuple(man["required_spec"]))
        prov = Provenance(**man["provenance"])
    except (TypeError, ValueError) as e:
        raise ManifestError(f"corrupt manifest {path / 'manifest'}: {e}") from None
    enc = SpecialistEncoder(man["encoder_id"], cfg, spec, prov)
    load_state_into(enc.net, load_tensors(path / "weights.bin", man["tensors"]), where=str(path))
    if man.get("frozen"):
        enc.freeze()
    return enc


@dataclass
class SpecialistRegistry:
    """Ordered collection of specialists; entries are never modified once registered."""

    encoders: dict[str, SpecialistEncoder] = field(default_factory=dict)

    def register_specialist(self, encoder: SpecialistEncoder) -> "SpecialistRegistry":
        if encoder.encoder_id in self.encoders:
            raise KeyError(f"encoder id {encoder.encoder_id!r} already registered")
        self.encoders[encoder.encoder_id] = encoder
        return self

    def __iter__(self):
        return iter(self.encoders.values())

    def __len__(self):
        return len(self.encoders)

    def __getitem__(self, encoder_id) -> SpecialistEncoder:
        return self.encoders[encoder_id]

    def ids(self) -> list[str]:
        return list(self.encoders)

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for enc in self:
            save_checkpoint(enc, path / enc.encoder_id)
        write_manifest(path / "registry.manifest", {"format_version": 1, "encoders": self.ids()})

    @classmethod
    def load(cls, path) -> "SpecialistRegistry":
        path = Path(path)
        man = read_manifest(path / "registry.manifest", ("encoders",))
        reg = cls()
        for eid in man["encoders"]:
            reg.register_specialist(load_checkpoint(path / eid))
        return reg

    def copy(self) -> "SpecialistRegistry":
        return SpecialistRegistry({k: copy.deepcopy(v) for k, v in self.encoders.items()})
