"""DCGAN-style generator, discriminator and patch classifier, plus checkpoints.

The generator projects a latent vector to a 4x4 map and doubles the side
length once per stage; the discriminator (and the classifier, which shares
its architecture) halves the side length per stage down to 4x4 and reduces
the last map to a single logit with a 4x4 convolution.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Union

import numpy as np
import torch
from torch import nn

from ganaug.errors import (
    CorruptCheckpointError,
    InvalidInputError,
    MissingTensorError,
    VersionMismatchError,
)

FORMAT_VERSION = "GANAUG01"
INIT_STD = 0.02
LEAKY_SLOPE = 0.2


def default_base_channels(image_size: int) -> int:
    return max(8, int(round(1024 * image_size / 128 / 8)) * 8)


def _check_size(image_size: int) -> int:
    if image_size < 8 or image_size & (image_size - 1):
        raise InvalidInputError(f"image_size must be a power of two >= 8, got {image_size}")
    return int(math.log2(image_size)) - 2


@dataclass(frozen=True)
class GeneratorSpec:
    image_size: int = 128
    latent_dim: int = 200
    base_channels: int = 0  # 0 -> default_base_channels(image_size)
    kernel_size: int = 4
    stride: int = 2

    kind = "generator"

    def __post_init__(self):
        _check_size(self.image_size)
        if self.base_channels == 0:
            object.__setattr__(self, "base_channels", default_base_channels(self.image_size))
        if self.latent_dim < 1:
            raise InvalidInputError("latent_dim must be positive")
        if self.kernel_size % self.stride:
            raise InvalidInputError("generator kernel_size must be divisible by the stride")
        if self.base_channels < 2 ** (self.n_stages - 1):
            raise InvalidInputError("base_channels too small to halve once per stage")

    @property
    def n_stages(self) -> int:
        return _check_size(self.image_size)


@dataclass(frozen=True)
class DiscriminatorSpec:
    image_size: int = 128
    base_channels: int = 0
    kernel_size: int = 5
    stride: int = 2

    kind = "discriminator"

    def __post_init__(self):
        _check_size(self.image_size)
        if self.base_channels == 0:
            object.__setattr__(self, "base_channels", default_base_channels(self.image_size))
        if self.base_channels < 2 ** (self.n_stages - 1):
            raise InvalidInputError("base_channels too small to halve once per stage")

    @property
    def n_stages(self) -> int:
        return _check_size(self.image_size)


@dataclass(frozen=True)
class ClassifierSpec(DiscriminatorSpec):
    kind = "classifier"


ModelSpec = Union[GeneratorSpec, DiscriminatorSpec, ClassifierSpec]
SPEC_TYPES = {cls.kind: cls for cls in (GeneratorSpec, DiscriminatorSpec, ClassifierSpec)}


def kernel_sizes_differ(g: GeneratorSpec, d: DiscriminatorSpec) -> bool:
    """True when G and D use different kernel sizes (the checkerboard remedy)."""
    return g.kernel_size != d.kernel_size


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ch = spec.base_channels
        layers = [
            nn.Sequential(
                nn.ConvTranspose2d(spec.latent_dim, ch, 4, 1, 0, bias=False),
                nn.BatchNorm2d(ch),
                nn.ReLU(),
            )
        ]
        pad = (spec.kernel_size - spec.stride) // 2
        for t in range(1, spec.n_stages + 1):
            if t < spec.n_stages:
                layers.append(
                    nn.Sequential(
                        nn.ConvTranspose2d(ch, ch // 2, spec.kernel_size, spec.stride, pad, bias=False),
                        nn.BatchNorm2d(ch // 2),
                        nn.ReLU(),
                    )
                )
                ch //= 2
            else:
                layers.append(
                    nn.Sequential(nn.ConvTranspose2d(ch, 1, spec.kernel_size, spec.stride, pad), nn.Tanh())
                )
        self.stages = nn.ModuleList(layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z.reshape(z.shape[0], -1, 1, 1)
        for stage in self.stages:
            x = stage(x)
        return x


class Discriminator(nn.Module):
    """Strided-convolution critic; ``forward`` returns logits of shape (B,)."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        n = spec.n_stages
        pad = (spec.kernel_size - 1) // 2
        in_ch = 1
        layers = []
        for t in range(1, n + 1):
            out_ch = spec.base_channels // 2 ** (n - t)
            conv = nn.Conv2d(in_ch, out_ch, spec.kernel_size, spec.stride, pad, bias=(t == 1))
            if t == 1:
                layers.append(nn.Sequential(conv, nn.LeakyReLU(LEAKY_SLOPE)))
            else:
                layers.append(nn.Sequential(conv, nn.BatchNorm2d(out_ch), nn.LeakyReLU(LEAKY_SLOPE)))
            in_ch = out_ch
        self.stages = nn.ModuleList(layers)
        self.head = nn.Conv2d(in_ch, 1, 4, 1, 0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x)
        return self.head(x).reshape(-1)


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Stock DCGAN initialization: N(0, 0.02) weights, N(1, 0.02) BN scales, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * INIT_STD)
                m.bias.zero_()
    return model


def build_model(spec: ModelSpec, seed: int = 0) -> nn.Module:
    model = Generator(spec) if isinstance(spec, GeneratorSpec) else Discriminator(spec)
    return init_weights(model, seed)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@contextmanager
def _inference(model: nn.Module):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.train(was_training)


def generator_forward(model: Generator, latent: torch.Tensor) -> torch.Tensor:
    """(B, latent_dim) -> (B, 1, S, S) with values in [-1, 1].

    Like the other two forwards below, this evaluates in inference mode
    (running batch-norm statistics, no autograd), so each output depends
    only on its own input. Training code calls the modules directly.
    """
    if latent.ndim != 2 or latent.shape[1] != model.spec.latent_dim:
        raise InvalidInputError(f"expected latent of shape (B, {model.spec.latent_dim}), got {tuple(latent.shape)}")
    with _inference(model):
        return model(latent)


def _check_images(model: Discriminator, images: torch.Tensor) -> None:
    s = model.spec.image_size
    if images.ndim != 4 or tuple(images.shape[1:]) != (1, s, s):
        raise InvalidInputError(f"expected images of shape (B, 1, {s}, {s}), got {tuple(images.shape)}")


def discriminator_forward(model: Discriminator, images: torch.Tensor) -> torch.Tensor:
    """Realism probabilities, shape (B,)."""
    _check_images(model, images)
    with _inference(model):
        return torch.sigmoid(model(images))


def classifier_forward(model: Discriminator, images: torch.Tensor) -> torch.Tensor:
    """Probability that each patch is a mass, shape (B,)."""
    _check_images(model, images)
    with _inference(model):
        return torch.sigmoid(model(images))


# ---------------------------------------------------------------- checkpoints


def tensor_names(model: nn.Module) -> list[str]:
    """Names stored in a checkpoint: every state entry except BN step counters."""
    return [k for k in model.state_dict() if not k.endswith("num_batches_tracked")]


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    meta: dict[str, Union[str, int, float]]

    @classmethod
    def from_model(cls, model: nn.Module, **meta) -> "Checkpoint":
        state = model.state_dict()
        tensors = {
            k: state[k].detach().cpu().to(torch.float32).numpy().copy() for k in tensor_names(model)
        }
        return cls(model.spec, tensors, dict(meta))

    def build(self) -> nn.Module:
        """Instantiate the network (eval mode) with these parameters."""
        model = build_model(self.spec)
        expected = tensor_names(model)
        missing = [k for k in expected if k not in self.tensors]
        if missing:
            raise MissingTensorError(f"checkpoint lacks tensors: {missing}")
        extra = [k for k in self.tensors if k not in expected]
        if extra:
            raise CorruptCheckpointError(f"unexpected tensors: {extra}")
        state = model.state_dict()
        for k in expected:
            if tuple(state[k].shape) != self.tensors[k].shape:
                raise CorruptCheckpointError(f"tensor {k} has shape {self.tensors[k].shape}, want {tuple(state[k].shape)}")
            state[k] = torch.from_numpy(self.tensors[k].copy())
        model.load_state_dict(state)
        return model.eval()

    def same_as(self, other: "Checkpoint") -> bool:
        return (
            self.spec == other.spec
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def _encode_header(ckpt: Checkpoint) -> bytes:
    lines = [f"kind={ckpt.spec.kind}"]
    lines += [f"{f.name}={getattr(ckpt.spec, f.name)}" for f in fields(ckpt.spec)]
    lines.append(f"n_tensors={len(ckpt.tensors)}")
    for k, v in ckpt.meta.items():
        if "\n" in str(v) or "=" in str(k):
            raise InvalidInputError(f"meta entry {k!r} cannot be encoded")
        lines.append(f"meta.{k}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _meta_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def save_checkpoint(obj: Union[Checkpoint, nn.Module], path) -> Path:
    """Write magic, length-prefixed key=value header, then named float32 tensors."""
    ckpt = obj if isinstance(obj, Checkpoint) else Checkpoint.from_model(obj)
    header = _encode_header(ckpt)
    out = bytearray(FORMAT_VERSION.encode("ascii"))
    out += struct.pack("<I", len(header)) + header
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    path = Path(path)
    path.write_bytes(bytes(out))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    rd = _Reader(data)
    magic = data[: len(FORMAT_VERSION)]
    if len(magic) < len(FORMAT_VERSION):
        raise CorruptCheckpointError("file too short for a checkpoint")
    if magic != FORMAT_VERSION.encode("ascii"):
        if magic[:6] == b"GANAUG":
            raise VersionMismatchError(f"checkpoint version {magic.decode('ascii', 'replace')}, expected {FORMAT_VERSION}")
        raise CorruptCheckpointError("bad magic bytes")
    rd.take(len(FORMAT_VERSION))
    (hlen,) = rd.unpack("<I")
    try:
        text = rd.take(hlen).decode("utf-8")
        header = dict(line.split("=", 1) for line in text.splitlines() if line)
        spec_cls = SPEC_TYPES[header["kind"]]
        spec = spec_cls(**{f.name: int(header[f.name]) for f in fields(spec_cls)})
        n_tensors = int(header["n_tensors"])
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc
    meta = {k[5:]: _meta_value(v) for k, v in header.items() if k.startswith("meta.")}
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8", "replace")
        (rank,) = rd.unpack("<B")
        dims = rd.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if name in tensors:
            raise CorruptCheckpointError(f"tensor {name} appears twice")
        tensors[name] = arr
    if rd.pos != len(data):
        raise CorruptCheckpointError("trailing bytes after last tensor")
    ckpt = Checkpoint(spec, tensors, meta)
    expected = tensor_names(build_model(spec))
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise MissingTensorError(f"checkpoint lacks tensors: {missing}")
    return ckpt


def load_model(path) -> nn.Module:
    return load_checkpoint(path).build()


def spec_dict(spec: ModelSpec) -> dict:
    return {"kind": spec.kind, **asdict(spec)}
