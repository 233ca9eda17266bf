"""Generator/discriminator autoencoders built from fixed layer tables.

Both networks share one architecture: a strided-conv encoder that squeezes a
32x32 image down to a 1x1 latent column, and a transposed-conv decoder that
grows it back. No fully connected layers anywhere. Two presets are provided,
a small one (latent 32) for digit-scale data and a wider one (latent 128) for
color/texture-scale data; only the parameter values distinguish the generator
from the discriminator.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LayerSpec",
    "ArchConfig",
    "build_arch",
    "Autoencoder",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str            # "conv" | "conv_transpose"
    kernel: int
    stride: int
    feature_maps: int
    batch_norm: bool
    activation: str      # "relu" | "leaky_relu" | "tanh"
    padding: int = 0
    output_padding: int = 0


@dataclass(frozen=True)
class ArchConfig:
    image_channels: int
    image_size: int
    latent_dim: int
    encoder: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            image_channels=d["image_channels"],
            image_size=d["image_size"],
            latent_dim=d["latent_dim"],
            encoder=tuple(LayerSpec(**ls) for ls in d["encoder"]),
            decoder=tuple(LayerSpec(**ls) for ls in d["decoder"]),
        )


def _encoder_rows(maps: tuple[int, int, int, int, int]) -> tuple[LayerSpec, ...]:
    m1, m2, m3, m4, m5 = maps
    return (
        LayerSpec("conv", 3, 2, m1, False, "relu", padding=1),
        LayerSpec("conv", 3, 2, m2, True, "relu", padding=1),
        LayerSpec("conv", 3, 2, m3, True, "relu", padding=1),
        LayerSpec("conv", 4, 1, m4, True, "relu", padding=0),
        LayerSpec("conv", 1, 1, m5, True, "relu", padding=0),
    )


def _decoder_rows(maps: tuple[int, int, int], out_channels: int) -> tuple[LayerSpec, ...]:
    m1, m2, m3 = maps
    return (
        LayerSpec("conv_transpose", 4, 1, m1, True, "leaky_relu", padding=0),
        LayerSpec("conv_transpose", 3, 2, m2, True, "leaky_relu", padding=1, output_padding=1),
        LayerSpec("conv_transpose", 3, 2, m3, True, "leaky_relu", padding=1, output_padding=1),
        LayerSpec("conv_transpose", 3, 2, out_channels, False, "tanh", padding=1, output_padding=1),
    )


def build_arch(dataset_kind: str, image_channels: int | None = None) -> ArchConfig:
    """Layer table for a dataset family.

    ``mnist_like`` is the narrow table (latent 32, grayscale by default);
    ``cifar_like`` is the wide table (latent 128, color by default). The
    channel count may be overridden, e.g. wide-latent grayscale for medical
    slices.
    """
    if dataset_kind == "mnist_like":
        channels = 1 if image_channels is None else image_channels
        return ArchConfig(
            image_channels=channels,
            image_size=32,
            latent_dim=32,
            encoder=_encoder_rows((16, 32, 48, 16, 32)),
            decoder=_decoder_rows((16, 16, 16), channels),
        )
    if dataset_kind == "cifar_like":
        channels = 3 if image_channels is None else image_channels
        return ArchConfig(
            image_channels=channels,
            image_size=32,
            latent_dim=128,
            encoder=_encoder_rows((64, 128, 192, 64, 128)),
            decoder=_decoder_rows((64, 64, 64), channels),
        )
    raise ValueError(f"unknown dataset_kind {dataset_kind!r}")


class _BatchNormParams:
    __slots__ = ("gamma", "beta", "running_mean", "running_var")

    def __init__(self, channels: int, dtype, name: str):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True,
                            name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True,
                           name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)


class _ConvLayer:
    __slots__ = ("spec", "kernel", "bias", "bn")

    def __init__(self, spec: LayerSpec, in_channels: int, rng: np.random.Generator,
                 dtype, name: str):
        k = spec.kernel
        if spec.kind == "conv":
            kshape = (spec.feature_maps, in_channels, k, k)
        elif spec.kind == "conv_transpose":
            kshape = (in_channels, spec.feature_maps, k, k)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        fan_in = in_channels * k * k
        bound = np.sqrt(6.0 / fan_in)
        self.spec = spec
        self.kernel = Tensor(rng.uniform(-bound, bound, kshape).astype(dtype),
                             requires_grad=True, name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(spec.feature_maps, dtype=dtype),
                           requires_grad=True, name=f"{name}.bias")
        self.bn = _BatchNormParams(spec.feature_maps, dtype, name) if spec.batch_norm else None

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        s = self.spec
        if s.kind == "conv":
            h = ad.conv2d(x, self.kernel, self.bias, stride=s.stride, padding=s.padding)
        else:
            h = ad.conv2d_transpose(x, self.kernel, self.bias, stride=s.stride,
                                    padding=s.padding, output_padding=s.output_padding)
        if self.bn is not None:
            h = ad.batch_norm(h, self.bn.gamma, self.bn.beta,
                              self.bn.running_mean, self.bn.running_var,
                              mode=mode, momentum=BN_MOMENTUM, eps=BN_EPS)
        return ad.activation(h, s.activation, LEAKY_SLOPE)


class Autoencoder:
    """One reconstructing network; instantiated twice with different roles."""

    def __init__(self, config: ArchConfig, role: str, seed: int,
                 dtype=np.float32):
        if role not in ("generator", "discriminator"):
            raise ValueError(f"role must be generator or discriminator, got {role!r}")
        self.config = config
        self.role = role
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder: list[_ConvLayer] = []
        self.decoder: list[_ConvLayer] = []
        cin = config.image_channels
        for i, spec in enumerate(config.encoder):
            self.encoder.append(_ConvLayer(spec, cin, rng, dtype, f"{role}.encoder{i}"))
            cin = spec.feature_maps
        for i, spec in enumerate(config.decoder):
            self.decoder.append(_ConvLayer(spec, cin, rng, dtype, f"{role}.decoder{i}"))
            cin = spec.feature_maps

    # -- forward passes ----------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        n, c, h, w = x.data.shape
        size = self.config.image_size
        if c != self.config.image_channels or h != size or w != size:
            raise ad.DimensionError(
                f"{self.role}: expected N x {self.config.image_channels} x {size} x {size} "
                f"input, got {x.data.shape}")

    def encode(self, x: Tensor, mode: str = "eval") -> Tensor:
        self._check_input(x)
        h = x
        for layer in self.encoder:
            h = layer(h, mode)
        return h

    def decode(self, z: Tensor, mode: str = "eval") -> Tensor:
        h = z
        for layer in self.decoder:
            h = layer(h, mode)
        return h

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        return self.decode(self.encode(x, mode), mode)

    def reconstruct(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Graph-free eval-mode reconstruction of an NCHW array."""
        chunks = []
        with ad.no_grad():
            for i in range(0, x.shape[0], batch_size):
                chunks.append(self.forward(Tensor(x[i:i + batch_size]), mode="eval").data)
        return np.concatenate(chunks, axis=0)

    # -- parameter access ----------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in (*self.encoder, *self.decoder):
            out.append((layer.kernel.name, layer.kernel))
            out.append((layer.bias.name, layer.bias))
            if layer.bn is not None:
                out.append((layer.bn.gamma.name, layer.bn.gamma))
                out.append((layer.bn.beta.name, layer.bn.beta))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for layer in (*self.encoder, *self.decoder):
            if layer.bn is not None:
                base = layer.bn.gamma.name.rsplit(".", 1)[0]
                out.append((f"{base}.running_mean", layer.bn.running_mean))
                out.append((f"{base}.running_var", layer.bn.running_var))
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def parameter_checksum(self) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.digest()

    def structure(self) -> tuple:
        """Role-free architecture description; equal across G and D."""
        return (self.config.image_channels, self.config.image_size,
                self.config.latent_dim, self.config.encoder, self.config.decoder)


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + raw little-endian tensor payload
# ---------------------------------------------------------------------------

_MAGIC = b"ADAE\x00\x01"
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointError(RuntimeError):
    """Unreadable or mismatched checkpoint file."""


@dataclass
class Checkpoint:
    arch: ArchConfig
    generator: Autoencoder
    discriminator: Autoencoder
    seed: int
    epoch: int
    balancer_ema: float
    extra: dict = field(default_factory=dict)


def _dtype_tag(arr: np.ndarray) -> str:
    kind = arr.dtype.kind + str(arr.dtype.itemsize)
    tag = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}.get(kind)
    if tag is None:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return tag


def save_checkpoint(path, generator: Autoencoder, discriminator: Autoencoder, *,
                    seed: int, epoch: int = 0, balancer_ema: float = 0.0,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write both networks (weights, norm statistics) and training state."""
    arrays: list[tuple[str, np.ndarray]] = []
    for net in (generator, discriminator):
        for name, p in net.named_parameters():
            arrays.append((name, p.data))
        for name, buf in net.named_buffers():
            arrays.append((name, buf))
    for name, arr in (extra_arrays or {}).items():
        arrays.append((name, arr))

    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        tag = _dtype_tag(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = {
        "arch": generator.config.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "balancer_ema": balancer_ema,
        "generator_seed": generator.seed,
        "discriminator_seed": discriminator.seed,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()

    arch = ArchConfig.from_dict(header["arch"])
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: unknown dtype {entry['dtype']}")
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()

    nets = {}
    for role, seed_key in (("generator", "generator_seed"),
                           ("discriminator", "discriminator_seed")):
        net = Autoencoder(arch, role, seed=header.get(seed_key, 0))
        for name, p in net.named_parameters():
            if name not in arrays:
                raise CheckpointError(f"{path}: missing tensor {name}")
            p.data = arrays.pop(name).astype(p.data.dtype, copy=False)
        for name, buf in net.named_buffers():
            if name not in arrays:
                raise CheckpointError(f"{path}: missing tensor {name}")
            buf[...] = arrays.pop(name)
        nets[role] = net

    return Checkpoint(
        arch=arch,
        generator=nets["generator"],
        discriminator=nets["discriminator"],
        seed=header["seed"],
        epoch=header["epoch"],
        balancer_ema=header["balancer_ema"],
        extra=arrays,
    )
