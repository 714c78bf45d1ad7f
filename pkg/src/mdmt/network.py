"""Shared-encoder model with a classification branch and an ROI detection branch.

The encoder is a small 3-D DenseNet.  Each dense block holds two 3x3x3
convolutions whose outputs are concatenated onto the block input, followed
by ``factor``-fold average pooling.  The classifier flattens the embedding
into two fully connected layers.  The detector mirrors the encoder: per
stage a 1x1x1 channel reduction, nearest-neighbour upsampling and a dense
block, then a 1x1x1 projection to a single sigmoid map the size of the
input.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError
from .tensor import (Tensor, affine, as_tensor, avg_pool3d, concat_channels, conv3d,
                     sigmoid, silu, upsample_nearest3d)

LAYERS_PER_BLOCK = 2
KERNEL = 3


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple[int, int, int] = (16, 16, 8)
    base_channels: int = 4
    num_blocks: int = 2
    growth: int = 4
    downsample_factor: int = 2
    fc_hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3:
            raise ConfigError(f"arch.input_shape must have 3 entries, got {self.input_shape}")
        for name in ("base_channels", "num_blocks", "growth", "downsample_factor", "fc_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"arch.{name} must be >= 1")
        if min(self.input_shape) < 1:
            raise ConfigError("arch.input_shape entries must be >= 1")
        div = self.downsample_factor ** self.num_blocks
        if any(s % div for s in self.input_shape):
            raise ConfigError(
                f"arch.input_shape {self.input_shape} not divisible by "
                f"{self.downsample_factor}**{self.num_blocks}")

    @property
    def embedding_channels(self) -> int:
        return self.base_channels + LAYERS_PER_BLOCK * self.growth * self.num_blocks

    @property
    def embedding_spatial(self) -> tuple[int, int, int]:
        div = self.downsample_factor ** self.num_blocks
        return tuple(s // div for s in self.input_shape)

    @property
    def embedding_shape(self) -> tuple[int, ...]:
        return (self.embedding_channels,) + self.embedding_spatial

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "base_channels": self.base_channels,
            "num_blocks": self.num_blocks,
            "growth": self.growth,
            "downsample_factor": self.downsample_factor,
            "fc_hidden": self.fc_hidden,
            "seed": self.seed,
        }


Group = dict[str, Tensor]


@dataclass
class ModelParams:
    """Encoder, classifier and detector parameter groups, never aliased."""

    theta_e: Group
    theta_c: Group
    theta_d: Group
    arch: ArchConfig = field(default_factory=ArchConfig)

    GROUPS = ("theta_e", "theta_c", "theta_d")

    def groups(self) -> dict[str, Group]:
        return {g: getattr(self, g) for g in self.GROUPS}

    def named_parameters(self, groups=GROUPS):
        for g in groups:
            for name, t in getattr(self, g).items():
                yield f"{g}.{name}", t

    def n_params(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def copy(self) -> "ModelParams":
        def dup(group):
            return {k: Tensor(v.data, requires_grad=True) for k, v in group.items()}
        return ModelParams(dup(self.theta_e), dup(self.theta_c), dup(self.theta_d),
                           copy.copy(self.arch))

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()


def parameter_shapes(arch: ArchConfig) -> dict[str, dict[str, tuple[int, ...]]]:
    """Every parameter's shape, grouped; a pure function of ``arch``."""
    k = (KERNEL,) * 3
    enc: dict[str, tuple[int, ...]] = {}
    c = arch.base_channels
    enc["stem.w"] = (c, 1) + k
    enc["stem.b"] = (c,)
    for i in range(arch.num_blocks):
        for j in range(LAYERS_PER_BLOCK):
            enc[f"block{i}.conv{j}.w"] = (arch.growth, c) + k
            enc[f"block{i}.conv{j}.b"] = (arch.growth,)
            c += arch.growth
    emb = int(np.prod(arch.embedding_shape))
    cls = {
        "fc1.w": (arch.fc_hidden, emb),
        "fc1.b": (arch.fc_hidden,),
        "fc2.w": (1, arch.fc_hidden),
        "fc2.b": (1,),
    }
    det: dict[str, tuple[int, ...]] = {}
    c = arch.embedding_channels
    for i in range(arch.num_blocks):
        det[f"stage{i}.reduce.w"] = (arch.base_channels, c, 1, 1, 1)
        det[f"stage{i}.reduce.b"] = (arch.base_channels,)
        c = arch.base_channels
        for j in range(LAYERS_PER_BLOCK):
            det[f"stage{i}.conv{j}.w"] = (arch.growth, c) + k
            det[f"stage{i}.conv{j}.b"] = (arch.growth,)
            c += arch.growth
    det["out.w"] = (1, c, 1, 1, 1)
    det["out.b"] = (1,)
    return {"theta_e": enc, "theta_c": cls, "theta_d": det}


# output layers feed a sigmoid rather than SiLU and get unit gain
_OUTPUT_LAYERS = {"fc2.w", "out.w"}


def init_params(arch: ArchConfig) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, deterministic in ``arch.seed``."""
    rng = np.random.default_rng(arch.seed)
    groups = {}
    for gname, shapes in parameter_shapes(arch).items():
        group = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                arr = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                gain = 1.0 if name in _OUTPUT_LAYERS else 2.0
                bound = np.sqrt(3.0 * gain / fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            group[name] = Tensor(arr, requires_grad=True)
        groups[gname] = group
    return ModelParams(arch=arch, **groups)


def _as_batch(v, shape: tuple[int, ...], what: str) -> tuple[Tensor, bool]:
    """Return ``(N, C, ...)`` tensor and whether the input was unbatched."""
    v = as_tensor(v)
    n = len(shape)
    if v.ndim == n:
        return v.reshape((1,) + v.shape), True
    if v.ndim == n + 1:
        return v, False
    raise DimensionError(f"{what}: expected shape {shape} or (N, *{shape}), got {v.shape}")


def _dense_block(x: Tensor, group: Group, prefix: str) -> Tensor:
    for j in range(LAYERS_PER_BLOCK):
        h = silu(conv3d(x, group[f"{prefix}.conv{j}.w"], pad=KERNEL // 2,
                        bias=group[f"{prefix}.conv{j}.b"]))
        x = concat_channels([x, h])
    return x


def encoder_forward(v, theta_e: Group, arch: ArchConfig) -> Tensor:
    """Embed one volume ``(D,H,W)`` or a batch ``(N,D,H,W)``."""
    vb, single = _as_batch(v, arch.input_shape, "encoder_forward")
    if vb.shape[1:] != arch.input_shape:
        raise DimensionError(f"encoder_forward: volume {vb.shape[1:]} != arch {arch.input_shape}")
    x = vb.reshape((vb.shape[0], 1) + arch.input_shape)
    x = silu(conv3d(x, theta_e["stem.w"], pad=KERNEL // 2, bias=theta_e["stem.b"]))
    for i in range(arch.num_blocks):
        x = _dense_block(x, theta_e, f"block{i}")
        x = avg_pool3d(x, arch.downsample_factor)
    return x.reshape(x.shape[1:]) if single else x


def classifier_forward(o, theta_c: Group, arch: ArchConfig) -> Tensor:
    """Probability of the positive class: scalar for one embedding, ``(N,)`` for a batch."""
    ob, single = _as_batch(o, arch.embedding_shape, "classifier_forward")
    if ob.shape[1:] != arch.embedding_shape:
        raise DimensionError(f"classifier_forward: embedding {ob.shape[1:]} != {arch.embedding_shape}")
    h = silu(affine(ob.flatten(1), theta_c["fc1.w"], theta_c["fc1.b"]))
    y = sigmoid(affine(h, theta_c["fc2.w"], theta_c["fc2.b"]))
    return y.reshape(()) if single else y.reshape((ob.shape[0],))


def decoder_forward(o, theta_d: Group, arch: ArchConfig) -> Tensor:
    """Soft ROI map in (0, 1) with the input volume's spatial shape."""
    ob, single = _as_batch(o, arch.embedding_shape, "decoder_forward")
    if ob.shape[1:] != arch.embedding_shape:
        raise DimensionError(f"decoder_forward: embedding {ob.shape[1:]} != {arch.embedding_shape}")
    x = ob
    for i in range(arch.num_blocks):
        x = silu(conv3d(x, theta_d[f"stage{i}.reduce.w"], bias=theta_d[f"stage{i}.reduce.b"]))
        x = upsample_nearest3d(x, arch.downsample_factor)
        x = _dense_block(x, theta_d, f"stage{i}")
    s = sigmoid(conv3d(x, theta_d["out.w"], bias=theta_d["out.b"]))
    s = s.reshape((s.shape[0],) + arch.input_shape)
    return s.reshape(arch.input_shape) if single else s


def predict_proba(params: ModelParams, v) -> Tensor:
    """Inference path: encoder then classification branch."""
    return classifier_forward(encoder_forward(v, params.theta_e, params.arch),
                              params.theta_c, params.arch)


def predict_roi(params: ModelParams, v) -> Tensor:
    return decoder_forward(encoder_forward(v, params.theta_e, params.arch),
                           params.theta_d, params.arch)


def threshold_mask(s_hat, zeta: float = 0.8) -> np.ndarray:
    """Binary mask ``s_hat > zeta`` (strict) as uint8."""
    if not 0.0 <= zeta <= 1.0:
        raise ConfigError(f"zeta={zeta} outside [0, 1]")
    data = s_hat.data if isinstance(s_hat, Tensor) else np.asarray(s_hat, dtype=np.float64)
    return (data > zeta).astype(np.uint8)
