"""3D U-Net shared by both stages, plus checkpoint serialization.

Checkpoints are portable: a JSON header (stage, architecture, named
tensor index) followed by one flat little-endian float32 blob, so files
are byte-deterministic and readable without torch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, FormatError, StorageError
from .volio import Volume

CKPT_MAGIC = b"NCK1"


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    depth: int = 3
    base_channels: int = 16
    out_channels: int = 1  # 1: likelihood regressor (sigmoid), 2: class scores

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")

    @property
    def pad_multiple(self) -> int:
        return 2**self.depth


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel_size=3, padding=1)

    def forward(self, x):
        return F.relu(self.conv(x))


class UNet3D(nn.Module):
    """Encoder-decoder with skip connections; padded convs keep output dims
    equal to input dims (input dims must be divisible by 2**depth)."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        chans = [config.base_channels * 2**i for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for c in chans[:-1]:
            self.encoders.append(_ConvBlock(cin, c))
            cin = c
        self.bottleneck = _ConvBlock(chans[-2], chans[-1])
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(config.depth - 1, -1, -1):
            self.upsamplers.append(nn.ConvTranspose3d(chans[i + 1], chans[i], 2, stride=2))
            self.decoders.append(_ConvBlock(2 * chans[i], chans[i]))
        self.head = nn.Conv3d(config.base_channels, config.out_channels, kernel_size=1)
        self.pool = nn.MaxPool3d(2)
        # start near the background rate so early epochs are not wasted
        nn.init.constant_(self.head.bias, -2.0)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


def save_checkpoint(model: UNet3D, stage: str, path) -> None:
    """Write magic, JSON header (stage, net config, tensor index), then the
    concatenated little-endian float32 weight blob."""
    path = Path(path)
    state = model.state_dict()
    index = []
    offset = 0
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps(
        {"stage": stage, "net": asdict(model.config), "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for b in blobs:
                f.write(b)
    except OSError as e:
        raise StorageError(f"cannot write checkpoint to {path}: {e}") from e


def load_checkpoint(path) -> tuple[UNet3D, str]:
    """Rebuild the model from a checkpoint; returns (model, stage)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint from {path}: {e}") from e
    if len(raw) < 8 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint header: {e}") from e
    try:
        config = NetConfig(**header["net"])
        stage = header["stage"]
        index = header["tensors"]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: bad architecture config: {e}") from e
    blob = np.frombuffer(raw[8 + hlen :], dtype="<f4")
    model = UNet3D(config)
    state = model.state_dict()
    if set(state.keys()) != {t["name"] for t in index}:
        raise ConfigError(f"{path}: tensor index does not match the architecture")
    new_state = {}
    for rec in index:
        shape = tuple(rec["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[rec["offset"] : rec["offset"] + n]
        if chunk.size != n:
            raise FormatError(f"{path}: weight blob truncated at tensor {rec['name']}")
        if tuple(state[rec["name"]].shape) != shape:
            raise ConfigError(
                f"{path}: tensor {rec['name']} has shape {shape}, "
                f"architecture expects {tuple(state[rec['name']].shape)}"
            )
        new_state[rec["name"]] = torch.from_numpy(chunk.reshape(shape).copy())
    model.load_state_dict(new_state)
    model.eval()
    return model, stage


def _pad_to_multiple(t: torch.Tensor, multiple: int):
    """Symmetric zero-pad the trailing 3 dims up to a multiple; returns the
    padded tensor and the crop slices that restore the original dims."""
    dims = t.shape[-3:]
    pads = []
    crops = []
    for d in dims:
        total = (-d) % multiple
        lo = total // 2
        hi = total - lo
        pads.append((lo, hi))
        crops.append(slice(lo, lo + d))
    # F.pad wants (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi)
    flat = [p for pair in reversed(pads) for p in pair]
    return F.pad(t, flat), tuple(crops)


def _input_tensor(volume: Volume) -> torch.Tensor:
    data = volume.data
    if data.dtype == np.uint8:
        arr = data.astype(np.float32) / 255.0
    elif data.dtype == np.uint16:
        arr = data.astype(np.float32) / 65535.0
    else:
        arr = data.astype(np.float32)
    return torch.from_numpy(arr)


def forward_volume(model: UNet3D, volume: Volume) -> torch.Tensor:
    """Raw head output for a volume, padded/cropped; shape (out, z, y, x)."""
    x = _input_tensor(volume).reshape(1, 1, *volume.dims)
    padded, crops = _pad_to_multiple(x, model.config.pad_multiple)
    out = model(padded)
    return out[0][(slice(None),) + crops]


def predict_likelihood(model: UNet3D, volume: Volume) -> Volume:
    """Stage-1 inference: sigmoid likelihood in (0,1), dims preserved."""
    if model.config.out_channels != 1:
        raise ConfigError("likelihood prediction needs a 1-channel (stage-1) checkpoint")
    model.eval()
    with torch.no_grad():
        out = forward_volume(model, volume)
        probs = torch.sigmoid(out[0])
    return Volume(probs.numpy().astype(np.float32), volume.spacing)


def predict_probabilities(model: UNet3D, volume: Volume) -> np.ndarray:
    """Stage-2 inference: per-voxel class probabilities, shape (2, z, y, x),
    summing to 1."""
    if model.config.out_channels != 2:
        raise ConfigError("class-probability prediction needs a 2-channel (stage-2) checkpoint")
    model.eval()
    with torch.no_grad():
        out = forward_volume(model, volume)
        probs = torch.softmax(out, dim=0)
    return probs.numpy().astype(np.float32)
