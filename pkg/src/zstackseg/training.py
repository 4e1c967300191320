"""Single-worker training for both stages.

Targets (centre maps for stage 1, pseudo foregrounds for stage 2) are
read from disk artifacts produced by earlier stages; a missing artifact
is a pipeline-order error. Runs are bitwise reproducible for a fixed
seed: torch is pinned to one thread and all RNG is seeded locally.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import PipelineOrderError
from .losses import S1LossParams, s1_loss_parts, s2_loss_parts
from .model import NetConfig, UNet3D, _input_tensor, _pad_to_multiple, save_checkpoint
from .refine import RefineLossParams
from .volio import DatasetManifest, read_volume

# stacks deeper than this are centre-cropped for training
TRAIN_SLICE_LIMIT = 16


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-6
    batch_size: int = 1
    max_epochs: int = 40
    seed: int = 1234

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay <= 0:
            raise ValueError(f"weight_decay must be > 0, got {self.weight_decay}")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    part1: float  # bce (s1) / cross entropy (s2)
    part2: float  # focal (s1) / boundary refinement (s2)
    val_loss: float | None = None


def _center_crop_z(arr: np.ndarray, limit: int) -> np.ndarray:
    z = arr.shape[0]
    if z <= limit:
        return arr
    lo = (z - limit) // 2
    return arr[lo : lo + limit]


def _prepare_sample(volume, target: np.ndarray, pad_multiple: int):
    x = _input_tensor(volume).numpy()
    x = _center_crop_z(x, TRAIN_SLICE_LIMIT)
    t = _center_crop_z(target.astype(np.float32), TRAIN_SLICE_LIMIT)
    x5 = torch.from_numpy(x).reshape(1, 1, *x.shape)
    x5, crops = _pad_to_multiple(x5, pad_multiple)
    t3 = torch.from_numpy(t).reshape(1, 1, *t.shape)
    t3, _ = _pad_to_multiple(t3, pad_multiple)
    return x5, t3[0, 0]


def _load_samples(manifest: DatasetManifest, entries, targets, stage: str, pad_multiple: int):
    samples = []
    for entry in entries:
        target_path = targets.get(entry.stem)
        if target_path is None or not Path(target_path).exists():
            kind = "centre map" if stage == "s1" else "pseudo label"
            raise PipelineOrderError(
                f"missing {kind} for {entry.stem}"
                + (f" (expected {target_path})" if target_path is not None else "")
            )
        volume = read_volume(manifest.resolve(entry.volume))
        target = read_volume(target_path).data
        samples.append(_prepare_sample(volume, target, pad_multiple))
    return samples


def _sample_loss(stage, model, x5, target, s1_params, refine_params):
    if stage == "s1":
        pred = torch.sigmoid(model(x5)[0, 0])
        p1, p2 = s1_loss_parts(pred, target, s1_params)
        return p1 + s1_params.lambda_focal * p2, p1, p2
    scores = model(x5)[0]
    p1, p2 = s2_loss_parts(scores, target, x5[0, 0], refine_params)
    return p1 + refine_params.lambda_refine * p2, p1, p2


def train(
    stage: str,
    manifest: DatasetManifest,
    net_config: NetConfig,
    train_config: TrainConfig,
    targets: dict[str, Path],
    checkpoint_path,
    history_path,
    s1_params: S1LossParams | None = None,
    refine_params: RefineLossParams | None = None,
) -> list[EpochStats]:
    """Train one stage over the manifest's train split.

    targets maps entry stems to target volume paths. Saves the
    best-validation checkpoint (final weights when there is no validation
    split) plus a per-epoch loss history CSV; returns the history.
    """
    if stage not in ("s1", "s2"):
        raise ValueError(f"stage must be 's1' or 's2', got {stage!r}")
    if stage == "s1" and s1_params is None:
        s1_params = S1LossParams()
    if stage == "s2" and refine_params is None:
        refine_params = RefineLossParams()

    train_entries = manifest.split("train")
    if not train_entries:
        raise PipelineOrderError("manifest has no training entries")
    val_entries = manifest.split("val")

    torch.set_num_threads(1)
    torch.manual_seed(train_config.seed)
    net_config = NetConfig(
        in_channels=net_config.in_channels,
        depth=net_config.depth,
        base_channels=net_config.base_channels,
        out_channels=1 if stage == "s1" else 2,
    )
    model = UNet3D(net_config)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        weight_decay=train_config.weight_decay,
    )

    train_samples = _load_samples(manifest, train_entries, targets, stage, net_config.pad_multiple)
    val_samples = _load_samples(manifest, val_entries, targets, stage, net_config.pad_multiple)

    rng = np.random.default_rng(train_config.seed)
    history: list[EpochStats] = []
    best_val = float("inf")
    best_state = None

    for epoch in range(1, train_config.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_samples))
        tot = p1_sum = p2_sum = 0.0
        for i in order:
            x5, target = train_samples[i]
            optimizer.zero_grad()
            loss, p1, p2 = _sample_loss(stage, model, x5, target, s1_params, refine_params)
            loss.backward()
            optimizer.step()
            tot += loss.item()
            p1_sum += p1.item()
            p2_sum += p2.item()
        n = len(train_samples)
        stats = EpochStats(epoch, tot / n, p1_sum / n, p2_sum / n)

        if val_samples:
            model.eval()
            with torch.no_grad():
                vt = 0.0
                for x5, target in val_samples:
                    loss, _, _ = _sample_loss(stage, model, x5, target, s1_params, refine_params)
                    vt += loss.item()
            stats.val_loss = vt / len(val_samples)
            if stats.val_loss < best_val:
                best_val = stats.val_loss
                best_state = copy.deepcopy(model.state_dict())
        history.append(stats)

    if best_state is not None:
        model.load_state_dict(best_state)
    save_checkpoint(model, stage, checkpoint_path)
    write_history(history, stage, history_path)
    return history


def write_history(history: list[EpochStats], stage: str, path) -> None:
    parts = ("bce", "focal") if stage == "s1" else ("ce", "refine")
    lines = [f"epoch,loss,{parts[0]},{parts[1]},val_loss"]
    for h in history:
        val = "" if h.val_loss is None else repr(h.val_loss)
        lines.append(f"{h.epoch},{h.loss!r},{h.part1!r},{h.part2!r},{val}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
