"""Siamese inconsistency predictor.

Both patches go through one shared backbone producing 256-d features; the
head sees only their pointwise squared difference and returns a logit whose
sigmoid is the probability that the two patches are inconsistent.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from . import dataset

log = logging.getLogger(__name__)

FEATURE_DIM = 256
HIDDEN_UNITS = 16
PATCH = 64
EPS = 1e-7
CHECKPOINT_FORMAT = "hueloc-siamese"
CHECKPOINT_VERSION = 1
BACKBONES = ("small-cnn", "resnet50")


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------- network

def _block(cin, cout, stride):
    return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class HighPassConv2d(nn.Conv2d):
    """Conv whose kernels are projected to zero sum, so flat regions give no
    response and the layer only sees residual texture."""

    def forward(self, x):
        w = self.weight - self.weight.mean(dim=(2, 3), keepdim=True)
        return self._conv_forward(x, w, self.bias)


class SmallCNN(nn.Sequential):
    """A full-resolution conv, then a 2x2 pixel unshuffle so each CFA phase
    gets its own channels, then three more blocks (two of them strided)."""

    def __init__(self, widths=(16, 32, 64, 128), out_dim=FEATURE_DIM):
        layers = [HighPassConv2d(3, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]),
                  nn.ReLU(inplace=True), nn.PixelUnshuffle(2)]
        cin = 4 * widths[0]
        for k, w in enumerate(widths[1:]):
            layers += _block(cin, w, 1 if k == 0 else 2)
            cin = w
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(cin, out_dim)]
        super().__init__(*layers)


def _resnet50(out_dim=FEATURE_DIM):
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.fc = nn.Linear(net.fc.in_features, out_dim)
    return net


def _tree_sum(x: torch.Tensor) -> torch.Tensor:
    """Sum over the last axis by repeated halving. Only elementwise adds are
    used, so the rounding of each row does not depend on the batch shape."""
    while x.shape[-1] > 1:
        if x.shape[-1] % 2:
            x = torch.cat([x, torch.zeros_like(x[..., :1])], dim=-1)
        half = x.shape[-1] // 2
        x = x[..., :half] + x[..., half:]
    return x[..., 0]


class InconsistencyHead(nn.Module):
    """256 -> 16 (ReLU) -> 1 logit.

    Evaluated with fixed-order sums rather than matrix products so that each
    row's result does not depend on how many rows share the call.
    """

    def __init__(self, in_dim=FEATURE_DIM, hidden=HIDDEN_UNITS):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        h = torch.relu(_tree_sum(d.unsqueeze(-2) * self.hidden.weight) + self.hidden.bias)
        return _tree_sum(h * self.out.weight[0]) + self.out.bias[0]


class SiameseModel(nn.Module):
    def __init__(self, backbone_kind: str = "small-cnn"):
        super().__init__()
        if backbone_kind not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone_kind!r}")
        self.backbone_kind = backbone_kind
        self.backbone = SmallCNN() if backbone_kind == "small-cnn" else _resnet50()
        self.head = InconsistencyHead()
        self.backbone_calls = 0

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.backbone_calls += 1
        return self.backbone(x)

    def logits_from_features(self, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        return self.head(pointwise_sq_diff(fa, fb))

    def forward(self, xa: torch.Tensor, xb: torch.Tensor) -> torch.Tensor:
        f = self.features(torch.cat([xa, xb]))
        fa, fb = f[: len(xa)], f[len(xa):]
        return self.logits_from_features(fa, fb)


def build_model(backbone_kind: str = "small-cnn", seed: int = 0) -> SiameseModel:
    torch.manual_seed(seed)
    return SiameseModel(backbone_kind).eval()


def to_tensor(patches) -> torch.Tensor:
    """uint8 (N, h, w, 3) or (h, w, 3) -> float (N, 3, h, w) centred on zero."""
    arr = np.asarray(patches)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected patches of shape (N, h, w, 3), got {arr.shape}")
    return torch.from_numpy(arr.astype(np.float32) / 255.0 - 0.5).permute(0, 3, 1, 2).contiguous()


def _check_patch(patch, size=PATCH):
    patch = np.asarray(patch)
    if patch.shape != (size, size, 3):
        raise ValueError(f"expected a {size}x{size}x3 patch, got {patch.shape}")
    return patch


# --------------------------------------------------------------------------- inference

@torch.no_grad()
def feature_extract(model: SiameseModel, patch) -> np.ndarray:
    """256-d feature of a single patch (one backbone call)."""
    model.eval()
    return model.features(to_tensor(_check_patch(patch)))[0].numpy()


@torch.no_grad()
def feature_extract_batch(model: SiameseModel, patches, batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = to_tensor(patches)
    if x.shape[-2:] != (PATCH, PATCH):
        raise ValueError(f"expected {PATCH}x{PATCH} patches, got {tuple(x.shape[-2:])}")
    return torch.cat([model.features(x[i: i + batch_size]) for i in range(0, len(x), batch_size)]).numpy()


def pointwise_sq_diff(u, v):
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"feature dimensions differ: {u.shape[-1]} vs {v.shape[-1]}")
    d = u - v
    return d * d


@torch.no_grad()
def head_probabilities(model: SiameseModel, fa, fb) -> np.ndarray:
    """Sigmoid of the head applied to feature pairs (rows broadcast)."""
    fa = torch.as_tensor(np.asarray(fa, dtype=np.float32))
    fb = torch.as_tensor(np.asarray(fb, dtype=np.float32))
    # torch's vectorised sigmoid rounds differently from its scalar tail loop,
    # so the logistic is taken elementwise in float64 instead.
    z = model.logits_from_features(fa, fb).numpy().astype(np.float64)
    return expit(z).astype(np.float32)


def self_score(model: SiameseModel) -> float:
    """The score every patch gets against itself: sigmoid of the head at zero."""
    zero = np.zeros((1, FEATURE_DIM), dtype=np.float32)
    return float(head_probabilities(model, zero, zero)[0])


def predict_inconsistency(model: SiameseModel, patch_i, patch_j) -> float:
    fi = feature_extract(model, patch_i)
    fj = feature_extract(model, patch_j)
    return float(head_probabilities(model, fi[None], fj[None])[0])


# --------------------------------------------------------------------------- loss

def pair_loss(p, y, eps: float = EPS):
    """Mean binary cross-entropy; probabilities are clamped to [eps, 1 - eps].

    Accepts tensors (differentiable) or array-likes (returns a float).
    """
    as_float = not isinstance(p, torch.Tensor)
    p = torch.as_tensor(p, dtype=torch.float64) if as_float else p
    y = torch.as_tensor(y, dtype=p.dtype)
    p = p.clamp(eps, 1.0 - eps)
    loss = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()
    return float(loss) if as_float else loss


# --------------------------------------------------------------------------- training

def lr_at_epoch(epoch: int, lr0: float = 1e-4, hold: int = 30, every: int = 5) -> float:
    """Constant for the first ``hold`` epochs, then halved every ``every`` epochs."""
    return lr0 * 0.5 ** (max(0, epoch - hold) // every)


@dataclass
class TrainConfig:
    mode: str = "clean"
    epochs: int = 50
    pairs: int = 22_224  # per epoch, validation share included
    batch_size: int = 64
    lr0: float = 1e-4
    lr_hold: int = 30
    lr_every: int = 5
    patience: int = 10
    val_fraction: float = 0.1
    same_image: bool = True
    align: int = 2
    angles: tuple = dataset.TRAIN_ANGLES
    backbone: str = "small-cnn"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("clean", "jpeg"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.batch_size % 2:
            raise ValueError("batch size must be even (half positive, half negative)")


_VAL_SALT = 0x5EED


def split_indices(config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Seed-stable hash split of pair indices into (train, validation)."""
    buckets = 1000
    cut = int(round(config.val_fraction * buckets))
    is_val = np.array([dataset.derive_seed(config.seed, _VAL_SALT, i) % buckets < cut
                       for i in range(config.pairs)])
    idx = np.arange(config.pairs)
    return idx[~is_val], idx[is_val]


def make_batch(pool, config: TrainConfig, indices: Sequence[int], epoch: int | None):
    """Pairs for ``indices``; alternating labels give exactly half of each class.

    Validation pairs (``epoch=None``) are identical every time they are built;
    training pairs are redrawn each epoch.
    """
    xa, xb, ys = [], [], []
    for rank, i in enumerate(indices):
        keys = (config.seed, i) if epoch is None else (config.seed, i, epoch)
        rng = np.random.default_rng(np.random.SeedSequence(list(keys)))
        pair = dataset.sample_training_pair(pool, config.mode, rng, label=rank % 2,
                                            same_image=config.same_image, align=config.align,
                                            angles=config.angles)
        xa.append(pair.patch_a)
        xb.append(pair.patch_b)
        ys.append(pair.label)
    return to_tensor(np.stack(xa)), to_tensor(np.stack(xb)), torch.tensor(ys, dtype=torch.float32)


@torch.no_grad()
def evaluate_pairs(model: SiameseModel, batches) -> tuple[float, float]:
    """(mean loss, accuracy at p > 0.5) over prepared batches."""
    model.eval()
    losses, correct, total = [], 0, 0
    for xa, xb, y in batches:
        p = torch.sigmoid(model(xa, xb))
        losses.append(float(pair_loss(p, y)) * len(y))
        correct += int(((p > 0.5).float() == y).sum())
        total += len(y)
    return sum(losses) / total, correct / total


@dataclass
class TrainResult:
    model: SiameseModel
    history: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def train(config: TrainConfig, image_pool: Sequence[np.ndarray], log_path=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    if len(image_pool) == 0:
        raise ValueError("empty image pool")
    torch.use_deterministic_algorithms(True)
    model = build_model(config.backbone, config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr0)

    train_idx, val_idx = split_indices(config)
    bs = config.batch_size
    val_batches = [make_batch(image_pool, config, val_idx[i: i + bs], None)
                   for i in range(0, len(val_idx) - len(val_idx) % 2, bs)]
    n_train_batches = len(train_idx) // bs
    log_file = open(log_path, "w") if log_path else None

    history: list[dict] = []
    best_loss, best_state, best_epoch, stale = math.inf, None, 0, 0
    try:
        for epoch in range(1, config.epochs + 1):
            lr = lr_at_epoch(epoch, config.lr0, config.lr_hold, config.lr_every)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = np.random.default_rng([config.seed, epoch]).permutation(train_idx)
            model.train()
            running = 0.0
            for b in range(n_train_batches):
                xa, xb, y = make_batch(image_pool, config, order[b * bs: (b + 1) * bs], epoch)
                loss = pair_loss(torch.sigmoid(model(xa, xb)), y)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:g}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                running += loss.item()
            val_loss, val_acc = evaluate_pairs(model, val_batches)
            rec = {"epoch": epoch, "lr": lr, "train_loss": running / max(n_train_batches, 1),
                   "val_loss": val_loss, "val_acc": val_acc}
            history.append(rec)
            log.info("epoch %d lr %.2e train %.4f val %.4f acc %.3f", epoch, lr,
                     rec["train_loss"], val_loss, val_acc)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(rec)
            if val_loss < best_loss:
                best_loss, best_epoch, stale = val_loss, epoch, 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if log_file:
            log_file.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    model.backbone_calls = 0
    last = history[-1] if history else {}
    metadata = {
        "config": asdict(config),
        "seed": config.seed,
        "mode": config.mode,
        "epochs_run": len(history),
        "best_epoch": best_epoch,
        "final_train_loss": last.get("train_loss"),
        "final_val_loss": last.get("val_loss"),
        "best_val_loss": best_loss if history else None,
        "best_val_acc": history[best_epoch - 1]["val_acc"] if best_epoch else None,
        "lr_trace": [h["lr"] for h in history],
    }
    return TrainResult(model, history, metadata)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(model: SiameseModel, path, metadata: dict | None = None) -> None:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone_kind": model.backbone_kind,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
        "metadata_json": json.dumps(metadata or {}, sort_keys=True),
    }, Path(path))


def load_checkpoint(path, backbone_kind: str | None = None) -> tuple[SiameseModel, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for bad archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    kind = blob["backbone_kind"]
    if backbone_kind is not None and kind != backbone_kind:
        raise CheckpointError(f"checkpoint holds a {kind} backbone, expected {backbone_kind}")
    state = blob["state_dict"]
    for name, shape in blob["shapes"].items():
        if name not in state or list(state[name].shape) != shape:
            raise CheckpointError(f"parameter {name} missing or misshapen in {path}")
    model = SiameseModel(kind)
    model.load_state_dict(state)
    model.eval()
    return model, json.loads(blob["metadata_json"])
