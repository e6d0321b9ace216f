"""Classifier zoo, training loop and the ACC/recall/precision/F1 suite.

FC matrices are treated as 1-channel images by small residual backbones
(R10: 4 stages of one basic block, R18: 4 stages of two), optionally
topped with a squeeze-excitation channel-attention head or a 2-block
transformer head. The same zoo serves the pre-trained verifier, the final
attention-masked classifier, and the baseline grid.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aabt import TransformerBlock
from .counterfactual import AttentionMap, mask_fc
from .errors import (
    ConfigError,
    DivergenceError,
    EmptyClassError,
    ParameterError,
    ShapeError,
)
from .fc import Cohort, FCMatrix, Label, Split, task_classes

BACKBONES = ("R10", "R18")
HEADS = ("none", "channel_attention", "transformer")
HEAD_SUFFIX = {8: "T-S", 16: "T-B", 32: "T-L"}


@dataclass(frozen=True)
class ClassifierConfig:
    backbone: str = "R10"
    head: str = "transformer"
    transformer_heads: int | None = 16
    num_classes: int = 2
    input_size: int = 160
    base_width: int = 16

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == "transformer":
            if self.transformer_heads not in HEAD_SUFFIX:
                raise ConfigError(
                    f"transformer_heads must be one of {sorted(HEAD_SUFFIX)}, got {self.transformer_heads}"
                )
        elif self.transformer_heads is not None:
            raise ConfigError("transformer_heads is only valid with head='transformer'")
        if self.num_classes < 2 or self.input_size < 1 or self.base_width < 1:
            raise ConfigError("num_classes, input_size and base_width must be positive")

    @property
    def model_name(self) -> str:
        """Grid naming: R10// (bare), R10A (channel attention), R10T-B (16 heads)."""
        if self.head == "none":
            return f"{self.backbone}//"
        if self.head == "channel_attention":
            return f"{self.backbone}A"
        return f"{self.backbone}{HEAD_SUFFIX[self.transformer_heads]}"


@dataclass(frozen=True)
class Metrics:
    acc: float
    recall: float
    precision: float
    f1: float


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 20

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.early_stop_patience < 1:
            raise ParameterError("batch_size, learning_rate, early_stop_patience must be positive")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetBackbone(nn.Module):
    """4-stage residual backbone on 1-channel square inputs, 3x3 stem."""

    def __init__(self, blocks_per_stage: int, base_width: int):
        super().__init__()
        w = base_width
        self.stem = nn.Sequential(
            nn.Conv2d(1, w, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        widths = (w, 2 * w, 4 * w, 8 * w)
        strides = (1, 2, 2, 2)
        stages = []
        in_ch = w
        for width, stride in zip(widths, strides):
            blocks = [BasicBlock(in_ch, width, stride)]
            blocks += [BasicBlock(width, width) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = width
        self.stages = nn.Sequential(*stages)
        self.out_channels = widths[-1]

    def forward(self, x):
        return self.stages(self.stem(x))


class ChannelAttention(nn.Module):
    """Squeeze-excitation reweighting of backbone channels."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
            nn.Sigmoid(),
        )

    def forward(self, x):
        weights = self.fc(x.mean(dim=(2, 3)))
        return x * weights[:, :, None, None]


class TransformerHead(nn.Module):
    """Backbone feature maps as spatial tokens through 2 attention blocks."""

    def __init__(self, channels: int, num_heads: int, num_tokens: int):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(num_tokens, channels))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(channels, num_heads, mlp_ratio=4.0) for _ in range(2)
        )

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2) + self.pos
        for block in self.blocks:
            tokens = block(tokens)
        return tokens.mean(dim=1)


class Classifier(nn.Module):
    """Residual backbone plus optional head, logits over classes."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        blocks = 1 if config.backbone == "R10" else 2
        self.backbone = ResNetBackbone(blocks, config.base_width)
        c = self.backbone.out_channels
        side = _spatial_side(config.input_size)
        self.channel_attention = (
            ChannelAttention(c) if config.head == "channel_attention" else None
        )
        self.transformer = (
            TransformerHead(c, config.transformer_heads, side * side)
            if config.head == "transformer"
            else None
        )
        self.fc = nn.Linear(c, config.num_classes)

    def forward(self, x):
        n = self.config.input_size
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x))
        x = x.to(self.fc.weight.dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x.unsqueeze(1)
        if x.shape[-2:] != (n, n) or x.shape[1] != 1:
            raise ShapeError(f"expected (*, {n}, {n}) input, got {tuple(x.shape)}")
        feat = self.backbone(x)
        if self.channel_attention is not None:
            feat = self.channel_attention(feat)
        if self.transformer is not None:
            pooled = self.transformer(feat)
        else:
            pooled = feat.mean(dim=(2, 3))
        return self.fc(pooled)


def _spatial_side(n: int) -> int:
    """Spatial side of the backbone output for an n x n input."""
    side = n
    for stride in (2, 2, 1, 2, 2, 2):  # stem conv, pool, stages
        side = (side + 1) // 2 if stride == 2 else side
        side = max(side, 1)
    return side


def build_classifier(config: ClassifierConfig, seed: int, dtype=torch.float32) -> Classifier:
    """Deterministically initialized classifier for the given seed."""
    torch.manual_seed(seed)
    return Classifier(config).to(dtype)


# ---------------------------------------------------------------------------
# training


def _stack_inputs(subjects, masks: AttentionMap | None, floor: float) -> np.ndarray:
    if masks is None:
        return np.stack([s.fc.values for s in subjects])
    return np.stack([mask_fc(s.fc, masks, floor=floor).values for s in subjects])


def train_classifier(
    classifier: Classifier,
    cohort: Cohort,
    task: tuple[Label, Label],
    tc: TrainConfig,
    masks: AttentionMap | None = None,
    mask_floor: float = 0.2,
) -> tuple[Classifier, list[dict]]:
    """Minimize cross-entropy on (optionally attention-masked) FC inputs.

    Keeps the checkpoint with the best validation F1 (positive class =
    later clinical stage); stops early after ``early_stop_patience`` epochs
    without improvement. Returns the classifier (best weights loaded) and
    a per-epoch history of train loss and validation metrics.
    """
    neg, pos = task_classes(task)
    train_subjects = [s for lab in (neg, pos) for s in cohort.select(lab, Split.TRAIN)]
    if not cohort.select(neg, Split.TRAIN) or not cohort.select(pos, Split.TRAIN):
        raise EmptyClassError(f"train split lacks one of {neg.value}/{pos.value}")
    val_subjects = [s for lab in (neg, pos) for s in cohort.select(lab, Split.VAL)]

    x_train = _stack_inputs(train_subjects, masks, mask_floor)
    y_train = np.array([0 if s.label == neg else 1 for s in train_subjects])
    x_val = _stack_inputs(val_subjects, masks, mask_floor) if val_subjects else None
    y_val_labels = [s.label for s in val_subjects]

    dtype = classifier.fc.weight.dtype
    xt = torch.from_numpy(x_train).to(dtype)
    yt = torch.from_numpy(y_train).long()

    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    opt = torch.optim.Adam(
        classifier.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay
    )

    history: list[dict] = []
    best_f1 = -1.0
    best_state = None
    stale = 0
    for epoch in range(tc.epochs):
        classifier.train()
        order = rng.permutation(len(train_subjects))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            logits = classifier(xt[idx])
            loss = F.cross_entropy(logits, yt[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"training loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))

        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if x_val is not None:
            preds, _ = predict(classifier, x_val)
            pred_labels = [neg if p == 0 else pos for p in preds]
            m = compute_metrics(pred_labels, y_val_labels, pos)
            record.update(
                val_acc=m.acc, val_recall=m.recall, val_precision=m.precision, val_f1=m.f1
            )
            if m.f1 > best_f1:
                best_f1 = m.f1
                best_state = copy.deepcopy(classifier.state_dict())
                stale = 0
            else:
                stale += 1
        history.append(record)
        if x_val is not None and stale >= tc.early_stop_patience:
            break

    if best_state is not None:
        classifier.load_state_dict(best_state)
    classifier.eval()
    return classifier, history


def predict(classifier: Classifier, fc_batch) -> tuple[np.ndarray, np.ndarray]:
    """Class predictions and softmax probabilities for a batch.

    Ties in the probabilities break toward the lower class index.
    """
    if isinstance(fc_batch, list):
        fc_batch = np.stack(
            [x.values if isinstance(x, FCMatrix) else np.asarray(x) for x in fc_batch]
        )
    classifier.eval()
    with torch.no_grad():
        logits = classifier(fc_batch)
        probs = torch.softmax(logits, dim=-1).cpu().numpy()
    preds = probs.argmax(axis=1)  # np.argmax returns the first (lowest) max index
    return preds, probs


def compute_metrics(predictions, truths, positive_label: Label) -> Metrics:
    """Accuracy, recall, precision, F1 with explicit zero-division rules.

    recall = 0 when there are no positive truths; precision = 0 when
    nothing was predicted positive; f1 = 0 when precision + recall = 0.
    """
    if len(predictions) != len(truths):
        raise ParameterError(f"length mismatch: {len(predictions)} vs {len(truths)}")
    if not predictions:
        raise ParameterError("empty predictions")
    tp = fp = fn = correct = 0
    for p, t in zip(predictions, truths):
        if p == t:
            correct += 1
        if p == positive_label and t == positive_label:
            tp += 1
        elif p == positive_label:
            fp += 1
        elif t == positive_label:
            fn += 1
    acc = correct / len(truths)
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics(acc=acc, recall=recall, precision=precision, f1=f1)


# ---------------------------------------------------------------------------
# checkpoints


def save_classifier(classifier: Classifier, path, extra: dict | None = None) -> None:
    """Archive: config fields plus named parameter/buffer arrays."""
    payload = {
        "kind": "classifier",
        "config": asdict(classifier.config),
        "state_dict": classifier.state_dict(),
    }
    if extra:
        payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_classifier(path, dtype=torch.float32) -> tuple[Classifier, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = ClassifierConfig(**payload["config"])
    clf = Classifier(config).to(dtype)
    clf.load_state_dict(payload["state_dict"])
    clf.eval()
    extra = {k: v for k, v in payload.items() if k not in ("kind", "config", "state_dict")}
    return clf, extra
