"""Training loop, evaluation and checkpoint I/O."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, Network, build_backbone, classify
from .data import Dataset, augment_batch, iter_batches
from .losses import LOSS_MODES, ClassWeights, class_weights_from_counts, training_loss
from .metrics import EvalReport, confusion_matrix, summarize
from .optim import Adam, NonFiniteGradientError, lr_at_epoch
from .serialize import decode_checkpoint, encode_checkpoint
from .tensor import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

ARCH_KEY = "__meta__/architecture"
EPOCH_KEY = "__meta__/epoch"
HISTORY_HEADER = "epoch,lr,train_loss,eval_acc,eval_min_class_acc,eval_max_class_acc"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_backbone: float = 1e-3
    lr_classifier: float = 5e-3
    weight_decay: float = 1e-4
    gamma: float = 0.9
    seed: int = 0
    loss_mode: str = "cucn"
    weights_scheme: str = "inv_freq"
    manual_weights: list[float] | None = None
    cbam_on: bool = True
    flip_prob: float = 0.5
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lr_backbone <= 0 or self.lr_classifier <= 0:
            raise ValueError("learning rates must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        self.weights_scheme = self.weights_scheme.replace("-", "_")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def full_scale_preset(**overrides) -> TrainConfig:
    """Full-scale schedule: 60 epochs, batch 256, Adam 1e-4 / 5e-4, decay 1e-4, gamma 0.9."""
    base = dict(epochs=60, batch_size=256, lr_backbone=1e-4, lr_classifier=5e-4,
                weight_decay=1e-4, gamma=0.9)
    base.update(overrides)
    return TrainConfig(**base)


def default_backbone(dataset: Dataset, cbam_on: bool = True, **overrides) -> BackboneConfig:
    ch, h, w = dataset.image_shape
    if h != w:
        raise ValueError("images must be square")
    kw = dict(input_size=h, in_channels=ch, num_classes=dataset.num_classes, cbam_on=cbam_on)
    kw.update(overrides)
    return BackboneConfig(**kw)


# --- checkpoints ----------------------------------------------------------


def checkpoint_bytes(net: Network, epoch: int) -> bytes:
    entries = dict(net.state_dict())
    meta = json.dumps(net.descriptor(), sort_keys=True).encode("utf-8")
    entries[ARCH_KEY] = np.frombuffer(meta, dtype=np.uint8)
    entries[EPOCH_KEY] = np.array([epoch], dtype=np.float64)
    return encode_checkpoint(entries)


def network_from_checkpoint(blob: bytes) -> Network:
    entries = decode_checkpoint(blob)
    if ARCH_KEY not in entries:
        raise ValueError("checkpoint lacks an architecture descriptor")
    desc = json.loads(entries.pop(ARCH_KEY).tobytes().decode("utf-8"))
    entries.pop(EPOCH_KEY, None)
    config = BackboneConfig(**desc["config"])
    some = next(iter(entries.values()))
    net, _ = build_backbone(config, np.random.default_rng(0), dtype=some.dtype)
    net.load_state_dict(entries)
    return net


def _as_network(checkpoint) -> Network:
    if isinstance(checkpoint, Network):
        return checkpoint
    if isinstance(checkpoint, (str, Path)):
        checkpoint = Path(checkpoint).read_bytes()
    return network_from_checkpoint(checkpoint)


# --- evaluation -----------------------------------------------------------


def predict(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = net.training
    net.eval()
    dtype = net.head.weight.dtype
    preds = []
    try:
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start : start + batch_size].astype(dtype, copy=False))
            logits = classify(net.features(x).mu, net.head)
            preds.append(logits.data.argmax(axis=1))
    finally:
        net.train(was_training)
    return np.concatenate(preds)


def evaluate(checkpoint, dataset: Dataset, batch_size: int = 256) -> EvalReport:
    """Per-class report on un-augmented data with batch norm in eval mode."""
    net = _as_network(checkpoint)
    if net.config.num_classes != dataset.num_classes:
        raise ValueError(
            f"model has {net.config.num_classes} classes, dataset has {dataset.num_classes}"
        )
    if dataset.image_shape[0] != net.config.in_channels:
        raise ValueError("channel count of dataset does not match the model")
    preds = predict(net, dataset.images, batch_size)
    return summarize(confusion_matrix(preds, dataset.labels, dataset.num_classes))


# --- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    network: Network
    checkpoint: bytes
    best_checkpoint: bytes
    best_epoch: int
    history: list[dict] = field(default_factory=list)

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def history_to_csv(history: list[dict]) -> str:
    lines = [HISTORY_HEADER]
    for row in history:
        lines.append(",".join([str(row["epoch"])] + [_fmt(row[k]) for k in HISTORY_HEADER.split(",")[1:]]))
    return "\n".join(lines) + "\n"


def resolve_weights(config: TrainConfig, counts) -> ClassWeights:
    return class_weights_from_counts(counts, config.weights_scheme, config.manual_weights)


def train(config: TrainConfig, dataset: Dataset, eval_dataset: Dataset | None = None,
          backbone: BackboneConfig | None = None, out_dir=None, dtype=np.float32) -> TrainResult:
    """Run the epoch loop; optionally write history.csv, final.cuck and best.cuck."""
    if backbone is None:
        backbone = default_backbone(dataset, config.cbam_on)
    if backbone.num_classes != dataset.num_classes:
        raise ValueError("backbone class count does not match the dataset")
    if eval_dataset is not None and eval_dataset.num_classes != dataset.num_classes:
        raise ValueError("train and eval datasets disagree on the class count")

    rng = np.random.default_rng(config.seed)
    net, _ = build_backbone(backbone, rng, dtype)
    weights = resolve_weights(config, dataset.class_counts)
    head_params = dict(net.head.named_parameters("head."))
    body_params = dict(net.backbone.named_parameters("backbone."))
    opt = Adam(
        [{"params": body_params, "lr": config.lr_backbone},
         {"params": head_params, "lr": config.lr_classifier}],
        weight_decay=config.weight_decay,
    )

    images = dataset.images.astype(dtype, copy=False)
    labels = dataset.labels
    history: list[dict] = []
    best_acc, best_epoch, best_blob = -1.0, 0, b""
    net.train()
    for epoch in range(config.epochs):
        opt.set_epoch(epoch, config.gamma)
        losses = []
        for step, idx in enumerate(iter_batches(len(dataset), config.batch_size, rng)):
            if len(idx) < 2:
                continue
            x = Tensor(augment_batch(images[idx], rng, config.flip_prob))
            try:
                bundle = net.features(x)
                loss = training_loss(bundle, net.head, labels[idx], weights, config.loss_mode, rng)
                opt.zero_grad()
                backward(loss)
                opt.step()
            except (NonFiniteError, NonFiniteGradientError) as exc:
                raise TrainingError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
            losses.append(float(loss.data))
        row = {"epoch": epoch, "lr": lr_at_epoch(config.lr_backbone, config.gamma, epoch),
               "train_loss": float(np.mean(losses)), "eval_acc": None,
               "eval_min_class_acc": None, "eval_max_class_acc": None}
        if eval_dataset is not None:
            report = evaluate(net, eval_dataset, config.eval_batch_size)
            row.update(eval_acc=report.overall_acc, eval_min_class_acc=report.min_class_acc,
                       eval_max_class_acc=report.max_class_acc)
            if report.overall_acc > best_acc:
                best_acc, best_epoch, best_blob = report.overall_acc, epoch, checkpoint_bytes(net, epoch)
        history.append(row)
        log.info("epoch %d loss %.5f eval_acc %s", epoch, row["train_loss"], row["eval_acc"])

    final = checkpoint_bytes(net, config.epochs - 1)
    if not best_blob:
        best_blob, best_epoch = final, config.epochs - 1
    result = TrainResult(net, final, best_blob, best_epoch, history)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.csv").write_text(result.history_csv(), encoding="utf-8")
        (out / "final.cuck").write_bytes(final)
        (out / "best.cuck").write_bytes(best_blob)
        cfg = {"train": asdict(config), "backbone": json.loads(backbone.to_json())}
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True), encoding="utf-8")
    return result
