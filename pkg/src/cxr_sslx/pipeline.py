"""Stage orchestration: self-supervised pre-training, classifier attachment,
supervised fine-tuning, per-epoch evaluation, and last-k aggregation.

Checkpoint blob naming:
    online.encoder.backbone.*   the transferable weights
    online.encoder.projector.*  projection MLP (pre-training only)
    online.predictor.*          predictor MLP (pre-training only)
    target.*                    moving-average branch (pre-training only)
    backbone.* / head.*         fine-tuned classifier
    optim.*                     SGD momentum buffers, for exact resume

The three published pipeline variants are configurations of the same code
path: init_mode "scratch" skips both pre-training stages, "transfer" skips
the self-supervised stage, "transfer_ssl" chains both.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cxr_sslx import backbones, seeding
from cxr_sslx.augment import AugmentationPolicy, make_view_pair
from cxr_sslx.checkpoint import (CheckpointEnvelope, STAGE_EXTERNAL,
                                 STAGE_FINETUNED, STAGE_SSL)
from cxr_sslx.config import TrainConfig
from cxr_sslx.data import (TEST, TRAIN, DatasetManifest, assert_disjoint_splits,
                           load_image, stratified_subsample)
from cxr_sslx.errors import CheckpointError, ConfigError, DataError, NumericalError
from cxr_sslx.metrics import EvalReport, evaluate_predictions
from cxr_sslx.ssl_core import (ParameterSet, init_from_transfer,
                               sgd_with_decay_groups, ssl_step,
                               validate_backbone_blobs)

EVAL_BATCH = 256


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    eval: EvalReport


class ClassifierModel(nn.Module):
    """Backbone feature vector feeding a linear classification head."""

    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int,
                 cam_layer_path: Optional[str] = None):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, num_classes)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        # dotted path under self.backbone; a string so it never shows up
        # in the state dict
        self.cam_layer_path = cam_layer_path

    def forward(self, x):
        return self.head(self.backbone(x))


def _normalize(batch: np.ndarray, config: TrainConfig) -> np.ndarray:
    return (batch - config.input_mean) / config.input_std


def _batched(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def _named_grad_params(module: nn.Module) -> list:
    return [(name, p) for name, p in module.named_parameters() if p.requires_grad]


def _optimizer_blobs(optimizer: torch.optim.Optimizer,
                     named_params: list) -> dict:
    blobs = {}
    for name, param in named_params:
        state = optimizer.state.get(param, {})
        buf = state.get("momentum_buffer")
        if buf is not None:
            blobs["optim." + name] = buf.detach().cpu().numpy().copy()
    return blobs


def _restore_optimizer(optimizer: torch.optim.Optimizer, named_params: list,
                       blobs: ParameterSet) -> None:
    for name, param in named_params:
        key = "optim." + name
        if key in blobs.blobs:
            buf = torch.as_tensor(blobs.blobs[key]).to(param.dtype)
            if buf.shape != param.shape:
                raise CheckpointError(
                    f"optimizer buffer {key!r} has shape {tuple(buf.shape)}, "
                    f"expected {tuple(param.shape)}")
            optimizer.state[param] = {"momentum_buffer": buf}


def run_ssl_pretraining(config: TrainConfig, manifest: DatasetManifest,
                        backbone_weights: Optional[CheckpointEnvelope] = None,
                        resume_from: Optional[CheckpointEnvelope] = None,
                        ) -> tuple[CheckpointEnvelope, list]:
    """Self-supervised pre-training over the train split.

    Labels never enter this stage: only the manifest's path view is used.
    Returns the checkpoint envelope and the per-epoch mean loss trajectory.
    """
    seeding.apply_determinism()
    if config.init_mode not in ("transfer_ssl", "ssl_only"):
        raise ConfigError(
            f"init_mode must be 'transfer_ssl' or 'ssl_only' for pre-training, "
            f"got {config.init_mode!r}")
    if config.init_mode == "transfer_ssl" and backbone_weights is None and resume_from is None:
        raise ConfigError("init_mode 'transfer_ssl' needs external backbone weights")
    if config.init_mode == "ssl_only" and backbone_weights is not None:
        raise ConfigError("init_mode 'ssl_only' does not take backbone weights")

    # label-stripped view of the train split; labels cannot leak in
    train_paths = manifest.unlabeled_paths(TRAIN)
    assert_disjoint_splits(train_paths, (r.path for r in manifest.by_split(TEST)))
    if len(train_paths) < 2:
        raise DataError(f"need at least 2 train images, found {len(train_paths)}")

    online, target = init_from_transfer(
        config, backbone_weights if resume_from is None else None)
    start_epoch = 0
    if resume_from is not None:
        if resume_from.stage != STAGE_SSL:
            raise CheckpointError(
                f"cannot resume pre-training from stage {resume_from.stage!r}")
        resume_from.blobs.subset("online.").apply_to_module(online)
        resume_from.blobs.subset("target.").apply_to_module(target)
        start_epoch = resume_from.epoch

    optimizer = sgd_with_decay_groups([online], config.learning_rate,
                                      config.momentum, config.weight_decay)
    named = _named_grad_params(online)
    if resume_from is not None:
        _restore_optimizer(optimizer, named, resume_from.blobs)

    policy = AugmentationPolicy.from_config(config)
    losses = []
    online.train()
    for epoch in range(start_epoch, config.ssl_epochs):
        rng = seeding.derive_rng(config.seed, seeding.SHUFFLE_SSL, epoch)
        order = rng.permutation(len(train_paths))
        loss_sum, n_seen = 0.0, 0
        for b, batch_idx in enumerate(_batched(len(order), config.batch_size)):
            sample_ids = order[batch_idx]
            if len(sample_ids) < 2:
                continue  # batch statistics need at least 2 samples
            v1s, v2s = [], []
            for sid in sample_ids.tolist():
                image = load_image(train_paths[sid])
                pair = make_view_pair(
                    image, policy,
                    seed=seeding.derive_seed(config.seed, seeding.AUGMENT,
                                             epoch, sid))
                v1s.append(pair.v1)
                v2s.append(pair.v2)
            v1 = _normalize(np.stack(v1s), config)
            v2 = _normalize(np.stack(v2s), config)
            loss = ssl_step(online, target, v1, v2, optimizer, config.tau,
                            loss_variant=config.loss_variant,
                            batch_id=f"epoch {epoch + 1} batch {b}")
            loss_sum += loss.total * len(sample_ids)
            n_seen += len(sample_ids)
        if n_seen == 0:
            raise DataError("no usable batches; batch size or dataset too small")
        losses.append(loss_sum / n_seen)

    blobs = {}
    blobs.update(ParameterSet.from_module(online, prefix="online.").blobs)
    blobs.update(ParameterSet.from_module(target, prefix="target.").blobs)
    blobs.update(_optimizer_blobs(optimizer, named))
    envelope = CheckpointEnvelope(stage=STAGE_SSL, config=config,
                                  epoch=config.ssl_epochs,
                                  blobs=ParameterSet(blobs))
    return envelope, losses


def attach_classifier(backbone_checkpoint: Optional[CheckpointEnvelope],
                      num_classes: int,
                      config: Optional[TrainConfig] = None) -> ClassifierModel:
    """Build a classifier from a checkpoint's backbone (or from scratch).

    Projector and predictor blobs are discarded; the head is freshly
    initialized from the config seed, so two attachments with the same
    seed start identical.
    """
    if config is None:
        if backbone_checkpoint is None:
            raise ConfigError("scratch initialization needs an explicit config")
        config = backbone_checkpoint.config
    with seeding.torch_seeded(seeding.derive_seed(config.seed, seeding.INIT_BACKBONE)):
        backbone, feature_dim = backbones.make_backbone(config.backbone)
    if backbone_checkpoint is not None:
        stage = backbone_checkpoint.stage
        if stage == STAGE_SSL:
            blobs = backbone_checkpoint.blobs.subset("online.encoder.backbone.")
        elif stage == STAGE_EXTERNAL:
            blobs = backbone_checkpoint.blobs
        elif stage == STAGE_FINETUNED:
            blobs = backbone_checkpoint.blobs.subset("backbone.")
        else:
            raise CheckpointError(f"cannot attach a classifier to stage {stage!r}")
        validate_backbone_blobs(blobs, backbone)
        blobs.apply_to_module(backbone)
    with seeding.torch_seeded(seeding.derive_seed(config.seed, seeding.INIT_HEAD)):
        model = ClassifierModel(backbone, feature_dim, num_classes,
                                cam_layer_path=backbones.get_spec(config.backbone).cam_layer)
    return model


def load_resized_gray(path: str, size: int) -> np.ndarray:
    image = load_image(path, channels_expected=1)[0]
    if image.shape != (size, size):
        image = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
    return image.astype(np.float32)


def preload_images(records: Sequence, size: int, classes: tuple) -> tuple:
    """Decode and resize once; returns (images (N, H, W), label indices)."""
    class_index = {c: i for i, c in enumerate(classes)}
    images = np.empty((len(records), size, size), dtype=np.float32)
    labels = np.empty(len(records), dtype=np.int64)
    for i, rec in enumerate(records):
        images[i] = load_resized_gray(rec.path, size)
        labels[i] = class_index[rec.class_label]
    return images, labels


def to_model_input(gray_batch: np.ndarray, config: TrainConfig) -> torch.Tensor:
    batch = np.repeat(gray_batch[:, None, :, :], 3, axis=1)
    return torch.as_tensor(_normalize(batch, config), dtype=torch.float32)


def evaluate_model(model: ClassifierModel, images: np.ndarray,
                   labels: np.ndarray, config: TrainConfig,
                   classes: tuple) -> EvalReport:
    """Run the model over a preloaded evaluation set."""
    model.eval()
    preds, scores = [], []
    positive = "COVID" if "COVID" in classes else classes[0]
    p_idx = classes.index(positive)
    with torch.no_grad():
        for idx in _batched(len(images), EVAL_BATCH):
            logits = model(to_model_input(images[idx], config))
            probs = F.softmax(logits, dim=1).numpy()
            preds.append(np.argmax(probs, axis=1))
            scores.append(probs[:, p_idx])
    return evaluate_predictions(labels, np.concatenate(preds),
                                np.concatenate(scores), classes=classes,
                                positive_class=positive)


def run_finetune(config: TrainConfig, manifest: DatasetManifest,
                 init: Optional[CheckpointEnvelope] = None,
                 resume_from: Optional[CheckpointEnvelope] = None,
                 ) -> tuple[list, CheckpointEnvelope]:
    """Supervised fine-tuning of the whole backbone plus a fresh head.

    The configured label fraction is drawn stratified from the train split;
    every epoch is evaluated on the full test split. Returns the per-epoch
    logs and the final checkpoint.
    """
    seeding.apply_determinism()
    classes = manifest.classes
    if not classes:
        raise DataError("manifest has no records")
    working = stratified_subsample(manifest, config.label_fraction, config.seed)
    train_records = working.by_split(TRAIN)
    test_records = working.by_split(TEST)
    assert_disjoint_splits((r.path for r in train_records),
                           (r.path for r in test_records))
    if len(train_records) < 2:
        raise DataError(f"need at least 2 training images, found {len(train_records)}")
    if not test_records:
        raise DataError("test split is empty")
    config = config.replace(class_names=classes)

    model = attach_classifier(init if resume_from is None else None,
                              len(classes), config)
    start_epoch = 0
    if resume_from is not None:
        if resume_from.stage != STAGE_FINETUNED:
            raise CheckpointError(
                f"cannot resume fine-tuning from stage {resume_from.stage!r}")
        model_blobs = ParameterSet({k: v for k, v in resume_from.blobs.blobs.items()
                                    if not k.startswith("optim.")})
        model_blobs.apply_to_module(model)
        start_epoch = resume_from.epoch

    optimizer = sgd_with_decay_groups([model], config.learning_rate,
                                      config.momentum, config.weight_decay)
    named = _named_grad_params(model)
    if resume_from is not None:
        _restore_optimizer(optimizer, named, resume_from.blobs)

    size = config.finetune_image_size
    train_images, train_labels = preload_images(train_records, size, classes)
    test_images, test_labels = preload_images(test_records, size, classes)

    logs = []
    for epoch in range(start_epoch, config.finetune_epochs):
        model.train()
        rng = seeding.derive_rng(config.seed, seeding.SHUFFLE_FINETUNE, epoch)
        order = rng.permutation(len(train_records))
        loss_sum, n_seen = 0.0, 0
        for b, batch_idx in enumerate(_batched(len(order), config.batch_size)):
            sample_ids = order[batch_idx]
            if len(sample_ids) < 2:
                continue  # batch statistics need at least 2 samples
            inputs = to_model_input(train_images[sample_ids], config)
            targets = torch.as_tensor(train_labels[sample_ids])
            logits = model(inputs)
            loss_t = F.cross_entropy(logits, targets)
            loss = float(loss_t.detach())
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss {loss} at epoch {epoch + 1} batch {b}")
            optimizer.zero_grad(set_to_none=True)
            loss_t.backward()
            for name, p in named:
                if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                    raise NumericalError(
                        f"non-finite gradient in {name!r} at epoch {epoch + 1} "
                        f"batch {b}")
            optimizer.step()
            loss_sum += loss * len(sample_ids)
            n_seen += len(sample_ids)
        if n_seen == 0:
            raise DataError("no usable batches; batch size or dataset too small")
        report = evaluate_model(model, test_images, test_labels, config, classes)
        logs.append(EpochLog(epoch=epoch + 1, train_loss=loss_sum / n_seen,
                             eval=report))

    blobs = dict(ParameterSet.from_module(model).blobs)
    blobs.update(_optimizer_blobs(optimizer, named))
    envelope = CheckpointEnvelope(stage=STAGE_FINETUNED, config=config,
                                  epoch=config.finetune_epochs,
                                  blobs=ParameterSet(blobs))
    return logs, envelope


def classifier_from_envelope(envelope: CheckpointEnvelope) -> ClassifierModel:
    """Rebuild the fine-tuned classifier a checkpoint describes."""
    if envelope.stage != STAGE_FINETUNED:
        raise CheckpointError(
            f"need a finetuned checkpoint, got stage {envelope.stage!r}")
    config = envelope.config
    model = attach_classifier(None, len(config.class_names), config)
    model_blobs = ParameterSet({k: v for k, v in envelope.blobs.blobs.items()
                                if not k.startswith("optim.")})
    model_blobs.apply_to_module(model)
    return model


def aggregate_last_k(logs: Sequence, k: int) -> dict:
    """Mean and population variance of each scalar metric over the final k
    entries. Accepts EpochLog objects or plain dicts of scalars."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(logs):
        raise ValueError(f"k={k} exceeds the {len(logs)} available epochs")
    rows = [_scalars_of(entry) for entry in logs[-k:]]
    out = {}
    for key in rows[0]:
        values = np.array([row[key] for row in rows], dtype=np.float64)
        out[key] = (float(values.mean()), float(values.var()))
    return out


def _scalars_of(entry) -> dict:
    if isinstance(entry, EpochLog):
        return {"loss": entry.train_loss, **entry.eval.scalars()}
    return {key: float(value) for key, value in entry.items()
            if key not in ("epoch",)}


def format_epoch_log(log: EpochLog) -> str:
    scalars = log.eval.scalars()
    fields = [f"epoch={log.epoch}", f"loss={log.train_loss:.6f}"]
    fields += [f"{key}={scalars[key]:.6f}" for key in ("sen", "spe", "hm", "auc", "acc")]
    return "\t".join(fields)


def parse_epoch_logs(text: str) -> list:
    """Parse epoch log lines back into dicts of scalars."""
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        row = {}
        for token in line.split():
            key, _, value = token.partition("=")
            row[key] = int(value) if key == "epoch" else float(value)
        rows.append(row)
    return rows


def backbone_envelope_from(source, config: Optional[TrainConfig] = None,
                           ) -> CheckpointEnvelope:
    """Repackage backbone weights as an external-backbone envelope.

    Accepts a pre-training or fine-tuning envelope, a ClassifierModel, or a
    bare backbone module. This is how stage-one weights (e.g. natural-image
    pre-training) enter the pipeline.
    """
    if isinstance(source, CheckpointEnvelope):
        config = config or source.config
        if source.stage == STAGE_EXTERNAL:
            blobs = source.blobs
        elif source.stage == STAGE_SSL:
            blobs = source.blobs.subset("online.encoder.backbone.")
        elif source.stage == STAGE_FINETUNED:
            blobs = source.blobs.subset("backbone.")
        else:
            raise CheckpointError(f"cannot extract a backbone from stage "
                                  f"{source.stage!r}")
    elif isinstance(source, ClassifierModel):
        if config is None:
            raise ConfigError("a config is required alongside a bare model")
        blobs = ParameterSet.from_module(source.backbone)
    elif isinstance(source, nn.Module):
        if config is None:
            raise ConfigError("a config is required alongside a bare module")
        blobs = ParameterSet.from_module(source)
    else:
        raise TypeError(f"cannot extract a backbone from {type(source)!r}")
    return CheckpointEnvelope(stage=STAGE_EXTERNAL, config=config, epoch=0,
                              blobs=blobs)
