"""Two-stage training: fit and freeze the stronger-modality source model, then
train the weaker-modality model against prediction, alignment and translation
losses."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import Dataset, DatasetError, SegmentClip
from .models import ClassifierConfig, DecoderConfig, EncoderConfig, SourceModel, WeakModel
from .numerics import ConfigError, NumericalError
from .objectives import (DccaConfig, LossWeights, alignment_loss, bce_loss, binary_accuracy,
                         ccc, mae_translation_loss, mse_loss, weighted_f1)

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no_lfa", "no_decoder")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, what: str):
        super().__init__(f"training diverged at epoch {epoch}: {what}")
        self.epoch = epoch


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied in place. Parameters whose gradient
    is missing (``None`` or absent) keep their values and moments."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ConfigError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


# -- configuration and reports ---------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    task: str = "classification"
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 20
    alpha: float = 1.0
    beta: float = 1.0
    dcca: DccaConfig = field(default_factory=DccaConfig)
    dropout_rate: float = 0.3
    seed: int = 0
    ablation: str = "none"
    mask_zero_frames: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.ablation == "no_lfa":
            object.__setattr__(self, "alpha", 0.0)
        if self.ablation == "no_decoder":
            object.__setattr__(self, "beta", 0.0)
        if isinstance(self.dcca, dict):
            object.__setattr__(self, "dcca", DccaConfig(**self.dcca))
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @property
    def selection_metric(self) -> str:
        return "acc" if self.task == "classification" else "ccc"


@dataclass
class EpochReport:
    epoch: int
    split: str
    loss_p: float | None = None
    loss_a: float | None = None
    loss_t: float | None = None
    loss_total: float | None = None
    acc: float | None = None
    f1: float | None = None
    ccc: float | None = None
    seconds: float = 0.0

    def record(self, run_id: str, stage: str) -> dict:
        return {"run_id": run_id, "stage": stage, **asdict(self)}


class MetricsStream:
    """Append-only JSON-lines sink; ``None`` path keeps records in memory only."""

    def __init__(self, path: str | Path | None, run_id: str):
        self.path = Path(path) if path is not None else None
        self.run_id = run_id
        self.records: list[dict] = []

    def write(self, stage: str, report: EpochReport | dict) -> None:
        rec = report.record(self.run_id, stage) if isinstance(report, EpochReport) else \
            {"run_id": self.run_id, "stage": stage, **report}
        self.records.append(rec)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


# -- batching ------------------------------------------------------------------

def make_batches(clips: list[SegmentClip], batch_size: int,
                 rng: np.random.Generator | None) -> list[list[SegmentClip]]:
    order = np.arange(len(clips)) if rng is None else rng.permutation(len(clips))
    return [[clips[i] for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]


def length_groups(batch: list[SegmentClip]) -> list[list[SegmentClip]]:
    # clips of different lengths are run separately rather than padded
    groups: dict[int, list[SegmentClip]] = {}
    for clip in batch:
        groups.setdefault(clip.n_segments, []).append(clip)
    return list(groups.values())


def stack(group: list[SegmentClip], modality: str) -> torch.Tensor:
    try:
        return torch.from_numpy(np.stack([c.features[modality] for c in group]).astype(np.float32))
    except KeyError:
        missing = next(c.clip_id for c in group if modality not in c.features)
        raise DatasetError(f"clip {missing}: modality {modality} missing") from None


def stack_labels(group: list[SegmentClip]) -> torch.Tensor:
    return torch.from_numpy(np.stack([c.labels for c in group]).astype(np.float32))


def prediction_loss(task: str, y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    return bce_loss(y, y_hat) if task == "classification" else mse_loss(y, y_hat)


# -- evaluation ------------------------------------------------------------------

def predict(model, clips: list[SegmentClip], modality: str,
            batch_size: int = 64) -> list[np.ndarray]:
    """Per-clip segment predictions in eval mode, in input order."""
    out: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for batch in make_batches(clips, batch_size, None):
            for group in length_groups(batch):
                x = stack(group, modality)
                if isinstance(model, WeakModel):
                    _, y_hat, _ = model(x, translate=False)
                else:
                    _, y_hat = model(x)
                for clip, row in zip(group, y_hat.numpy()):
                    out[clip.clip_id] = row
    return [out[c.clip_id] for c in clips]


def evaluate(model, clips: list[SegmentClip], task: str, modality: str) -> dict[str, float]:
    """Classification scores one prediction per clip (its final segment);
    regression scores a single CCC over all segments of the split."""
    if not clips:
        raise DatasetError("cannot evaluate an empty split")
    preds = predict(model, clips, modality)
    if task == "classification":
        y = np.array([c.labels[-1] for c in clips])
        p = np.array([row[-1] for row in preds])
        return {"acc": binary_accuracy(y, p), "f1": weighted_f1(y, (p >= 0.5).astype(int))}
    y = np.concatenate([c.labels for c in clips])
    p = np.concatenate(preds)
    try:
        score = ccc(y, p)
    except ValueError:
        score = 0.0
    return {"ccc": score}


# -- training loop ------------------------------------------------------------

BatchLoss = Callable[[list[SegmentClip], bool, "torch.Generator | None"],
                     tuple[torch.Tensor, dict[str, float]]]


def _fit(model, trainable: dict[str, torch.Tensor], batch_loss: BatchLoss,
         train: list[SegmentClip], dev: list[SegmentClip], evaluate_dev: Callable[[], dict],
         config: TrainConfig, stage: str, stream: MetricsStream | None):
    if not train:
        raise DatasetError("training split is empty")
    batch_rng = np.random.default_rng(config.seed)
    drop_rng = torch.Generator().manual_seed(config.seed)
    state = AdamState(lr=config.lr)
    key = config.selection_metric
    best_score, best_state, best_epoch, stale = -math.inf, None, -1, 0
    history: list[EpochReport] = []

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        batches = make_batches(train, config.batch_size, batch_rng)
        for batch in batches:
            for p in trainable.values():
                p.grad = None
            loss, parts = batch_loss(batch, True, drop_rng)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, f"batch loss {loss.item()}")
            loss.backward()
            try:
                adam_step(trainable, {n: p.grad for n, p in trainable.items()}, state)
            except NumericalError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        train_report = EpochReport(epoch, "train", **{k: v / len(batches) for k, v in sums.items()})
        train_report.seconds = time.perf_counter() - t0

        dev_report = EpochReport(epoch, "dev")
        if dev:
            with torch.no_grad():
                dsums: dict[str, float] = {}
                dbatches = make_batches(dev, config.batch_size, None)
                for batch in dbatches:
                    _, parts = batch_loss(batch, False, None)
                    for k, v in parts.items():
                        dsums[k] = dsums.get(k, 0.0) + v
            for k, v in dsums.items():
                setattr(dev_report, k, v / len(dbatches))
            for k, v in evaluate_dev().items():
                setattr(dev_report, k, v)
        dev_report.seconds = time.perf_counter() - t0
        history += [train_report, dev_report]
        if stream is not None:
            stream.write(stage, train_report)
            if dev:
                stream.write(stage, dev_report)

        score = getattr(dev_report, key) if dev else -train_report.loss_total
        if score is not None and score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                log.info("%s: early stop at epoch %d (best %d)", stage, epoch, best_epoch)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return history, best_epoch


def train_source(dataset: Dataset, config: TrainConfig, modality: str,
                 encoder_cfg: EncoderConfig | None = None,
                 stream: MetricsStream | None = None, stage: str = "source",
                 freeze: bool = True, classifier_cfg: ClassifierConfig | None = None):
    """Fit an encoder + classifier on one modality by prediction loss alone.

    Returns ``(model, history)``; the model holds the best-dev-epoch weights
    and is frozen unless ``freeze`` is false (uni-modal baselines)."""
    if modality not in dataset.modalities:
        raise DatasetError(f"modality {modality!r} not in dataset {sorted(dataset.modalities)}")
    encoder_cfg = encoder_cfg or EncoderConfig(dataset.modalities[modality],
                                               dropout_rate=config.dropout_rate)
    model = SourceModel(encoder_cfg, config.task, seed=config.seed, classifier_cfg=classifier_cfg)
    trainable = dict(model.named_parameters())
    task = config.task

    def batch_loss(batch, train_mode, rng):
        ys, yh = [], []
        for group in length_groups(batch):
            _, y_hat = model(stack(group, modality), train_mode, rng)
            ys.append(stack_labels(group).reshape(-1))
            yh.append(y_hat.reshape(-1))
        lp = prediction_loss(task, torch.cat(ys), torch.cat(yh))
        return lp, {"loss_p": lp.item(), "loss_total": lp.item()}

    dev = dataset.splits.get("dev", [])
    history, _ = _fit(model, trainable, batch_loss, dataset.split("train"), dev,
                      lambda: evaluate(model, dev, task, modality), config, stage, stream)
    model.modality = modality
    if freeze:
        model.freeze()
    return model, history


def source_latents(source: SourceModel, clips: list[SegmentClip], modality: str,
                   batch_size: int = 64) -> dict[str, torch.Tensor]:
    """Frozen strong-modality latent sequences keyed by clip id."""
    out = {}
    with torch.no_grad():
        for batch in make_batches(clips, batch_size, None):
            for group in length_groups(batch):
                latent = source.encode(stack(group, modality))
                for clip, row in zip(group, latent):
                    out[clip.clip_id] = row
    return out


def train_weak(dataset: Dataset, source: SourceModel, config: TrainConfig,
               weak_modality: str, strong_modality: str,
               encoder_cfg: EncoderConfig | None = None,
               decoder_cfg: DecoderConfig | None = None,
               stream: MetricsStream | None = None, stage: str = "weak",
               classifier_cfg: ClassifierConfig | None = None):
    """Train the weaker-modality model with ``L_p + alpha*L_a + beta*L_t``.

    The source model is only read: its latents are computed once per clip with
    gradients disabled. With the ``no_decoder`` ablation the model carries no
    decoder at all. Returns ``(model, history)``.
    """
    if not source.frozen:
        raise ConfigError("the source model must be frozen before weak-model training")
    for m in (weak_modality, strong_modality):
        if m not in dataset.modalities:
            raise DatasetError(f"modality {m!r} not in dataset {sorted(dataset.modalities)}")
    encoder_cfg = encoder_cfg or EncoderConfig(dataset.modalities[weak_modality],
                                               dropout_rate=config.dropout_rate)
    if encoder_cfg.latent_dim != source.encoder.cfg.latent_dim:
        raise ConfigError(f"weak latent width {encoder_cfg.latent_dim} != source "
                          f"latent width {source.encoder.cfg.latent_dim}")
    if config.ablation == "no_decoder":
        decoder_cfg = None
    else:
        decoder_cfg = decoder_cfg or DecoderConfig(dataset.modalities[strong_modality],
                                                   latent_dim=encoder_cfg.latent_dim,
                                                   dropout_rate=config.dropout_rate)
    model = WeakModel(encoder_cfg, config.task, decoder_cfg, seed=config.seed,
                      classifier_cfg=classifier_cfg)
    trainable = dict(model.named_parameters())
    task, alpha, beta = config.task, config.alpha, config.beta
    min_samples = encoder_cfg.latent_dim + 1
    train, dev = dataset.split("train"), dataset.splits.get("dev", [])
    targets = source_latents(source, train + dev, strong_modality) if alpha > 0 else {}
    translate = beta > 0 and model.decoder is not None

    def batch_loss(batch, train_mode, rng):
        ys, yh, lat_w, lat_s, xs, xs_hat = [], [], [], [], [], []
        for group in length_groups(batch):
            latent, y_hat, recon = model(stack(group, weak_modality), train_mode, rng, translate)
            ys.append(stack_labels(group).reshape(-1))
            yh.append(y_hat.reshape(-1))
            if alpha > 0:
                lat_w.append(latent.reshape(-1, latent.shape[-1]))
                lat_s.append(torch.stack([targets[c.clip_id] for c in group]).reshape(-1, latent.shape[-1]))
            if translate:
                target = stack(group, strong_modality)
                if config.mask_zero_frames:
                    keep = target.abs().sum(-1, keepdim=True) > 0
                    recon = recon * keep
                xs.append(target.reshape(-1))
                xs_hat.append(recon.reshape(-1))
        lp = prediction_loss(task, torch.cat(ys), torch.cat(yh))
        loss = lp
        parts = {"loss_p": lp.item(), "loss_a": 0.0, "loss_t": 0.0}
        if alpha > 0:
            hw = torch.cat(lat_w)
            if hw.shape[0] >= min_samples:
                la = alignment_loss(torch.cat(lat_s), hw, config.dcca)
                loss = loss + alpha * la
                parts["loss_a"] = la.item()
            else:
                log.info("batch of %d segments is too small for DCCA; alignment term skipped",
                         hw.shape[0])
        if translate:
            lt = mae_translation_loss(torch.cat(xs), torch.cat(xs_hat))
            loss = loss + beta * lt
            parts["loss_t"] = lt.item()
        parts["loss_total"] = parts["loss_p"] + alpha * parts["loss_a"] + beta * parts["loss_t"]
        return loss, parts

    history, _ = _fit(model, trainable, batch_loss, train, dev,
                      lambda: evaluate(model, dev, task, weak_modality), config, stage, stream)
    model.modality = weak_modality
    return model, history
