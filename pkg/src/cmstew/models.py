"""Encoder, classifier and decoder assemblies for the source (stronger
modality) and weak (weaker modality) models, checkpoint IO and modality
ranking."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .layers import BiGRU, Dense, TransformerEncoderLayer, dropout, sinusoidal_positions
from .numerics import ConfigError, DimensionError

log = logging.getLogger(__name__)

TASKS = ("classification", "regression")
CHECKPOINT_MAGIC = "CMSTEW-CHECKPOINT"
CHECKPOINT_VERSION = 1
# decoder weights come from a separate stream so that the encoder/classifier
# initialisation is the same with or without a decoder
DECODER_SEED_OFFSET = 7919


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    gru_layers: int = 2
    gru_hidden: int | None = None  # per direction; None means input_dim
    latent_dim: int = 100
    transformer_layers: int = 2
    heads: int = 2
    ffn_dims: tuple[int, int] = (400, 100)
    dropout_rate: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "ffn_dims", tuple(self.ffn_dims))
        if self.gru_hidden is None:
            object.__setattr__(self, "gru_hidden", self.input_dim)
        if self.latent_dim % 2:
            raise ConfigError(f"latent_dim must be even, got {self.latent_dim}")
        if self.latent_dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide latent_dim {self.latent_dim}")
        if self.ffn_dims[-1] != self.latent_dim:
            raise ConfigError("second feed-forward width must equal latent_dim")
        if self.gru_layers not in (1, 2):
            raise ConfigError("gru_layers must be 1 or 2")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate outside [0, 1)")


@dataclass(frozen=True)
class ClassifierConfig:
    latent_dim: int = 100
    hidden: int = 300
    dropout_rate: float = 0.3


@dataclass(frozen=True)
class DecoderConfig:
    output_dim: int
    latent_dim: int = 100
    gru_layers: int = 2
    gru_hidden: int | None = None  # None means output_dim
    dropout_rate: float = 0.3

    def __post_init__(self):
        if self.gru_hidden is None:
            object.__setattr__(self, "gru_hidden", self.output_dim)
        if self.gru_layers not in (1, 2):
            raise ConfigError("decoder gru_layers must be 1 or 2")


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.gru = BiGRU(cfg.input_dim, cfg.gru_hidden, cfg.gru_layers, cfg.dropout_rate, gen)
        self.proj = Dense(2 * cfg.gru_hidden, cfg.latent_dim, "none", gen)
        self.transformer = nn.ModuleList(
            TransformerEncoderLayer(cfg.latent_dim, cfg.heads, cfg.ffn_dims, cfg.dropout_rate, gen)
            for _ in range(cfg.transformer_layers))

    def forward(self, x, train_mode=False, rng=None):
        if x.shape[-1] != self.cfg.input_dim:
            raise DimensionError(
                f"encoder expects width {self.cfg.input_dim}, got {x.shape[-1]}")
        h = self.proj(self.gru(x, train_mode, rng))
        h = h + sinusoidal_positions(h.shape[-2], h.shape[-1], h.dtype)
        for layer in self.transformer:
            h = layer(h, train_mode, rng)
        return h


class Classifier(nn.Module):
    def __init__(self, cfg: ClassifierConfig, task: str, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.hidden = Dense(cfg.latent_dim, cfg.hidden, "relu", gen)
        self.out = Dense(cfg.hidden, 1, "sigmoid" if task == "classification" else "tanh", gen)

    def forward(self, latent, train_mode=False, rng=None):
        if latent.shape[-1] != self.cfg.latent_dim:
            raise DimensionError(
                f"classifier expects width {self.cfg.latent_dim}, got {latent.shape[-1]}")
        h = dropout(self.hidden(latent), self.cfg.dropout_rate, train_mode, rng)
        return self.out(h).squeeze(-1)


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.gru = BiGRU(cfg.latent_dim, cfg.gru_hidden, cfg.gru_layers, cfg.dropout_rate, gen)
        self.proj = Dense(2 * cfg.gru_hidden, cfg.output_dim, "none", gen)

    def forward(self, latent, train_mode=False, rng=None):
        if latent.shape[-1] != self.cfg.latent_dim:
            raise DimensionError(
                f"decoder expects width {self.cfg.latent_dim}, got {latent.shape[-1]}")
        return self.proj(self.gru(latent, train_mode, rng))


def _check_task(task: str) -> None:
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")


class SourceModel(nn.Module):
    """Encoder + classifier for one modality. Also serves as the uni-modal
    baseline for any modality."""

    kind = "source"

    def __init__(self, encoder_cfg: EncoderConfig, task: str, seed: int = 0,
                 classifier_cfg: ClassifierConfig | None = None):
        super().__init__()
        _check_task(task)
        classifier_cfg = classifier_cfg or ClassifierConfig(encoder_cfg.latent_dim)
        gen = torch.Generator().manual_seed(seed)
        self.task = task
        self.encoder = Encoder(encoder_cfg, gen)
        self.classifier = Classifier(classifier_cfg, task, gen)
        self.frozen = False
        self.modality: str | None = None

    def forward(self, x, train_mode=False, rng=None):
        latent = self.encoder(x, train_mode, rng)
        return latent, self.classifier(latent, train_mode, rng)

    def freeze(self) -> "SourceModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def encode(self, x) -> torch.Tensor:
        """Latent sequence in eval mode; no graph is built once frozen."""
        if self.frozen:
            with torch.no_grad():
                return self.encoder(x)
        return self.encoder(x)

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder.cfg), "classifier": asdict(self.classifier.cfg),
                "decoder": None}


class WeakModel(nn.Module):
    """Encoder + classifier for the weaker modality, plus an optional decoder
    translating its latents into the stronger modality's feature space."""

    kind = "weak"

    def __init__(self, encoder_cfg: EncoderConfig, task: str,
                 decoder_cfg: DecoderConfig | None, seed: int = 0,
                 classifier_cfg: ClassifierConfig | None = None):
        super().__init__()
        _check_task(task)
        classifier_cfg = classifier_cfg or ClassifierConfig(encoder_cfg.latent_dim)
        gen = torch.Generator().manual_seed(seed)
        self.task = task
        self.encoder = Encoder(encoder_cfg, gen)
        self.classifier = Classifier(classifier_cfg, task, gen)
        if decoder_cfg is not None:
            if decoder_cfg.latent_dim != encoder_cfg.latent_dim:
                raise ConfigError("decoder latent_dim must match the encoder")
            dec_gen = torch.Generator().manual_seed(seed + DECODER_SEED_OFFSET)
            self.decoder = Decoder(decoder_cfg, dec_gen)
        else:
            self.decoder = None
        self.frozen = False
        self.modality: str | None = None

    def forward(self, x, train_mode=False, rng=None, translate=True):
        """Returns ``(latent, y_hat, xs_hat)``; ``xs_hat`` is ``None`` unless a
        translation is requested and a decoder exists."""
        latent = self.encoder(x, train_mode, rng)
        y_hat = self.classifier(latent, train_mode, rng)
        xs_hat = None
        if translate and self.decoder is not None:
            xs_hat = self.decoder(latent, train_mode, rng)
        return latent, y_hat, xs_hat

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder.cfg), "classifier": asdict(self.classifier.cfg),
                "decoder": asdict(self.decoder.cfg) if self.decoder is not None else None}

    def deployable(self) -> SourceModel:
        """The inference artifact: encoder and classifier only."""
        model = SourceModel(self.encoder.cfg, self.task, classifier_cfg=self.classifier.cfg)
        model.encoder.load_state_dict(self.encoder.state_dict())
        model.classifier.load_state_dict(self.classifier.state_dict())
        model.modality = self.modality
        return model


def weak_forward(xw, model: WeakModel, train_mode=False, rng=None, translate=True):
    return model(xw, train_mode, rng, translate)


def parameter_count(encoder_cfg: EncoderConfig, classifier_cfg: ClassifierConfig | None = None) -> int:
    """Closed-form number of scalars in an encoder + classifier."""
    c = encoder_cfg
    H = c.gru_hidden
    n = 0
    width = c.input_dim
    for _ in range(c.gru_layers):
        n += 2 * (3 * (width * H + H * H) + 4 * H)
        width = 2 * H
    n += 2 * H * c.latent_dim + c.latent_dim
    d = c.latent_dim
    f1, f2 = c.ffn_dims
    per_layer = 4 * d * d + (d * f1 + f1) + (f1 * f2 + f2) + 4 * d
    n += c.transformer_layers * per_layer
    k = classifier_cfg or ClassifierConfig(d)
    n += k.latent_dim * k.hidden + k.hidden + k.hidden + 1
    return n


# -- checkpoints ---------------------------------------------------------------

def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def save_checkpoint(model: SourceModel | WeakModel, path: str | Path) -> Path:
    """Text manifest, then float32 little-endian parameter values in manifest
    order, then an 8-byte BLAKE2b checksum of those values."""
    path = Path(path)
    params = list(model.named_parameters())
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             f"kind {model.kind}",
             f"task {model.task}",
             f"modality {model.modality or '-'}",
             "config " + json.dumps(model.config_dict(), sort_keys=True),
             f"params {len(params)}"]
    chunks = []
    for name, p in params:
        lines.append(f"param {name} {','.join(str(s) for s in p.shape)}")
        chunks.append(p.detach().cpu().numpy().astype("<f4").tobytes(order="C"))
    payload = b"".join(chunks)
    lines.append(f"payload {len(payload)}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload + _checksum(payload))
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> SourceModel | WeakModel:
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{path}: manifest terminator not found")
    header = raw[:end].decode("utf-8").split("\n")
    body = raw[end + len(b"\nend\n"):]
    magic, version = header[0].split()
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint header {header[0]!r}")
    fields = {}
    shapes = []
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "param":
            name, dims = rest.split(" ")
            shapes.append((name, tuple(int(s) for s in dims.split(",")) if dims else ()))
        else:
            fields[key] = rest
    size = int(fields["payload"])
    payload, tail = body[:size], body[size:]
    if len(payload) != size or tail != _checksum(payload):
        raise CheckpointError(f"{path}: checksum mismatch or truncated payload")

    cfg = json.loads(fields["config"])
    enc = EncoderConfig(**cfg["encoder"])
    clf = ClassifierConfig(**cfg["classifier"])
    if fields["kind"] == "source":
        model = SourceModel(enc, fields["task"], classifier_cfg=clf)
    else:
        dec = DecoderConfig(**cfg["decoder"]) if cfg["decoder"] else None
        model = WeakModel(enc, fields["task"], dec, classifier_cfg=clf)
    if fields.get("modality", "-") != "-":
        model.modality = fields["modality"]

    own = dict(model.named_parameters())
    if [n for n, _ in shapes] != list(own):
        raise CheckpointError(f"{path}: parameter names do not match the configured model")
    offset = 0
    with torch.no_grad():
        for name, shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            if tuple(own[name].shape) != shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            own[name].copy_(torch.from_numpy(values.reshape(shape).astype(np.float32)))
    return model


# -- modality ranking ------------------------------------------------------------

@dataclass
class ModalityRecord:
    name: str
    feature_dim: int
    score: float
    metric_kind: str = "higher_better"

    def __post_init__(self):
        if self.metric_kind not in ("higher_better", "lower_better"):
            raise ConfigError(f"unknown metric kind {self.metric_kind!r}")


def rank_modalities(records: list[ModalityRecord]) -> list[ModalityRecord]:
    """Strongest modality first."""
    if len(records) < 2:
        raise ConfigError("ranking needs at least two modalities")
    kinds = {r.metric_kind for r in records}
    if len(kinds) > 1:
        raise ConfigError(f"cannot rank modalities scored with mixed metric kinds {sorted(kinds)}")
    sign = -1.0 if kinds.pop() == "higher_better" else 1.0
    ordered = sorted(records, key=lambda r: (sign * r.score, r.name))
    for a, b in zip(ordered, ordered[1:]):
        if a.score == b.score:
            log.warning("modalities %s and %s tie at %s; ordering by name", a.name, b.name, a.score)
    return ordered
