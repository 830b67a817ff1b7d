"""Flat key=value pipeline configuration.

Every hyperparameter lives here with its published default; a config file may
override any subset. Unknown keys are rejected. Each run logs the fully
resolved config and its hash so artifacts can be traced back to settings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging

log = logging.getLogger("ragcap.config")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class PipelineConfig:
    # caption-pair similarity labeling
    similarity_threshold: float = 0.7
    # triplet retrieval training
    triplet_margin: float = 0.3
    triplet_batch: int = 128
    triplet_epochs: int = 200
    triplet_lr: float = 1e-4
    embed_dropout: float = 0.3
    embed_heads: int = 4
    embed_ff: int = 32
    retrieval_k: int = 5
    # decoder training / generation
    decoder_lambda: float = 0.1
    decoder_batch: int = 512
    decoder_epochs: int = 200
    decoder_lr_max: float = 1e-4
    decoder_lr_min: float = 1e-6
    decoder_lr_period: int = 20
    decoder_dropout: float = 0.3
    decoder_d_r: int = 60
    decoder_heads: int = 4
    decoder_max_len: int = 24
    generate_beam: int = 4
    init_std: float = 0.02
    # model dims (desk-scale defaults; set the published large values when
    # ingesting real precomputed features)
    model_d_a: int = 8
    model_t: int = 16
    model_d_l: int = 32
    model_vocab: int = 64
    # frozen tiny-LM stand-in
    lm_layers: int = 2
    lm_heads: int = 4
    lm_ff: int = 64
    lm_pretrain_epochs: int = 30
    lm_seed: int = 7


# config-file key -> dataclass field
KEY_TO_FIELD = {
    "similarity.threshold": "similarity_threshold",
    "triplet.margin": "triplet_margin",
    "triplet.batch": "triplet_batch",
    "triplet.epochs": "triplet_epochs",
    "triplet.lr": "triplet_lr",
    "embed.dropout": "embed_dropout",
    "embed.heads": "embed_heads",
    "embed.ff": "embed_ff",
    "retrieval.K": "retrieval_k",
    "decoder.lambda": "decoder_lambda",
    "decoder.batch": "decoder_batch",
    "decoder.epochs": "decoder_epochs",
    "decoder.lr_max": "decoder_lr_max",
    "decoder.lr_min": "decoder_lr_min",
    "decoder.lr_period": "decoder_lr_period",
    "decoder.dropout": "decoder_dropout",
    "decoder.D_r": "decoder_d_r",
    "decoder.heads": "decoder_heads",
    "decoder.max_len": "decoder_max_len",
    "generate.beam": "generate_beam",
    "init.std": "init_std",
    "model.D_a": "model_d_a",
    "model.T": "model_t",
    "model.D_l": "model_d_l",
    "model.vocab": "model_vocab",
    "lm.layers": "lm_layers",
    "lm.heads": "lm_heads",
    "lm.ff": "lm_ff",
    "lm.pretrain_epochs": "lm_pretrain_epochs",
    "lm.seed": "lm_seed",
}
FIELD_TO_KEY = {v: k for k, v in KEY_TO_FIELD.items()}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def _parse_value(field: str, raw: str):
    kind = _FIELD_TYPES[field]
    try:
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"bad value {raw!r} for {FIELD_TO_KEY[field]}") from e


def load_config(path: str | None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEY_TO_FIELD:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        field = KEY_TO_FIELD[key]
        setattr(cfg, field, _parse_value(field, raw))
    return cfg


def resolved_text(cfg: PipelineConfig) -> str:
    """Canonical key=value rendering, sorted by key."""
    lines = []
    for key in sorted(KEY_TO_FIELD):
        val = getattr(cfg, KEY_TO_FIELD[key])
        lines.append(f"{key}={val!r}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(resolved_text(cfg).encode("utf-8")).hexdigest()[:16]


def log_resolved(cfg: PipelineConfig):
    log.info("resolved config (hash %s):\n%s", config_hash(cfg),
             resolved_text(cfg).rstrip())
