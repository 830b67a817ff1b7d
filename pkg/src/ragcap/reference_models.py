"""Deterministic stand-ins for the frozen pretrained models.

- TinyTokenizer: word-level vocabulary built from the training captions.
- TinyCausalLm: a small causal Transformer LM, optionally pretrained for a
  fixed budget on the training captions, then frozen. It serves both as the
  frozen language model for the decoder and as the text encoder behind the
  caption-similarity scores.
- TinyAudioExtractor: a frozen seeded generator standing in for a pretrained
  audio feature extractor.
- generate_synthetic_dataset: clustered audio features with
  cluster-consistent captions, written in the manifest + archive formats.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import archive
from .autodiff import Tensor, take_rows
from .layers import Adam, EncoderLayer
from .metrics import normalize_words

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")


class TinyTokenizer:
    """Word-level tokenizer over a fixed vocabulary plus special tokens."""

    def __init__(self, texts: list[str]):
        words = sorted({w for t in texts for w in normalize_words(t)})
        self.words = words
        self.itos = list(SPECIAL_TOKENS) + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.vocab_size = len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK) for w in normalize_words(text)]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.itos[i] for i in ids
                        if i >= len(SPECIAL_TOKENS))


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


class TinyCausalLm:
    """Causal Transformer LM used frozen: features() exposes the pre-head
    representation, head_matrix() the (tied) token-prediction weights."""

    def __init__(self, vocab_size: int, d_model: int = 32, num_layers: int = 2,
                 num_heads: int = 4, d_ff: int = 64, max_len: int = 128,
                 seed: int = 7, std: float = 0.02, emb_std: float = 0.4,
                 pos_scale: float = 0.1):
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_len = max_len
        # token identity must dominate position in the features, otherwise
        # greedy token matching on them degenerates to position matching
        self.emb = Tensor(rng.normal(0.0, emb_std, size=(vocab_size, d_model)),
                          requires_grad=True)
        self.pos = pos_scale * sinusoidal_positions(max_len, d_model)
        self.layers = [EncoderLayer(d_model, num_heads, d_ff, rng, std)
                       for _ in range(num_layers)]
        self.frozen = False

    # -- forward -----------------------------------------------------------

    def _forward(self, ids: np.ndarray) -> Tensor:
        """ids (..., L) -> hidden states (..., L, d_model)."""
        length = ids.shape[-1]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} > max_len {self.max_len}")
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise ValueError("token id out of vocabulary")
        h = take_rows(self.emb, ids) + Tensor(self.pos[:length])
        for layer in self.layers:
            h = layer(h, causal=True)
        return h

    def features(self, token_ids) -> np.ndarray:
        """Frozen-LM feature matrix (d_model, L) for one token sequence."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("token_ids must be a nonempty 1-d sequence")
        return self._forward(ids).data.T.copy()

    def head_matrix(self) -> np.ndarray:
        """Token-prediction weights (d_model, vocab), tied to the embedding."""
        return self.emb.data.T.copy()

    def named_params(self, prefix: str = "lm."):
        out = [(prefix + "emb", self.emb)]
        for i, layer in enumerate(self.layers):
            out += layer.named_params(f"{prefix}layer{i}.")
        return out

    def weight_hash(self) -> int:
        import hashlib
        h = hashlib.sha256()
        for _, p in self.named_params():
            h.update(p.data.tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    # -- pretraining -------------------------------------------------------

    def pretrain(self, token_seqs: list[list[int]], epochs: int = 30,
                 lr: float = 1e-3):
        """Next-token prediction on BOS-wrapped sequences, then freeze."""
        if self.frozen:
            raise RuntimeError("model is frozen")
        params = [p for _, p in self.named_params()]
        opt = Adam(params, lr=lr)
        # bucket by length so each bucket trains as one batch
        buckets: dict[int, list[list[int]]] = {}
        for seq in token_seqs:
            wrapped = [BOS] + list(seq) + [EOS]
            buckets.setdefault(len(wrapped), []).append(wrapped)
        for _ in range(epochs):
            opt.zero_grad()
            total = None
            n_pos = 0
            for length in sorted(buckets):
                batch = np.asarray(buckets[length], dtype=np.int64)
                h = self._forward(batch[:, :-1])
                logits = h @ self.emb.swapaxes(0, 1)  # tied head
                logp = logits.log_softmax(axis=-1)
                targets = batch[:, 1:]
                onehot = np.zeros(logp.shape)
                b_idx = np.arange(batch.shape[0])[:, None]
                t_idx = np.arange(length - 1)[None, :]
                onehot[b_idx, t_idx, targets] = 1.0
                ce = -(logp * Tensor(onehot)).sum()
                n_pos += targets.size
                total = ce if total is None else total + ce
            loss = total * (1.0 / n_pos)
            loss.backward()
            opt.step()
            opt.zero_grad()
        self.freeze()

    def freeze(self):
        for _, p in self.named_params():
            p.requires_grad = False
            p.grad = None
        self.frozen = True


def build_tiny_lm(seed: int, vocab_size: int, d_model: int = 32,
                  num_layers: int = 2, num_heads: int = 4, d_ff: int = 64,
                  max_len: int = 128, pretrain_seqs=None,
                  pretrain_epochs: int = 30) -> TinyCausalLm:
    """Deterministic construction; optional fixed-budget pretraining pass,
    after which the model is frozen."""
    lm = TinyCausalLm(vocab_size, d_model=d_model, num_layers=num_layers,
                      num_heads=num_heads, d_ff=d_ff, max_len=max_len,
                      seed=seed)
    if pretrain_seqs and pretrain_epochs > 0:
        lm.pretrain(pretrain_seqs, epochs=pretrain_epochs)
    else:
        lm.freeze()
    return lm


class LmTextEncoder:
    """TextEncoder adapter: caption tokens -> frozen-LM features (D_l, L)."""

    def __init__(self, lm: TinyCausalLm):
        self.lm = lm

    def encode(self, caption) -> np.ndarray:
        return self.lm.features(caption.token_ids)


# ---------------------------------------------------------------------------
# audio feature stand-in and synthetic dataset
# ---------------------------------------------------------------------------

class TinyAudioExtractor:
    """Frozen map from an item descriptor (cluster id, item index) to a
    (D_a, T) feature matrix: a per-cluster pattern plus seeded item noise."""

    def __init__(self, d_a: int, t: int, num_clusters: int,
                 noise_level: float = 1.0, seed: int = 0):
        self.d_a = d_a
        self.t = t
        self.noise_level = noise_level
        self.seed = seed
        rng = np.random.default_rng([seed, 2024])
        base = rng.normal(0.0, 1.0, size=(num_clusters, d_a))
        drift = rng.normal(0.0, 0.2, size=(num_clusters, d_a, t))
        self.patterns = base[:, :, None] + drift  # (C, D_a, T)

    def extract(self, cluster_id: int, item_index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, cluster_id, item_index])
        noise = rng.normal(0.0, self.noise_level, size=(self.d_a, self.t))
        return self.patterns[cluster_id] + noise


# word pools per cluster theme: (subjects, verbs, places)
_THEMES = [
    (["dog", "puppy", "hound"], ["barks", "growls", "howls"],
     ["yard", "kennel", "porch"]),
    (["engine", "motor", "truck"], ["rumbles", "revs", "idles"],
     ["road", "garage", "highway"]),
    (["rain", "drizzle", "storm"], ["patters", "pours", "drips"],
     ["roof", "window", "gutter"]),
    (["bird", "sparrow", "crow"], ["chirps", "sings", "caws"],
     ["tree", "garden", "forest"]),
    (["bell", "chime", "gong"], ["rings", "clangs", "tolls"],
     ["tower", "church", "hall"]),
    (["crowd", "audience", "children"], ["cheers", "claps", "shouts"],
     ["stadium", "street", "playground"]),
    (["saw", "drill", "hammer"], ["buzzes", "whirs", "pounds"],
     ["workshop", "site", "shed"]),
    (["wave", "surf", "tide"], ["crashes", "splashes", "roars"],
     ["shore", "beach", "rocks"]),
]

_TEMPLATES = [
    "a {s} {v} in the {p}",
    "the {s} {v} near the {p}",
    "a {s} {v} and {v2} in the {p}",
]


@dataclass
class SyntheticDatasetSpec:
    clusters: int = 4
    items_per_cluster: int = 25
    captions_per_item: int = 1
    templates_per_cluster: int = 3
    noise_level: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.clusters < 2:
            raise ValueError("need at least 2 clusters")
        if self.clusters > len(_THEMES):
            raise ValueError(f"at most {len(_THEMES)} clusters supported")
        if self.clusters * self.items_per_cluster < 2:
            raise ValueError("degenerate dataset: fewer than 2 items")
        if not 1 <= self.templates_per_cluster <= len(_TEMPLATES):
            raise ValueError("templates_per_cluster out of range")

    @classmethod
    def from_file(cls, path: str) -> "SyntheticDatasetSpec":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        known = {"clusters", "items_per_cluster", "captions_per_item",
                 "templates_per_cluster", "noise_level", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown dataset-spec keys: {sorted(unknown)}")
        return cls(**raw)


def _caption_for(rng: np.random.Generator, theme, n_templates: int) -> str:
    subjects, verbs, places = theme
    tmpl = _TEMPLATES[rng.integers(0, n_templates)]
    v, v2 = rng.choice(verbs, size=2, replace=False)
    return tmpl.format(s=rng.choice(subjects), v=v, v2=v2,
                       p=rng.choice(places))


def _split_for(index: int) -> str:
    if index % 10 == 8:
        return "valid"
    if index % 10 == 9:
        return "test"
    return "train"


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, d_a: int, t: int,
                               out_dir: str) -> list[archive.ManifestRow]:
    """Write manifest + per-item feature archives; returns the rows."""
    extractor = TinyAudioExtractor(d_a, t, spec.clusters,
                                   noise_level=spec.noise_level,
                                   seed=spec.seed)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    rows = []
    for c in range(spec.clusters):
        for i in range(spec.items_per_cluster):
            item_id = f"c{c:02d}i{i:03d}"
            rng = np.random.default_rng([spec.seed, 7919, c, i])
            captions = [_caption_for(rng, _THEMES[c],
                                     spec.templates_per_cluster)
                        for _ in range(spec.captions_per_item)]
            feats = extractor.extract(c, i)
            rel = os.path.join("features", item_id + ".ract")
            archive.write_archive(os.path.join(out_dir, rel),
                                  {"features": feats})
            rows.append(archive.ManifestRow(item_id, _split_for(i), rel,
                                            captions))
    archive.write_manifest(os.path.join(out_dir, "manifest.jsonl"), rows)
    return rows


def ingest_precomputed_features(path: str, role: str,
                                expected_rows: int) -> np.ndarray:
    """Load an externally computed feature matrix from a tensor archive.

    role "audio" expects a (D_a, T) matrix, role "lm" a (D_l, L) matrix;
    expected_rows pins the first dimension (e.g. 128 for published audio
    features, 768 for published LM features)."""
    if role not in ("audio", "lm"):
        raise ValueError(f"unknown feature role {role!r}")
    tensors = archive.read_archive(path)
    if "features" not in tensors:
        raise archive.ArchiveFormatError(
            f"{path}: no tensor named 'features' "
            f"(found {sorted(tensors)})")
    feats = tensors["features"]
    if feats.ndim != 2:
        raise archive.ArchiveFormatError(
            f"{path}: features must be 2-d, got {feats.shape}")
    if feats.shape[0] != expected_rows:
        raise archive.ArchiveFormatError(
            f"{path}: expected {expected_rows} feature rows, "
            f"got {feats.shape[0]}")
    if not np.all(np.isfinite(feats)):
        raise archive.ArchiveFormatError(f"{path}: non-finite feature values")
    return feats
