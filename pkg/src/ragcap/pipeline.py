"""End-to-end orchestration shared by the CLI commands.

Every function here is a pure function of (config, inputs, seed); artifacts
carry no timestamps, so reruns are bitwise identical.
"""

from __future__ import annotations

import json
import logging
import os

import numpy as np

from . import archive, decoder, retrieval
from .config import PipelineConfig, config_hash
from .data import DatasetItem, load_dataset
from .errors import TrainingError
from .metrics import EvalReport, evaluate_corpus
from .reference_models import (LmTextEncoder, TinyCausalLm, TinyTokenizer,
                               build_tiny_lm)
from .similarity import (SimilarLabelMatrix, SimilarityMatrix, TokenizedCaption,
                         label_similar, normalize_minmax, pairwise_similarity)

log = logging.getLogger("ragcap.pipeline")


# ---------------------------------------------------------------------------
# frozen stand-ins, rebuilt deterministically from the training captions
# ---------------------------------------------------------------------------

def build_frozen_models(train_caption_lists: list[list[str]],
                        cfg: PipelineConfig):
    """Tokenizer + frozen tiny LM from the training captions.

    Deterministic in (captions, config): every command that needs the frozen
    models rebuilds bitwise-identical ones instead of persisting weights."""
    texts = [c for caps in train_caption_lists for c in caps]
    tokenizer = TinyTokenizer(texts)
    seqs = [tokenizer.encode(t) for t in texts]
    lm = build_tiny_lm(cfg.lm_seed, tokenizer.vocab_size,
                       d_model=cfg.model_d_l, num_layers=cfg.lm_layers,
                       num_heads=cfg.lm_heads, d_ff=cfg.lm_ff,
                       pretrain_seqs=seqs,
                       pretrain_epochs=cfg.lm_pretrain_epochs)
    return tokenizer, lm


def frozen_models_for_items(items: list[DatasetItem], cfg: PipelineConfig):
    return build_frozen_models(
        [it.captions for it in items if it.split == "train"], cfg)


# ---------------------------------------------------------------------------
# similarity labels
# ---------------------------------------------------------------------------

def compute_similarity(items: list[DatasetItem], tokenizer: TinyTokenizer,
                       lm: TinyCausalLm, cfg: PipelineConfig):
    """(raw, normalized, labels) over the primary caption of every item."""
    captions = [TokenizedCaption(it.caption, tokenizer.encode(it.caption))
                for it in items]
    raw = pairwise_similarity(captions, LmTextEncoder(lm))
    norm = normalize_minmax(raw)
    labels = label_similar(norm, cfg.similarity_threshold)
    return raw, norm, labels


def save_similarity(path: str, items: list[DatasetItem],
                    raw: SimilarityMatrix, norm: SimilarityMatrix,
                    labels: SimilarLabelMatrix):
    archive.write_archive(path, {
        "scores_raw": raw.scores,
        "scores_normalized": norm.scores,
        "labels": labels.labels.astype(np.float64),
    })
    side = json.dumps({"ids": [it.id for it in items],
                       "threshold": labels.threshold}, sort_keys=True)
    archive.atomic_write_bytes(path + ".json", side.encode("utf-8"))


def load_similarity(path: str):
    """Returns (ids, raw, normalized, SimilarLabelMatrix)."""
    tensors = archive.read_archive(path)
    with open(path + ".json", "r", encoding="utf-8") as f:
        side = json.load(f)
    labels = SimilarLabelMatrix(tensors["labels"] > 0.5, side["threshold"])
    return (side["ids"], SimilarityMatrix(tensors["scores_raw"]),
            SimilarityMatrix(tensors["scores_normalized"], normalized=True),
            labels)


def check_label_ids(items: list[DatasetItem], ids: list[str]):
    if ids != [it.id for it in items]:
        raise archive.ManifestError(
            "similarity archive ids do not match the manifest")


# ---------------------------------------------------------------------------
# training artifacts
# ---------------------------------------------------------------------------

def history_tsv(history: list[dict]) -> str:
    lines = ["epoch\ttrain_loss\tval_loss\tlr"]
    for h in history:
        lines.append(f"{h['epoch']}\t{h['train_loss']!r}\t{h['val_loss']!r}"
                     f"\t{h['lr']!r}")
    return "\n".join(lines) + "\n"


def negatives_tsv(selections) -> str:
    lines = ["anchor\tnegative\td_ap\td_an\tsemi_hard_available\tfallback"]
    for s in selections:
        lines.append(f"{s.anchor_id}\t{s.negative_id}\t{s.d_ap!r}\t{s.d_an!r}"
                     f"\t{int(s.semi_hard_available)}\t{s.fallback}")
    return "\n".join(lines) + "\n"


def run_train_retrieval(cfg: PipelineConfig, items: list[DatasetItem],
                        labels: SimilarLabelMatrix, seed: int, out_dir: str):
    tcfg = retrieval.TripletConfig(
        margin=cfg.triplet_margin, batch_size=cfg.triplet_batch,
        epochs=cfg.triplet_epochs, lr=cfg.triplet_lr,
        dropout=cfg.embed_dropout, heads=cfg.embed_heads, d_ff=cfg.embed_ff,
        init_std=cfg.init_std)
    result = retrieval.train_retrieval(items, labels, tcfg, seed,
                                       cfg.model_d_a, cfg.model_t)
    os.makedirs(out_dir, exist_ok=True)
    meta = {"config_hash": config_hash(cfg), "seed": seed,
            "epoch": result.best_epoch, "val_loss": result.best_val_loss,
            "optimizer": "adam (published setup used adabound)",
            "kind": "retrieval"}
    archive.save_checkpoint(os.path.join(out_dir, "retrieval.ckpt"),
                            result.params.snapshot(), meta)
    archive.atomic_write_bytes(os.path.join(out_dir, "retrieval_curve.tsv"),
                               history_tsv(result.history).encode())
    archive.atomic_write_bytes(os.path.join(out_dir, "negatives.tsv"),
                               negatives_tsv(result.negative_log).encode())
    index = retrieval.build_index(result.params, items)
    index.save(os.path.join(out_dir, "index.ract"))
    return result, index


def load_retrieval_params(cfg: PipelineConfig, path: str):
    tensors, meta = archive.load_checkpoint(path, config_hash(cfg))
    tcfg = retrieval.TripletConfig(
        margin=cfg.triplet_margin, dropout=cfg.embed_dropout,
        heads=cfg.embed_heads, d_ff=cfg.embed_ff, init_std=cfg.init_std)
    params = retrieval.EmbedderParams(cfg.model_d_a, cfg.model_t, tcfg,
                                      np.random.default_rng(0))
    params.restore(tensors)
    return params, meta


def run_train_decoder(cfg: PipelineConfig, items: list[DatasetItem],
                      labels: SimilarLabelMatrix, lm: TinyCausalLm,
                      tokenizer: TinyTokenizer, seed: int, out_dir: str):
    dcfg = decoder.DecoderTrainConfig(
        label_smoothing=cfg.decoder_lambda, batch_size=cfg.decoder_batch,
        epochs=cfg.decoder_epochs, lr_max=cfg.decoder_lr_max,
        lr_min=cfg.decoder_lr_min, lr_period=cfg.decoder_lr_period,
        dropout=cfg.decoder_dropout, d_r=cfg.decoder_d_r,
        heads=cfg.decoder_heads, k=cfg.retrieval_k, init_std=cfg.init_std)
    result = decoder.train_decoder(lm, tokenizer, items, labels, dcfg, seed)
    os.makedirs(out_dir, exist_ok=True)
    meta = {"config_hash": config_hash(cfg), "seed": seed,
            "epoch": result.best_epoch, "val_loss": result.best_val_loss,
            "kind": "decoder"}
    archive.save_checkpoint(os.path.join(out_dir, "decoder.ckpt"),
                            result.params.snapshot(), meta)
    archive.atomic_write_bytes(os.path.join(out_dir, "decoder_curve.tsv"),
                               history_tsv(result.history).encode())
    return result


def load_decoder_params(cfg: PipelineConfig, lm: TinyCausalLm, d_a: int,
                        path: str):
    tensors, meta = archive.load_checkpoint(path, config_hash(cfg))
    params = decoder.DecoderParams(lm.d_model, d_a, cfg.decoder_d_r,
                                   lm.vocab_size, cfg.decoder_heads,
                                   cfg.decoder_dropout,
                                   np.random.default_rng(0))
    params.restore(tensors)
    return params, meta


# ---------------------------------------------------------------------------
# guidance selection
# ---------------------------------------------------------------------------

def retrieved_guidance(embedder, index: retrieval.RetrievalIndex,
                       item: DatasetItem, k: int) -> list[str]:
    """Top-K captions by embedding distance, ascending; leave-one-out on the
    query's own training item."""
    e = retrieval.embed(embedder, item.features)
    hits = retrieval.retrieve_topk(index, e, k=k, exclude=item.id)
    return [cap for _, _, cap in hits]


def oracle_guidance(scores: SimilarityMatrix, items: list[DatasetItem],
                    query_pos: int, k: int) -> list[str]:
    """Top-K training captions by ground-truth caption similarity."""
    train_pos = [i for i, it in enumerate(items)
                 if it.split == "train" and i != query_pos]
    ranked = sorted(train_pos,
                    key=lambda i: (-scores.scores[query_pos, i], items[i].id))
    return [items[i].caption for i in ranked[:k]]


# ---------------------------------------------------------------------------
# evaluation scopes
# ---------------------------------------------------------------------------

def evaluate_scope(scope: str, cfg: PipelineConfig, items: list[DatasetItem],
                   split: str, embedder, index, lm=None, tokenizer=None,
                   dec_params=None, scores: SimilarityMatrix | None = None):
    """Scope i: generate with retrieved guidance. Scope ii: emit the top-1
    retrieved caption. Scope iii: generate with oracle guidance.
    Returns (candidates, reference_sets, eval_ids, EvalReport)."""
    if scope not in ("i", "ii", "iii"):
        raise ValueError(f"unknown scope {scope!r}")
    if split == "all":
        eval_items = list(enumerate(items))
    else:
        eval_items = [(i, it) for i, it in enumerate(items)
                      if it.split == split]
    if not eval_items:
        raise TrainingError(f"no items in split {split!r}")

    candidates = []
    refs = []
    ids = []
    gen = decoder.GenerationConfig(beam=cfg.generate_beam,
                                   max_len=cfg.decoder_max_len)
    for pos, item in eval_items:
        if scope == "ii":
            e = retrieval.embed(embedder, item.features)
            hits = retrieval.retrieve_topk(index, e, k=1, exclude=item.id)
            cand = hits[0][2]
        else:
            if scope == "i":
                guidance = retrieved_guidance(embedder, index, item,
                                              cfg.retrieval_k)
            else:
                guidance = oracle_guidance(scores, items, pos,
                                           cfg.retrieval_k)
            cand = decoder.generate_caption(lm, tokenizer, dec_params,
                                            item.features, guidance, gen)
        candidates.append(cand)
        refs.append(item.captions)
        ids.append(item.id)
    report = evaluate_corpus(candidates, refs)
    return candidates, refs, ids, report


def save_scope_outputs(out_dir: str, scope: str, ids: list[str],
                       candidates: list[str], report: EvalReport):
    os.makedirs(out_dir, exist_ok=True)
    rows = "\n".join(json.dumps({"id": i, "text": c}, sort_keys=True)
                     for i, c in zip(ids, candidates)) + "\n"
    archive.atomic_write_bytes(
        os.path.join(out_dir, f"scope_{scope}_candidates.jsonl"),
        rows.encode())
    archive.atomic_write_bytes(
        os.path.join(out_dir, f"scope_{scope}_report.json"),
        report.to_json().encode())
    archive.atomic_write_bytes(
        os.path.join(out_dir, f"scope_{scope}_table.tsv"),
        report.table().encode())
