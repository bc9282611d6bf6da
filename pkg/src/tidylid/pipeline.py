"""Training loop, embedding extraction and the two evaluation tracks."""

from __future__ import annotations

import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .augment import AugmentConfig, load_pool, maybe_augment
from .checkpoint import Checkpoint, save_checkpoint
from .encoder import Encoder, EncoderConfig
from .errors import DataError, DivergenceError, MissingUtterance, UnknownLabel
from .features import FeatureConfig, Waveform, featurize, load_wav
from .heads import HEADS, MarginConfig, MarginHead, cosine_logits, init_prototypes
from .optim import OptimConfig, OptimState, adamw_step, cosine_lr
from .scoring import classify, cosine_score, enroll_model
from .synthkit import Utterance

log = logging.getLogger(__name__)

WORKERS_ENV = "TIDYLID_WORKERS"
MAX_SKIP_FRACTION = 0.10


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    head: str = "aam"
    margin: MarginConfig = field(default_factory=MarginConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(apply_probability=0.0))
    seed: int = 0
    crop_seconds: float = 4.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.crop_seconds <= 0:
            raise ValueError("epochs must be >= 0, batch_size and crop_seconds positive")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")


def workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


# ---------------------------------------------------------------- audio


def crop_or_pad(samples: np.ndarray, n: int, rng=None) -> np.ndarray:
    """Random crop when ``rng`` is given, centre crop otherwise; zero-pad short input."""
    if samples.shape[0] == n:
        return samples
    if samples.shape[0] < n:
        return np.pad(samples, (0, n - samples.shape[0]))
    slack = samples.shape[0] - n
    start = int(rng.integers(0, slack + 1)) if rng is not None else slack // 2
    return samples[start : start + n]


class AudioStore:
    """Loads each manifest entry once; unreadable files are skipped with a warning."""

    def __init__(self, utts: list[Utterance], root="."):
        self.root = Path(root)
        self.audio: dict[str, Waveform] = {}
        self.skipped: list[str] = []
        for u in utts:
            try:
                self.audio[u.utt_id] = load_wav(self.root / u.path)
            except (OSError, ValueError) as exc:
                log.warning("skipping %s: %s", u.utt_id, exc)
                self.skipped.append(u.utt_id)
        if utts and len(self.skipped) > MAX_SKIP_FRACTION * len(utts):
            raise DataError(f"{len(self.skipped)} of {len(utts)} utterances unreadable")

    def __contains__(self, utt_id):
        return utt_id in self.audio

    def __getitem__(self, utt_id) -> Waveform:
        return self.audio[utt_id]


def _features(wave: Waveform, n: int, fcfg: FeatureConfig, rng=None, aug=None, pools=None):
    samples = crop_or_pad(wave.samples, n, rng)
    wave = Waveform(samples, wave.sample_rate_hz)
    if aug is not None and aug.apply_probability > 0:
        wave = maybe_augment(wave, aug, rng, pools)
    return featurize(wave, fcfg)


def _map(fn, items):
    n = workers()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- training


def new_checkpoint(labels: list[str], cfg: TrainConfig) -> Checkpoint:
    enc = Encoder(cfg.encoder, seed=cfg.seed)
    protos = init_prototypes(len(labels), cfg.encoder.embedding_dim, seed=cfg.seed + 1)
    meta = {"epoch": 0, "seed": cfg.seed, "head": cfg.head, "crop_seconds": cfg.crop_seconds}
    return Checkpoint(cfg.encoder, enc.params, protos, list(labels), meta)


def evaluate_accuracy(ckpt: Checkpoint, utts: list[Utterance], store: AudioStore, fcfg=None) -> float:
    emb = extract_embeddings(utts, ckpt, store=store, fcfg=fcfg)
    if not emb:
        return float("nan")
    index = {lab: i for i, lab in enumerate(ckpt.labels)}
    keep = [u for u in utts if u.utt_id in emb and u.language in index]
    cos = cosine_logits(np.stack([emb[u.utt_id] for u in keep]), ckpt.prototypes)
    preds = [metrics.Prediction(u.utt_id, u.language, ckpt.labels[classify(row)]) for u, row in zip(keep, cos)]
    return metrics.micro_accuracy(preds)


def train(
    train_utts: list[Utterance],
    val_utts: list[Utterance],
    cfg: TrainConfig,
    init: Checkpoint | None = None,
    root=".",
    out_path=None,
    frozen: set[str] = frozenset(),
):
    """Fine-tune encoder and prototypes; returns ``(best_checkpoint, epoch_logs)``.

    Each epoch shuffles with the seed, crops to ``crop_seconds``, augments,
    featurises, and takes one AdamW step per batch on a per-step cosine
    schedule. The checkpoint with the best validation micro accuracy wins
    (earliest on ties).
    """
    labels = sorted({u.language for u in train_utts})
    if init is not None:
        labels = list(init.labels)
    if len(labels) < 2:
        raise ValueError("need at least two training classes")
    index = {lab: i for i, lab in enumerate(labels)}
    unknown = {u.language for u in train_utts} - set(index)
    if unknown:
        raise UnknownLabel(f"training labels missing from the checkpoint inventory: {sorted(unknown)}")

    ckpt = init.copy() if init is not None else new_checkpoint(labels, cfg)
    ckpt.meta.update({"seed": cfg.seed, "head": cfg.head, "crop_seconds": cfg.crop_seconds})
    enc = Encoder(ckpt.encoder_cfg, ckpt.params)
    enc.frozen = set(frozen)
    head = MarginHead(ckpt.prototypes, cfg.head, cfg.margin)

    store = AudioStore(list(train_utts) + list(val_utts), root)
    items = [u for u in train_utts if u.utt_id in store]
    n_crop = int(round(cfg.crop_seconds * cfg.features.sample_rate_hz))
    steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    ocfg = OptimConfig(**{**cfg.optim.__dict__, "total_steps": total})
    state = OptimState()
    pools = None
    if cfg.augment.apply_probability > 0:
        pools = {"noise": load_pool(cfg.augment.noise_pool), "rir": load_pool(cfg.augment.rir_pool)}

    best, best_acc, logs = ckpt.copy(), -1.0, []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
        losses = []
        for b in range(steps_per_epoch):
            batch = [items[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]

            def feats(u, epoch=epoch):
                rng = np.random.default_rng([cfg.seed, epoch, hash_id(u.utt_id)])
                return _features(store[u.utt_id], n_crop, cfg.features, rng, cfg.augment, pools)

            x = np.stack(_map(feats, batch))
            y = np.array([index[u.language] for u in batch])
            emb = enc.forward(x, train=True)
            loss, _ = head.forward(emb, y)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            g_emb, g_protos = head.backward()
            grads = enc.backward(g_emb)
            lr = cosine_lr(step, ocfg)
            trainable = {k: enc.params[k] for k in grads}
            trainable["head.prototypes"] = head.prototypes
            grads["head.prototypes"] = g_protos
            adamw_step(trainable, grads, state, ocfg, lr)
            head.prototypes = trainable.pop("head.prototypes")
            enc.params.update(trainable)
            losses.append(loss)
            step += 1

        ckpt.params, ckpt.prototypes = enc.params, head.prototypes
        ckpt.meta["epoch"] = epoch
        val_acc = evaluate_accuracy(ckpt, val_utts, store, cfg.features) if val_utts else float("nan")
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_micro_acc": val_acc, "lr": lr}
        logs.append(entry)
        log.info("epoch %d loss %.5f val_acc %.4f", epoch, entry["train_loss"], val_acc)
        if not val_utts or val_acc > best_acc:
            best_acc = val_acc if val_utts else best_acc
            best = ckpt.copy()
            if out_path is not None:
                save_checkpoint(out_path, best)
    if out_path is not None and not logs:
        save_checkpoint(out_path, best)
    return best, logs


def hash_id(utt_id: str) -> int:
    """Stable 32-bit key for per-utterance rng streams (``hash`` is salted)."""
    return zlib.crc32(utt_id.encode("utf-8"))


# ---------------------------------------------------------------- inference


def extract_embeddings(
    utts: list[Utterance],
    ckpt: Checkpoint,
    root=".",
    store: AudioStore | None = None,
    fcfg: FeatureConfig | None = None,
    batch_size: int = 64,
) -> dict[str, np.ndarray]:
    """Eval-mode embeddings of centre-cropped (or zero-padded) utterances."""
    if not utts:
        return {}
    fcfg = fcfg or FeatureConfig()
    store = store or AudioStore(utts, root)
    keep = [u for u in utts if u.utt_id in store]
    n_crop = int(round(ckpt.meta.get("crop_seconds", 4.0) * fcfg.sample_rate_hz))
    enc = Encoder(ckpt.encoder_cfg, ckpt.params)
    out = {}
    for b in range(0, len(keep), batch_size):
        chunk = keep[b : b + batch_size]
        x = np.stack(_map(lambda u: _features(store[u.utt_id], n_crop, fcfg), chunk))
        emb = enc.forward(x, train=False).astype(np.float64)
        out.update((u.utt_id, e) for u, e in zip(chunk, emb))
    return out


def run_task1(utts: list[Utterance], ckpt: Checkpoint, root=".", embeddings=None):
    """Closed-set language classification; returns ``(predictions, report)``."""
    index = set(ckpt.labels)
    unknown = sorted({u.language for u in utts} - index)
    if unknown:
        raise UnknownLabel(f"test labels outside the checkpoint inventory: {unknown}")
    emb = embeddings if embeddings is not None else extract_embeddings(utts, ckpt, root)
    keep = [u for u in utts if u.utt_id in emb]
    if not keep:
        raise DataError("no readable test utterances")
    cos = cosine_logits(np.stack([emb[u.utt_id] for u in keep]), ckpt.prototypes)
    preds = [metrics.Prediction(u.utt_id, u.language, ckpt.labels[classify(row)]) for u, row in zip(keep, cos)]
    present = sorted({u.language for u in keep})
    report = {
        "n": len(preds),
        "micro_accuracy": metrics.micro_accuracy(preds),
        "macro_accuracy": metrics.macro_accuracy(preds, present),
        "per_class_recall": metrics.per_class_recall(preds, present),
    }
    return preds, report


def score_trials(trials, enroll_map, embeddings) -> list[metrics.ScoreRecord]:
    models = {}
    records = []
    for trial in trials:
        enroll_id, test_id = trial[0], trial[1]
        label = trial[2] if len(trial) > 2 else metrics.UNKNOWN
        if enroll_id not in models:
            utts = enroll_map.get(enroll_id)
            if utts is None:
                raise MissingUtterance(f"enrollment model {enroll_id!r} not in the enrollment map")
            missing = [u for u in utts if u not in embeddings]
            if missing:
                raise MissingUtterance(f"enrollment utterances without embeddings: {missing}")
            models[enroll_id] = enroll_model([embeddings[u] for u in utts])
        if test_id not in embeddings:
            raise MissingUtterance(f"test utterance {test_id!r} has no embedding")
        records.append(metrics.ScoreRecord(enroll_id, test_id, cosine_score(models[enroll_id], embeddings[test_id]), label))
    return records


def run_task2(trials, enroll_map, ckpt: Checkpoint, utts: list[Utterance] | None = None, root=".", key=None, embeddings=None):
    """Score verification trials; EER is reported iff ``key`` is given.

    ``trials`` is a list of ``(enroll_id, test_id)`` pairs and ``key`` an
    optional ``{(enroll_id, test_id): target|nontarget}`` mapping.
    """
    if embeddings is None:
        needed = {t[1] for t in trials} | {u for v in enroll_map.values() for u in v}
        by_id = {u.utt_id: u for u in utts or []}
        missing = sorted(needed - set(by_id))
        if missing:
            raise MissingUtterance(f"utterances not in the manifest: {missing[:5]}")
        embeddings = extract_embeddings([by_id[u] for u in sorted(needed)], ckpt, root)
    records = score_trials([(t[0], t[1]) for t in trials], enroll_map, embeddings)
    report = {"n_trials": len(records)}
    if key is not None:
        labelled = [metrics.ScoreRecord(r.enroll_id, r.test_id, r.score, key[(r.enroll_id, r.test_id)]) for r in records if (r.enroll_id, r.test_id) in key]
        report["eer"], report["eer_threshold"] = metrics.compute_eer(labelled)
    return records, report
