"""Command-line entry point: ``tidylid {synth,train,embed,task1,task2,eval}``.

Options may also come from a plain ``key = value`` file given with
``--config``; keys are option names without the leading dashes (either
``batch-size`` or ``batch_size``) and explicit flags win over the file.
Set ``TIDYLID_WORKERS`` to featurise with several threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .augment import AugmentConfig
from .checkpoint import load_checkpoint
from .encoder import EncoderConfig
from .heads import HEADS, MarginConfig
from .optim import OptimConfig
from .pipeline import TrainConfig, extract_embeddings, run_task1, run_task2, train
from .synthkit import (
    SynthSpec,
    gen_corpus,
    gen_trials,
    read_enroll_map,
    read_manifest,
    split_corpus,
    write_enroll_map,
    write_manifest,
)

log = logging.getLogger("tidylid")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(","))


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file with option defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tidylid", description="Language identification and verification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus with splits and trials")
    p.add_argument("--out", required=True)
    p.add_argument("--n-languages", type=int, default=8)
    p.add_argument("--n-unseen-languages", type=int, default=3)
    p.add_argument("--n-speakers", type=int, default=24)
    p.add_argument("--utts-per-speaker-language", type=int, default=4)
    p.add_argument("--languages-per-speaker", type=_ints, default=(2, 10), help="min,max")
    p.add_argument("--utterance-seconds", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--val-fraction", type=float, default=0.125)
    p.add_argument("--n-trials", type=int, default=400)

    p = sub.add_parser("train", parents=[common], help="train or fine-tune encoder and head")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--head", choices=HEADS, default="aam")
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--scale", type=float, default=30.0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop-seconds", type=float, default=4.0)
    p.add_argument("--init", help="checkpoint to fine-tune from")
    p.add_argument("--aug-prob", type=float, default=0.0)
    p.add_argument("--noise-pool")
    p.add_argument("--rir-pool")
    p.add_argument("--snr-range", type=lambda s: tuple(float(v) for v in s.split(",")), default=(0.0, 20.0))
    p.add_argument("--channels", type=_ints, default=(128, 128, 128))
    p.add_argument("--kernel-sizes", type=_ints, default=(5, 3, 3))
    p.add_argument("--dilations", type=_ints, default=(1, 2, 3))
    p.add_argument("--res2-scale", type=int, default=4)
    p.add_argument("--se-bottleneck", type=int, default=32)
    p.add_argument("--attention-hidden", type=int, default=64)
    p.add_argument("--embedding-dim", type=int, default=192)
    p.add_argument("--log", help="write per-epoch log as JSON lines")
    p.add_argument("--out", required=True)

    p = sub.add_parser("embed", parents=[common], help="extract eval-mode embeddings to .npz")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("task1", parents=[common], help="closed-set classification")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-pred", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("task2", parents=[common], help="enrollment/test verification scoring")
    p.add_argument("--trials", required=True, help="lines of 'enroll_id test_id [label]'")
    p.add_argument("--enroll-map", required=True, help="lines of 'enroll_id utt_id [utt_id ...]'")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-scores", required=True)
    p.add_argument("--key")
    p.add_argument("--manifest", help="resolves utterance ids to audio")
    p.add_argument("--embeddings", help=".npz from 'embed' instead of --manifest")
    p.add_argument("--report")

    p = sub.add_parser("eval", parents=[common], help="metrics from score/prediction files")
    p.add_argument("--scores")
    p.add_argument("--key")
    p.add_argument("--pred")
    p.add_argument("--manifest", help="reference labels for --pred")
    p.add_argument("--report")
    return parser


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config(known.config)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in subparsers.choices.values():
        dests = {a.dest: a for a in sp._actions}
        hits = {k: v for k, v in values.items() if k in dests}
        for k in hits:
            dests[k].required = False
        sp.set_defaults(**hits)


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def cmd_synth(a):
    spec = SynthSpec(a.n_languages, a.n_unseen_languages, a.n_speakers, a.utts_per_speaker_language,
                     a.languages_per_speaker, a.utterance_seconds, a.seed)
    out = Path(a.out)
    utts = gen_corpus(spec, out)
    parts = split_corpus(utts, a.seed, set(spec.unseen_languages), a.test_fraction, a.val_fraction)
    for name, items in parts.items():
        write_manifest(out / f"{name}.tsv", items)
    if parts["unseen"]:
        trials, emap = gen_trials(parts["unseen"], a.n_trials, a.seed)
        metrics.write_key(out / "trials.key", trials)
        (out / "trials.txt").write_text("".join(f"{e} {t}\n" for e, t, _ in trials))
        write_enroll_map(out / "enroll.txt", emap)
    _write_json(None, {name: len(items) for name, items in parts.items()})


def cmd_train(a):
    ecfg = EncoderConfig(input_dim=64, layer_channels=a.channels, kernel_sizes=a.kernel_sizes,
                         dilations=a.dilations, res2_scale=a.res2_scale, se_bottleneck=a.se_bottleneck,
                         attention_hidden=a.attention_hidden, embedding_dim=a.embedding_dim)
    cfg = TrainConfig(
        epochs=a.epochs, batch_size=a.batch_size, head=a.head, seed=a.seed, crop_seconds=a.crop_seconds,
        margin=MarginConfig(a.scale, a.margin),
        optim=OptimConfig(lr0=a.lr, weight_decay=a.weight_decay),
        augment=AugmentConfig(a.aug_prob, a.snr_range, a.noise_pool, a.rir_pool),
        encoder=ecfg,
    )
    train_utts = read_manifest(a.train_manifest)
    val_utts = read_manifest(a.val_manifest) if a.val_manifest else []
    init = load_checkpoint(a.init) if a.init else None
    root = Path(a.train_manifest).parent
    if val_utts and Path(a.val_manifest).parent != root:
        raise SystemExit("train and validation manifests must share a directory")
    _, logs = train(train_utts, val_utts, cfg, init=init, root=root, out_path=a.out)
    if a.log:
        Path(a.log).write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in logs))
    for e in logs:
        print(json.dumps(e, sort_keys=True))


def cmd_embed(a):
    utts = read_manifest(a.manifest)
    emb = extract_embeddings(utts, load_checkpoint(a.ckpt), Path(a.manifest).parent)
    np.savez(a.out, **emb)
    print(f"{len(emb)} embeddings -> {a.out}")


def cmd_task1(a):
    utts = read_manifest(a.manifest)
    preds, report = run_task1(utts, load_checkpoint(a.ckpt), Path(a.manifest).parent)
    metrics.write_predictions(a.out_pred, [(p.utt_id, p.predicted_label) for p in preds])
    _write_json(a.report, report)


def _read_trials(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts:
            rows.append(tuple(parts[:2]))
    return rows


def cmd_task2(a):
    trials = _read_trials(a.trials)
    emap = read_enroll_map(a.enroll_map)
    key = metrics.read_key(a.key) if a.key else None
    ckpt = load_checkpoint(a.ckpt)
    if a.embeddings:
        with np.load(a.embeddings) as data:
            emb = {k: data[k] for k in data.files}
        records, report = run_task2(trials, emap, ckpt, key=key, embeddings=emb)
    elif a.manifest:
        records, report = run_task2(trials, emap, ckpt, read_manifest(a.manifest), Path(a.manifest).parent, key=key)
    else:
        raise SystemExit("task2 needs --manifest or --embeddings")
    metrics.write_scores(a.out_scores, records)
    _write_json(a.report, report)


def cmd_eval(a):
    report = {}
    if a.scores:
        if not a.key:
            raise SystemExit("--scores needs --key")
        recs = metrics.join_scores_with_key(metrics.read_scores(a.scores), metrics.read_key(a.key))
        report["eer"], report["eer_threshold"] = metrics.compute_eer(recs)
        report["n_trials"] = len(recs)
    if a.pred:
        if not a.manifest:
            raise SystemExit("--pred needs --manifest for reference labels")
        truth = {u.utt_id: u.language for u in read_manifest(a.manifest)}
        pred = metrics.read_predictions(a.pred)
        items = [metrics.Prediction(u, truth[u], p) for u, p in pred.items() if u in truth]
        report["micro_accuracy"] = metrics.micro_accuracy(items)
        report["macro_accuracy"] = metrics.macro_accuracy(items)
    if not report:
        raise SystemExit("nothing to evaluate: pass --scores/--key and/or --pred/--manifest")
    _write_json(a.report, report)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "embed": cmd_embed,
            "task1": cmd_task1, "task2": cmd_task2, "eval": cmd_eval}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    _apply_config(parser, argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    COMMANDS[args.command](args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
