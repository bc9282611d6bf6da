"""Deterministic synthetic multilingual, multi-speaker corpus.

Signal model: a *language* is an inventory of "phones", each a small set of
resonances; an utterance strings phones of its language together in random
order. A *speaker* contributes the excitation: fundamental frequency, jitter,
and a slow amplitude contour. The same speaker talks in several languages, so
a model that keys on voice rather than resonance pattern fails on held-out
speakers.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from .errors import InfeasibleSpec, InfeasibleSplit, InfeasibleTrials
from .features import SAMPLE_RATE, write_wav
from .metrics import NONTARGET, TARGET

log = logging.getLogger(__name__)

PHONES_PER_LANGUAGE = 5
FORMANTS_PER_PHONE = 3
_FORMANT_GRID = np.geomspace(250.0, 5500.0, 48)


class Utterance(NamedTuple):
    utt_id: str
    path: str
    language: str
    speaker: str


@dataclass(frozen=True)
class SynthSpec:
    n_languages: int = 8
    n_unseen_languages: int = 3
    n_speakers: int = 24
    utts_per_speaker_language: int = 4
    languages_per_speaker: tuple[int, int] = (2, 10)
    utterance_seconds: float = 4.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = (int(v) for v in self.languages_per_speaker)
        object.__setattr__(self, "languages_per_speaker", (lo, hi))
        if min(self.n_languages, self.n_speakers, self.utts_per_speaker_language) < 1:
            raise InfeasibleSpec("counts must be positive")
        if not 0 <= self.n_unseen_languages < self.n_languages:
            raise InfeasibleSpec("need at least one seen language")
        if lo < 2 or lo > hi or lo > self.n_languages:
            raise InfeasibleSpec(
                f"languages_per_speaker {self.languages_per_speaker} outside [2, {self.n_languages}]"
            )
        if self.utterance_seconds <= 0.05:
            raise InfeasibleSpec("utterances must be longer than 50 ms")

    @property
    def languages(self) -> list[str]:
        seen = [f"L{i:02d}" for i in range(self.n_languages - self.n_unseen_languages)]
        return seen + self.unseen_languages

    @property
    def unseen_languages(self) -> list[str]:
        return [f"U{i:02d}" for i in range(self.n_unseen_languages)]

    @property
    def seen_languages(self) -> list[str]:
        return [lang for lang in self.languages if lang not in self.unseen_languages]


# ---------------------------------------------------------------- identities


def _language_inventories(spec: SynthSpec, rng) -> dict[str, np.ndarray]:
    """Per language, an array (phones, formants) of resonance centres in Hz.

    Seen and unseen languages draw from disjoint halves of the grid.
    """
    grid = rng.permutation(_FORMANT_GRID)
    half = len(grid) // 2
    pools = {"seen": np.sort(grid[:half]), "unseen": np.sort(grid[half:])}
    inv = {}
    for lang in spec.languages:
        pool = pools["unseen" if lang.startswith("U") else "seen"]
        phones = [np.sort(rng.choice(pool, FORMANTS_PER_PHONE, replace=False)) for _ in range(PHONES_PER_LANGUAGE)]
        inv[lang] = np.array(phones)
    return inv


def _speakers(spec: SynthSpec, rng) -> dict[str, dict]:
    out = {}
    for i in range(spec.n_speakers):
        out[f"spk{i:03d}"] = {
            "f0": float(rng.uniform(85.0, 255.0)),
            "jitter": float(rng.uniform(0.005, 0.03)),
            "level": float(rng.uniform(0.3, 0.9)),
            "contour_hz": rng.uniform(0.5, 4.0, 3),
            "contour_depth": rng.uniform(0.1, 0.5, 3),
        }
    return out


def _assign_languages(spec: SynthSpec, rng) -> dict[str, list[str]]:
    lo, hi = spec.languages_per_speaker
    hi = min(hi, spec.n_languages)
    langs = spec.languages
    for _ in range(200):
        assignment = {}
        for i in range(spec.n_speakers):
            k = int(rng.integers(lo, hi + 1))
            assignment[f"spk{i:03d}"] = sorted(rng.choice(langs, k, replace=False).tolist())
        counts = {lang: sum(lang in v for v in assignment.values()) for lang in langs}
        if min(counts.values()) >= 2:
            return assignment
    raise InfeasibleSpec("could not give every language at least two speakers")


def _resonator(freq, bandwidth, sr=SAMPLE_RATE):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * freq / sr
    return [1.0 - r], [1.0, -2 * r * np.cos(theta), r * r]


def synthesize(phones: np.ndarray, voice: dict, n_samples: int, rng) -> np.ndarray:
    """One utterance: a phone sequence of a language voiced by one speaker."""
    sr = SAMPLE_RATE
    t = np.arange(n_samples) / sr
    f0 = voice["f0"] * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 6) * t + rng.uniform(0, 2 * np.pi)))
    f0 *= 1 + voice["jitter"] * rng.normal(size=n_samples)
    phase = np.cumsum(f0 / sr)
    excitation = np.diff(np.floor(phase), prepend=0.0)
    excitation += 0.03 * rng.normal(size=n_samples)

    filtered = np.zeros((len(phones), n_samples))
    for p, centres in enumerate(phones):
        for f in centres:
            b, a = _resonator(f, 60.0 + 0.06 * f)
            filtered[p] += lfilter(b, a, excitation)

    # phone sequence with short linear crossfades
    seq = np.zeros((len(phones), n_samples))
    pos = 0
    fade = int(0.005 * sr)
    while pos < n_samples:
        dur = int(rng.uniform(0.06, 0.2) * sr)
        p = int(rng.integers(len(phones)))
        end = min(n_samples, pos + dur)
        seq[p, pos:end] = 1.0
        pos = end
    if fade > 1:
        kernel = np.ones(fade) / fade
        seq = np.array([np.convolve(row, kernel, mode="same") for row in seq])
    y = (seq * filtered).sum(axis=0)

    contour = np.ones(n_samples)
    for hz, depth in zip(voice["contour_hz"], voice["contour_depth"]):
        contour *= 1 + depth * np.sin(2 * np.pi * hz * t + rng.uniform(0, 2 * np.pi))
    y *= contour
    y /= np.max(np.abs(y)) + 1e-12
    y += 10 ** (-30 / 20) * rng.normal(size=n_samples) * np.std(y)
    return voice["level"] * y / (np.max(np.abs(y)) + 1e-12)


def gen_corpus(spec: SynthSpec, out_dir) -> list[Utterance]:
    """Write WAVs, ``manifest.tsv`` and ``languages.tsv`` under ``out_dir``.

    Every utterance draws from its own rng stream keyed by (seed, index), so
    the bytes written do not depend on generation order.
    """
    out_dir = Path(out_dir)
    master = np.random.default_rng(spec.seed)
    inventories = _language_inventories(spec, master)
    voices = _speakers(spec, master)
    assignment = _assign_languages(spec, master)
    n_samples = int(round(spec.utterance_seconds * SAMPLE_RATE))

    manifest = []
    index = 0
    for spk in sorted(assignment):
        for lang in assignment[spk]:
            for k in range(spec.utts_per_speaker_language):
                utt_id = f"{spk}-{lang}-{k:02d}"
                rel = f"wav/{lang}/{utt_id}.wav"
                manifest.append((index, Utterance(utt_id, rel, lang, spk)))
                index += 1
    try:
        for lang in spec.languages:
            (out_dir / "wav" / lang).mkdir(parents=True, exist_ok=True)
        for index, utt in manifest:
            rng = np.random.default_rng([spec.seed, index])
            audio = synthesize(inventories[utt.language], voices[utt.speaker], n_samples, rng)
            write_wav(out_dir / utt.path, audio)
        utts = [u for _, u in manifest]
        write_manifest(out_dir / "manifest.tsv", utts)
        with open(out_dir / "languages.tsv", "w") as fh:
            for lang in spec.languages:
                fh.write(f"{lang}\t{'unseen' if lang in spec.unseen_languages else 'seen'}\n")
    except OSError as exc:
        raise IOError(f"cannot write corpus under {out_dir}: {exc}") from exc
    log.info("wrote %d utterances to %s", len(utts), out_dir)
    return utts


# ---------------------------------------------------------------- manifests


def write_manifest(path, utts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for u in utts:
            w.writerow(u)


def read_manifest(path) -> list[Utterance]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    bad = [r for r in rows if len(r) != 4]
    if bad:
        raise ValueError(f"{path}: manifest rows need 4 tab-separated fields, got {bad[0]}")
    return [Utterance(*r) for r in rows]


def read_languages(path) -> dict[str, str]:
    with open(path) as fh:
        return dict(line.split() for line in fh if line.strip())


def split_corpus(
    manifest: list[Utterance],
    seed: int = 0,
    unseen: set[str] | frozenset = frozenset(),
    test_fraction: float = 0.25,
    val_fraction: float = 0.125,
) -> dict[str, list[Utterance]]:
    """Speaker-disjoint train/val/test over seen languages, plus ``unseen``.

    Unseen-language utterances never reach train/val/test; they are kept
    apart for verification trials. Speaker permutations are redrawn until
    every seen language occurs in both train and test.
    """
    if not manifest:
        raise InfeasibleSplit("empty manifest")
    unseen = set(unseen)
    seen_utts = [u for u in manifest if u.language not in unseen]
    speakers = sorted({u.speaker for u in seen_utts})
    seen_langs = sorted({u.language for u in seen_utts})
    n = len(speakers)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    if n_test < 1 or n - n_test - n_val < 1:
        raise InfeasibleSplit(f"{n} speakers cannot fill the requested split")
    by_spk = {s: {u.language for u in seen_utts if u.speaker == s} for s in speakers}

    def covered(group):
        return set().union(*(by_spk[s] for s in group))

    rng = np.random.default_rng(seed)
    for _ in range(500):
        perm = [speakers[i] for i in rng.permutation(n)]
        test_s, val_s, train_s = perm[:n_test], perm[n_test : n_test + n_val], perm[n_test + n_val :]
        if covered(train_s) >= set(seen_langs) and covered(test_s) >= set(seen_langs):
            groups = {"train": set(train_s), "val": set(val_s), "test": set(test_s)}
            out = {name: [u for u in seen_utts if u.speaker in spk] for name, spk in groups.items()}
            out["unseen"] = [u for u in manifest if u.language in unseen]
            return out
    raise InfeasibleSplit("no speaker split covers every seen language in train and test")


def gen_trials(manifest: list[Utterance], n_trials: int, seed: int = 0, enroll_utts: int = 1):
    """Balanced target/nontarget trials over ``manifest``.

    An enrollment model is ``enroll_utts`` utterances of one speaker in one
    language. Test utterances come from a different speaker whenever the
    language offers one. Returns ``(trials, enroll_map)`` where ``trials`` is
    a list of ``(enroll_id, test_id, target|nontarget)``.
    """
    langs = sorted({u.language for u in manifest})
    if len(langs) < 2:
        raise InfeasibleTrials("need at least two languages")
    if n_trials < 2:
        raise InfeasibleTrials("need at least two trials")
    rng = np.random.default_rng(seed)
    groups: dict[tuple[str, str], list[Utterance]] = {}
    for u in manifest:
        groups.setdefault((u.language, u.speaker), []).append(u)
    models = {}
    for (lang, spk), utts in sorted(groups.items()):
        models[f"{lang}-{spk}"] = (lang, spk, [u.utt_id for u in utts[:enroll_utts]])
    model_ids = sorted(models)

    def pick_test(lang, spk, same_language, exclude):
        pool = [
            u for u in manifest
            if (u.language == lang) == same_language and u.utt_id not in exclude
        ]
        other = [u for u in pool if u.speaker != spk]
        pool = other or pool
        if not pool:
            return None
        return pool[int(rng.integers(len(pool)))].utt_id

    n_target = (n_trials + 1) // 2
    trials, seen = [], set()
    for i in range(n_trials):
        want_target = i < n_target
        for _ in range(50):
            mid = model_ids[int(rng.integers(len(model_ids)))]
            lang, spk, enroll = models[mid]
            test = pick_test(lang, spk, want_target, set(enroll))
            if test is not None and (mid, test) not in seen:
                break
        else:
            if test is None:
                raise InfeasibleTrials("no test utterance available for a trial")
        seen.add((mid, test))
        trials.append((mid, test, TARGET if want_target else NONTARGET))
    order = rng.permutation(len(trials))
    trials = [trials[i] for i in order]
    used = {t[0] for t in trials}
    enroll_map = {mid: models[mid][2] for mid in model_ids if mid in used}
    return trials, enroll_map


def write_enroll_map(path, enroll_map: dict[str, list[str]]) -> None:
    with open(path, "w") as fh:
        for mid, utts in enroll_map.items():
            fh.write(" ".join([mid, *utts]) + "\n")


def read_enroll_map(path) -> dict[str, list[str]]:
    out = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out[parts[0]] = parts[1:]
    return out
