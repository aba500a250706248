"""Labelled embedding datasets: CSV I/O, seeded splits and a synthetic generator."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import atomic_write_bytes


class DataError(ValueError):
    """Malformed or unusable dataset."""


class MissingHeaderError(DataError):
    pass


class RaggedRowError(DataError):
    pass


class NonNumericError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class TooSmallError(DataError):
    pass


@dataclass
class EmbeddingDataset:
    ids: list[str]
    speakers: np.ndarray   # int, dense in [0, n_speakers)
    emotions: np.ndarray   # int, dense in [0, n_emotions)
    x: np.ndarray          # N × D float64
    speaker_names: list[str] = field(default_factory=list)
    emotion_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        self.emotions = np.asarray(self.emotions, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        n = len(self.ids)
        if self.x.ndim != 2 or self.x.shape[0] != n or len(self.speakers) != n or len(self.emotions) != n:
            raise DataError("ids, labels and vectors disagree in length")
        if len(set(self.ids)) != n:
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise DuplicateIdError(f"duplicate utterance id {dup!r}")
        if not self.speaker_names:
            self.speaker_names = [str(i) for i in range(int(self.speakers.max(initial=-1)) + 1)]
        if not self.emotion_names:
            self.emotion_names = [str(i) for i in range(int(self.emotions.max(initial=-1)) + 1)]

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_names)

    @property
    def n_emotions(self) -> int:
        return len(self.emotion_names)

    def subset(self, index: Sequence[int]) -> "EmbeddingDataset":
        index = np.asarray(index, dtype=np.int64)
        return EmbeddingDataset(
            ids=[self.ids[i] for i in index],
            speakers=self.speakers[index],
            emotions=self.emotions[index],
            x=self.x[index],
            speaker_names=list(self.speaker_names),
            emotion_names=list(self.emotion_names),
        )

    def equals(self, other: "EmbeddingDataset") -> bool:
        return (
            self.ids == other.ids
            and self.speaker_names == other.speaker_names
            and self.emotion_names == other.emotion_names
            and np.array_equal(self.speakers, other.speakers)
            and np.array_equal(self.emotions, other.emotions)
            and self.x.shape == other.x.shape
            and np.array_equal(self.x.view(np.uint64), other.x.view(np.uint64))
        )


# ---------------------------------------------------------------------- CSV

def format_float(v: float) -> str:
    return "%.17g" % v


def dataset_to_csv(ds: EmbeddingDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utt_id", "speaker", "emotion"] + [f"f{j}" for j in range(ds.dim)])
    for i, uid in enumerate(ds.ids):
        w.writerow([uid, ds.speaker_names[ds.speakers[i]], ds.emotion_names[ds.emotions[i]]]
                   + [format_float(v) for v in ds.x[i]])
    return buf.getvalue()


def save_csv(ds: EmbeddingDataset, path) -> None:
    atomic_write_bytes(path, dataset_to_csv(ds).encode("utf-8"))


def read_labelled_matrix(path, prefix: str) -> tuple[list[str], list[str], list[str], np.ndarray]:
    """Parse ``utt_id,speaker,emotion,<prefix>0,...`` rows; shared by dataset and latent CSVs."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if not header or header[:3] != ["utt_id", "speaker", "emotion"]:
            raise MissingHeaderError(f"{path}: line 1: expected header utt_id,speaker,emotion,{prefix}0,...")
        width = len(header)
        expected = [f"{prefix}{j}" for j in range(width - 3)]
        if header[3:] != expected:
            raise MissingHeaderError(f"{path}: line 1: feature columns must be {prefix}0..{prefix}{width - 4}")
        ids, spk, emo, vecs = [], [], [], []
        seen: set[str] = set()
        for line_no, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RaggedRowError(f"{path}: line {line_no}: {len(row) - 3} features, expected {width - 3}")
            uid = row[0]
            if uid in seen:
                raise DuplicateIdError(f"{path}: line {line_no}: duplicate utterance id {uid!r}")
            seen.add(uid)
            try:
                vec = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise NonNumericError(f"{path}: line {line_no}: {exc}") from None
            ids.append(uid)
            spk.append(row[1])
            emo.append(row[2])
            vecs.append(vec)
    x = np.array(vecs, dtype=np.float64).reshape(len(vecs), width - 3)
    return ids, spk, emo, x


def label_vocab(names: list[str]) -> tuple[np.ndarray, list[str]]:
    vocab: dict[str, int] = {}
    idx = [vocab.setdefault(n, len(vocab)) for n in names]
    return np.array(idx, dtype=np.int64), list(vocab)


def load_csv(path) -> EmbeddingDataset:
    ids, spk, emo, x = read_labelled_matrix(path, "f")
    speakers, speaker_names = label_vocab(spk)
    emotions, emotion_names = label_vocab(emo)
    return EmbeddingDataset(ids, speakers, emotions, x, speaker_names, emotion_names)


# ------------------------------------------------------------------- splits

@dataclass
class SplitPlan:
    seed: int
    fold: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_splits(ds: EmbeddingDataset, seed: int, n_repeats: int = 10,
                ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> list[SplitPlan]:
    """Independent speaker-stratified random splits, one per repeat."""
    counts = np.bincount(ds.speakers, minlength=ds.n_speakers)
    small = [ds.speaker_names[s] for s in range(ds.n_speakers) if counts[s] < 3]
    if small:
        raise TooSmallError(f"speakers with fewer than 3 records: {small}")
    plans = []
    for fold in range(n_repeats):
        rng = np.random.default_rng([seed, fold])
        parts: list[list[int]] = [[], [], []]
        for s in range(ds.n_speakers):
            members = np.flatnonzero(ds.speakers == s)
            members = rng.permutation(members)
            n = len(members)
            n_val = int(round(n * ratios[1]))
            n_test = int(round(n * ratios[2]))
            n_val = min(n_val, n - 1)
            n_test = min(n_test, n - 1 - n_val)
            parts[1].extend(members[:n_val])
            parts[2].extend(members[n_val:n_val + n_test])
            parts[0].extend(members[n_val + n_test:])
        train, val, test = (np.sort(np.array(p, dtype=np.int64)) for p in parts)
        plans.append(SplitPlan(seed=seed, fold=fold, train=train, val=val, test=test))
    return plans


# ---------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    n_speakers: int = 10
    n_emotions: int = 5
    per_cell: int = 30
    dim: int = 256
    centroid_scale: float = 1.0
    offset_scale: float = 1.0
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_speakers", "n_emotions", "per_cell", "dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("centroid_scale", "offset_scale", "noise"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")


EMOTION_NAMES = ["neutral", "anger", "happiness", "sadness", "surprise"]


def synth_generate(cfg: SynthConfig) -> EmbeddingDataset:
    """Additive model: speaker centroid + shared emotion offset + isotropic noise."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centroids = rng.normal(0.0, cfg.centroid_scale, size=(cfg.n_speakers, cfg.dim))
    offsets = rng.normal(0.0, cfg.offset_scale, size=(cfg.n_emotions, cfg.dim))
    spk = np.repeat(np.arange(cfg.n_speakers), cfg.n_emotions * cfg.per_cell)
    emo = np.tile(np.repeat(np.arange(cfg.n_emotions), cfg.per_cell), cfg.n_speakers)
    noise = rng.normal(0.0, cfg.noise, size=(len(spk), cfg.dim))
    x = centroids[spk] + offsets[emo] + noise
    ids = [f"spk{s:02d}_emo{e}_{i:04d}" for i, (s, e) in enumerate(zip(spk, emo))]
    emotion_names = [EMOTION_NAMES[e] if e < len(EMOTION_NAMES) else f"emo{e}"
                     for e in range(cfg.n_emotions)]
    return EmbeddingDataset(
        ids=ids, speakers=spk, emotions=emo, x=x,
        speaker_names=[f"spk{s:02d}" for s in range(cfg.n_speakers)],
        emotion_names=emotion_names,
    )


@dataclass
class Summary:
    n: int
    dim: int
    speaker_counts: dict[str, int]
    emotion_counts: dict[str, int]


def describe(ds: EmbeddingDataset) -> Summary:
    spk = np.bincount(ds.speakers, minlength=ds.n_speakers)
    emo = np.bincount(ds.emotions, minlength=ds.n_emotions)
    return Summary(
        n=ds.n,
        dim=ds.x.shape[1] if ds.x.ndim == 2 else 0,
        speaker_counts={name: int(spk[i]) for i, name in enumerate(ds.speaker_names)},
        emotion_counts={name: int(emo[i]) for i, name in enumerate(ds.emotion_names)},
    )
