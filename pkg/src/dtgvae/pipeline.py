"""Baseline vs. disentangled-embedding clustering comparison, with ablations."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import cluster, metrics, model
from .data import EmbeddingDataset, make_splits

log = logging.getLogger(__name__)

ALGOS = ("km", "sc", "ac")
ABLATIONS = {"emo": "no-emo", "spk": "no-spk", "mi": "no-mi"}

# fixed offsets from the root seed for each randomised stage
TRAIN_SEED_OFFSET = 1000
CLUSTER_SEED_OFFSET = 2000


@dataclass
class PipelineConfig:
    train: model.TrainConfig = field(default_factory=model.TrainConfig)
    seed: int = 0
    repeats: int = 1
    ablations: tuple[str, ...] = ()
    algos: tuple[str, ...] = ALGOS
    k: int | None = None
    beta_vae: float | None = None
    neutral_split: bool = False


@dataclass
class Score:
    method: str
    algo: str
    repeat: int
    nmi: float
    ari: float
    silhouette: float
    emotion_nmi: float


def score_embeddings(z: np.ndarray, ds: EmbeddingDataset, algo: str, k: int, seed: int,
                     method: str, repeat: int) -> Score:
    labels = cluster.run(algo, z, k, seed=seed).labels
    return Score(
        method=method, algo=algo, repeat=repeat,
        nmi=metrics.nmi(ds.speakers, labels),
        ari=metrics.ari(ds.speakers, labels),
        silhouette=metrics.silhouette(z, labels) if len(np.unique(labels)) > 1 else 0.0,
        emotion_nmi=metrics.nmi(ds.emotions, labels),
    )


def _variants(cfg: PipelineConfig) -> list[tuple[str, model.TrainConfig]]:
    out = [("dtgvae", cfg.train)]
    for term in cfg.ablations:
        if term not in ABLATIONS:
            raise ValueError(f"unknown ablation {term!r}; choose from {sorted(ABLATIONS)}")
        out.append((f"minus-{term}", replace(cfg.train, mask=model.LossMask.parse(ABLATIONS[term]))))
    if cfg.beta_vae is not None:
        out.append(("beta-vae", replace(cfg.train, beta=cfg.beta_vae, mask=model.LossMask.parse("rec,kl"))))
    return out


def run_pipeline(ds: EmbeddingDataset, cfg: PipelineConfig, progress=None) -> list[Score]:
    """Cluster the held-out split with raw embeddings and with each trained model."""
    k = cfg.k or ds.n_speakers
    plans = make_splits(ds, cfg.seed, cfg.repeats)
    scores: list[Score] = []
    for r, plan in enumerate(plans):
        test = ds.subset(plan.test)
        cseed = cfg.seed + CLUSTER_SEED_OFFSET + r
        for algo in cfg.algos:
            scores.append(score_embeddings(test.x, test, algo, k, cseed, "baseline", r))
        if cfg.neutral_split and "neutral" in ds.emotion_names:
            neutral = ds.emotion_names.index("neutral")
            for name, keep in (("baseline-neutral", test.emotions == neutral),
                               ("baseline-emotional", test.emotions != neutral)):
                part = test.subset(np.flatnonzero(keep))
                if part.n < 2:
                    log.warning("repeat %d: %s has %d test rows; skipped", r, name, part.n)
                    continue
                for algo in cfg.algos:
                    scores.append(score_embeddings(part.x, part, algo, min(k, part.n), cseed, name, r))
        for method, tcfg in _variants(cfg):
            tcfg = replace(tcfg, seed=cfg.seed + TRAIN_SEED_OFFSET + r)
            result = model.train(ds, tcfg, plan)
            z = model.extract_bottleneck(result.checkpoint, test.x)
            for algo in cfg.algos:
                s = score_embeddings(z, test, algo, k, cseed, method, r)
                scores.append(s)
                if progress:
                    progress(s)
            log.info("repeat %d %s best epoch %d", r, method, result.best_epoch)
    return scores


METHOD_ORDER = ("baseline", "baseline-neutral", "baseline-emotional", "dtgvae",
                "minus-emo", "minus-spk", "minus-mi", "beta-vae")
SUMMARY_COLUMNS = ("method", "algo", "n_repeats", "nmi_mean", "nmi_std", "ari_mean", "ari_std",
                   "silhouette_mean", "silhouette_std", "emotion_nmi_mean", "emotion_nmi_std")


def summarize(scores: list[Score]) -> list[dict]:
    """Mean and sample standard deviation per (method, algo); std is 0 for one repeat."""
    groups: dict[tuple[str, str], list[Score]] = {}
    for s in scores:
        groups.setdefault((s.method, s.algo), []).append(s)
    rows = []
    for (method, algo), group in groups.items():
        row = {"method": method, "algo": algo, "n_repeats": len(group)}
        for metric in ("nmi", "ari", "silhouette", "emotion_nmi"):
            vals = np.array([getattr(s, metric) for s in group])
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    rows.sort(key=lambda r: (METHOD_ORDER.index(r["method"]), ALGOS.index(r["algo"])))
    return rows


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([row[c] if isinstance(row[c], (str, int)) else "%.6f" % row[c] for c in SUMMARY_COLUMNS])
    return buf.getvalue()
