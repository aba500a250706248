"""Dual-latent VAE that splits an embedding into speaker and emotion parts.

Layout (all dense layers are Glorot-initialised):

* shared encoder: three dense+ReLU layers, ``D -> hidden``
* speaker / emotion encoders (identical shape): three dense layers, each
  followed by LayerNorm and ReLU, then linear heads for the posterior mean and
  log-variance
* decoder: ``concat(z_spk, z_emo)`` through two dense+ReLU layers and a linear
  output layer back to ``D``
* linear speaker and emotion classifiers on the sampled latents
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from . import ad, nn
from .ad import Tensor
from .data import DataError, EmbeddingDataset, SplitPlan, make_splits

log = logging.getLogger(__name__)

TERMS = ("rec", "kl", "mi", "spk", "emo")
MI_RIDGE = 1e-3


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or a numerical failure."""


class DegenerateDataError(DataError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    n_speakers: int
    n_emotions: int
    hidden_dim: int = 256
    latent_dim: int = 256
    decoder_dim: int = 256

    def layer_specs(self) -> list[nn.LayerSpec]:
        D, H, Z, M = self.input_dim, self.hidden_dim, self.latent_dim, self.decoder_dim
        specs = [
            nn.LayerSpec("share.0", "dense", D, H),
            nn.LayerSpec("share.1", "dense", H, H),
            nn.LayerSpec("share.2", "dense", H, H),
        ]
        for branch in ("spk", "emo"):
            for i in range(3):
                specs.append(nn.LayerSpec(f"{branch}.{i}", "dense", H, H))
                specs.append(nn.LayerSpec(f"{branch}.ln{i}", "layernorm", H))
            specs.append(nn.LayerSpec(f"{branch}.mu", "dense", H, Z))
            specs.append(nn.LayerSpec(f"{branch}.logvar", "dense", H, Z))
        specs += [
            nn.LayerSpec("dec.0", "dense", 2 * Z, M),
            nn.LayerSpec("dec.1", "dense", M, M),
            nn.LayerSpec("dec.out", "dense", M, D),
            nn.LayerSpec("clf_spk", "dense", Z, self.n_speakers),
            nn.LayerSpec("clf_emo", "dense", Z, self.n_emotions),
        ]
        return specs

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in nn.init_params(0, self.layer_specs()).items()}


def init_model(arch: Architecture, seed: int) -> nn.Params:
    return nn.init_params(seed, arch.layer_specs())


def bind(params: nn.Params, requires_grad: bool = False) -> dict[str, Tensor]:
    """Wrap raw arrays as leaf tensors for one forward pass."""
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _dense(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return nn.dense_forward(nn.DenseLayer(p[f"{name}.weight"], p[f"{name}.bias"]), x)


def _layernorm(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return nn.layernorm_forward(nn.LayerNorm(p[f"{name}.gain"], p[f"{name}.shift"]), x)


# ------------------------------------------------------------------ forward

@dataclass
class LatentPosterior:
    mu_spk: Tensor
    logvar_spk: Tensor
    mu_emo: Tensor
    logvar_emo: Tensor
    z_spk: Tensor
    z_emo: Tensor


def _gaussian_branch(p, branch: str, h: Tensor) -> tuple[Tensor, Tensor]:
    for i in range(3):
        h = ad.relu(_layernorm(p, f"{branch}.ln{i}", _dense(p, f"{branch}.{i}", h)))
    return _dense(p, f"{branch}.mu", h), _dense(p, f"{branch}.logvar", h)


def _reparameterize(mu: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), Tensor(eps)))


def encode(p: dict[str, Tensor], x, mode: str = "sample",
           rng: np.random.Generator | None = None,
           eps: tuple[np.ndarray, np.ndarray] | None = None) -> LatentPosterior:
    """Posterior parameters for both branches; ``mode="mean"`` sets z = mu.

    In sample mode the noise comes from ``eps`` if given, else from ``rng``.
    """
    x = ad.as_tensor(x)
    d_in = p["share.0.weight"].shape[0]
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ad.ShapeError(f"model expects {d_in}-dimensional inputs, got {x.shape}")
    h = x
    for i in range(3):
        h = ad.relu(_dense(p, f"share.{i}", h))
    mu_s, lv_s = _gaussian_branch(p, "spk", h)
    mu_e, lv_e = _gaussian_branch(p, "emo", h)
    if mode == "mean":
        z_s, z_e = mu_s, mu_e
    elif mode == "sample":
        if eps is None:
            if rng is None:
                raise ValueError("sample mode needs an rng or explicit eps")
            eps = (rng.standard_normal(mu_s.shape), rng.standard_normal(mu_e.shape))
        z_s = _reparameterize(mu_s, lv_s, eps[0])
        z_e = _reparameterize(mu_e, lv_e, eps[1])
    else:
        raise ValueError(f"unknown encode mode {mode!r}")
    return LatentPosterior(mu_s, lv_s, mu_e, lv_e, z_s, z_e)


def decode(p: dict[str, Tensor], z_spk, z_emo) -> Tensor:
    z_spk, z_emo = ad.as_tensor(z_spk), ad.as_tensor(z_emo)
    if z_spk.shape != z_emo.shape:
        raise ad.ShapeError(f"latent shapes differ: {z_spk.shape} vs {z_emo.shape}")
    h = ad.concat([z_spk, z_emo], axis=1)
    h = ad.relu(_dense(p, "dec.0", h))
    h = ad.relu(_dense(p, "dec.1", h))
    return _dense(p, "dec.out", h)


# ------------------------------------------------------------------- losses

def loss_reconstruction(x, x_hat) -> Tensor:
    """Half mean-absolute plus half mean-squared error over all entries."""
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ad.ShapeError(f"reconstruction shape {x_hat.shape} != input {x.shape}")
    diff = ad.sub(x, x_hat)
    return ad.add(ad.mul(ad.mean(ad.absolute(diff)), 0.5), ad.mul(ad.mean(ad.square(diff)), 0.5))


def _kl_branch(mu: Tensor, logvar: Tensor) -> Tensor:
    if not np.isfinite(logvar.data).all():
        raise ad.NonFiniteError("non-finite log-variance")
    per_entry = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), ad.add(logvar, 1.0))
    return ad.mul(ad.sum(per_entry), 0.5 / mu.shape[0])


def loss_kl(post: LatentPosterior, beta: float = 1.0) -> Tensor:
    """beta * (KL(q_spk || N(0, I)) + KL(q_emo || N(0, I))), batch-averaged."""
    kl = ad.add(_kl_branch(post.mu_spk, post.logvar_spk), _kl_branch(post.mu_emo, post.logvar_emo))
    return ad.mul(kl, beta)


def loss_mutual_information(z_spk, z_emo, ridge: float = MI_RIDGE) -> Tensor:
    """Gaussian estimate of I(z_spk; z_emo) from batch covariances, in nats."""
    z_spk, z_emo = ad.as_tensor(z_spk), ad.as_tensor(z_emo)
    if z_spk.shape[0] != z_emo.shape[0]:
        raise ad.ShapeError("latent batches differ in size")
    if z_spk.shape[0] < 4:
        raise ValueError(f"mutual information needs a batch of at least 4, got {z_spk.shape[0]}")
    joint = ad.concat([z_spk, z_emo], axis=1)
    marginals = ad.add(covariance_logdet(z_spk, ridge), covariance_logdet(z_emo, ridge))
    return ad.mul(ad.sub(marginals, covariance_logdet(joint, ridge)), 0.5)


def covariance_logdet(z: Tensor, ridge: float) -> Tensor:
    """log det of the ridged sample covariance of the rows of ``z``.

    With fewer rows than columns the determinant is taken on the n × n Gram
    matrix instead; both routes agree exactly in exact arithmetic.
    """
    n, d = z.shape
    if n < d:
        return ad.add(ad.logdet_psd(ad.centered_gram(z, ridge)), (d - n) * np.log(ridge))
    return ad.logdet_psd(ad.covariance(z, ridge))


def loss_speaker_ce(p: dict[str, Tensor], z_spk, y_spk) -> Tensor:
    return ad.cross_entropy(_dense(p, "clf_spk", ad.as_tensor(z_spk)), y_spk)


def loss_emotion_ce(p: dict[str, Tensor], z_emo, y_emo) -> Tensor:
    return ad.cross_entropy(_dense(p, "clf_emo", ad.as_tensor(z_emo)), y_emo)


@dataclass(frozen=True)
class LossMask:
    rec: bool = True
    kl: bool = True
    mi: bool = True
    spk: bool = True
    emo: bool = True

    @classmethod
    def parse(cls, text: str) -> "LossMask":
        """``full``, ``no-spk`` / ``no-emo,no-mi`` style removals, or an explicit ``rec,kl`` list."""
        text = text.strip().lower()
        if text in ("", "full", "all"):
            return cls()
        items = [t.strip() for t in text.split(",") if t.strip()]
        if all(t.startswith("no-") for t in items):
            off = {t[3:] for t in items}
            bad = off - set(TERMS)
            if bad:
                raise ValueError(f"unknown loss terms {sorted(bad)}")
            return cls(**{t: t not in off for t in TERMS})
        bad = set(items) - set(TERMS)
        if bad:
            raise ValueError(f"unknown loss terms {sorted(bad)}")
        return cls(**{t: t in items for t in TERMS})

    def active(self) -> tuple[str, ...]:
        return tuple(t for t in TERMS if getattr(self, t))

    def label(self) -> str:
        off = [t for t in TERMS if not getattr(self, t)]
        return "full" if not off else ",".join(f"no-{t}" for t in off)


@dataclass
class LossBreakdown:
    rec: float
    kl: float
    mi: float
    spk: float
    emo: float
    total: float
    mask: LossMask


def loss_total(parts: dict[str, Tensor], mask: LossMask = LossMask(), beta: float = 1.0
               ) -> tuple[Tensor, LossBreakdown]:
    """Sum the active terms.  ``parts["kl"]`` is unweighted; beta is applied here.

    Terms that are masked off (or absent) are reported but never enter the
    graph of the returned total, so they contribute no gradient.
    """
    weighted = dict(parts)
    if "kl" in weighted:
        weighted["kl"] = ad.mul(weighted["kl"], beta)
    total = None
    for term in mask.active():
        if term in weighted:
            total = weighted[term] if total is None else ad.add(total, weighted[term])
    if total is None:
        total = Tensor(0.0)
    values = {t: (float(weighted[t].data) if t in weighted else 0.0) for t in TERMS}
    return total, LossBreakdown(**values, total=float(total.data), mask=mask)


def compute_losses(p: dict[str, Tensor], x: np.ndarray, y_spk: np.ndarray, y_emo: np.ndarray,
                   mask: LossMask = LossMask(), beta: float = 1.0, mode: str = "sample",
                   rng: np.random.Generator | None = None,
                   eps: tuple[np.ndarray, np.ndarray] | None = None,
                   skip_inactive: bool = False) -> tuple[Tensor, LossBreakdown]:
    """Full forward pass and every loss term on one batch."""
    post = encode(p, x, mode=mode, rng=rng, eps=eps)
    parts: dict[str, Tensor] = {}
    if mask.rec or not skip_inactive:
        parts["rec"] = loss_reconstruction(x, decode(p, post.z_spk, post.z_emo))
    if mask.kl or not skip_inactive:
        parts["kl"] = loss_kl(post, 1.0)
    if mask.mi or not skip_inactive:
        parts["mi"] = loss_mutual_information(post.z_spk, post.z_emo)
    if mask.spk or not skip_inactive:
        parts["spk"] = loss_speaker_ce(p, post.z_spk, y_spk)
    if mask.emo or not skip_inactive:
        parts["emo"] = loss_emotion_ce(p, post.z_emo, y_emo)
    return loss_total(parts, mask, beta)


def loss_and_grads(params: nn.Params, x, y_spk, y_emo, mask: LossMask = LossMask(), beta: float = 1.0,
                   rng=None, eps=None) -> tuple[LossBreakdown, nn.Params]:
    p = bind(params, requires_grad=True)
    total, breakdown = compute_losses(p, x, y_spk, y_emo, mask, beta, "sample", rng, eps)
    if total.requires_grad:
        ad.backward(total)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}
    return breakdown, grads


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 400
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    beta: float = 1.0
    mask: LossMask = field(default_factory=LossMask)
    patience: int = 50
    hidden_dim: int = 256
    latent_dim: int = 256
    decoder_dim: int = 256

    def validate(self) -> None:
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.patience <= 0:
            raise ValueError("patience must be positive")


@dataclass
class EpochLog:
    epoch: int
    rec: float
    kl: float
    mi: float
    spk: float
    emo: float
    total: float
    val_spk_acc: float
    val_loss: float
    val_rec_mse: float

    CSV_COLUMNS = ("epoch", "rec", "kl", "mi", "spk", "emo", "total", "val_spk_acc")


@dataclass
class TrainResult:
    checkpoint: nn.Checkpoint
    log: list[EpochLog]
    best_epoch: int
    stopped_early: bool


def _batches(order: np.ndarray, size: int, min_size: int = 4) -> Iterable[np.ndarray]:
    # a tail shorter than the MI estimator's minimum joins the previous batch
    cuts = list(range(0, len(order), size))
    if len(cuts) > 1 and len(order) - cuts[-1] < min_size:
        cuts.pop()
    bounds = cuts[1:] + [len(order)]
    for lo, hi in zip(cuts, bounds):
        yield order[lo:hi]


def evaluate(params: nn.Params, ds: EmbeddingDataset, mask: LossMask, beta: float) -> dict[str, float]:
    """Mean-mode validation metrics on a whole split."""
    p = bind(params)
    post = encode(p, ds.x, mode="mean")
    logits = _dense(p, "clf_spk", post.mu_spk).data
    acc = float((logits.argmax(axis=1) == ds.speakers).mean())
    x_hat = decode(p, post.z_spk, post.z_emo)
    parts = {
        "rec": loss_reconstruction(ds.x, x_hat),
        "kl": loss_kl(post, 1.0),
        "spk": loss_speaker_ce(p, post.z_spk, ds.speakers),
        "emo": loss_emotion_ce(p, post.z_emo, ds.emotions),
    }
    if mask.mi and ds.n >= 4:
        parts["mi"] = loss_mutual_information(post.z_spk, post.z_emo)
    total, _ = loss_total(parts, mask, beta)
    mse = float(np.mean((ds.x - x_hat.data) ** 2))
    return {"acc": acc, "loss": float(total.data), "rec_mse": mse}


def train(ds: EmbeddingDataset, config: TrainConfig, split: SplitPlan | None = None,
          progress=None) -> TrainResult:
    """Minibatch Adam training with best-validation checkpoint selection.

    The selection key is validation speaker accuracy, ties broken by lower
    validation loss; training stops after ``patience`` epochs without an
    improvement of that key.
    """
    config.validate()
    if split is None:
        split = make_splits(ds, config.seed, 1)[0]
    train_ds, val_ds = ds.subset(split.train), ds.subset(split.val)
    if len(np.unique(train_ds.speakers)) < 2 or len(np.unique(train_ds.emotions)) < 2:
        raise DegenerateDataError("training split needs at least two speakers and two emotions")
    if val_ds.n == 0:
        val_ds = train_ds

    arch = Architecture(ds.dim, ds.n_speakers, ds.n_emotions,
                        config.hidden_dim, config.latent_dim, config.decoder_dim)
    params = init_model(arch, config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    opt = nn.AdamState(lr=config.lr)

    history: list[EpochLog] = []
    best_key = None
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch, since_best, stopped = 0, 0, False
    for epoch in range(1, config.epochs + 1):
        sums = dict.fromkeys(TERMS + ("total",), 0.0)
        n_seen = 0
        for b, idx in enumerate(_batches(shuffle_rng.permutation(train_ds.n), config.batch_size)):
            try:
                parts, grads = loss_and_grads(
                    params, train_ds.x[idx], train_ds.speakers[idx], train_ds.emotions[idx],
                    config.mask, config.beta, rng=noise_rng)
                if not np.isfinite(parts.total):
                    raise ad.NonFiniteError("non-finite total loss")
                nn.adam_step(opt, params, grads)
            except (ArithmeticError, np.linalg.LinAlgError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            for t in sums:
                sums[t] += getattr(parts, t) * len(idx)
            n_seen += len(idx)
        val = evaluate(params, val_ds, config.mask, config.beta)
        row = EpochLog(epoch, *(sums[t] / n_seen for t in TERMS), sums["total"] / n_seen,
                       val["acc"], val["loss"], val["rec_mse"])
        history.append(row)
        if progress is not None:
            progress(row)
        key = (val["acc"], -val["loss"])
        if best_key is None or key > best_key:
            best_key, best_epoch, since_best = key, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped = True
                break
        log.debug("epoch %d total %.4f val_acc %.3f", epoch, row.total, row.val_spk_acc)

    hparams = asdict(arch)
    meta = {
        "best_epoch": best_epoch,
        "epochs_run": len(history),
        "seed": config.seed,
        "beta": config.beta,
        "mask": config.mask.label(),
        "lr": config.lr,
        "batch_size": config.batch_size,
        "fold": split.fold,
    }
    ckpt = nn.Checkpoint(params=best_params, hparams=hparams, meta=meta)
    return TrainResult(ckpt, history, best_epoch, stopped)


# --------------------------------------------------------------- inference

def architecture_of(ckpt: nn.Checkpoint) -> Architecture:
    return Architecture(**ckpt.hparams)


def extract_bottleneck(ckpt: nn.Checkpoint, x: np.ndarray, with_emotion: bool = False,
                       chunk: int = 1024):
    """Posterior means of the speaker branch (and optionally emotion branch), row order kept."""
    arch = architecture_of(ckpt)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ad.ShapeError(f"checkpoint expects D={arch.input_dim}, data has shape {x.shape}")
    p = bind(ckpt.params)
    spk, emo = [], []
    for lo in range(0, max(len(x), 1), chunk):
        post = encode(p, x[lo:lo + chunk], mode="mean")
        spk.append(post.mu_spk.data)
        emo.append(post.mu_emo.data)
    mu_spk = np.concatenate(spk, axis=0) if len(x) else np.zeros((0, arch.latent_dim))
    if not with_emotion:
        return mu_spk
    mu_emo = np.concatenate(emo, axis=0) if len(x) else np.zeros((0, arch.latent_dim))
    return mu_spk, mu_emo


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
