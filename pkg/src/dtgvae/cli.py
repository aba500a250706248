"""``dtgvae`` command line: synth, train, extract, cluster, eval, pipeline, ablate, rerun.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, ad, cluster, data, metrics, model, nn, pipeline

log = logging.getLogger("dtgvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class IdMismatchError(data.DataError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(kind=int):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{text!r} is not a valid {kind.__name__}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _non_negative(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _csv_list(choices):
    def parse(text):
        items = tuple(t.strip() for t in text.split(",") if t.strip())
        bad = [t for t in items if t not in choices]
        if bad:
            raise argparse.ArgumentTypeError(f"invalid choice(s) {bad}; choose from {sorted(choices)}")
        return items
    return parse


def _mask(text):
    try:
        return model.LossMask.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# ---------------------------------------------------------------- outputs

def write_text(path, text: str) -> None:
    nn.atomic_write_bytes(path, text.encode("utf-8"))


def write_manifest(output: Path, args: argparse.Namespace, argv: list[str], outputs: list[str]) -> None:
    flags = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "tool": "dtgvae",
        "version": __version__,
        "command": args.command,
        "argv": argv,
        "flags": flags,
        "outputs": outputs,
    }
    write_text(f"{output}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, model.LossMask):
        return v.label()
    if isinstance(v, (tuple, list)):
        return [_jsonable(u) for u in v]
    if isinstance(v, Path):
        return str(v)
    return v


def latent_csv(ds: data.EmbeddingDataset, z: np.ndarray, prefix: str = "z") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utt_id", "speaker", "emotion"] + [f"{prefix}{j}" for j in range(z.shape[1])])
    for i, uid in enumerate(ds.ids):
        w.writerow([uid, ds.speaker_names[ds.speakers[i]], ds.emotion_names[ds.emotions[i]]]
                   + [data.format_float(v) for v in z[i]])
    return buf.getvalue()


def load_matrix(path) -> data.EmbeddingDataset:
    """Load either a dataset CSV (``f`` columns) or a latent CSV (``z`` columns)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    prefix = "z" if len(header) > 3 and header[3].startswith("z") else "f"
    ids, spk, emo, x = data.read_labelled_matrix(path, prefix)
    speakers, speaker_names = data.label_vocab(spk)
    emotions, emotion_names = data.label_vocab(emo)
    return data.EmbeddingDataset(ids, speakers, emotions, x, speaker_names, emotion_names)


def log_csv(rows: list[model.EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(model.EpochLog.CSV_COLUMNS)
    for r in rows:
        w.writerow([r.epoch] + ["%.10g" % getattr(r, c) for c in model.EpochLog.CSV_COLUMNS[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def _synth_config(args) -> data.SynthConfig:
    return data.SynthConfig(
        n_speakers=args.speakers, n_emotions=args.emotions, per_cell=args.per_cell, dim=args.dim,
        centroid_scale=args.centroid_scale, offset_scale=args.offset_scale, noise=args.noise,
        seed=args.seed,
    )


def cmd_synth(args, argv):
    ds = data.synth_generate(_synth_config(args))
    data.save_csv(ds, args.out)
    write_manifest(args.out, args, argv, [str(args.out)])
    print(f"wrote {ds.n} records (D={ds.dim}) to {args.out}")


def _train_config(args, seed=None) -> model.TrainConfig:
    return model.TrainConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        seed=args.seed if seed is None else seed, beta=args.beta, mask=args.mask,
        patience=args.patience, hidden_dim=args.hidden_dim, latent_dim=args.latent_dim,
        decoder_dim=args.decoder_dim,
    )


def _repeat_path(path: Path, r: int, repeats: int) -> Path:
    if repeats == 1:
        return path
    return path.with_name(f"{path.stem}_r{r}{path.suffix}")


def cmd_train(args, argv):
    ds = data.load_csv(args.data)
    plan = data.make_splits(ds, args.split_seed, 1)[0]
    outputs = []
    for r in range(args.repeat):
        cfg = _train_config(args, seed=args.seed + r)
        result = model.train(ds, cfg, plan, progress=_progress if args.verbose else None)
        ckpt_path = _repeat_path(Path(args.out), r, args.repeat)
        log_path = Path(f"{ckpt_path}.log.csv") if args.log is None else _repeat_path(Path(args.log), r, args.repeat)
        nn.save_checkpoint(result.checkpoint, ckpt_path)
        write_text(log_path, log_csv(result.log))
        outputs += [str(ckpt_path), str(log_path)]
        print(f"seed {cfg.seed}: best epoch {result.best_epoch} of {len(result.log)} "
              f"(val speaker acc {result.log[result.best_epoch - 1].val_spk_acc:.3f}) -> {ckpt_path}")
    write_manifest(args.out, args, argv, outputs)


def _progress(row: model.EpochLog) -> None:
    print(f"epoch {row.epoch:4d} total {row.total:.4f} rec {row.rec:.4f} kl {row.kl:.4f} "
          f"mi {row.mi:.4f} spk {row.spk:.4f} emo {row.emo:.4f} val_acc {row.val_spk_acc:.3f}",
          file=sys.stderr)


def cmd_extract(args, argv):
    ckpt = nn.load_checkpoint(args.checkpoint)
    ds = data.load_csv(args.data)
    mu_spk, mu_emo = model.extract_bottleneck(ckpt, ds.x, with_emotion=True)
    write_text(args.out, latent_csv(ds, mu_spk))
    outputs = [str(args.out)]
    if args.emotion_out:
        write_text(args.emotion_out, latent_csv(ds, mu_emo))
        outputs.append(str(args.emotion_out))
    write_manifest(args.out, args, argv, outputs)
    print(f"wrote {ds.n} x {mu_spk.shape[1]} speaker latents to {args.out}")


def cmd_cluster(args, argv):
    ds = load_matrix(args.embeddings)
    result = cluster.run(args.algo, ds.x, args.k, seed=args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utt_id", "cluster"])
    for uid, lab in zip(ds.ids, result.labels):
        w.writerow([uid, int(lab)])
    write_text(args.out, buf.getvalue())
    write_manifest(args.out, args, argv, [str(args.out)])
    print(f"{args.algo}: {len(np.unique(result.labels))} clusters over {ds.n} rows -> {args.out}")


def read_assignments(path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["utt_id", "cluster"]:
            raise data.MissingHeaderError(f"{path}: line 1: expected header utt_id,cluster")
        out = {}
        for line_no, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise data.RaggedRowError(f"{path}: line {line_no}: expected 2 fields")
            try:
                out[row[0]] = int(row[1])
            except ValueError:
                raise data.NonNumericError(f"{path}: line {line_no}: cluster {row[1]!r} is not an integer") from None
    return out


EVAL_COLUMNS = ("assignments", "label", "n", "nmi", "ari", "silhouette")


def cmd_eval(args, argv):
    labelled = load_matrix(args.data)
    emb = load_matrix(args.embeddings) if args.embeddings else labelled
    emb_index = {uid: i for i, uid in enumerate(emb.ids)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for path in args.assignments:
        assign = read_assignments(path)
        for uid in labelled.ids:
            if uid not in assign:
                raise IdMismatchError(f"utterance {uid!r} missing from assignments {path}")
            if uid not in emb_index:
                raise IdMismatchError(f"utterance {uid!r} missing from embeddings {args.embeddings}")
        extra = sorted(set(assign) - set(labelled.ids))
        if extra:
            raise IdMismatchError(f"utterance {extra[0]!r} in {path} has no label")
        pred = np.array([assign[u] for u in labelled.ids])
        x = emb.x[[emb_index[u] for u in labelled.ids]]
        sil = metrics.silhouette(x, pred) if len(np.unique(pred)) > 1 else float("nan")
        for target in args.label:
            truth = labelled.speakers if target == "speaker" else labelled.emotions
            w.writerow([Path(path).stem, target, labelled.n, "%.6f" % metrics.nmi(truth, pred),
                        "%.6f" % metrics.ari(truth, pred), "%.6f" % sil])
    text = buf.getvalue()
    if args.out:
        write_text(args.out, text)
        write_manifest(args.out, args, argv, [str(args.out)])
    sys.stdout.write(text)


def cmd_pipeline(args, argv):
    if args.synth:
        ds = data.synth_generate(_synth_config(args))
    elif args.data:
        ds = data.load_csv(args.data)
    else:
        raise UsageError("pipeline needs --data PATH or --synth")
    cfg = pipeline.PipelineConfig(
        train=_train_config(args), seed=args.seed, repeats=args.repeat,
        ablations=args.ablate, algos=args.algos, k=args.k, beta_vae=args.beta_vae,
        neutral_split=args.neutral_split,
    )
    scores = pipeline.run_pipeline(
        ds, cfg, progress=(lambda s: print(f"{s.method} {s.algo} r{s.repeat}: nmi {s.nmi:.3f}",
                                           file=sys.stderr)) if args.verbose else None)
    text = pipeline.summary_csv(pipeline.summarize(scores))
    write_text(args.out, text)
    write_manifest(args.out, args, argv, [str(args.out)])
    sys.stdout.write(text)


def cmd_rerun(args, argv):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    return main(manifest["argv"])


# ------------------------------------------------------------------ parser

def _add_synth_flags(p):
    p.add_argument("--speakers", type=_positive(), default=10)
    p.add_argument("--emotions", type=_positive(), default=5)
    p.add_argument("--per-cell", type=_positive(), default=30, help="utterances per (speaker, emotion)")
    p.add_argument("--dim", type=_positive(), default=256)
    p.add_argument("--centroid-scale", type=_non_negative, default=1.0)
    p.add_argument("--offset-scale", type=_non_negative, default=1.0)
    p.add_argument("--noise", type=_non_negative, default=0.1)


def _add_train_flags(p):
    p.add_argument("--epochs", type=_positive(), default=400)
    p.add_argument("--lr", type=_positive(float), default=1e-4)
    p.add_argument("--batch-size", type=_positive(), default=32)
    p.add_argument("--beta", type=_non_negative, default=1.0, help="KL weight")
    p.add_argument("--mask", type=_mask, default=model.LossMask(),
                   help="full | no-spk,no-mi,... | explicit term list such as rec,kl")
    p.add_argument("--patience", type=_positive(), default=50)
    p.add_argument("--hidden-dim", type=_positive(), default=256)
    p.add_argument("--latent-dim", type=_positive(), default=256)
    p.add_argument("--decoder-dim", type=_positive(), default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtgvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dtgvae {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic speaker x emotion embedding CSV")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_synth_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the disentangling VAE")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, default=None, help="loss log CSV (default <out>.log.csv)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--repeat", type=_positive(), default=1, help="train this many seeds")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write speaker-branch posterior means")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--emotion-out", type=Path, default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("cluster", help="cluster rows of an embedding CSV")
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--algo", choices=sorted(cluster.ALGORITHMS), required=True)
    p.add_argument("--k", type=_positive(), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("eval", help="NMI / ARI / Silhouette of cluster assignments")
    p.add_argument("--assignments", type=Path, nargs="+", required=True)
    p.add_argument("--data", type=Path, required=True, help="CSV carrying the true labels")
    p.add_argument("--embeddings", type=Path, default=None, help="vectors for Silhouette (default --data)")
    p.add_argument("--label", choices=("speaker", "emotion"), nargs="+", default=["speaker"])
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    for name, default_ablate in (("pipeline", ()), ("ablate", ("emo", "spk", "mi"))):
        p = sub.add_parser(name, help="baseline vs. disentangled clustering comparison"
                           + (" with all loss ablations" if default_ablate else ""))
        p.add_argument("--data", type=Path, default=None)
        p.add_argument("--synth", action="store_true", help="generate the input instead of --data")
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--repeat", type=_positive(), default=1)
        p.add_argument("--ablate", type=_csv_list(set(pipeline.ABLATIONS)), default=default_ablate)
        p.add_argument("--algos", type=_csv_list(set(pipeline.ALGOS)), default=pipeline.ALGOS)
        p.add_argument("--k", type=_positive(), default=None, help="cluster count (default: #speakers)")
        p.add_argument("--beta-vae", type=_non_negative, default=None,
                       help="also train an unsupervised rec+KL model with this KL weight")
        p.add_argument("--neutral-split", action="store_true",
                       help="also score raw embeddings on neutral-only and emotional-only subsets")
        _add_synth_flags(p)
        _add_train_flags(p)
        p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args, argv)
        return EXIT_OK if rc is None else rc
    except UsageError as exc:
        print(f"dtgvae: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (model.TrainingError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"dtgvae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.DataError, cluster.ClusteringError, nn.CheckpointError, ad.ShapeError,
            OSError, ValueError) as exc:
        print(f"dtgvae: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
