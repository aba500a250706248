import csv
import json

import numpy as np
import pytest

from dtgvae import cli, nn

TINY_SYNTH = ["--speakers", "4", "--emotions", "2", "--per-cell", "6", "--dim", "12"]
TINY_NET = ["--hidden-dim", "12", "--latent-dim", "6", "--decoder-dim", "12", "--lr", "1e-3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.csv"
    assert run("synth", "--out", path, *TINY_SYNTH) == 0
    return path


@pytest.fixture
def trained(tmp_path, tiny):
    ckpt = tmp_path / "m.dtgv"
    assert run("train", "--data", tiny, "--out", ckpt, "--epochs", 3, *TINY_NET) == 0
    return ckpt


def test_synth_default_rows_and_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("synth", "--out", a, "--seed", 7) == 0
    assert run("synth", "--out", b, "--seed", 7) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 1 + 10 * 5 * 30


def test_synth_bad_flag_is_usage_error(tmp_path):
    out = tmp_path / "x.csv"
    assert run("synth", "--out", out, "--emotions", 0) == 1
    assert not out.exists()


def test_train_writes_log_rows(tmp_path, tiny):
    ckpt = tmp_path / "m.dtgv"
    assert run("train", "--data", tiny, "--out", ckpt, "--epochs", 5, "--patience", 10, *TINY_NET) == 0
    rows = _rows(f"{ckpt}.log.csv")
    assert len(rows) == 5
    assert list(rows[0]) == ["epoch", "rec", "kl", "mi", "spk", "emo", "total", "val_spk_acc"]
    assert nn.load_checkpoint(ckpt).meta["mask"] == "full"
    assert json.loads((tmp_path / "m.dtgv.manifest.json").read_text())["command"] == "train"


def test_train_mask_no_spk(tmp_path, tiny):
    ckpt = tmp_path / "m.dtgv"
    assert run("train", "--data", tiny, "--out", ckpt, "--epochs", 2, "--mask", "no-spk", *TINY_NET) == 0
    assert nn.load_checkpoint(ckpt).meta["mask"] == "no-spk"
    rows = _rows(f"{ckpt}.log.csv")
    for r in rows:
        total = sum(float(r[t]) for t in ("rec", "kl", "mi", "emo"))
        assert float(r["total"]) == pytest.approx(total, rel=1e-8)


def test_train_beta_scales_first_batch_kl(tmp_path, tiny):
    # one epoch with a batch larger than the training split is exactly one batch,
    # whose losses are computed before the only update
    kls = {}
    for beta in ("1", "4"):
        ckpt = tmp_path / f"b{beta}.dtgv"
        assert run("train", "--data", tiny, "--out", ckpt, "--epochs", 1, "--batch-size", 256,
                   "--beta", beta, *TINY_NET) == 0
        kls[beta] = float(_rows(f"{ckpt}.log.csv")[0]["kl"])
    assert kls["4"] == pytest.approx(4 * kls["1"], rel=1e-9)


def test_train_repeat_writes_one_checkpoint_per_seed(tmp_path, tiny):
    ckpt = tmp_path / "m.dtgv"
    assert run("train", "--data", tiny, "--out", ckpt, "--epochs", 1, "--repeat", 2, *TINY_NET) == 0
    a, b = nn.load_checkpoint(tmp_path / "m_r0.dtgv"), nn.load_checkpoint(tmp_path / "m_r1.dtgv")
    assert a.meta["seed"] == 0 and b.meta["seed"] == 1


def test_train_degenerate_data_exit_code(tmp_path):
    path = tmp_path / "one.csv"
    assert run("synth", "--out", path, "--speakers", 1, "--emotions", 2, "--per-cell", 5, "--dim", 4) == 0
    assert run("train", "--data", path, "--out", tmp_path / "m.dtgv", "--epochs", 1) == 2


def test_extract_rows_rerun_and_dimension_mismatch(tmp_path, tiny, trained):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("extract", "--checkpoint", trained, "--data", tiny, "--out", a) == 0
    assert run("extract", "--checkpoint", trained, "--data", tiny, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = _rows(a)
    assert len(rows) == 48
    assert list(rows[0])[3:] == [f"z{j}" for j in range(6)]
    wrong = tmp_path / "wrong.csv"
    assert run("synth", "--out", wrong, *TINY_SYNTH[:-1], "13") == 0
    assert run("extract", "--checkpoint", trained, "--data", wrong, "--out", tmp_path / "c.csv") == 2


def test_cluster_all_algos_and_k_validation(tmp_path, tiny, trained):
    z = tmp_path / "z.csv"
    assert run("extract", "--checkpoint", trained, "--data", tiny, "--out", z) == 0
    for algo in ("km", "sc", "ac"):
        out = tmp_path / f"{algo}.csv"
        assert run("cluster", "--embeddings", z, "--algo", algo, "--k", 4, "--out", out) == 0
        rows = _rows(out)
        assert list(rows[0]) == ["utt_id", "cluster"]
        assert len({r["cluster"] for r in rows}) == 4
    assert run("cluster", "--embeddings", z, "--algo", "km", "--k", 0, "--out", tmp_path / "o.csv") == 1
    assert run("cluster", "--embeddings", z, "--algo", "km", "--k", 999, "--out", tmp_path / "o.csv") == 2
    assert run("cluster", "--embeddings", z, "--algo", "xx", "--k", 2, "--out", tmp_path / "o.csv") == 1


def test_cluster_ten_speakers(tmp_path):
    data_path = tmp_path / "d.csv"
    assert run("synth", "--out", data_path, "--per-cell", 4, "--dim", 16) == 0
    out = tmp_path / "km.csv"
    assert run("cluster", "--embeddings", data_path, "--algo", "km", "--k", 10, "--out", out) == 0
    assert len({r["cluster"] for r in _rows(out)}) == 10


def _perfect_assignment(tmp_path, data_path, drop=None):
    rows = _rows(data_path)
    out = tmp_path / "perfect.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", "cluster"])
        for r in rows:
            if r["utt_id"] != drop:
                w.writerow([r["utt_id"], int(r["speaker"][3:])])
    return out, rows


def test_eval_perfect_assignment(tmp_path, tiny, capsys):
    assign, _ = _perfect_assignment(tmp_path, tiny)
    out = tmp_path / "metrics.csv"
    assert run("eval", "--assignments", assign, "--data", tiny, "--label", "speaker", "emotion",
               "--out", out) == 0
    rows = _rows(out)
    assert [r["label"] for r in rows] == ["speaker", "emotion"]
    assert float(rows[0]["nmi"]) == 1.0 and float(rows[0]["ari"]) == 1.0
    assert float(rows[1]["nmi"]) < 0.1


def test_eval_missing_id_named(tmp_path, tiny, capsys):
    assign, rows = _perfect_assignment(tmp_path, tiny, drop=_rows(tiny)[3]["utt_id"])
    assert run("eval", "--assignments", assign, "--data", tiny) == 2
    assert rows[3]["utt_id"] in capsys.readouterr().err


def test_pipeline_rows_deterministic_and_rerun(tmp_path):
    args = ["pipeline", "--synth", "--speakers", 4, "--emotions", 2, "--per-cell", 20, "--dim", 12, *TINY_NET, "--epochs", 2, "--ablate", "spk",
            "--beta-vae", "4", "--neutral-split"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(*args, "--out", a) == 0
    assert run(*args, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = _rows(a)
    methods = {r["method"] for r in rows}
    assert methods == {"baseline", "baseline-neutral", "baseline-emotional", "dtgvae", "minus-spk", "beta-vae"}
    assert {(r["method"], r["algo"]) for r in rows if r["method"] in ("baseline", "dtgvae")} == \
        {(m, algo) for m in ("baseline", "dtgvae") for algo in ("km", "sc", "ac")}
    assert all(r["n_repeats"] == "1" and float(r["nmi_std"]) == 0.0 for r in rows)

    manifest = tmp_path / "a.csv.manifest.json"
    spec = json.loads(manifest.read_text())
    assert spec["outputs"] == [str(a)]
    saved = a.read_bytes()
    a.unlink()
    assert run("rerun", manifest) == 0
    assert a.read_bytes() == saved


def test_pipeline_needs_input(tmp_path):
    assert run("pipeline", "--out", tmp_path / "x.csv") == 1


def test_missing_input_file_is_data_error(tmp_path):
    assert run("cluster", "--embeddings", tmp_path / "nope.csv", "--algo", "km", "--k", 2,
               "--out", tmp_path / "o.csv") == 2
