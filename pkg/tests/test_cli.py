"""End-to-end CLI runs on the digits fixture: exit codes, the resolved
config echo, byte-determinism of outputs, and worker-count invariance."""

import csv
import gzip
import json
import os
import shutil

import numpy as np
import pytest

from hessreg.cli import main
from hessreg.data import load_manifest

from conftest import FIXTURES

DIGITS = os.path.join(FIXTURES, "digits.json")
DIGITS_IMAGES = os.path.join(FIXTURES, "digits-images-idx3-ubyte")
DIGITS_LABELS = os.path.join(FIXTURES, "digits-labels-idx1-ubyte")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A converted 4x4 set plus one trained model, shared by the read-only
    CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    conv = os.path.join(root, "conv")
    assert main(["data-convert", "--images", DIGITS_IMAGES,
                 "--labels", DIGITS_LABELS, "--out", conv,
                 "--name", "digits4", "--factor", "2"]) == 0
    train = os.path.join(root, "train")
    assert main(["train", "--data", os.path.join(conv, "digits4.json"),
                 "--out", train, "--mode", "plain", "--arch", "mlp:16",
                 "--epochs", "3", "--lr", "0.1", "--seed", "3"]) == 0
    return {
        "root": str(root),
        "manifest": os.path.join(conv, "digits4.json"),
        "model": os.path.join(train, "model.hnet"),
    }


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_train_outputs_and_metrics_schema(workdir, tmp_path):
    out = os.path.join(tmp_path, "t")
    assert main(["train", "--data", workdir["manifest"], "--out", out,
                 "--arch", "mlp:8", "--epochs", "2", "--seed", "0"]) == 0
    run = json.load(open(os.path.join(out, "run.json")))
    assert run["command"] == "train"
    assert run["config"]["arch"] == "mlp:8"
    assert set(run["outputs"]) == {"model.hnet", "metrics.jsonl"}
    rows = [json.loads(l) for l in open(os.path.join(out, "metrics.jsonl"))]
    assert len(rows) == 2
    # wall time lives in run.json, not in the data outputs
    assert list(rows[0]) == ["epoch", "loss", "clean_acc", "grad_term", "hess_term"]
    assert run["elapsed_s"] > 0


def test_repeated_run_is_byte_identical(workdir, tmp_path):
    out = os.path.join(tmp_path, "same")
    args = ["train", "--data", workdir["manifest"], "--out", out,
            "--arch", "mlp:8", "--epochs", "2", "--seed", "1"]
    assert main(args) == 0
    first = {
        name: read(os.path.join(out, name))
        for name in ("model.hnet", "metrics.jsonl", "run.json")
    }
    assert main(args) == 0
    assert read(os.path.join(out, "model.hnet")) == first["model.hnet"]
    assert read(os.path.join(out, "metrics.jsonl")) == first["metrics.jsonl"]
    # run.json may differ only in its two wall-clock fields
    ra = json.loads(first["run.json"])
    rb = json.load(open(os.path.join(out, "run.json")))
    for k in ("started_at", "elapsed_s"):
        ra.pop(k), rb.pop(k)
    assert ra == rb


def test_exit_codes(workdir, tmp_path):
    out = os.path.join(tmp_path, "x")
    # lambda knobs are rejected for plain mode
    assert main(["train", "--data", workdir["manifest"], "--out", out,
                 "--mode", "plain", "--lambda1", "0.5", "--epochs", "1"]) == 2
    # a missing manifest is an I/O failure
    assert main(["train", "--data", os.path.join(tmp_path, "nope.json"),
                 "--out", out, "--epochs", "1"]) == 3
    # numeric divergence gets its own code
    with np.errstate(all="ignore"):
        assert main(["train", "--data", workdir["manifest"], "--out", out,
                     "--arch", "mlp:8", "--epochs", "2", "--lr", "1e120"]) == 4
    # bad preset name is a config error
    assert main(["attack", "--data", workdir["manifest"], "--model",
                 os.path.join(tmp_path, "missing.hnet"), "--out", out,
                 "--eps-grid", "0.5", "--n-samples", "5"]) == 3


def test_preset_and_config_file_layering(workdir, tmp_path):
    out = os.path.join(tmp_path, "p")
    assert main(["train", "--data", workdir["manifest"], "--out", out,
                 "--mode", "cross-holder", "--preset", "desk",
                 "--epochs", "1", "--seed", "2"]) == 0
    cfg = json.load(open(os.path.join(out, "run.json")))["config"]
    assert cfg["lambda1"] == 0.02 and cfg["lambda2"] == 0.5
    assert cfg["epochs"] == 1  # the flag overrides the preset

    cfile = os.path.join(tmp_path, "c.txt")
    with open(cfile, "w") as fh:
        fh.write("lr = 0.07  # comment\nepochs = 1\n")
    out2 = os.path.join(tmp_path, "q")
    assert main(["train", "--data", workdir["manifest"], "--out", out2,
                 "--config", cfile, "--arch", "mlp:8", "--lr", "0.2"]) == 0
    cfg2 = json.load(open(os.path.join(out2, "run.json")))["config"]
    assert cfg2["lr"] == 0.2 and cfg2["epochs"] == 1

    bad = os.path.join(tmp_path, "bad.txt")
    with open(bad, "w") as fh:
        fh.write("no_such_option = 1\n")
    assert main(["train", "--data", workdir["manifest"], "--out", out2,
                 "--config", bad]) == 2


def test_attack_csv_and_jobs_invariance(workdir, tmp_path):
    args = ["attack", "--data", workdir["manifest"], "--model", workdir["model"],
            "--eps-grid", "0.3,0.8", "--iterations", "5", "--restarts", "2",
            "--n-samples", "30", "--seed", "7"]
    a, b = os.path.join(tmp_path, "a"), os.path.join(tmp_path, "b")
    assert main(args + ["--out", a, "--jobs", "1"]) == 0
    assert main(args + ["--out", b, "--jobs", "2"]) == 0
    assert read(os.path.join(a, "attack.csv")) == read(os.path.join(b, "attack.csv"))
    rows = list(csv.DictReader(open(os.path.join(a, "attack.csv"))))
    assert len(rows) == 8  # two epsilons, four curves
    assert [r["attack"] for r in rows[:4]] == ["ce", "cw", "paper_worst",
                                               "strict_worst"]
    assert all(r["n_samples"] == "30" for r in rows)


def test_certify_jsonl_and_jobs_invariance(workdir, tmp_path):
    args = ["certify", "--data", workdir["manifest"], "--model", workdir["model"],
            "--cert-mode", "both", "--order", "both", "--n-samples", "5",
            "--ball-samples", "40", "--probe-T", "30", "--seed", "5"]
    a, b = os.path.join(tmp_path, "a"), os.path.join(tmp_path, "b")
    assert main(args + ["--out", a, "--jobs", "2"]) == 0
    assert main(args + ["--out", b, "--jobs", "1"]) == 0
    fa = os.path.join(a, "certificates.jsonl")
    assert read(fa) == read(os.path.join(b, "certificates.jsonl"))
    rows = [json.loads(l) for l in open(fa)]
    certs = [r for r in rows if "summary" not in r]
    summaries = [r for r in rows if r.get("summary")]
    assert len(certs) == 5 * 2 * 2  # samples x orders x modes
    assert len(summaries) == 4
    assert {s["mode"] for s in summaries} == {"point", "sampled-ball"}
    for s in summaries:
        assert s["n"] == 5 and "mean_bound" in s and "median_bound" in s


def test_opnorm_hist_dominance_and_jobs_invariance(workdir, tmp_path):
    args = ["opnorm-hist", "--data", workdir["manifest"], "--model",
            workdir["model"], "--n-samples", "4", "--probe-T", "20",
            "--starts", "2", "--seed", "11"]
    a, b = os.path.join(tmp_path, "a"), os.path.join(tmp_path, "b")
    assert main(args + ["--out", a, "--jobs", "2"]) == 0
    assert main(args + ["--out", b, "--jobs", "1"]) == 0
    fa = os.path.join(a, "opnorm_hist.csv")
    assert read(fa) == read(os.path.join(b, "opnorm_hist.csv"))
    rows = list(csv.DictReader(open(fa)))
    assert len(rows) == 4 * 9
    assert all(float(r["diff"]) >= 0.0 for r in rows)
    assert all(abs(float(r["hv_star"]) - float(r["hg"]) - float(r["diff"])) < 1e-15
               for r in rows)


def test_data_convert_round_trip(tmp_path):
    out = os.path.join(tmp_path, "c")
    assert main(["data-convert", "--images", DIGITS_IMAGES, "--labels",
                 DIGITS_LABELS, "--out", out, "--name", "again"]) == 0
    ds = load_manifest(os.path.join(out, "again.json"))
    src = load_manifest(DIGITS)
    assert np.array_equal(ds.X, src.X) and np.array_equal(ds.y, src.y)
    # factor 1 conversion reproduces the input files byte for byte
    assert read(os.path.join(out, "again-images-idx3-ubyte")) == read(DIGITS_IMAGES)


def test_data_fetch_from_local_mirror(tmp_path):
    site = os.path.join(tmp_path, "site")
    os.makedirs(site)
    for name in ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte"):
        with open(DIGITS_IMAGES, "rb") as f, gzip.open(
                os.path.join(site, name + ".gz"), "wb") as g:
            shutil.copyfileobj(f, g)
    for name in ("train-labels-idx1-ubyte", "t10k-labels-idx1-ubyte"):
        with open(DIGITS_LABELS, "rb") as f, gzip.open(
                os.path.join(site, name + ".gz"), "wb") as g:
            shutil.copyfileobj(f, g)
    out = os.path.join(tmp_path, "fetched")
    assert main(["data-fetch", "--dataset", "mnist", "--out", out,
                 "--base-url", "file://" + site + "/"]) == 0
    for split in ("train", "test"):
        ds = load_manifest(os.path.join(out, f"mnist-{split}.json"))
        assert len(ds) == 1797 and ds.K == 10


def test_cli_resume_matches_direct(workdir, tmp_path):
    common = ["train", "--data", workdir["manifest"], "--arch", "mlp:8",
              "--mode", "cross-lipschitz", "--lambda1", "0.05",
              "--lr", "0.05", "--seed", "9"]
    direct = os.path.join(tmp_path, "d")
    half = os.path.join(tmp_path, "h")
    resumed = os.path.join(tmp_path, "r")
    assert main(common + ["--out", direct, "--epochs", "4"]) == 0
    assert main(common + ["--out", half, "--epochs", "2",
                          "--checkpoint-every", "2"]) == 0
    assert main(common + ["--out", resumed, "--epochs", "4", "--resume",
                          os.path.join(half, "checkpoint.npz")]) == 0
    assert read(os.path.join(direct, "model.hnet")) == read(
        os.path.join(resumed, "model.hnet"))
