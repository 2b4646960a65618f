import json

import numpy as np
import pytest

from rrlab.checkpoint import load_checkpoint, save_checkpoint
from rrlab.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, TAU_GRID, main
from rrlab.data import gen_blobs, load_csv, save_csv
from rrlab.evaluation import tpr_accuracy
from rrlab.model import init_params, predict

SMALL = ["--set", "data.n_classes=2", "--set", "data.dim=2", "--set", "data.n_per_class=80",
         "--set", "data.separation=4", "--set", "epochs=4", "--set", "milestones=3",
         "--set", "batch_size=32", "--set", "widths=8", "--set", "lr=0.05"]


def read_csv(path):
    lines = path.read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, l.split(","))) for l in lines[1:]]


def metrics(path):
    return {r["metric"]: r["value"] for r in read_csv(path)}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--quiet", "--out", str(out)] + SMALL) == EXIT_OK
    return out


def test_train_writes_artifacts_and_manifest(trained):
    for name in ("best.ckpt", "final.ckpt", "trainlog.csv", "config.txt", "train.csv", "val.csv",
                 "test.csv", "manifest.json"):
        assert (trained / name).exists(), name
    man = json.loads((trained / "manifest.json").read_text())
    assert man["status"] == "ok" and man["exit_code"] == 0 and man["command"] == "train"
    assert man["config"]["epochs"] == "4" and man["seed"] == 0
    assert len(read_csv(trained / "trainlog.csv")) == 4


def test_train_is_byte_reproducible(trained, tmp_path):
    assert main(["train", "--quiet", "--out", str(tmp_path)] + SMALL) == EXIT_OK
    for name in ("best.ckpt", "final.ckpt", "test.csv"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_manifest_config_reproduces_the_run(trained, tmp_path):
    assert main(["train", "--quiet", "--config", str(trained / "config.txt"), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "best.ckpt").read_bytes() == (trained / "best.ckpt").read_bytes()


def test_missing_config_is_a_usage_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == EXIT_USAGE
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["status"] == "usage-error" and "nope.txt" in man["error"]


def test_unknown_key_and_bad_arguments(tmp_path):
    assert main(["train", "--set", "colour=red", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_zero_epochs_gives_initial_parameters(tmp_path):
    assert main(["train", "--quiet", "--out", str(tmp_path), "--set", "epochs=0", "--set", "milestones=-"]
                + SMALL[:8]) == EXIT_OK
    ck = load_checkpoint(tmp_path / "best.ckpt")
    assert ck.params.equal(init_params(ck.arch, 0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_numeric(tmp_path):
    code = main(["train", "--quiet", "--out", str(tmp_path)] + SMALL + ["--set", "lr=1e12", "--set", "momentum=0"])
    assert code == EXIT_NUMERIC
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["status"] == "numeric-failure" and "epoch" in man["error"]


def eval_args(trained, out, *extra):
    return ["eval", "--quiet", "--checkpoint", str(trained / "best.ckpt"), "--data", str(trained / "test.csv"),
            "--out", str(out), "--set", "data.n_classes=2"] + list(extra)


def test_eval_without_attack_matches_plain_accuracy(trained, tmp_path):
    assert main(eval_args(trained, tmp_path, "--emit-gnuplot")) == EXIT_OK
    ck = load_checkpoint(trained / "best.ckpt")
    ds = load_csv(trained / "test.csv")
    acc = float(np.mean(predict(ck.params, ds.X).y_m == ds.y))
    for r in ("conf", "tcon", "rcon", "aphi"):
        m = metrics(tmp_path / f"eval_{r}.csv")
        assert float(m["all_accuracy"]) == acc
        assert (tmp_path / f"pass_{r}.csv").exists() and (tmp_path / f"pass_{r}.gp").exists()
    assert float(metrics(tmp_path / "eval_tcon.csv")["tpr_accuracy"]) == 1.0


def test_tau_sweep_keeps_all_accuracy(trained, tmp_path):
    assert main(["sweep-tau"] + eval_args(trained, tmp_path, "--rejector", "conf")[1:]) == EXIT_OK
    accs = {metrics(tmp_path / f"eval_conf_tau{t!r}.csv")["all_accuracy"] for t in TAU_GRID}
    assert len(accs) == 1


def test_attacked_eval_and_threshold_reuse(trained, tmp_path):
    clean, adv = tmp_path / "clean", tmp_path / "adv"
    assert main(eval_args(trained, clean, "--rejector", "rcon")) == EXIT_OK
    assert main(eval_args(trained, adv, "--rejector", "rcon", "--attack", "--threshold-from", str(clean))) == EXIT_OK
    assert metrics(adv / "eval_rcon.csv")["tpr_threshold"] == metrics(clean / "eval_rcon.csv")["tpr_threshold"]
    assert float(metrics(adv / "eval_rcon.csv")["all_accuracy"]) <= float(metrics(clean / "eval_rcon.csv")["all_accuracy"])
    assert main(eval_args(trained, tmp_path / "x", "--threshold-from", str(tmp_path / "none"))) == EXIT_USAGE


def test_eval_rejects_dimension_mismatch(trained, tmp_path):
    save_csv(gen_blobs(2, 3, 10, 3.0, 1.0, 0), tmp_path / "d3.csv")
    args = ["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(tmp_path / "d3.csv"),
            "--out", str(tmp_path / "o")]
    assert main(args) == EXIT_USAGE


def test_eval_rejects_unknown_rejector(trained, tmp_path):
    assert main(eval_args(trained, tmp_path, "--rejector", "magic")) == EXIT_USAGE


def attack_args(trained, out, ckpt="best.ckpt", *extra):
    return ["attack", "--quiet", "--checkpoint", str(trained / ckpt), "--data", str(trained / "test.csv"),
            "--out", str(out)] + list(extra)


def test_zero_radius_attack_only_counts_misclassified(trained, tmp_path):
    assert main(attack_args(trained, tmp_path, "best.ckpt", "--set", "attack.eps=0")) == EXIT_OK
    rows = read_csv(tmp_path / "attack.csv")
    ck = load_checkpoint(trained / "best.ckpt")
    ds = load_csv(trained / "test.csv")
    wrong = predict(ck.params, ds.X).y_m != ds.y
    assert [r["success"] == "1" for r in rows] == wrong.tolist()
    assert list(rows[0]) == ["idx", "success", "eps", "obj_value", "rcon", "conf"]


def tpr_from(rows):
    return tpr_accuracy(([float(r["rcon"]) for r in rows], [r["success"] == "0" for r in rows])).accuracy


def test_adaptive_worst_case_is_no_weaker(trained, tmp_path):
    assert main(attack_args(trained, tmp_path / "n")) == EXIT_OK
    assert main(attack_args(trained, tmp_path / "a", "best.ckpt", "--mode", "adaptive")) == EXIT_OK
    normal = read_csv(tmp_path / "n" / "attack.csv")
    adaptive = read_csv(tmp_path / "a" / "attack.csv")
    assert tpr_from(adaptive) <= tpr_from(normal)


def test_min_distortion_on_always_reject_model(trained, tmp_path):
    ck = load_checkpoint(trained / "best.ckpt")
    p = ck.params
    p["aux.fc2.weight"] = np.zeros_like(p["aux.fc2.weight"])
    p["aux.fc2.bias"] = np.array([-800.0])
    save_checkpoint(ck, tmp_path / "reject.ckpt")
    args = ["attack", "--quiet", "--checkpoint", str(tmp_path / "reject.ckpt"), "--data", str(trained / "test.csv"),
            "--mode", "min-distortion", "--eps-max", "2.0", "--median-data", str(trained / "train.csv"),
            "--out", str(tmp_path / "md")]
    assert main(args) == EXIT_OK
    assert all(r["found"] == "0" for r in read_csv(tmp_path / "md" / "min_distortion.csv"))
    assert metrics(tmp_path / "md" / "min_distortion_summary.csv")["found"] == "0"


def test_min_distortion_summary(trained, tmp_path):
    args = attack_args(trained, tmp_path, "best.ckpt", "--mode", "min-distortion", "--eps-max", "4.0")
    assert main(args) == EXIT_OK
    rows = read_csv(tmp_path / "min_distortion.csv")
    found = [float(r["eps"]) for r in rows if r["found"] == "1"]
    assert found and all(0 < e <= 4.0 for e in found)


def test_csv_outputs_hold_plain_numbers(trained, tmp_path):
    main(eval_args(trained, tmp_path / "e", "--attack"))
    main(attack_args(trained, tmp_path / "a"))
    files = list(tmp_path.rglob("*.csv")) + list(trained.glob("*.csv"))
    assert files
    for f in files:
        assert "np." not in f.read_text(), f


def test_verify_default_passes(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "verify.txt").read_text()
    assert "FAIL" not in text
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["trials"] == 100_000


def test_verify_single_trial_and_fault(tmp_path):
    assert main(["verify", "--trials", "1", "--out", str(tmp_path / "one")]) == EXIT_OK
    rows = read_csv(tmp_path / "one" / "verify.csv")
    branch = {r["counter"]: r["value"] for r in rows if r["check"] == "theorem1"}
    assert [branch[b] for b in ("correct-i", "correct-ii", "wrong-i", "wrong-ii")] == ["1"] * 4
    assert main(["verify", "--trials", "500", "--inject-fault", "--out", str(tmp_path / "bad")]) == EXIT_VERIFY
    assert "counterexample" in (tmp_path / "bad" / "verify.txt").read_text()
    man = json.loads((tmp_path / "bad" / "manifest.json").read_text())
    assert man["exit_code"] == EXIT_VERIFY
    assert main(["verify", "--trials", "0", "--out", str(tmp_path / "z")]) == EXIT_USAGE
