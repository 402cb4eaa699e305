import json

import numpy as np
import pytest

from protoprobe import cli
from protoprobe.engine import init_model
from protoprobe.harness import load_idx
from protoprobe.modelio import model_to_bytes, save_model

from conftest import linear_model, tiny_conv_spec

FAST = ["--proto-iters", "40", "--attack-iters", "20"]


@pytest.fixture
def model_file(tmp_path):
    path = tmp_path / "m.ppm"
    save_model(init_model(tiny_conv_spec(), seed=3), path)
    return path


def _body(text):
    return [line for line in text.splitlines() if not line.startswith("# generated=")]


def test_evaluate_report(model_file, tmp_path, capsys):
    assert cli.main(["evaluate", str(model_file), "--seeds", "2", *FAST]) == 0
    out = capsys.readouterr().out
    last = out.splitlines()[-1]
    assert last.startswith("M_g=") and " M_adv=" in last and "verdicts=" in last
    assert "# seeds=0,1" in out
    assert '"max_iterations": 40' in out and '"m_g": 0.8' in out


def test_evaluate_is_deterministic(model_file, tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for path in (a, b):
        assert cli.main(["evaluate", str(model_file), "--seeds", "2", *FAST, "--out", str(path)]) == 0
    assert _body(a.read_text()) == _body(b.read_text())
    assert sum(line.startswith("# generated=") for line in a.read_text().splitlines()) == 1


def test_seed_count_gives_k_prototypes(model_file, tmp_path):
    d = tmp_path / "protos"
    assert cli.main(["evaluate", str(model_file), "--seeds", "1", *FAST, "--out", str(tmp_path / "r"),
                     "--save-prototypes", str(d)]) == 0
    assert len(list(d.glob("proto_*.f32"))) == 3


def test_env_seed_shifts_default_seeds(model_file, monkeypatch, capsys):
    monkeypatch.setenv("PROTOPROBE_SEED", "7")
    assert cli.main(["evaluate", str(model_file), "--seeds", "2", *FAST]) == 0
    assert "# seeds=7,8" in capsys.readouterr().out
    monkeypatch.setenv("PROTOPROBE_SEED", "x")
    assert cli.main(["evaluate", str(model_file)]) == 4


def test_corrupt_model_exits_2(model_file, tmp_path, capsys):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(model_file.read_bytes()[:-5])
    assert cli.main(["evaluate", str(bad)]) == 2
    assert "corrupt file" in capsys.readouterr().err
    assert cli.main(["evaluate", str(tmp_path / "missing.ppm")]) == 2


@pytest.mark.parametrize("flags", [["--seeds", "0"], ["--seeds", "1,1"], ["--proto-lr", "0"],
                                   ["--confidence", "1.5"], ["--overshoot", "-1"], ["--attack-iters", "0"],
                                   ["--threshold-g", "2"], ["--bogus"]])
def test_bad_flags_are_usage_errors(model_file, flags):
    assert cli.main(["evaluate", str(model_file), *flags]) == 4


def test_flags_validated_before_model_is_read(tmp_path):
    # the model path does not exist, yet the usage error wins
    assert cli.main(["evaluate", str(tmp_path / "nope"), "--proto-iters", "0"]) == 4


def test_all_attacks_failed_exits_3(tmp_path):
    # class 0 always wins inside the unit box, so every prototype of class 0 and its attack stalls
    m = linear_model([[0.0, 0.0], [0.0, 0.0]], [5.0, 0.0], (1, 1, 2))
    path = tmp_path / "flat.ppm"
    save_model(m, path)
    assert cli.main(["evaluate", str(path), "--seeds", "1", *FAST]) == 3


def test_compare_ranks_and_names_winners(tmp_path, capsys):
    paths = []
    for seed in (3, 5):
        p = tmp_path / f"m{seed}.ppm"
        save_model(init_model(tiny_conv_spec(), seed=seed), p)
        paths.append(str(p))
    assert cli.main(["compare", *paths, paths[0], "--seeds", "1", *FAST]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = [line.split(",") for line in lines if line[:1].isdigit()]
    assert len(rows) == 3
    mgs = [float(r[3]) for r in rows]
    assert mgs == sorted(mgs, reverse=True)
    same = [r for r in rows if r[1] == paths[0]]
    assert same[0][3:] == same[1][3:]
    assert any(line.startswith("best_for_accuracy=") for line in lines)
    assert any(line.startswith("best_for_robustness=") for line in lines)


def test_compare_rejects_mismatched_classes(tmp_path):
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    save_model(init_model(tiny_conv_spec(3), 0), a)
    save_model(init_model(tiny_conv_spec(4), 0), b)
    assert cli.main(["compare", str(a), str(b)]) == 2
    assert cli.main(["compare", str(a)]) == 4


def test_profile_dataless_and_with_idx(model_file, tmp_path):
    out = tmp_path / "p.csv"
    assert cli.main(["profile", str(model_file), "--class", "1", "--seeds", "2", *FAST, "--out", str(out)]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines() if not line.startswith("#")]
    assert len(rows[0]) == 7 and all(r[-3:] == ["", "", ""] for r in rows[1:])

    img = tmp_path / "i.idx"
    lab = tmp_path / "l.idx"
    rng = np.random.default_rng(0)
    img.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 6, 0, 0, 0, 6, 0, 0, 0, 6]) + rng.integers(0, 256, 216, np.uint8).tobytes())
    lab.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 6, 0, 1, 2, 0, 1, 2]))
    assert cli.main(["profile", str(model_file), "--class", "1", "--seeds", "2", *FAST, "--out", str(out),
                     "--idx-images", str(img), "--idx-labels", str(lab)]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines() if not line.startswith("#")]
    assert all(all(r) for r in rows[1:])
    assert cli.main(["profile", str(model_file), "--class", "3"]) == 4


def test_gen_data_train_attack_round(tmp_path, capsys):
    prefix = tmp_path / "shapes"
    assert cli.main(["gen-data", "--out", str(prefix), "--classes", "3", "--per-class", "4", "--size", "8"]) == 0
    ds = load_idx(f"{prefix}-images.idx", f"{prefix}-labels.idx")
    assert len(ds) == 12 and ds.input_shape == (1, 8, 8)

    spec = tmp_path / "net.txt"
    spec.write_text("input=1,8,8\nclasses=3\nfeature_index=3\nconv2d in=1 out=4 kernel=3 stride=2 padding=1\n"
                    "relu\nglobal_avg_pool\ndense in=4 out=3\n")
    model = tmp_path / "m.ppm"
    assert cli.main(["train", "--out", str(model), "--spec", str(spec), "--idx-images", f"{prefix}-images.idx",
                     "--idx-labels", f"{prefix}-labels.idx", "--epochs", "2", "--batch-size", "4"]) == 0
    assert "train_accuracy=" in capsys.readouterr().out

    adv = tmp_path / "adv"
    code = cli.main(["attack", str(model), "--seeds", "2", *FAST, "--out", str(adv)])
    assert code in (0, 3)
    assert (adv / "manifest.txt").exists() and (adv / "adversaries.txt").exists()
    assert len((adv / "adversaries.txt").read_text().splitlines()) == 7
    again = tmp_path / "adv2"
    assert cli.main(["attack", str(model), "--prototypes", str(adv), *FAST, "--out", str(again)]) == code
    assert (again / "adversaries.txt").read_text() == (adv / "adversaries.txt").read_text()


def test_study_flags_and_validation(tmp_path, capsys):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({"classes": 3, "per_class": 8, "test_per_class": 4, "image_shape": [1, 8, 8],
                               "schedule": {"epochs_per_stage": 1, "batch_size": 8},
                               "synth": {"max_iterations": 20}, "attack": {"max_iterations": 5}}))
    out = tmp_path / "s.csv"
    assert cli.main(["study", str(cfg), "--fractions", "0.25,1.0", "--seeds", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    data = [line for line in lines if line[:1].isdigit()]
    assert len(data) == 2
    assert lines[-1].startswith("# pearson_g=") and "pearson_adv=" in lines[-1]
    assert cli.main(["study", str(cfg), "--fractions", "0.25,1.5"]) == 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    assert cli.main(["study", str(bad)]) == 4
    assert cli.main(["study", str(tmp_path / "missing.json")]) == 2


def test_model_bytes_independent_of_path(model_file, tmp_path):
    from protoprobe.modelio import load_model
    assert model_to_bytes(load_model(model_file)) == model_file.read_bytes()
