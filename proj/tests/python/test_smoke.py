import json

import pytest

import cactusnet as cn


def test_thresholds_match_arithmetic():
    t = cn.compute_thresholds(0.986, 0.983, 0.923)
    assert abs(t.tau1 - 0.985) < 1e-9
    assert abs(t.tau2 - 0.965) < 1e-9
    with pytest.raises(cn.RangeError):
        cn.compute_thresholds(1.5, 0.5, 0.5)


def test_verdicts_and_routing():
    t = cn.compute_thresholds(0.986, 0.983, 0.923)
    assert cn.verdict(0.99, t) == "known"
    assert cn.verdict(t.tau1, t) == "objective_unknown"
    assert cn.verdict(0.95, t) == "nonobjective_unknown"
    assert cn.route_step([(0, 0.97, 0.965), (1, 0.99, 0.965)]) == 1
    assert cn.route_step([(0, 0.95, 0.965)]) is None


def test_class_applicability_is_the_mean():
    xis = [0.9, 0.95, 1.0, 0.85]
    assert abs(cn.class_applicability(xis) - sum(xis) / len(xis)) < 1e-12
    with pytest.raises(cn.RangeError):
        cn.class_applicability([0.5, 1.2])


def test_cli_round_trip(tmp_path):
    assert cn.run(["--help"]) == 0
    assert cn.run(["train-base", "--config", str(tmp_path / "missing.json")]) == 2

    classes = [
        {"id": c, "name": f"c{c}", "subset": s, "source": "syn"}
        for c, s in enumerate(["objective_known"] * 2 + ["objective_unknown"] * 2 + ["nonobjective_unknown"] * 4)
    ]
    manifest = {
        "sources": {"syn": {"kind": "synthetic", "classes_per_family": 4, "per_class": 20, "image_side": 12, "seed": 2}},
        "classes": classes,
        "probe_set": [3, 7],
        "k": 2,
    }
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    arch = {
        "input_shape": [12, 12, 1],
        "layers": [
            {"kind": "Conv2D", "filters": 4, "kernel": 3},
            {"kind": "ReLU"},
            {"kind": "MaxPool2D", "kernel": 2, "stride": 2},
            {"kind": "Flatten"},
            {"kind": "Dense", "outputs": 8},
            {"kind": "ReLU"},
            {"kind": "Dense", "outputs": 2},
            {"kind": "Softmax"},
        ],
    }
    config = {
        "manifest": "manifest.json",
        "seed": 4,
        "out": str(tmp_path / "out"),
        "base": {"architecture": arch, "train": {"learning_rate": 0.05, "epochs": 2, "batch_size": 16}},
        "taps": [2, 5],
    }
    (tmp_path / "config.json").write_text(json.dumps(config))
    assert cn.run(["train-base", "--config", str(tmp_path / "config.json")]) == 0

    probs = cn.predict(str(tmp_path / "out" / "base.ckpt"), [0.5] * 144, [1, 12, 12, 1])
    assert len(probs) == 2
    assert abs(sum(probs) - 1.0) < 1e-5
    with pytest.raises(cn.ShapeError):
        cn.predict(str(tmp_path / "out" / "base.ckpt"), [0.5] * 10, [1, 12, 12, 1])
