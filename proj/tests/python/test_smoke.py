import math

import numpy as np
import pytest

import dapnet


def test_config_defaults_and_overrides():
    cfg = dapnet.ExperimentConfig()
    assert cfg.alpha == 1.0
    assert cfg.lambda_img == 0.002
    assert cfg.lr_at_epoch(225) == 5e-4
    na = dapnet.ExperimentConfig({"variant": "NA", "crop_size": "128"})
    assert na.variant == "NA"
    assert dapnet.ExperimentConfig.parse(na.serialize()) == na
    with pytest.raises(dapnet.ConfigError, match="crop_size"):
        dapnet.ExperimentConfig({"crop_size": "250"})


def test_render_is_deterministic_and_binary():
    img, mask = dapnet.render_synthetic(3, 0, 64, "stainB")
    img2, _ = dapnet.render_synthetic(3, 0, 64, "stainB")
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    assert mask.shape[:2] == (64, 64)
    assert np.array_equal(img, img2)
    assert set(np.unique(mask)) <= {0, 255}


def test_metrics_and_t_test():
    gt = np.array([[1, 1], [0, 0]], dtype=np.int64)
    pred = np.array([[1, 0], [1, 0]], dtype=np.int64)
    assert dapnet.pixel_accuracy(pred, gt) == 0.5
    assert math.isclose(dapnet.iou(pred, gt), 1 / 3)
    r = dapnet.paired_t_test([2, 3, 4, 5, 6], [1, 1, 1, 1, 1])
    assert math.isclose(r["t"], 4.242640687119285, rel_tol=1e-12)
    assert math.isclose(r["p"], 0.013235599563682695, rel_tol=1e-9)


def test_losses():
    probs = np.full((1, 2, 4, 4), 0.5, dtype=np.float32)
    mask = np.zeros((1, 4, 4), dtype=np.int64)
    assert math.isclose(dapnet.segmentation_loss(probs, mask, 0.0, 1.0), math.log(2), rel_tol=1e-6)
    d = np.zeros((1, 1, 2, 2), dtype=np.float32)
    assert math.isclose(dapnet.lsgan_d_loss(d, d), 1.0, rel_tol=1e-6)


def test_model_predict_shape_and_range():
    model = dapnet.Model(dapnet.ExperimentConfig({"channel_width_scale": "1/8", "crop_size": "128"}))
    img, _ = dapnet.render_synthetic(1, 0, 150, "stainA")
    prob = model.predict(img)
    assert prob.shape == (150, 150)
    assert 0.0 <= prob.min() and prob.max() <= 1.0
    assert model.param_count() > 0


def test_cli_roundtrip(tmp_path):
    root = str(tmp_path)
    for seed, style, run_id in [(1, "stainA", "src"), (2, "stainB", "tgt")]:
        code, out, err = dapnet.run_cli(["synth-gen", "--seed", str(seed), "--n", "6", "--n-test", "2",
                                         "--size", "128", "--style", style, "--out", root, "--run-id", run_id])
        assert code == 0, err
    code, out, err = dapnet.run_cli([
        "train", "--out", root, "--run-id", "run",
        "--set", "channel_width_scale=1/8", "--set", "crop_size=128", "--set", "batch_size=2",
        "--set", "crops_per_image=1", "--set", "total_epochs=1", "--set", "constant_epochs=1",
        "--set", f"source_manifest={root}/src/manifest.csv",
        "--set", f"target_manifest={root}/tgt/manifest.csv",
    ])
    assert code == 0, err
    report = dapnet.evaluate(f"{root}/run/final.dapn", f"{root}/tgt/manifest.csv", "target")
    assert 0.0 <= report["iou"] <= 1.0
    assert len(report["per_image"]) == 2
    code, _, err = dapnet.run_cli(["evaluate", "--checkpoint", f"{root}/missing.dapn"])
    assert code == 2 and err.startswith("error: checkpoint not found")
