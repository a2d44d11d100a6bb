#!/usr/bin/env python3
"""Smoke test for the pks_py extension module.

Loads the cdylib straight from the cargo target directory, then runs the
whole pipeline end to end at a tiny scale: synthesize scenes, annotate
weakly, train a few steps, and segment an image with the trained model.

Build the extension first:

    cargo build --release -p pks-python

then run:

    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import json
import pathlib
import sys
import tempfile

REPO = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO / "target" / "release" / "libpks_py.so",
        REPO / "target" / "debug" / "libpks_py.so",
    ]
    for path in candidates:
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("pks_py", str(path))
            spec = importlib.util.spec_from_loader("pks_py", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit(f"extension not found; build it first: cargo build --release -p pks-python\n"
             f"looked at: {', '.join(str(c) for c in candidates)}")


def main():
    pks = load_module()

    vocab = pks.vocabulary()
    assert "red" in vocab and "circle" in vocab, vocab
    ids = pks.tokenize("left red circle")
    assert len(ids) == 3 and all(isinstance(i, int) for i in ids), ids
    try:
        pks.tokenize("left plane")
    except ValueError as err:
        assert "plane" in str(err)
    else:
        raise AssertionError("unknown token must raise")

    scene = pks.generate_scene(0, image_size=64, seed=11)
    assert scene["width"] == scene["height"] == 64
    assert len(scene["rgb"]) == 3 * 64 * 64
    assert len(scene["mask"]) == 64 * 64
    assert sum(scene["mask"]) > 0
    assert pks.tokenize(scene["expression"]), scene["expression"]

    labels = pks.superpixel_labels(scene["rgb"], 64, 64, n_segments=50)
    assert len(labels) == 64 * 64 and max(labels) >= 1

    weak = pks.weak_labels(scene["rgb"], scene["mask"], 64, 64, n_segments=50)
    assert set(weak) <= {-1, 0, 1}
    assert weak.count(1) > 0 and weak.count(0) > 0

    m = scene["mask"]
    assert pks.iou(m, m) == 1.0
    assert pks.iou(m, [False] * len(m)) == 0.0

    flat = [1.0] * 16
    decayed = pks.matrix_nms([flat, flat], [0.9, 0.5], 4, 4)
    assert decayed[0] == 0.9 and decayed[1] < 0.5, decayed

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        data = tmp / "data"
        pks.generate_dataset(data, "train", 6, image_size=64, seed=3)
        pks.generate_dataset(data, "val", 2, image_size=64, seed=3, offset=1_000_000)
        skipped = pks.weak_annotate(data, "train", superpixels=50)
        assert skipped == 0, skipped

        cfg = {
            "channels": 8,
            "text_embed_dim": 8,
            "text_hidden": 8,
            "fusion_steps": 1,
            "level_lo": 1,
            "level_hi": 3,
            "steps": 4,
            "batch_size": 2,
            "lr": 0.05,
            "log_every": 2,
            "eval_every_epochs": 1,
            "train_samples": 6,
            "val_samples": 2,
            "data_root": str(data),
            "out_dir": str(tmp / "run"),
        }
        cfg_path = tmp / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        summary = pks.train_run(cfg_path, seed=5)
        assert summary["steps"] == 4, summary
        assert summary["loss_total"] > 0.0

        seg = pks.Segmenter(summary["checkpoint"])
        assert json.loads(seg.config_json())["channels"] == 8

        out = seg.predict_file(data / "train" / "images" / "train_00000.ppm", "red circle")
        assert len(out["mask"]) == 64 * 64
        assert len(out["quarter"]) == 16 * 16

        out2 = seg.predict(scene["rgb"], scene["expression"])
        assert len(out2["mask"]) == 64 * 64

        report = seg.evaluate(data, "val")
        assert 0.0 <= report["miou"] <= 1.0
        assert report["n"] == 2

    print("smoke test passed")


if __name__ == "__main__":
    main()
