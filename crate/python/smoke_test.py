"""Smoke test for the vicl_py extension.

Builds the cdylib with cargo if needed, loads it, and drives the whole
pipeline at toy scale: dataset -> backbone -> prompt -> prediction.

Run from the repository root:  python3 python/smoke_test.py
"""

import json
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    lib = None
    for profile in ("release", "debug"):
        cand = os.path.join(ROOT, "target", profile, "libvicl_py.so")
        if os.path.exists(cand):
            lib = cand
            break
    if lib is None:
        subprocess.run(
            ["cargo", "build", "-p", "vicl-py"], cwd=ROOT, check=True
        )
        lib = os.path.join(ROOT, "target", "debug", "libvicl_py.so")
    stage = tempfile.mkdtemp(prefix="vicl_py_")
    shutil.copy(lib, os.path.join(stage, "vicl_py.so"))
    sys.path.insert(0, stage)
    import vicl_py

    return vicl_py


def main():
    v = load_module()

    # Frozen parameter-count formula at reference geometry.
    table = {10: 25680, 20: 48960, 30: 69840, 40: 88320, 50: 104400, 60: 118080}
    for pad, expect in table.items():
        got = v.param_count(224, pad)
        assert got == expect, f"param_count(224, {pad}) = {got}, want {expect}"

    ds = v.PyDataset.generate(
        classes=["circle", "square"], per_class=6, image_size=24, seed=3
    )
    assert len(ds) == 12
    assert ds.classes() == [0, 1]
    (h, w, flat), (lh, lw, lflat) = ds.pair(0)
    assert (h, w) == (24, 24) and (lh, lw) == (24, 24)
    assert len(flat) == 24 * 24 * 3
    assert all(0.0 <= x <= 1.0 for x in flat)
    # Labels are binary before any resize.
    assert set(lflat) <= {0.0, 1.0}

    bb = v.PyBackbone.pretrain(ds, canvases=16, tok_epochs=2, pred_epochs=2, seed=1)
    fp = bb.fingerprint()
    assert len(fp) == 64 and fp == bb.fingerprint()
    assert bb.canvas_size() == 64

    # Same seed, same weights.
    bb2 = v.PyBackbone.pretrain(ds, canvases=16, tok_epochs=2, pred_epochs=2, seed=1)
    assert bb2.fingerprint() == fp

    prompt, history_json = v.train_prompt(
        bb, ds, epochs=2, placement="I&L", resolution=16, pad=2, seed=0
    )
    history = json.loads(history_json)
    assert len(history["epochs"]) == 2
    assert prompt.param_count() == v.param_count(16, 2)

    ctx_in, ctx_lbl = ds.pair(0)
    query_in, query_lbl = ds.pair(1)
    pred = v.predict_query_label(
        bb, ctx_in, ctx_lbl, query_in, prompt=prompt, placement="I&L"
    )
    ph, pw, pflat = pred
    assert (ph, pw) == (32, 32), "prediction lives at canvas-cell resolution"
    base = v.predict_query_label(bb, ctx_in, ctx_lbl, query_in)
    zeros = v.PyPrompt.zeros(resolution=16, pad=2)
    same = v.predict_query_label(
        bb, ctx_in, ctx_lbl, query_in, prompt=zeros, placement="I&L"
    )
    assert same == base, "zero prompt must reproduce the promptless baseline"

    gt = v.resize(query_lbl, ph, pw)
    score = v.miou(pred, gt)
    assert 0.0 <= score <= 1.0

    # Round-trip the prompt through its checkpoint format.
    with tempfile.TemporaryDirectory() as td:
        p = os.path.join(td, "p.prompt")
        prompt.save(p)
        back = v.PyPrompt.load(p)
        assert back.fingerprint() == prompt.fingerprint()
        c = os.path.join(td, "bb.ckpt")
        bb.save(c)
        assert v.PyBackbone.load(c).fingerprint() == fp

    report = json.loads(v.eval_folds(bb, ds, folds=2, epochs=1, resolution=16, pad=2))
    assert len(report["folds"]) == 2
    assert report["backbone_fingerprint"] == fp
    assert 0.0 <= report["mean_prompted_miou"] <= 1.0

    print("smoke test passed")


if __name__ == "__main__":
    main()
