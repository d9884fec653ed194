"""Smoke test for the Python extension.

Build first with `cargo build -p mcddpm-py --release` (or without --release),
then run `python3 python/smoke_test.py`.
"""

import importlib.util
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libmcddpm_py.so")
        if os.path.exists(lib):
            break
    else:
        sys.exit("libmcddpm_py.so not found; run `cargo build -p mcddpm-py` first")
    tmp = tempfile.mkdtemp()
    target = os.path.join(tmp, "mcddpm_py.so")
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("mcddpm_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    m = load_module()

    betas, alpha_bars = m.linear_schedule(1000)
    assert betas[0] == 1e-4 and betas[-1] == 0.02
    assert alpha_bars[0] == 1.0 and len(alpha_bars) == 1001
    x0 = [0.5] * 16
    xt = m.q_sample(4, 4, x0, 500, [0.0] * 16)
    assert max(abs(a - math.sqrt(alpha_bars[500]) * 0.5) for a in xt) < 1e-6

    records = m.generate_phantom(seed=1, size=32, depth=12, train=4, val=1, test=2, radius=(2.0, 3.0))
    splits = [r.split for r in records]
    assert splits.count("train") == 4 and splits.count("test") == 2
    test = [r for r in records if r.split == "test"]
    assert all(r.ground_truth.count() > 0 for r in test)
    assert all(r.ground_truth is None for r in records if r.split == "train")

    ck = m.train(records, ablation="full", epochs=2, lr=1e-3, seed=3, patch=16)
    assert ck.epoch >= 1 and ck.parameter_count() > 0
    nb = m.train(records, ablation="no_bridge", epochs=1, patch=16)
    assert not any(n.startswith("bridge.") for n in nb.parameter_names())

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ck.bin")
        ck.save(path)
        again = m.Checkpoint.load(path)
        v = test[0].volume
        a = m.reconstruct(ck, v, seed=5).to_list()
        b = m.reconstruct(again, v, seed=5).to_list()
        assert a == b, "reloaded checkpoint changed the reconstruction"

    v = test[0].volume
    rec = m.reconstruct(ck, v)
    assert rec.dims == v.dims
    amap = m.anomaly_map(v, rec, 2)
    assert min(amap.to_list()) >= 0.0
    seg = m.segment(v, amap, theta=0.2)
    assert seg.dims == v.dims
    d = m.dice(seg, test[0].ground_truth)
    assert 0.0 <= d <= 1.0
    mask = m.Mask(*v.dims, [1 if x > 0 else 0 for x in v.to_list()])
    ap = m.auprc(amap, test[0].ground_truth, mask)
    assert 0.0 <= ap <= 1.0

    rows = m.evaluate(ck, records, thetas=[0.1, 0.2])
    assert [r[0] for r in rows] == [0.1, 0.2]
    healthy = m.evaluate(ck, records, split="val")
    assert healthy[0][1] is None and healthy[0][4] > 0.0

    try:
        m.Volume(2, 2, 2, [0.0] * 7)
    except ValueError:
        pass
    else:
        raise AssertionError("size mismatch accepted")
    try:
        m.anomaly_map(v, rec, 3)
    except ValueError:
        pass
    else:
        raise AssertionError("p = 3 accepted")

    print(f"dice {d:.3f} auprc {ap:.3f} rows {rows}")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
