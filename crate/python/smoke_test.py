"""Smoke test for the psvit_py extension module."""

import math
import os
import tempfile

import psvit_py as pv


def main():
    ti = pv.Config("ps-vit-ti")
    report = pv.cost_report(ti)
    assert abs(report["params"] / 4.7e6 - 1) < 0.1, report["params"]
    shared = pv.cost_report(pv.Config("ps-vit-ti", share_weights=True))
    assert shared["flops"] == report["flops"]
    assert shared["params"] < report["params"]
    print(f"ps-vit-ti: {report['params'] / 1e6:.2f}M params, {report['flops'] / 1e9:.2f}B FLOPs")

    ys, xs = pv.init_grid(56, 56, 14)
    assert (ys[0], xs[0]) == (2.0, 2.0) and ys[-1] == 54.0

    feature = [float(i) for i in range(2 * 3 * 4)]
    cols = pv.bilinear_sample(feature, (2, 3, 4), [1.0, 0.5], [2.0, 0.5])
    assert cols[0] == [6.0, 18.0]
    assert math.isclose(cols[1][0], (0 + 1 + 4 + 5) / 4)

    config = pv.Config("toy", num_classes=2)
    model = pv.Model(config, seed=0)
    images, labels = pv.synthetic_dataset(8, 16, 1)
    logits = model.predict(images)
    assert len(logits) == 8 and all(len(row) == 2 for row in logits)
    traj = model.trajectories(images[:1])
    assert len(traj[0]) == config.iterations
    assert traj[0][0] == traj[0][-1], "fresh offset heads must not move points"

    metrics = model.train_synthetic(epochs=40, target_accuracy=0.95)
    top1, top5 = model.evaluate_synthetic()
    assert top1 >= 0.95 and top5 >= top1
    print(f"overfit: {len(metrics)} epochs, train accuracy {top1:.3f}")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.psvt")
        model.save(path)
        again = pv.Model.load(path)
        assert again.predict(images) == model.predict(images)

    result = pv.gradcheck_run("bilinear_sample", seeds=2)
    assert all(r["pass"] for r in result)
    assert "model" in pv.gradcheck_ops()

    try:
        pv.Config("ps-vit-x")
    except ValueError as e:
        assert "unknown preset" in str(e)
    else:
        raise AssertionError("bad preset accepted")
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
