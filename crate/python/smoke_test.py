"""Converts the bundled MLP on the digits fixture and checks the results."""

import math
import pathlib
import sys
import tempfile

import numpy as np

import snnconv_py as sc

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"


def fixture(name):
    return str(FIXTURES / name)


def main():
    model = sc.Model.load(fixture("mlp.json"), fixture("mlp.snnf"))
    train = sc.Dataset.load(fixture("digits_train.snnd"))
    test = sc.Dataset.load(fixture("digits_test.snnd"), fixture("digits_test.labels"))
    print(model, len(train), "train /", len(test), "test samples")

    snn, summary = sc.convert(model, train, iterations=200, seed=0)
    assert snn.mode == "if"
    assert summary["iterations"] == 200
    for layer in snn.activation_slots:
        assert min(snn.thresholds(layer)) > 0.0
    print("t0 estimate", round(summary["t0_estimate"], 3))

    # numpy round trip through Tensor
    x = np.asarray(test.batch(list(range(20))).data, dtype=np.float32)
    batch = sc.Tensor([20, *test.sample_shape], x.ravel().tolist())
    ann = np.asarray(snn.forward(batch, mode="relu").data).reshape(20, -1)
    out, trace = sc.simulate(snn, batch, 64, t0=1, record_trace=True)
    spiking = np.asarray(out.data).reshape(20, -1)
    agree = (ann.argmax(1) == spiking.argmax(1)).mean()
    print(f"ANN/SNN agreement on 20 samples at T=64: {agree:.2f}")
    assert agree >= 0.8

    result = sc.evaluate(snn, test, timesteps=[16, 32])
    for t, t0, correct, acc in result["rows"]:
        print(f"T={t:<3} t0={t0} accuracy {acc:.4f} ({correct}/{result['samples']})")
    print(f"ANN accuracy {result['ann_accuracy']:.4f}")
    assert result["ann_accuracy"] > 0.9
    assert result["rows"][-1][3] > result["ann_accuracy"] - 0.05

    report = sc.error_bound(snn, batch, 64)
    print(f"e_model {report['e_model']:.4f} bound {report['bound']:.4f}")
    assert report["holds"]

    e = sc.energy(trace, snn)
    assert e["sops"] > 0 and e["frames"] == 20
    assert math.isclose(e["snn_energy_joules"], e["sops"] * 77e-15, rel_tol=1e-12)
    print(f"{e['sops']} SOPs vs {e['flops']} FLOPs")

    assert sc.choose_delay(summary["t0_estimate"], 3) == 0
    try:
        sc.evaluate(snn, test, timesteps=[2])
    except ValueError as err:
        print("rejected:", err)
    else:
        raise AssertionError("T=2 without a delay should be rejected")

    with tempfile.TemporaryDirectory() as d:
        snn.save(f"{d}/m.json", f"{d}/m.snnf")
        again = sc.Model.load(f"{d}/m.json", f"{d}/m.snnf")
        assert again.thresholds(snn.activation_slots[0]) == snn.thresholds(snn.activation_slots[0])

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
