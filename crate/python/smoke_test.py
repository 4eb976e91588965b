"""Smoke test for the reconscan Python bindings.

Build first:  pip install -e crates/python --no-build-isolation
"""

import json
import math
import os
import tempfile

import reconscan_py as rs


def main():
    assert rs.format_percent(rs.accuracy(36, 2, 4, 4)) == "82.60"
    assert rs.window_count(60) == 55
    assert rs.window_count(60, 5, 5) == 51
    assert abs(rs.l2([0.2, 0.4], [0.1, 0.8]) - 0.085) < 1e-12
    assert abs(rs.cosine([1.0, 0.0], [1.0, 1.0]) - (1 - 1 / math.sqrt(2))) < 1e-12
    assert rs.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75

    try:
        rs.roc_auc([0.1, 0.2], [True, True])
    except rs.ReconscanError as e:
        assert e.args[0] == "SINGLE_CLASS_ERROR"
    else:
        raise AssertionError("single-class ROC accepted")

    model = rs.Model("sagan33", 32, 32, base_width=8, critic_width=8, seed=1)
    assert model.kind == "SAGAN33"
    assert sum(name.startswith("sa") for name in model.layer_names()) == 5
    values = [0.5] * (2 * 3 * 32 * 32)
    out, shape = model.reconstruct(values, [2, 3, 32, 32])
    assert shape == [2, 3, 32, 32] and len(out) == len(values)
    assert all(0.0 <= v <= 1.0 for v in out)

    with tempfile.TemporaryDirectory() as tmp:
        manifest = rs.generate_cohort(tmp, healthy=2, anomalous=1, timepoints=1, extent=32, seed=4)
        assert os.path.isfile(manifest)
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = rs.Model.load(path)
        assert again.param_digest() == model.param_digest()
        spec = json.loads(again.spec_json())
        assert spec["kind"] == "SAGAN33"

    print("reconscan_py smoke test passed")


if __name__ == "__main__":
    main()
