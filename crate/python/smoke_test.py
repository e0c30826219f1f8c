"""End-to-end smoke test of the moevrd Python extension.

Build and install the module first, for example with
`maturin develop -m crates/py/Cargo.toml --release`, or copy
`target/release/libmoevrd_py.so` to `moevrd.so` somewhere on `sys.path`.
"""

import math
import os
import tempfile

import moevrd


def check_scalars():
    box = lambda t: (t, 10.0, 10.0, 4.0, 4.0)
    a = [box(t) for t in range(10)]
    assert moevrd.viou(a, a) == 1.0
    shifted = [box(t) for t in range(5, 15)]
    assert abs(moevrd.viou(a, shifted) - 5 / 15) < 1e-12
    assert abs(moevrd.viou(a, shifted, mode="shared_extent") - 1.0) < 1e-12
    assert moevrd.average_precision([True, False, True], 2) == (1.0 + 2 / 3) / 2
    assert moevrd.coefficient_of_variation([1.0, 1.0, 1.0]) == 0.0
    assert moevrd.top_k_indices([0.5, 0.9, 0.9, 0.1], 2) == [1, 2]
    assert moevrd.derive_seed(7, "init", 0) == moevrd.derive_seed(7, "init", 0)
    try:
        moevrd.RunConfig(overrides=["model.top_k=99"])
    except ValueError as e:
        assert "top_k" in str(e)
    else:
        raise AssertionError("invalid config accepted")


def check_pipeline():
    cfg = moevrd.RunConfig(
        overrides=[
            "seed=3",
            "synth.num_videos=16",
            "synth.num_test_videos=4",
            "train.epochs=2",
        ]
    )
    train, test = moevrd.generate(cfg)
    assert train.num_videos == 16 and test.num_videos == 4
    assert train.num_relations > 0
    assert sum(train.predicate_counts().values()) == train.num_relations

    model = moevrd.Model(cfg, train)
    log = model.fit(train, cfg)
    assert len(log) == 2
    assert all(math.isfinite(e["total_loss"]) for e in log)

    report = model.evaluate(test, cfg)
    assert 0.0 <= report["mAP"] <= 1.0
    preds = model.predict_video(test, test.video_ids[0], cfg)
    assert all(p["video_id"] == test.video_ids[0] for p in preds)

    stats = model.gate_stats(test)
    assert abs(sum(stats["importance_share"]) - 1.0) < 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = moevrd.Model.load(path)
        assert again.evaluate(test, cfg) == report
        test.save(os.path.join(tmp, "test"))
        assert moevrd.Dataset.load(os.path.join(tmp, "test")).num_relations == test.num_relations
    print(f"mAP {report['mAP']:.4f} over {report['videos']} videos, {model!r}")


if __name__ == "__main__":
    check_scalars()
    check_pipeline()
    print("smoke test passed")
