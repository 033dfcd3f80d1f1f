"""Smoke test for the reviewlens extension module.

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/reviewlens-*.whl
    python python/smoke.py
"""
import math
import sys
import tempfile

import reviewlens as rl


def main():
    h = rl.hellinger([0.5, 0.5], [0.9, 0.1])
    assert abs(h - math.sqrt(1 - math.sqrt(0.45) - math.sqrt(0.05))) < 1e-12
    assert rl.mask_indices_by_quantile([0.1, 0.4, 0.2, 0.3], 0.5) == [0, 2]

    acc = [0.70] * 32
    for layer in (2, 4, 8, 11, 12, 13):
        acc[layer] = 0.04
    acc[29] = 0.12
    fusion = rl.identify_fusion_layers(acc, 0.78)
    assert fusion == [2, 4, 8, 11, 12, 13], fusion
    assert rl.identify_review_layer(acc, 0.78, fusion) == 29

    cfg = rl.default_config()
    for old, new in [("n_layers = 6", "n_layers = 4"), ("n_train = 5000", "n_train = 200"),
                     ("n_eval = 1000", "n_eval = 50"), ("n_steps = 800", "n_steps = 20"),
                     ("latency_repeats = 3", "latency_repeats = 1")]:
        assert old in cfg, old
        cfg = cfg.replace(old, new)

    with tempfile.TemporaryDirectory() as d:
        manifest = rl.run("train", d + "/train", config=cfg)
        assert 'command = "train"' in manifest
        model = rl.Model.load(d + "/train/model.ckpt")
        assert model.n_layers == 4

        _, ev = rl.generate_dataset(cfg)
        s = ev[0]
        tokens = s["image_tokens"] + [24, s["query"]]
        plain = model.forward(tokens, (0, 16))
        assert model.forward(tokens, (0, 16), [(1, list(range(16)), 1.0)]) == plain

        baseline, per_layer = model.mask_sweep(ev, 1.0, cfg)
        assert all(a == baseline for a in per_layer)

        report = rl.fusion_report([0.1, 0.9, 0.9, 0.1], 0.95, 0.125)
        r = model.contrast(tokens, (0, 16), report, strategy="all", rho=0.0)
        assert r["logits"] == plain and r["review"] == 3

    print("smoke ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
