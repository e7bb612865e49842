"""Smoke test for the gkvlp Python bindings.

Build first with `pip install --no-build-isolation ./crates/python`.
"""

import math
import tempfile
from pathlib import Path

import gkvlp_py as gk


def close(a, b, tol=1e-6):
    return abs(a - b) <= tol


def main():
    assert close(gk.itc_loss([[1.0, 0.0]] * 4, [[1.0, 0.0]] * 4), math.log(4))
    assert close(gk.itm_loss([[0.0, 0.0], [1.0, 1.0]], [True, False]), math.log(2))
    assert close(gk.lm_loss([[0.0] * 10] * 3, [1, 4, 7]), math.log(10))
    assert close(gk.ecls_loss([1.0, 0.0], [[0.0, 1.0]], [[0.0, 1.0]], [True]), math.log(2))
    bleu, rouge = gk.text_metrics(["a b c d e"], ["a b c d f"])
    assert close(bleu, 0.668740304976422) and close(rouge, 0.8)
    assert gk.auroc([0.9, 0.1, 0.8, 0.3], [True, False, True, False]) == 1.0
    assert close(gk.average_precision([(0.9, True), (0.8, False), (0.7, True)], 3), 5 / 9)

    cfg = gk.Config([
        ("synth.num_samples", "24"),
        ("synth.split_fractions", "0.5,0.25,0,0.25"),
        ("encoder.hidden_dim", "16"),
        ("encoder.projection_dim", "16"),
        ("encoder.region_dim", "16"),
        ("encoder.prompt_dim", "16"),
        ("train.batch_size", "4"),
        ("train.epochs", "2"),
        ("finetune.epochs", "1"),
    ])
    data = gk.generate_dataset(cfg)
    assert len(data) == 24
    pre = gk.select_split(data, "pretrain")
    train, test = gk.select_split(data, "train"), gk.select_split(data, "test")
    h, w, pixels = pre[0].image
    assert len(pixels) == h * w and len(pre[0].labels) == 14

    model, log = gk.pretrain(cfg, pre)
    assert len(log) == 6 and all(math.isfinite(s["total"]) for s in log)
    print(f"pretrained {model.num_parameters} parameters, total {log[0]['total']:.3f} -> {log[-1]['total']:.3f}")
    print("report:", model.generate(test[0], 24))
    print("vqa:", model.finetune("vqa", train, test))

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        model.save(str(path))
        again = gk.Model.load(str(path))
        assert again.generate(test[0], 24) == model.generate(test[0], 24)
    print("ok")


if __name__ == "__main__":
    main()
