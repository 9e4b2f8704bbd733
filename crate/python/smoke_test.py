"""Smoke test for the mad_distill extension module.

Build and install first:  maturin develop -m crates/py/Cargo.toml
"""
import math
import tempfile
from pathlib import Path

import mad_distill as mad


def main():
    cfg = mad.Config("desk")
    for key, value in [("data.per_class", "60"), ("teacher.ep", "6"), ("teacher.ldep", "3,5"),
                       ("ep", "4"), ("spe", "5"), ("ldep", "2,3"), ("n_s", "3"), ("bs", "32"),
                       ("ckpt_every", "5"), ("probe.lag", "2")]:
        cfg.set(key, value)
    cfg.validate()
    assert cfg.get("method") == "mad"

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        acc = mad.pretrain_teacher(cfg, tmp / "teacher")
        print(f"teacher accuracy {acc:.4f}")

        summary = mad.distill(cfg, tmp / "teacher" / "teacher.ckpt", tmp / "run")
        print(f"{summary['method']} student accuracy {summary['final_accuracy']:.4f} "
              f"after {summary['stages']} stages")
        assert summary["ema_updates"] > 0

        rows = mad.js_probe(tmp / "run", 2, [5, 10, 20], batches=2)
        for t, js_gen, js_ema in rows:
            assert 0.0 <= js_gen <= math.log(2) and 0.0 <= js_ema <= math.log(2)
        print("js probe", rows)

        student = mad.Classifier.load(tmp / "run" / "ckpt" / "student_t20.ckpt")
        gen = mad.Generator.load(tmp / "run" / "ckpt" / "generator_t20.ckpt")
        x = gen.sample(16, seed=1)
        teacher = mad.Classifier.load(tmp / "teacher" / "teacher.ckpt")
        kd = mad.kd_loss(teacher.logits(x), student.logits(x))
        assert kd >= 0.0
        print(f"KD on 16 synthetic samples {kd:.5f}; student agrees on "
              f"{sum(a == b for a, b in zip(teacher.predict(x), student.predict(x)))}/16")

    p = mad.softmax([[0.0, 1.0, 2.0]])
    assert abs(sum(p[0]) - 1.0) < 1e-12
    assert abs(mad.js_divergence([[1.0, 0.0]], [[0.0, 1.0]]) - math.log(2)) < 1e-12

    bank = mad.MemoryBank(3, 1)
    bank.push([[1.0], [2.0]])
    bank.push([[3.0], [4.0]])
    assert bank.contents() == [[2.0], [3.0], [4.0]] and len(bank) == 3

    try:
        mad.Config("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")
    print("ok")


if __name__ == "__main__":
    main()
