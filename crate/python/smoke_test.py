"""Smoke test for the pysoundfilter extension module.

Build the module and run this script with:

    cargo build --release -p soundfilter-py
    cp target/release/libpysoundfilter.so python/pysoundfilter.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pysoundfilter as sf  # noqa: E402


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok   {what}")


def main():
    corpus = sf.synthetic_corpus(families=3, recordings_per_family=3, duration_s=0.5, sample_rate=8000, seed=1)
    check(len(corpus) == 9, "synthetic corpus has 9 recordings")
    check(len({fam for _, fam, _ in corpus}) == 3, "three families")

    target = corpus[0][2][:2048]
    noise = corpus[3][2][:2048]
    mixture, gain = sf.mix_at_snr(target, noise, 0.0, 8000)
    scaled = [gain * n for n in noise]
    snr = 10 * math.log10(sum(t * t for t in target) / sum(s * s for s in scaled))
    check(abs(snr) < 1e-4, "mix_at_snr hits 0 dB")

    estimate = [t + 0.1 * n for t, n in zip(target, noise)]
    check(abs(sf.si_sdr(estimate, target) - sf.si_sdr([3 * e for e in estimate], target)) < 1e-9, "SI-SDR is scale invariant")
    check(abs(sf.si_sdr_clipped(target, target) - 30.0) < 1e-9, "clipped SI-SDR saturates at 30 dB")

    model = sf.Model(base_channels=4, embedding_dim=8, seed=0)
    check(model.sample_multiple == 256, "length multiple is 256")
    out = model.filter(mixture, corpus[1][2][:2048])
    check(max(abs(a - b) for a, b in zip(out, mixture)) == 0.0, "fresh model passes the mixture through")
    v = model.conditioning(corpus[1][2][:2048])
    check(abs(math.sqrt(sum(x * x for x in v)) - 1.0) < 1e-5, "conditioning vector has unit norm")
    check(abs(sf.si_sdr_improvement(out, mixture, target)) < 1e-9, "identity model has zero improvement")

    with tempfile.TemporaryDirectory() as tmp:
        wav = os.path.join(tmp, "t.wav")
        sf.save_wav(wav, target, 8000)
        back, rate = sf.load_wav(wav)
        check(rate == 8000 and len(back) == len(target), "WAV round trip")
        check(max(abs(a - b) for a, b in zip(back, target)) <= 1 / 32768, "WAV samples within one quantization step")

        config = {
            "batch_size": 2,
            "total_steps": 2,
            "eval_every": 1,
            "eval_examples": 2,
            "clip_len": 1024,
            "holdout_per_family": 1,
            "dataset": {"kind": "synthetic", "families": 3, "recordings_per_family": 3, "duration_s": 0.5},
            "model": {"base_channels": 4, "embedding_dim": 8},
        }
        rows = sf.train(json.dumps(config), os.path.join(tmp, "run"))
        check([r[0] for r in rows] == [1, 2], "training logs steps 1 and 2")
        check(all(math.isfinite(r[1]) and math.isfinite(r[2]) for r in rows), "training metrics are finite")
        ckpt = os.path.join(tmp, "run", "final.ckpt")
        loaded = sf.Model.load(ckpt)
        check(loaded.num_parameters == model.num_parameters, "checkpoint loads with the same size")
        mean, std, per_family = sf.evaluate(ckpt, 3)
        check(math.isfinite(mean) and std >= 0 and len(per_family) >= 1, "checkpoint evaluates")

        try:
            sf.train('{"batch_sise": 2}', os.path.join(tmp, "bad"))
        except ValueError as e:
            check("batch_sise" in str(e), "bad config raises ValueError naming the field")
        else:
            check(False, "bad config raises ValueError naming the field")

    print("smoke test passed")


if __name__ == "__main__":
    main()
