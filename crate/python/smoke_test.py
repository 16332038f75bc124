"""Smoke test for the `_pacm` extension.

Build it first, either with `maturin develop -m crates/python/Cargo.toml` or
`cargo build --release -p pacm-python` and copying `target/release/lib_pacm.so`
next to this file as `_pacm.so`.
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import _pacm  # noqa: E402


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAILED: {what}")
    print(f"ok  {what}")


def main():
    m = _pacm.verification_metrics([0.9, 0.6, 0.4], [0.5, 0.3, 0.1])
    check(abs(m["accuracy"] - 5 / 6) < 1e-12, "verification accuracy on a worked example")
    check(abs(m["eer"] - 1 / 3) < 1e-12, "EER on a worked example")

    loss, gf, gp = _pacm.pac_loss_in_batch([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
    expected = 2 * 2 * math.log(1 + math.exp(-1 / _pacm.TEMPERATURE))
    check(abs(loss - expected) < 1e-12, "in-batch contrastive loss")
    check(len(gf) == 2 and len(gp[0]) == 2, "gradient shapes")

    row = _pacm.mi_bound(8, 0.9, 16, 32, 5)
    check(row["bound"] <= row["exact_mi"] + 3 * row["bound_std_err"], "MI bound below the exact MI")

    grad = _pacm.gradcheck(configurations=1)
    check(grad["passed"], "gradient check")

    data = json.dumps({
        "seed": 0, "num_identities": 60, "num_heldout_identities": 20,
        "samples_per_identity_per_view": 4, "latent_dim": 8, "input_dim": 16,
        "noise_sigma": 0.3,
        "tiers": [
            {"extra_noise": 0.0, "rotation": 0.0, "offset": 0.0},
            {"extra_noise": 0.1, "rotation": 0.5, "offset": 1.0},
        ],
    })
    ds = _pacm.Dataset.generate(data, seed=3)
    check(ds.num_identities == 60 and ds.input_dim == 16, "dataset shape")

    cfg = _pacm.default_train_config()
    cfg.update(num_negatives=20, batch_size=8, epochs=2, encoder_dims=[16, 8],
               discriminator_hidden=[16, 16], pada_warmup_epochs=0, iterations_per_epoch=3)
    trainer = _pacm.Trainer(ds, json.dumps(cfg))
    first = trainer.step()
    check(math.isfinite(first["l_total"]), "one training step")
    trainer.run()
    check(trainer.finished and len(trainer.log()) == 6, "training runs to completion")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "run.ckpt")
        trainer.save_checkpoint(path)
        again = _pacm.Trainer.resume(path, ds)
        check(again.log() == [] and again.iteration == 6, "checkpoint round trip")

    report = trainer.evaluate(ds, json.dumps({
        "folds": 2, "genuine_per_fold": 20, "imposter_per_fold": 20,
        "far_targets": [0.1], "seed": 0,
    }))
    check(0.0 <= report["verification_accuracy"] <= 1.0, "evaluation report")
    check(0.0 <= trainer.hardest_tier_overlap(ds) <= 1.0, "histogram overlap")

    z = trainer.embed("frontal", [[0.1] * 16, [0.2 * i for i in range(16)]])
    check(all(abs(sum(v * v for v in r) - 1) < 1e-9 for r in z), "embeddings are unit rows")

    try:
        _pacm.Trainer(ds, json.dumps({**cfg, "sede": 1}))
    except ValueError as e:
        check("sede" in str(e), "unknown config keys are rejected")
    else:
        raise SystemExit("FAILED: unknown key accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
