"""
Train three classifiers and stress them
=======================================

End to end on a generated corpus in the Speech Commands layout: train CNN,
LCANet and LCANet++ with small layers, then run the background-noise,
Gaussian, FGSM, PGD and evasion sweeps and write one CSV. The corpus is
synthetic and easy, so the published epsilon grids barely move it. The FGSM
sweep therefore also runs at 0.1 and 0.25. The numbers only show that the
machinery works and say nothing about the real keyword task.

Usage: python demos/03_robustness_sweep.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from lcanetpp import attacks, harness, synth
from lcanetpp.lca import LcaConfig
from lcanetpp.models import ModelSpec, TrainConfig

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="lcanetpp-demo-"))
root = work / "corpus"
if not root.exists():
    synth.make_corpus(root, n_per_class=40, seed=0, noise_seconds=5)

train_cfg = TrainConfig(epochs=12, lr=0.01, batch_size=16)
records = []
for variant in ("cnn", "lcanet", "lcanet_pp"):
    spec = ModelSpec(variant, channels=(8, 16), lca=LcaConfig(lam=0.25, n_iter=20))
    exp = harness.train_model(root, spec, ("yes", "no", "stop"), train_cfg,
                              work / f"{variant}.ckpt", cache_dir=work / "cache")
    records.append(harness.run_clean_eval(exp))
    records += harness.run_background_noise_sweep(exp, harness.SNR_GRID)
    for kind, grid in (("gaussian", harness.GAUSSIAN_EPS), ("fgsm", harness.WHITE_BOX_EPS + (0.1, 0.25)),
                       ("pgd", harness.WHITE_BOX_EPS), ("evasion", harness.GAUSSIAN_EPS)):
        records += harness.run_attack_sweep(exp, attacks.AttackConfig(kind, max(grid)), grid,
                                            surrogate_config=train_cfg)
    print(f"{variant}:", end=" ")
    print(" ".join(f"{r.experiment}@{r.sweep_value:g}={r.accuracy:.2f}"
                   for r in records if r.model == harness.DISPLAY_NAMES[variant]))

out = harness.emit_report(records, "csv", work / "results.csv")
print("wrote", out)
