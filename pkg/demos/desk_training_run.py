"""
Training the toy dual encoder on synthetic scenes
=================================================

The ``desk-defaults`` config trains both towers from scratch on 64
synthetic image/caption pairs (about a minute on one core), then asks
whether each image retrieves its own caption among all 64.
"""

import sys
import tempfile

from slidecap.config import format_config, load_config
from slidecap.pipeline import run_evaluation, run_training

out = tempfile.mkdtemp()
cfg = load_config("desk-defaults", output_dir=out)
print(format_config(cfg))

# %%
# The epoch log has three tab-separated columns: epoch, mean batch loss and
# seconds. For comparison, a model that cannot tell the pairs apart scores
# ln 16 ≈ 2.77 on a batch of 16.
state = run_training(cfg, echo=sys.stdout)
print("optimizer steps:", state.step)

# %%
# Evaluate on the same 64 pairs in both directions. Chance level for R@1 is
# 1/64 ≈ 0.016.
for report in run_evaluation(cfg, directions=("image-to-text", "text-to-image")):
    print(report.direction, {k: round(v, 3) for k, v in report.means.items()})

# %%
# Reports and the checkpoint sit in the output directory.
print(sorted(p.name for p in cfg.output_dir.iterdir()))
