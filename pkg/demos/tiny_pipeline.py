"""Every stage of the command-line pipeline on a toy budget, in one process.

Run with ``python3 demos/tiny_pipeline.py [out_dir]``; takes well under a minute.
"""

import json
import sys

from motifrl.cli import apply_override, load_config, run_stage

out = sys.argv[1] if len(sys.argv) > 1 else "demo_run"
cfg = load_config(None)
for key, value in {
    "corpus.synthetic": {"kind": "assembly", "n": 400, "seed": 0, "max_rings": 2},
    "vocab.V": 30,
    "model.n_max": 6,
    "model.T": 20,
    "pretrain.epochs": 3,
    "sft.epochs": 3,
    "sft.eval_every": 3,
    "rl.epochs": 3,
    "rl.batch_size": 8,
    "rl.suffix_steps": 5,
    "rl.conditions": [{"task": 0, "target": 2}],
    "sample.n": 50,
}.items():
    cfg = apply_override(cfg, key, value)

for stage in ("learn-vocab", "pretrain", "sft", "rl", "sample", "eval"):
    summary = run_stage(stage, cfg, out)
    print(f"{stage:12s} {json.dumps(summary, default=str)[:150]}")
