"""Synthetic data to overlays, driven through the command line entry point.

    python demos/desk_pipeline.py [workdir] [epochs]

Generates a small synthetic set, trains the desk preset briefly, scores it
and writes overlay PNGs.  The default 3 epochs on 400 images take under a
minute on one core; scores stay low because training is short.
"""
import os
import sys

from posereg.cli import main

work = sys.argv[1] if len(sys.argv) > 1 else "desk_demo"
epochs = sys.argv[2] if len(sys.argv) > 2 else "3"
ann = os.path.join(work, "data", "annotations.jsonl")
ckpt = os.path.join(work, "run")

steps = [
    ["synth", "--out", os.path.join(work, "data"), "--n", "400", "--seed", "1"],
    ["train", "--data", ann, "--out", ckpt, "--epochs", epochs],
    ["eval", "--checkpoint", os.path.join(ckpt, "best"), "--data", ann, "--metric", "PCK", "--metric", "PCP"],
    ["predict", "--checkpoint", os.path.join(ckpt, "best"), "--data", ann, "--out", os.path.join(work, "pred"),
     "--limit", "8", "--mosaics"],
]
for argv in steps:
    print("$ posereg", " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)
print("overlays in", os.path.join(work, "pred", "overlays"))
