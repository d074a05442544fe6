"""Acceptance-scale calibration run: trains both segmenters and the detector
on the default synthetic dataset and prints the ablation ordering plus the
word-importance statistic. Not part of the test suite."""

import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lungseg.cli import run
from lungseg.evaluation import load_eval_samples
from lungseg.training import model_from_checkpoint

ROOT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/calib")
ROOT.mkdir(parents=True, exist_ok=True)

torch.set_num_threads(1)
t0 = time.time()

steps = [
    ["gen-data", "--out", str(ROOT / "data"), "--counts", "512,128,128", "--seed", "0"],
    ["pseudo-label", "--manifest", str(ROOT / "data/train.csv"), "--out", str(ROOT / "labels.csv")],
    ["train-seg", "--train", str(ROOT / "data/train.csv"), "--val", str(ROOT / "data/val.csv"),
     "--out", str(ROOT / "seg"), "--epochs", "40", "--batch-size", "16", "--seed", "0"],
    ["train-seg", "--train", str(ROOT / "data/train.csv"), "--val", str(ROOT / "data/val.csv"),
     "--out", str(ROOT / "seg_notext"), "--epochs", "40", "--batch-size", "16", "--seed", "0",
     "--text-mode", "empty"],
    ["train-det", "--train", str(ROOT / "data/train.csv"), "--labels", str(ROOT / "labels.csv"),
     "--val", str(ROOT / "data/val.csv"), "--out", str(ROOT / "det"), "--epochs", "40",
     "--batch-size", "16", "--seed", "0"],
    ["ablate", "--manifest", str(ROOT / "data/test.csv"), "--seg-ckpt", str(ROOT / "seg/seg.ckpt"),
     "--seg-ckpt-notext", str(ROOT / "seg_notext/seg.ckpt"), "--det-ckpt", str(ROOT / "det/det.ckpt"),
     "--out", str(ROOT / "ablation")],
]
for argv in steps:
    t = time.time()
    code = run(argv)
    print(f"== {argv[0]} -> {code} ({time.time() - t:.1f}s)", flush=True)
    if code != 0:
        sys.exit(code)

print((ROOT / "ablation/metrics.txt").read_text())

# word importance statistic over test samples with location words
segmenter, _ = model_from_checkpoint(ROOT / "seg/seg.ckpt")
samples = load_eval_samples(ROOT / "data/test.csv")
LOCATION = {"upper", "middle", "lower", "left", "right"}
FILLER = {"pulmonary", "infection", "area", "areas"}
wins = total = 0
for s in samples:
    tokens, scores = segmenter.word_importance(s.image, s.report)
    loc = [sc for t, sc in zip(tokens, scores) if t in LOCATION]
    fil = [sc for t, sc in zip(tokens, scores) if t in FILLER]
    if not loc:
        continue
    total += 1
    wins += np.mean(loc) > np.mean(fil)
print(f"word importance: location > filler on {wins}/{total} = {wins/total:.3f}")
print(f"total time {(time.time()-t0)/60:.1f} min")
