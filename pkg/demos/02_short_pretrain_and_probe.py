"""A short pretraining run, then the checkpoint under the diagnostic probes.

Run: python3 demos/02_short_pretrain_and_probe.py [OUT_DIR]

Uses a narrow encoder and 800 steps so it finishes in well under a minute; the
full-size run is `dupr pretrain --config ...` with the default config.
"""
import sys
from pathlib import Path

from dupr.diagnostics import FeatureEncoder, affinity_accuracy, iou_similarity_curve
from dupr.encoder import EncoderConfig
from dupr.scenes import synthetic_scenes
from dupr.trainer import TrainConfig, init_state, read_metrics, run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")

cfg = TrainConfig(
    steps=800,
    batch_size=8,
    encoder=EncoderConfig(channels=(16, 32, 32, 64), blocks=1, groups=8, dim=32),
    dataset={"kind": "synthetic", "count": 128, "seed": 1},
    out_dir=str(out),
    checkpoint_every=0,
)
ckpt = run(cfg, progress=True)
rows = read_metrics(out / "metrics.csv")
totals = [float(r["loss_total"]) for r in rows]
print(f"trained {len(rows)} steps -> {ckpt}")
print(f"mean total loss, first 20 steps {sum(totals[:20]) / 20:.3f}, "
      f"last 20 steps {sum(totals[-20:]) / 20:.3f}")
last = rows[-1]
print("last step per level:",
      {k: round(float(v), 3) for k, v in last.items() if k.startswith("loss_") and v})

# held-out scenes: a different seed from the training set
scenes = synthetic_scenes(40, seed=1001)
trained = FeatureEncoder.from_checkpoint(ckpt)
untrained = FeatureEncoder(cfg.encoder, init_state(cfg).pair.query)
S = cfg.roi_sizes[2]

print("\nmean patch similarity between a gt box and RoIs at a given IoU:")
curves = {name: iou_similarity_curve(enc, scenes, ious=(0.3, 0.5, 0.7, 0.9), S=S)
          for name, enc in (("trained", trained), ("random init", untrained))}
for name, curve in curves.items():
    cells = "  ".join(f"IoU {t:.1f}: {m:.3f}" for t, m, _, _ in curve.bins)
    print(f"  {name:12s} {cells}")

print("\ncross-view affinity: share of patches whose best match is the true partner")
for name, enc in (("trained", trained), ("random init", untrained)):
    print(f"  {name:12s} {affinity_accuracy(enc, scenes, n_pairs=20, S=S):.3f}")
