"""Train the small network on coloured-quadrant images and compare heads.

Each 64 x 64 image holds one to three coloured discs, one per quadrant
class. A few epochs on CPU are enough for the network to find them.
Pass an output directory to keep the generated images and checkpoints.
"""

import sys
import tempfile
from pathlib import Path

from csranet.config import desk_train_config
from csranet.csra import AttentionHeadConfig
from csranet.synthetic import make_quadrant_dataset
from csranet.train import evaluate_model, predict_images, train_model

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="quadrants_"))
manifest = make_quadrant_dataset(out / "data", n=400, size=64, seed=0)
print(f"{len(manifest)} images in {out / 'data'}")

# %% attention head versus plain global average pooling
# flips would swap left and right quadrant labels, so they stay off here
config = desk_train_config(epochs=6, hflip_prob=0.0)
for name, heads in [("csra", config.heads), ("gap", (AttentionHeadConfig(1.0, 0.0),))]:
    record = train_model(config.with_(heads=heads), manifest, out / name)
    for epoch, (loss, rep) in enumerate(zip(record.epoch_losses, record.reports)):
        print(f"{name} epoch {epoch}: loss {loss:.4f}  mAP {rep.mAP:.4f}  OF1 {rep.OF1:.4f}")

# %% reload the best checkpoint and label a few images
best = out / "csra" / "best.npz"
print(evaluate_model(best, manifest).summary())
for row in predict_images(best, [s.image for s in manifest.samples[:3]]):
    print(Path(row.image).name, row.probabilities.round(3), row.labels)
