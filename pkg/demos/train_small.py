"""A few hundred training steps on small phantoms, then a comparison with bicubic.

The network is tiny and the images are 96^2 (from 64^2 k-space), so this
finishes in about half a minute on one core. It shows the moving parts: seeded
data, patch sampling, Adam, checkpoints and scoring. Full-size evaluation
at the 192 / 256 protocol points is `cstn eval`.

    python demos/train_small.py [run_dir]
"""

import sys
import time

from cstn.model import CSTNConfig, bicubic_baseline, enhance, load_checkpoint
from cstn.mri import generate_phantom, simulate_lowres
from cstn.swin import RSTBConfig
from cstn.train import TrainConfig, phantom_seed, score_pairs, train

run_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_run"

model = CSTNConfig(num_rstb=2, rstb=RSTBConfig(depth=2, num_heads=2, embed_dim=16, window_size=8),
                   shallow_channels=16, head_channels=16)
cfg = TrainConfig(total_steps=300, batch_size=4, patch_size=32, learning_rate=1e-3, num_train=16, num_val=2,
                  hr_size=96, lr_size=64, checkpoint_every=100)

t0 = time.time()
result = train(cfg, model, run_dir)
print(f"trained {cfg.total_steps} steps in {time.time() - t0:.0f}s")
print("loss: first", round(result.losses[0], 5), "last", round(result.losses[-1], 5))
print("validation by checkpoint:", [(s, round(v, 5)) for s, v in result.val_losses])

net_cfg, weights = load_checkpoint(f"{run_dir}/best.cstck")
refs = [generate_phantom(phantom_seed(77, i), 96, 96)[0] for i in range(4)]
lows = [simulate_lowres(r, 64, 64) for r in refs]
cstn = score_pairs(refs, [enhance(lr, net_cfg, weights) for lr in lows])
base = score_pairs(refs, [bicubic_baseline(lr, net_cfg.target_size) for lr in lows])
for key in ("smwi/ssim", "echo1/ssim"):
    print(f"{key:10s}  cstn {cstn[key].format(100)}   bicubic {base[key].format(100)}")
