"""Walk one phantom through the whole dataflow without a trained network.

phantom (384^2, three echoes) -> k-space truncation to 192^2 and 256^2
-> bicubic up-sampling (what an untrained CSTN outputs) -> SMWI -> metrics.

    python demos/pipeline.py [out_dir]

PNGs of the reference and the two reconstructions land in out_dir
(default ./demo_out).
"""

import sys
from pathlib import Path

from cstn.model import bicubic_baseline
from cstn.mri import export_png, generate_phantom, simulate_lowres
from cstn.smwi import reconstruct_smwi
from cstn.train import score_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

hr, maps = generate_phantom(seed=3, height=384, width=384)
print("phantom:", hr.num_echoes, "echoes at", hr.echo_times_ms, "ms, size", hr.shape)
print("inclusions cover", int((maps["inclusions"] > 0).sum()), "pixels")

ref = reconstruct_smwi(hr).data
export_png(ref, out / "smwi_reference.png")

for n in (192, 256):
    lr = simulate_lowres(hr, n, n)
    up = bicubic_baseline(lr, hr.shape)
    smwi = reconstruct_smwi(up).data
    s = score_image(ref, smwi)
    print(f"{n}x{n} -> 384x384 bicubic: SMWI SSIM {100 * s['ssim']:.2f}  MSE {s['mse']:.5f}  MAE {s['mae']:.4f}")
    export_png(smwi, out / f"smwi_bicubic_{n}.png")

print("wrote PNGs to", out)
