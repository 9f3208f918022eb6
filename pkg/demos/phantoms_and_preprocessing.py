"""Generate a few phantoms and save the preprocessed slices as PNGs."""

import sys
from pathlib import Path

import numpy as np

from datxai import imaging, phantomgen
from datxai.pipeline import prepare_images

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

data = phantomgen.generate_dataset(n_pd=3, n_hc=3, master_seed=0)
images, masks = prepare_images(data, size=64)
for e in data:
    img = images[e.volume_id]
    print(f"{e.volume_id}  shrink={e.spec.putamen_shrink:.2f}  roi pixels={int(masks[e.volume_id].sum())}  "
          f"mean={float(np.mean(img)):.3f}")
    imaging.save_png(out / f"{e.volume_id}.png", img)
print(f"wrote {len(images)} slices to {out}/")
