"""Train a small network on phantoms, then explain one PD prediction.

Takes a couple of minutes on a laptop CPU. Writes overlay.png.
"""

from datxai import imaging, lime, phantomgen, smallnet
from datxai.classifier import ModelClassifier
from datxai.pipeline import localization_hit, prepare_images, save_overlay_png

SIZE = 64
data = phantomgen.generate_dataset(120, 60, master_seed=3)
images, masks = prepare_images(data, size=SIZE)
split = imaging.split_dataset(data, seed=3)

cfg = smallnet.OptimizerConfig(epochs=8)
model, hist = smallnet.train(smallnet.compact_net(SIZE, seed=3), split, images, config=cfg, seed=3,
                             progress=lambda ep, h: print(f"epoch {ep}: train acc {h.train_acc[-1]:.3f} "
                                                          f"val acc {h.val_acc[-1]:.3f}"))
clf = ModelClassifier(model)

vid = next(i for i in split.test if split.labels[i] == 1)
ex = lime.explain(images[vid], clf, lime.ExplainConfig(rng_seed=0))
print(f"{vid}: p(PD) = {ex.original_prob:.3f}, {ex.k} superpixels")
for sid, w, _ in ex.ranked:
    print(f"  superpixel {sid:>2}  weight {w:+.4f}")
print("top-3 positive superpixel on striatum:", localization_hit(ex, masks[vid]))
save_overlay_png("overlay.png", lime.render_overlay(images[vid], ex), {"volume_id": vid})
