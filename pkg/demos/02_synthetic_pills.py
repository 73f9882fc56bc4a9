"""
Synthetic pill images and virtual classes
=========================================

Renders a handful of pill classes, then builds one virtual class per real
class by rotating hue and rescaling. The result is saved as ``pills.png``.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from pillfscil.datagen import JitterConfig, generate_dataset, generate_virtual_classes, random_class_specs
from pillfscil.numerics import Rng

rng = Rng(3)
specs = random_class_specs(6, rng.derive(0), hue_clusters=2)
for s in specs:
    print(s.shape, np.round(s.color, 2), round(s.scale, 2))

train, _ = generate_dataset(specs, 4, 0, JitterConfig(), rng.derive(1), image_size=32)

# fold=1: one virtual class per real class, labels 6..11
augmented, transforms = generate_virtual_classes(train, 1, rng.derive(2))
for t in transforms[:3]:
    print("class %d -> %d: hue %+.0f deg, scale %.2f" % (t.source_class, t.virtual_label, t.hue_degrees, t.scale))

fig, axes = plt.subplots(4, 6, figsize=(9, 6))
for c in range(6):
    real = augmented.pixels[augmented.labels == c]
    virt = augmented.pixels[augmented.labels == c + 6]
    for r in range(2):
        axes[r, c].imshow(real[r])
        axes[r + 2, c].imshow(virt[r])
for ax in axes.flat:
    ax.axis("off")
axes[0, 0].set_title("real", loc="left")
axes[2, 0].set_title("virtual", loc="left")
fig.savefig("pills.png", dpi=80)
print("wrote pills.png")
