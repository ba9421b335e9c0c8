"""
A small vision transformer
==========================

Patchify a 28x28 image into 7x7 patches, run the encoder, and look at
parameter counts and the cls-token attention map.
"""

import numpy as np

from dualssl.data import SyntheticSpec, synth_generate
from dualssl.vit import ViTModel, parameter_count, patchify, preset

images = synth_generate(SyntheticSpec(n_per_class=2, seed=0)).images
print("images", images.shape)
print("patches", patchify(images, preset("vit-desk")).shape)   # 16 patches of 49 pixels each

for name in ("vit-desk", "vit-base"):
    print(f"{name}: {parameter_count(preset(name)):,} parameters")

model = ViTModel(preset("vit-desk"), seed=0).eval()
features = model(images)
print("cls features", features.shape)

# attention of the cls token over the 16 patches in the last block, head 0
attn = model.blocks[-1].attn.last_attention[0, 0, 0, 1:]
print(np.round(attn.reshape(4, 4), 3))
