"""
Dual-stream self-supervised pretraining
=======================================

An online encoder with projector and predictor learns to match a momentum
(EMA) copy of itself on two views of each image. Short run on synthetic data.
"""

import numpy as np

from dualssl.data import SyntheticSpec, synth_generate
from dualssl.ssp import SSPConfig, pretrain
from dualssl.vit import preset

data = synth_generate(SyntheticSpec(n_per_class=64, seed=0)).unlabeled()
config = SSPConfig(epochs=3, batch_size=64, accumulation_steps=2, seed=0)

result = pretrain(data, config, preset("vit-desk"))
for epoch, loss in enumerate(result.epoch_losses, 1):
    print(f"epoch {epoch}: mean negative cosine {loss:+.4f}")

# the target stream only moves by EMA, never by gradient
state = result.state
gap = np.sqrt(sum(((t.data - o.data) ** 2).sum() for t, o in state.paired_parameters()))
print("optimizer steps", state.step_count, " online/target distance", round(gap, 4))
print("target grads", {p.grad for p in state.target_parameters()})

ckpt = result.to_checkpoint()
print("checkpoint sections", sorted({k.split(".")[0] for k in ckpt.tensors}))
