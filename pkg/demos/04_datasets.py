"""
Datasets, the OCTB file format and stratified subsets
=====================================================
"""

import tempfile
from pathlib import Path

import numpy as np

from dualssl.data import (SyntheticSpec, largest_remainder_counts, load_octb, save_octb,
                          stratified_subsample, synth_generate)

ds = synth_generate(SyntheticSpec(n_per_class=100, noise_sigma=0.1, seed=0))
print(len(ds), "images, class counts", ds.class_counts(), ds.class_names)

# round trip through the binary format (u8 pixels plus a CRC32 footer)
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "synth.octb"
    save_octb(ds, path)
    back = load_octb(path)
    print(path.stat().st_size, "bytes, lossless:", np.array_equal(back.images, ds.images))

# largest-remainder allocation: 5.129% of the OCTMNIST training label counts
counts = np.array([33484, 10213, 7754, 46026])
alloc = largest_remainder_counts(counts, 0.05129)
print("per-class subset", alloc, "total", alloc.sum())

sub = stratified_subsample(ds, 0.25, seed=3)
print("subset", len(sub), sub.class_counts())
