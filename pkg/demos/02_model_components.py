"""The building blocks of the two recommenders, one at a time.

The cloud-side model pools a long click history with target-aware attention;
the device-side model runs two small GRUs (clicks and exposures) and blends
them per candidate.  This script walks through each block with tiny shapes,
then runs one forward pass of each full model and round-trips a checkpoint.

Run:  python3 demos/02_model_components.py
"""

import os
import tempfile

import numpy as np

import sfrec.autodiff as ad
import sfrec.layers as ly
from sfrec.fast import FastModel
from sfrec.slow import InterestExport, SlowModel


def section(title):
    print(f"\n--- {title} ---")


dim = 8
rng = np.random.default_rng(0)

section("embedding table")
emb = ly.EmbeddingTable(20, dim, rng, name="emb")
rows = emb.lookup([3, 7, 3])
print(f"lookup of ids [3, 7, 3] gives shape {rows.shape}; rows 0 and 2 equal:",
      bool(np.array_equal(rows.data[0], rows.data[2])))

section("GRU step and sequence encoding")
gru = ly.GruCell(dim, dim, rng, name="gru")
h = ad.constant(np.zeros((1, dim)))
x = emb.lookup([3])
h1 = gru.step(x, h)
print(f"one step maps (1,{dim}) x (1,{dim}) -> {h1.shape}, values in (-1, 1):",
      bool(np.all(np.abs(h1.data) < 1)))
seq = ly.gru_encode(gru, emb.lookup([3, 7, 5]), ad.constant(np.zeros((1, dim))))
print(f"folding a 3-item sequence gives {seq.shape}")

section("attention pooling (weights are not normalized)")
att = ly.AttentionUnit(dim, rng, hidden=6)
history = emb.lookup([1, 2, 3, 4])
target = emb.lookup([9])
weights = att.weights(history, target)
pooled = ly.din_attention(att, history, target)
print(f"4 history rows -> weights {weights.shape} -> pooled {pooled.shape}")
print("weights:", weights.data.ravel().round(3), "(no softmax; sum is free)")

section("target-aware fusion blends two interest vectors")
fuse = ly.Mlp([2 * dim, 6, 1], rng, name="fuse")
r1 = ad.constant(rng.normal(size=(1, dim)))
r2 = ad.constant(rng.normal(size=(1, dim)))
blended = ly.target_aware_fusion(r1, r2, target, fuse)
print(f"blend of two (1,{dim}) vectors -> {blended.shape}")

section("cloud model forward")
slow = SlowModel(50, dim, np.random.default_rng(1), interactive=True, head_hidden=(16, 8))
memory = np.zeros((1, dim))
prob, r_n, r_t = slow.forward_interactive([4, 9, 11, 2], 7, memory)
print(f"p(click)={prob.item():.4f}; with zero memory the gated feature is r_n={r_n.data.round(3)}")

section("device model forward (needs synced embedding rows)")
fast = FastModel(50, dim, np.random.default_rng(2), interactive=True, head_hidden=(16, 8))
ids = np.arange(50)
fast.sync_rows(ids, slow.embedding.lookup_np(ids))  # device rows come from the cloud table
prior = InterestExport(user=0, round=0, r_n=np.zeros((1, dim)), r_t=r_t.data)
out = fast.forward_interactive(clicked=[4, 9], exposed=[13, 30], candidate=7, prior=prior)
print(f"p(click)={out.prob.item():.4f} from {len(fast.synced_ids())} synced rows")

section("checkpoint round trip")
path = os.path.join(tempfile.mkdtemp(), "demo.ckpt")
ad.save_checkpoint(path, slow.named_arrays())
loaded = ad.load_checkpoint(path)
same = all(np.allclose(loaded[k], v, atol=1e-6) for k, v in slow.named_arrays().items())
print(f"saved {len(loaded)} tensors to {path}; float32 round trip close: {same}")
