"""
Cutting a long caption into windows
===================================

A text tower only sees 77 tokens at a time. Captions in the synthetic set
run to 140-260 tokens, so each one is cut into overlapping windows, every
window is encoded on its own, and the window embeddings are averaged.
"""

import tempfile

import numpy as np

from slidecap.data import generate_synthetic, synthetic_vocabulary
from slidecap.textpipe import make_windows, reconstruct, tokenize, window_count

vocab = synthetic_vocabulary()
print(f"{len(vocab)} tokens in the synthetic vocabulary, specials at ids {vocab.special_ids}")

# %%
# One generated caption. The generator draws a scene (background plus up to
# three shapes) and describes it verbosely.
out = tempfile.mkdtemp()
ds = generate_synthetic(4, vocab, seed=0, image_size=32, out_dir=out)
caption = ds.manifest.records[0].caption
print(caption[:300], "...")

seq = tokenize(caption, vocab)
print(f"{len(seq)} tokens, {seq.dropped_chars} characters without a match")

# %%
# Windows hold 75 content tokens between the start and end markers. The
# default stride is half of that, rounded up, and the last window is pulled
# back so it ends exactly at the caption's last token.
batch = make_windows(seq)
print("stride", batch.stride, "starts", batch.starts)
print("closed-form count", window_count(len(seq), batch.content_capacity, batch.stride))

for row, mask in zip(batch.windows[:2], batch.masks[:2]):
    print(row[:8], "...", "real tokens:", int(mask.sum()))

# %%
# Overlaps are dropped when the windows are stitched back together, which
# gives back the original token ids.
assert reconstruct(batch) == list(seq.ids)

# %%
# A smaller stride gives more overlap and more windows per caption.
for stride in (75, 38, 20, 10):
    print(stride, len(make_windows(seq, 77, stride)))

# %%
# Short text fits one padded window.
short = make_windows(tokenize("a red circle", vocab))
print(short.starts, np.count_nonzero(short.masks[0]))
