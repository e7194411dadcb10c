"""
Block attention masks and the receptive field
=============================================

Frames are grouped into blocks of ``b``. A query in block i may attend to
keys in blocks i - tb .. i + tf. Stacking layers grows the reach additively,
which is what lets the chunked decoder see exactly enough context.
"""
import numpy as np

from dialoflow.blockmask import MaskSpec, build_mask, compose_reachability, receptive_field
from dialoflow import checks

# one layer looking one block back
m = build_mask(8, MaskSpec(b=2, tb=1, tf=0))
print("one layer, b=2, tb=1, tf=0")
print(m.to_text())

# a backward layer followed by a forward layer reaches one block each way
specs = [MaskSpec(2, 1, 0), MaskSpec(2, 0, 1)]
print("\nreceptive field of the stack:", receptive_field(specs))
reach = compose_reachability([build_mask(8, s) for s in specs])
same = np.array_equal(reach.matrix, build_mask(8, MaskSpec(2, 1, 1)).matrix)
print("composed reachability equals a single (1, 1) mask:", same)

# on a random network, evaluating a window that covers the field reproduces
# the full-sequence output for the middle chunk; one block less does not
res = checks.windowed_exactness()
print("\nwindow covers the field, max gap:", res["max_gap_covered"])
print("one block short (back / forward):", res["min_gap_short_back"], res["min_gap_short_fwd"])
