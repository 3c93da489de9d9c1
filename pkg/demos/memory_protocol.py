"""
Reading the memory protocol
===========================

Runs the bidirectional memory protocol on random features and prints which
frame and memory every propagate (P) and update (U) call consumed.
"""

import torch

from stmdtrack.backbone import SequenceFeatures
from stmdtrack.memory import MemoryModule, run_bidirectional_protocol

torch.manual_seed(0)
L, M, C = 4, 16, 8
seq = SequenceFeatures(torch.randn(L, M, 3), torch.randn(L, M, C))
res = run_bidirectional_protocol(seq, MemoryModule(C, heads=2))

print(f"L={L}: {res.trace.count('P')} propagate calls, {res.trace.count('U')} update calls")
for rec in res.trace.records:
    print(" ", rec)

# every frame ends with a memory-enhanced feature of the original width
print([tuple(f.feats.shape) for f in res.features])
