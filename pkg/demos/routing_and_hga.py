"""A close look at one routing decision and one HGA pass.

Prints which experts each token picked, the re-normalised weights, the
auxiliary losses, and then which neighbours hierarchical group attention
chose for the first token of every group.
"""

import numpy as np

from moec_hga.hga import HgaConfig, hga_forward, sequence_append
from moec_hga.moec import MoecBank, MoecConfig, balance_loss, moec_forward, z_loss

rng = np.random.default_rng(0)
config = MoecConfig(num_experts=4, top_k=2, input_dim=8, hidden_dim=8, output_dim=8)

hidden = {}
for i, group in enumerate(["siglip", "dinov2", "convnext", "clip"]):
    bank = MoecBank.init(config, [0, i])
    tokens = rng.normal(size=(5, 8))
    out, decision = moec_forward(tokens, bank, config)
    hidden[group] = out.value
    print(f"{group}: experts {decision.selected_indices.tolist()}")
    print(f"    weights {np.round(decision.selected_weights.value, 3).tolist()}")
    print(f"    L_b {balance_loss(decision).value.item():.3f}  L_z {z_loss(decision).value.item():.3f}")

seq = sequence_append(hidden)
print("\nappended layout:", seq.group_offsets)
fused, selections, _ = hga_forward(seq, HgaConfig(top_m=2, top_n=3))
for sel in selections:
    print(f"{sel.group_name:9s} token {sel.start}: intra {sel.intra_indices[0].tolist()}  inter {sel.inter_indices[0].tolist()}")

moved = np.abs(fused.tokens.value - seq.tokens.value).max(axis=1)
print("\nlargest per-token change from the gate:", np.round(moved, 3).tolist())
