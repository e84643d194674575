"""What does sparse routing cost?  Analytic multiply-add counts per sample."""

from dataclasses import replace

from moec_hga.pipeline import ModelConfig, flops_estimate

base = ModelConfig()
est = flops_estimate(base)
print(f"{base.total_tokens} tokens")
for name, macs in est.components.items():
    print(f"  {name:15s} {macs:>14,d}")
print(f"MLP connector total  {est.total_mlp:>14,d}")
print(f"MoEC connector total {est.total_moec:>14,d}  (+{100 * est.moec_delta_fraction:.2f}%)")

# expert cost grows with K, the router cost does not
for k in (1, 2, 3, 4):
    e = flops_estimate(replace(base, moec=replace(base.moec, top_k=k)))
    print(f"K={k}: experts {e.components['moec_experts']:,d}  router {e.components['router']:,d}")
