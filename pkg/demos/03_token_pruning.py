# %% [markdown]
# # Frozen layers plus token pruning
#
# FastV drops the least-attended R fraction of visual tokens after layer K;
# VTW drops all of them. Both are row deletions and compose with a frozen
# plan. First the 7B-backbone numbers (h=4096, m=11008, 32 layers, 64 text
# and 576 visual tokens), then a run on a toy model.
#
# `k` is a 0-based layer index: "drop after the second layer" is k=1.

# %%
from shortv import (LayerPlan, ModelConfig, PruneConfig, ToySpec, build_toy, forward,
                    gen_calibration, kl_divergence, lc_profile, logits_last, make_plan,
                    model_ratio, monotone_profile, rank_layers, schedule_flops)
from shortv.metrics import mean

paper = ModelConfig(32, 4096, 11008, 32, 32000)
shortv = LayerPlan.with_frozen(32, range(13, 32))       # any 19 layers cost the same
dense = LayerPlan.dense(32)
rows = [
    ("ShortV N=19", shortv, None),
    ("FastV k=1 R=0.5", dense, PruneConfig.fastv(1, 0.5)),
    ("VTW k=15", dense, PruneConfig.vtw(15)),
    ("ShortV + FastV", shortv, PruneConfig.fastv(1, 0.5)),
]
for name, plan, prune in rows:
    r = schedule_flops(paper, plan, 64, 576, prune).ratio
    print(f"{name:18s} FLOPs ratio {r:.3f}")
print(f"closed form N=19: {model_ratio(32, 19, 64, 576, 4096, 11008):.3f}")

# %% [markdown]
# On a toy: prune after layer index 2 and watch the events; survivors keep their
# original position ids.

# %%
L = 8
spec = ToySpec(ModelConfig(L, 32, 64, 4, 64), 7, monotone_profile(L, increasing=True))
w = build_toy(spec)
calib = gen_calibration(spec, 20, (2, 6), (8, 16), seed=2)
plan = make_plan(rank_layers(lc_profile(w, calib, ["visual"])), 5)

res = forward(calib[0], w, plan, PruneConfig.fastv(2, 0.5))
print("\nevent:", res.events[0].to_json())
print("surviving positions:", res.positions.tolist())

for name, prune in [("none", None), ("FastV", PruneConfig.fastv(2, 0.5)), ("VTW", PruneConfig.vtw(2))]:
    kl = mean(kl_divergence(logits_last(s, w), logits_last(s, w, plan, prune)) for s in calib)
    print(f"frozen plan + {name:5s}: KL to vanilla {kl:.4f}")
