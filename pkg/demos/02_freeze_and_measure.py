# %% [markdown]
# # Freeze visual tokens in the least useful layers
#
# Select N layers by LC, run the frozen-visual plan, and check three things:
# how far the output moves, how many FLOPs the formulas predict, and what
# the instrumented engine actually spent.

# %%
from shortv import (ModelConfig, ToySpec, build_toy, crosscheck, gen_calibration,
                    lc_profile, make_plan, model_ratio, monotone_profile, plan_divergence,
                    rank_layers, schedule_flops)
from shortv.bench import compare
from shortv.metrics import ablate

L = 12
spec = ToySpec(ModelConfig(L, 32, 64, 4, 64), seed=3, profile=monotone_profile(L, increasing=True))
weights = build_toy(spec)
calib = gen_calibration(spec, 40, (2, 8), (4, 16), seed=4)
held_out = gen_calibration(spec, 40, (2, 8), (4, 16), seed=5)

ranking = rank_layers(lc_profile(weights, calib, ["visual"]), "visual")

# %%
print(" N  layers frozen                    KL to vanilla")
for n in range(0, L + 1, 2):
    plan = make_plan(ranking, n)
    print(f"{n:2d}  {str(plan.frozen_layers):32s} {plan_divergence(weights, held_out, plan):.5f}")

# %% [markdown]
# Compare the LC choice with cosine-selected and random plans at N = 7.

# %%
ab = ablate(weights, calib, 7, trials=20, seed=0, eval_calib=held_out)
print(f"\nLC {ab.lc:.4f}   cosine {ab.cosine:.4f}   random mean {ab.random_mean:.4f}")

# %% [markdown]
# FLOPs: the closed form, the per-layer schedule, and the instrumented count
# agree exactly.

# %%
plan = make_plan(ranking, 7)
seq = held_out[0]
rep = schedule_flops(weights.config, plan, seq.t, seq.v)
check = crosscheck(weights, plan, seq)
print(f"\nschedule ratio {rep.ratio:.4f}  closed form {model_ratio(L, 7, seq.t, seq.v, 32, 64):.4f}")
print(f"analytical {check.analytical}  instrumented {check.instrumented}  gap {check.gap}")

# %%
big = ToySpec(ModelConfig(16, 256, 1024, 8, 512, max_positions=1024), 0,
              monotone_profile(16, increasing=True))
big_w = build_toy(big)
prompt = gen_calibration(big, 1, 64, 576, seed=0)
big_plan = make_plan(rank_layers(lc_profile(big_w, gen_calibration(big, 2, (4, 8), (16, 32), 1),
                                            ["visual"])), 10)
res = compare(big_w, prompt, big_plan, repeat=3)
print(f"\nfirst-pass latency: dense {res.dense_s:.3f}s, N=10 {res.planned_s:.3f}s "
      f"-> {res.speedup:.2f}x (formula ratio {model_ratio(16, 10, 64, 576, 256, 1024):.3f})")
