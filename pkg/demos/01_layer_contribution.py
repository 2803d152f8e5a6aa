# %% [markdown]
# # Which layers matter for visual tokens?
#
# Build a 12-layer toy whose shallow layers are weak and deep layers strong,
# then score every layer two ways: Layer Contribution (KL of the next-token
# distribution when a layer freezes one token class) and the input/output
# cosine similarity of the hidden states.

# %%
import numpy as np

from shortv import (ModelConfig, ToySpec, build_toy, cosine_report, gen_calibration, lc_profile,
                    monotone_profile, rank_layers)

L = 12
spec = ToySpec(ModelConfig(L, 32, 64, 4, 64), seed=0, profile=monotone_profile(L, increasing=True))
weights = build_toy(spec)
calib = gen_calibration(spec, n_samples=40, t_range=(2, 8), v_range=(4, 16), seed=1)

# %%
lc = lc_profile(weights, calib)
cos = cosine_report(weights, calib, ["visual"])

print("layer  scale   LC(visual)  LC(text)   cos(visual)")
for i in range(L):
    print(f"{i:5d}  {spec.profile[i]:.2f}   {lc.scores['visual'][i]:9.5f}  "
          f"{lc.scores['text'][i]:8.5f}   {cos.scores['visual'][i]:.4f}")

# %% [markdown]
# The last layer scores exactly 0 for visual tokens: nothing a visual row
# does in the final layer can reach the last text position. Text scores sit
# above visual scores almost everywhere.

# %%
below = np.mean(np.array(lc.scores["visual"]) <= np.array(lc.scores["text"]))
print(f"\nvisual <= text at {below:.0%} of layers")
print("LC ranking (most redundant first):    ", rank_layers(lc, "visual").order)
print("cosine ranking (most redundant first):", rank_layers(cos, "visual").order)
# cosine calls the weak shallow layers redundant; LC also sees that a small
# change early propagates through every later layer
