"""Anatomy of the encoder: time stacking, masking, context encoding.

Builds the small preset, walks a clip through the feature encoder and the
masked context encoder, and reproduces the published parameter budgets.
"""

import numpy as np

from melformer import (
    ConformerModel,
    ModelConfig,
    Waveform,
    apply_mask,
    logmel,
    param_count,
    sample_mask,
)

# The two published configurations.
for name, target in [("cf_S", 18.4e6), ("cf_L", 88.1e6)]:
    n = param_count(ModelConfig.preset(name))
    print(f"{name}: {n / 1e6:.2f}M trainable parameters (target {target / 1e6:.1f}M, "
          f"{100 * (n - target) / target:+.1f}%)")

# A desk-size model for the walk-through.
config = ModelConfig(
    num_blocks=2, embed_dim=64, num_heads=4, ffn_dim=128,
    stack_factor=4, kernel_first=31, kernel_rest=15, dropout=0.1,
)
model = ConformerModel(config, seed=0)

rng = np.random.default_rng(1)
clip = rng.normal(scale=0.1, size=4 * 16_000)  # 4 seconds
frames = logmel(Waveform(clip)).frames
print(f"\nlogmel: {frames.shape}")

# Feature encoder: stack 4 frames, project linearly.
latents = model.encode_features(frames)
print(f"latents Z: {latents.shape} (time divided by {config.stack_factor})")

# Mask 30% in spans of 10, swap in the learned embedding, contextualize.
mask = sample_mask(latents.shape[0], rate=0.30, span_length=10, rng=rng)
masked = apply_mask(latents, mask, model.mask_embedding)
context = model.contextualize(masked, rng=np.random.default_rng(2))
print(f"mask covers {mask.mean():.0%} of the sequence; context: {context.shape}")

# Evaluation path: no masking, deterministic, run twice to show it.
model.eval()
a = model.embed(frames).values
b = model.embed(frames).values
print(f"eval-mode embedding deterministic: {np.array_equal(a, b)}")
