"""Fusion ablation matrix: operator type and interaction depth.

Trains the six fusion variants (attention / concat / cross-gating at stage 2,
early fusion, attention at stages 1 and 3) under one shared training
configuration and prints the resulting matrix. Sizes are kept small; push
epochs and widths up to study the real effect.
"""

from qpmseg.evaluate import run_fusion_matrix
from qpmseg.model import ModelConfig
from qpmseg.synth import synth_generate
from qpmseg.train import TrainConfig

OUT = "demo_out/fusion"

data_kw = dict(confluence="med", phase_snr=0.3, intensity_noise=0.1,
               illum_texture=0.3, decoy_strength=1.2,
               visibility_range=(0.15, 0.8), gain_range=(0.7, 1.3))
train_samples = synth_generate(100, 8, 64, 64, **data_kw)
test_samples = synth_generate(200, 3, 64, 64, **data_kw)

base = ModelConfig(widths=(4, 8, 16, 32, 64), blocks_per_stage=1, mha_heads=4, seed=0)
tcfg = TrainConfig(epochs=4, batch_size=2, patch_size=64, lr0=0.02, augment=False, seed=0)

matrix = run_fusion_matrix(train_samples, test_samples, base, tcfg, out_dir=OUT, log=print)
matrix.to_csv(f"{OUT}/matrix.csv")
print(f"\nall rows trained under config hash {matrix.train_config_hash}")
print(f"matrix written to {OUT}/matrix.csv")
