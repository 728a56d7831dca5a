"""Write a small random student checkpoint for the frontend e2e test."""
import sys

import torch

from causvid.model import CausalDiT, ModelConfig, save_weights

torch.manual_seed(0)
model = CausalDiT(ModelConfig(frame_h=8, frame_w=8, channels=1, patch=4, dim=16,
                              depth=2, heads=2, predicts="x0"))
with torch.no_grad():
    for p in model.parameters():
        p.add_(0.02 * torch.randn_like(p))
save_weights(model, sys.argv[1])
print(f"wrote {sys.argv[1]}")
