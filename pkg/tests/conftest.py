import pytest
import torch

from causvid.data import DataConfig, generate_dataset
from causvid.model import ChunkLayout, ModelConfig
from causvid.schedule import build_schedule

# Small-but-real config used by training-path tests: 8x8 frames, 8-frame videos
# in 4 chunks of 2.
TINY_MODEL = ModelConfig(frame_h=8, frame_w=8, channels=1, patch=4, dim=16, depth=2, heads=2)
TINY_LAYOUT = ChunkLayout(n_frames=8, chunk_frames=2)
TINY_DATA = DataConfig(n_videos=64, n_frames=8, height=8, width=8)


@pytest.fixture(scope="session")
def sched():
    return build_schedule(1000, "cosine")


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(TINY_DATA, seed=0)


def tiny_model(seed=0, predicts="eps", perturb=0.02):
    from causvid.model import CausalDiT
    import dataclasses

    torch.manual_seed(seed)
    model = CausalDiT(dataclasses.replace(TINY_MODEL, predicts=predicts))
    if perturb:
        with torch.no_grad():
            for p in model.parameters():
                p.add_(perturb * torch.randn_like(p))
    return model
