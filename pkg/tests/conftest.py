import numpy as np
import pytest

from mixtune import EncoderConfig, SynthSpec, generate_synthetic, init_state


@pytest.fixture(scope="session")
def synth_ds():
    """Default desk-scale dataset: 8 classes x 50 items of 64x8."""
    return generate_synthetic(SynthSpec(), seed=0)


@pytest.fixture
def micro_cfg():
    """Smallest encoder worth gradient-checking exhaustively."""
    return EncoderConfig(patch_t=4, patch_f=4, depth=2, dim=8, heads=2,
                         head_dims=(8, 4), input_t=8, input_f=8)


@pytest.fixture
def micro_state(micro_cfg):
    return init_state(micro_cfg, seed=3)


@pytest.fixture
def micro_batch(micro_cfg):
    rng = np.random.default_rng(11)
    return rng.normal(size=(3, micro_cfg.input_t, micro_cfg.input_f))
