"""Shared fixtures: a reduced-scale synthetic world that exercises every
code path (probing, training, sweeps) in milliseconds."""

import pytest

from anchorgen.generator import GenConfig
from anchorgen.predictor import PredictorBank, init_bank
from anchorgen.synthetic import Scene, SynthConfig, make_dataset

TINY_CHANNELS = 4
TINY_PATCH = 5


def small_gen_cfg(**overrides) -> GenConfig:
    base = dict(
        patch_size=TINY_PATCH,
        interp_size=2 * TINY_PATCH,
        k_fixed=4,
        k_adapt=3,
        count_range=(5, 40),
    )
    base.update(overrides)
    return GenConfig(**base)


def small_synth_cfg(**overrides) -> SynthConfig:
    base = dict(image_size=256)
    base.update(overrides)
    return SynthConfig(**base)


def fresh_tiny_bank(seed: int = 0) -> PredictorBank:
    return init_bank(
        seed,
        patch_size=TINY_PATCH,
        raw_channels=16,
        channels=TINY_CHANNELS,
        hidden=(16,),
        k_fixed=4,
        k_adapt=3,
    )


@pytest.fixture(scope="session")
def tiny_scenes() -> list[Scene]:
    return make_dataset(3, 11, small_synth_cfg())


@pytest.fixture(scope="session")
def tiny_bank() -> PredictorBank:
    # Read-only across tests; training tests build their own banks.
    return fresh_tiny_bank()
