import numpy as np
import pytest

from tdlab import diffusion, synthgen
from tdlab.denoiser import DenoiserModel, init_params, make_arch


@pytest.fixture(scope="session")
def sched():
    return diffusion.build_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def tiny_model():
    arch = make_arch("tiny", channels=1, height=16, width=16)
    return DenoiserModel(arch, init_params(arch, (17,)))


@pytest.fixture(scope="session")
def clips():
    return synthgen.generate_clips(6, n_frames=8, height=16, width=16, seed=321)


@pytest.fixture(scope="session")
def corrupted_window(clips, sched):
    ref = synthgen.iterate_windows(clips, 3, synthgen.MODE_WINDOWED, 0, 0)[0]
    return diffusion.corrupt_window(diffusion.FrameWindow(ref.frames), sched,
                                    (9, 0, ref.index))


def rand_frames(g: np.random.Generator, k: int = 3, shape=(1, 16, 16)):
    return g.standard_normal((k, *shape))
