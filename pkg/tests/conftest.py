import pytest

from streamlm import data as D
from streamlm import model as M
from streamlm import vocab as V


@pytest.fixture(scope="session")
def voc():
    return V.build_vocab()


@pytest.fixture(scope="session")
def tiny_world():
    return D.WorldConfig(num_frames=40, seg_min=5, seg_max=10, gap_prob=0.3,
                         gap_min=1, gap_max=3, max_tasks=3)


@pytest.fixture(scope="session")
def tiny_model_cfg(voc):
    return M.ModelConfig(vocab_size=len(voc), d_model=32, n_layers=2, n_heads=2,
                         max_context=1536, tokens_per_frame=1,
                         frame_feature_dim=16, proj_hidden=32)


@pytest.fixture()
def tiny_params(tiny_model_cfg):
    return M.init_model(tiny_model_cfg, seed=11)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world):
    samples, keys = D.build_samples(
        D.DataConfig(world=tiny_world, n_samples=8, val_fraction=0.0,
                     dialogue_fraction=0.5, seed=21))
    return D.LoadedDataset(samples, keys, tiny_world.feature_dim,
                           tiny_world.noise_sigma, tiny_world.fps)
