import numpy as np
import pytest

from calibfw import pano_pipeline as pp
from calibfw.nn import Network, make_arch


@pytest.fixture(scope="session")
def indoor_pano():
    return pp.synth_panorama(3, "indoor-like", height=256)


@pytest.fixture(scope="session")
def outdoor_pano():
    return pp.synth_panorama(3, "outdoor-like", height=256)


@pytest.fixture(scope="session")
def pano_dir(tmp_path_factory, indoor_pano, outdoor_pano):
    d = tmp_path_factory.mktemp("panos")
    for i, p in enumerate([indoor_pano, pp.synth_panorama(4, "indoor-like", height=128), outdoor_pano]):
        pp.save_png(p.pixels, d / f"pano_{i:04d}.png")
    return d


def small_dataset(n, seed=0, size=16, style="indoor-like"):
    """In-memory crops for fast training tests."""
    panos = [pp.synth_panorama(seed * 10 + i, style, height=128) for i in range(2)]
    cfg = pp.DatasetConfig(pp.SamplerConfig(seed=seed, crop_size=size), count=n)
    return pp.render_splits(panos, cfg)


@pytest.fixture(scope="session")
def tiny_domains():
    """Two micro domains (train/val) rendered at 16 px."""
    a = small_dataset(60, seed=1, style="indoor-like")
    b = small_dataset(60, seed=2, style="outdoor-like")
    return a, b


@pytest.fixture
def micro_net():
    return Network(make_arch("calibnet-micro", input_size=16), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
