import pytest

from sttm import features as F
from sttm import simulator as sim
from sttm.model import SttmConfig


@pytest.fixture(scope="session")
def tiny_data():
    """Six districts over five days, split 3/1/1, with M=3 and N=2."""
    cfg = sim.SimConfig(districts=6, days=5, seed=42)
    districts = sim.generate_districts(cfg)
    log, cal = sim.simulate(cfg, districts)
    return F.prepare(log, districts, cal, cfg, 3, 2, 10, 10, F.FeatureConfig(split_days=(3, 1, 1)))


def tiny_model_config(data, **kw):
    base = dict(m=3, n=2, h=16, h_mem=16, mlp_hidden=16, d_mem=8, l_mem=4, e=4,
                vocab_sizes=tuple(data.vocab.sizes()))
    base.update(kw)
    return SttmConfig(**base)
