import pytest

from modscale.domain import ClusterSpec, DeviceSpec, ModelSpec, ModuleCatalog, PlacementState


def make_cluster(n_devices=2, compute=312000.0, memory_mb=40960.0, link=25000.0, intra=200000.0):
    devices = [DeviceSpec(i, compute, memory_mb) for i in range(n_devices)]
    return ClusterSpec.uniform(devices, link, intra)


def make_model(n_layers=4, d_model=5120, d_ff=13824, n_heads=40, dtype_bytes=2):
    return ModelSpec(n_layers=n_layers, d_model=d_model, d_ff=d_ff,
                     n_heads=n_heads, dtype_bytes=dtype_bytes)


@pytest.fixture
def catalog():
    return ModuleCatalog()


@pytest.fixture
def cluster():
    return make_cluster()


def seq_placement(n_layers, device=0):
    return PlacementState.sequential(n_layers, device)
