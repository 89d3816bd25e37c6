import numpy as np
import pytest

from surfelsplat.mesh import icosahedron


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ico():
    return icosahedron()


def write_obj(path, verts, faces, extra=""):
    lines = [f"v {x} {y} {z}" for x, y, z in verts]
    lines += ["f " + " ".join(str(i + 1) for i in f) for f in faces]
    path.write_text(extra + "\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four 16x16 frames of the synthetic sphere at one subdivision level."""
    from surfelsplat.dataset import SyntheticConfig, load_dataset, make_synthetic

    root = tmp_path_factory.mktemp("tiny")
    cfg = SyntheticConfig(frames=4, size=16, focal=20.0, subdivision_iters=1, holdout_every=4)
    return load_dataset(make_synthetic(root, cfg))


def tiny_train_config(**kw):
    from surfelsplat.deform import HashGridConfig, NetConfig
    from surfelsplat.optim import TrainConfig

    net = NetConfig(grid=HashGridConfig(levels=2, table_size=2 ** 10, base_resolution=4), embed_dim=4, hidden=16)
    base = dict(stage1_iters=6, stage2_iters=4, subdivision_iters=1, net=net)
    base.update(kw)
    return TrainConfig(**base)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
