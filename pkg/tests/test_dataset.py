import json

import numpy as np
import pytest

from surfelsplat.dataset import DatasetError, SyntheticConfig, load_dataset, make_synthetic
from surfelsplat.imageio import read_pfm, read_png, write_pfm, write_png
from surfelsplat.render import render
from surfelsplat.scene import Residuals, apply_deformation


def test_png_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    np.testing.assert_array_equal(read_png(write_png(tmp_path / "a.png", img)), img)
    gray = np.linspace(0, 1, 12).reshape(3, 4)
    assert read_png(write_png(tmp_path / "g.png", gray)).shape == (3, 4)


def test_pfm_roundtrip(tmp_path, rng):
    for shape in [(4, 6), (4, 6, 3)]:
        a = rng.normal(size=shape).astype(np.float32)
        p = write_pfm(tmp_path / "x.pfm", a)
        np.testing.assert_array_equal(read_pfm(p), a)
        assert p.read_bytes().split(b"\n")[2] == b"-1.0"
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "bad.pfm", np.zeros((2, 2, 2)))


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    cfg = SyntheticConfig(frames=3, size=16, focal=20.0, subdivision_iters=1, holdout_every=2)
    return root, cfg, make_synthetic(root, cfg)


def test_synthetic_layout(small):
    root, cfg, manifest = small
    ds = load_dataset(manifest)
    assert len(ds) == 3 and ds.held_out == [0, 2] and ds.train_ids == [1]
    assert ds.frames[0].image.shape == (16, 16, 3)
    assert ds.theta_dim == 45 and ds.beta_dim == 10
    assert all(np.array_equal(f.mesh.faces, ds.frames[0].mesh.faces) for f in ds.frames)


def test_synthetic_masks_are_thresholded_alpha(small):
    from surfelsplat.dataset import deform_vertices, reference_appearance
    from surfelsplat.inellipse import register_mesh
    from surfelsplat.mesh import icosahedron, loop_subdivision

    root, cfg, manifest = small
    ds = load_dataset(manifest)
    base = icosahedron()
    sub = loop_subdivision(base, cfg.subdivision_iters)
    canon = register_mesh(sub.apply(base.vertices).vertices, sub.faces, 1)
    fr = ds.frames[1]
    frames = register_mesh(sub.apply(fr.mesh.vertices).vertices, sub.faces, 1)
    n = len(frames)
    dp = np.zeros((n, 3))
    dp[:, 2] = cfg.radius * cfg.detail_amplitude * np.sin(4 * canon.centroid[:, 0] + fr.theta[5]) * np.cos(4 * canon.centroid[:, 1])
    s = apply_deformation(frames, Residuals(dp, np.zeros((n, 2)), np.zeros((n, 3)), np.ones(n)),
                          np.full(n, cfg.opacity), reference_appearance(canon.centroid))
    buf = render(s, fr.camera, cull_backfaces=True)
    # meshes are stored as decimal OBJ text, so compare away from the 0.5 threshold
    clear = np.abs(buf.alpha - 0.5) > 1e-3
    np.testing.assert_array_equal(fr.mask[clear], (buf.alpha > 0.5)[clear].astype(float))


def test_synthetic_reproducible(tmp_path):
    cfg = SyntheticConfig(frames=2, size=16, focal=20.0, subdivision_iters=1)
    make_synthetic(tmp_path / "a", cfg)
    make_synthetic(tmp_path / "b", cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(radius=1.0, distance=0.5)
    with pytest.raises(ValueError):
        SyntheticConfig(theta_dim=3)


def test_manifest_errors_are_collected(small, tmp_path):
    root, cfg, manifest = small
    m = json.loads(manifest.read_text())
    m["frames"][0]["mask"] = "masks/missing.png"
    m["frames"][1]["image"] = "images/also_missing.png"
    bad = root / "bad.json"
    bad.write_text(json.dumps(m))
    with pytest.raises(DatasetError) as e:
        load_dataset(bad)
    assert len(e.value.problems) == 2
    assert any("missing.png" in p for p in e.value.problems)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "none.json")
    (tmp_path / "x.json").write_text("{")
    with pytest.raises(DatasetError, match="JSON"):
        load_dataset(tmp_path / "x.json")


def test_manifest_dimension_mismatch(small):
    root, cfg, manifest = small
    m = json.loads(manifest.read_text())
    m["theta_dim"] = 44
    p = root / "dims.json"
    p.write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="conditioning"):
        load_dataset(p)
