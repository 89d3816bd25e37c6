import numpy as np
import pytest

from surfelsplat.deform import (
    DP_SCALE,
    HashGridConfig,
    MASK_ROW,
    NetConfig,
    SceneBox,
    deform_backward,
    deform_forward,
    hashgrid_backward,
    hashgrid_encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from surfelsplat.gradcheck import check_deform, small_net_config
from surfelsplat.inellipse import densify_layout, register_mesh
from surfelsplat.render import render
from surfelsplat.scene import apply_deformation, init_scene

DENSE = HashGridConfig(levels=1, table_size=27, features=1, base_resolution=2)


def index_table():
    return np.arange(27, dtype=float).reshape(1, 27, 1)


def test_hashgrid_cell_center_is_corner_mean():
    out = hashgrid_encode([[0.25, 0.25, 0.25]], index_table(), DENSE)
    corners = [x + 3 * (y + 3 * z) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    assert out[0, 0] == pytest.approx(np.mean(corners), abs=1e-14)


def test_hashgrid_corner_identity():
    for p, k in [((0.5, 0.0, 0.0), 1), ((0.5, 0.5, 0.5), 13), ((1.0, 1.0, 1.0), 26)]:
        assert hashgrid_encode([p], index_table(), DENSE)[0, 0] == k


def test_hashgrid_clamps_outside():
    t = index_table()
    np.testing.assert_array_equal(hashgrid_encode([[-3, 2, 0.5]], t, DENSE), hashgrid_encode([[0, 1, 0.5]], t, DENSE))


def test_hashgrid_locality():
    # at resolution 4 the cells around the two queries share no corner
    cfg = HashGridConfig(levels=1, table_size=125, features=1, base_resolution=4)
    t = np.arange(125, dtype=float).reshape(1, 125, 1)
    _, cache = hashgrid_encode([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]], t, cfg, return_cache=True)
    g, _ = hashgrid_backward(np.array([[1.0], [0.0]]), t, cfg, cache)
    touched = set(cache["levels"][0][0][1])
    assert not any(g[0, k, 0] for k in touched)
    assert g.sum() == pytest.approx(1.0)


def test_hashgrid_collisions_sum():
    cfg = HashGridConfig(levels=1, table_size=1, features=1, base_resolution=4)
    t = np.zeros((1, 1, 1))
    _, cache = hashgrid_encode([[0.1, 0.2, 0.3], [0.7, 0.8, 0.4]], t, cfg, return_cache=True)
    g, _ = hashgrid_backward(np.array([[2.0], [3.0]]), t, cfg, cache)
    # every corner of both cells lands in the single entry; trilinear weights sum to 1 per query
    assert g[0, 0, 0] == pytest.approx(5.0, abs=1e-12)


def test_hashgrid_levels():
    assert HashGridConfig().resolutions()[:3] == [16, 22, 30]
    with pytest.raises(ValueError):
        HashGridConfig(levels=0)


def setup(rng, cfg=None, n=6):
    cfg = cfg or small_net_config()
    params = init_params(cfg, 5, rng)
    box = SceneBox(np.zeros(3), 1.0)
    pos = rng.uniform(0.1, 0.9, (n, 3))
    fid = rng.integers(0, 5, n)
    theta, beta = rng.normal(size=cfg.theta_dim), rng.normal(size=cfg.beta_dim)
    return cfg, params, box, pos, fid, theta, beta


def test_zero_decoder_gives_identity(rng):
    cfg, params, box, pos, fid, theta, beta = setup(rng)
    res, _ = deform_forward(params, cfg, pos, fid, theta, beta, box)
    for a in (res.delta_p, res.delta_s, res.delta_r):
        assert not a.any()
    np.testing.assert_array_equal(res.mask, 0.5)


def test_same_inputs_same_residuals(rng):
    cfg, params, box, pos, fid, theta, beta = setup(rng)
    params["dec1_w"] = rng.normal(size=params["dec1_w"].shape)
    pos[1], fid[1] = pos[0], fid[0]
    res, _ = deform_forward(params, cfg, pos, fid, theta, beta, box)
    np.testing.assert_array_equal(res.delta_p[0], res.delta_p[1])
    res2, _ = deform_forward(params, cfg, pos, fid, theta + 0.5, beta, box)
    assert not np.allclose(res.delta_p, res2.delta_p)
    assert np.abs(res.delta_p).max() <= DP_SCALE * np.abs(res.delta_p / DP_SCALE).max()


def test_permutation_equivariance(rng):
    cfg, params, box, pos, fid, theta, beta = setup(rng)
    params["dec1_w"] = rng.normal(size=params["dec1_w"].shape)
    perm = rng.permutation(len(pos))
    a, _ = deform_forward(params, cfg, pos, fid, theta, beta, box)
    b, _ = deform_forward(params, cfg, pos[perm], fid[perm], theta, beta, box)
    for k in ("delta_p", "delta_s", "delta_r", "mask"):
        np.testing.assert_array_equal(getattr(a, k)[perm], getattr(b, k))


def test_forward_errors(rng):
    cfg, params, box, pos, fid, theta, beta = setup(rng)
    with pytest.raises(ValueError):
        deform_forward(params, cfg, pos, fid, theta[:3], beta, box)
    with pytest.raises(IndexError):
        deform_forward(params, cfg, pos, fid + 10, theta, beta, box)
    with pytest.raises(ValueError):
        deform_backward(params, cfg, None, {})


def test_zero_upstream_zero_gradients(rng):
    cfg, params, box, pos, fid, theta, beta = setup(rng)
    _, cache = deform_forward(params, cfg, pos, fid, theta, beta, box)
    g, gp = deform_backward(params, cfg, cache, {"delta_p": np.zeros((6, 3)), "mask": np.zeros(6)}, box, True)
    assert all(not v.any() for v in g.values())
    assert not gp.any()


@pytest.mark.parametrize("seed", range(3))
def test_deform_gradcheck(seed):
    rep = check_deform(seed)
    assert rep.passed, rep.groups


def test_identity_deformation_render(ico, rng):
    fr = register_mesh(ico.vertices, ico.faces, 1)
    lay = densify_layout(ico.n_faces, 1)
    scene = init_scene(fr, lay.face_id, lay.corner_tag)
    cfg = small_net_config()
    params = init_params(cfg, ico.n_faces, rng)
    params["dec1_b"][MASK_ROW] = 50.0
    res, _ = deform_forward(params, cfg, scene.base.centroid, scene.face_id, rng.normal(size=cfg.theta_dim),
                            rng.normal(size=cfg.beta_dim), SceneBox.around(ico.vertices))
    np.testing.assert_array_equal(res.mask, 1.0)
    from surfelsplat.camera import Camera, look_at
    cam = Camera(20, 20, 8, 8, look_at((0, 0, -3), (0, 0, 0)), 16, 16)
    a = render(apply_deformation(scene.base, res, scene.opacity, scene.sh), cam)
    b = render(scene.attached(), cam)
    assert a.color.tobytes() == b.color.tobytes()


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = NetConfig(grid=HashGridConfig(levels=2, table_size=64), hidden=8)
    params = {k: v.astype(np.float32).astype(np.float64) for k, v in init_params(cfg, 3, rng).items()}
    save_checkpoint(params, cfg, tmp_path / "n.mdnp", extra={"k": 1})
    back, cfg2, extra = load_checkpoint(tmp_path / "n.mdnp")
    assert cfg2 == cfg and extra == {"k": 1}
    for k in params:
        assert np.array_equal(back[k], params[k])
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_scene_box():
    box = SceneBox.around(np.array([[0, 0, 0], [2, 1, 1.0]]), pad=0.0)
    np.testing.assert_allclose(box.normalize([[0, 0, 0], [2, 1, 1]]), [[0, 0.25, 0.25], [1, 0.75, 0.75]])
    assert SceneBox.from_dict(box.to_dict()).size == box.size
    with pytest.raises(ValueError):
        SceneBox(np.zeros(3), 0.0)
