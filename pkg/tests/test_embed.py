import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from defret.embed import (
    EPS_FIELD,
    MAGIC,
    Architecture,
    CheckpointError,
    EgocentricCode,
    EmbeddingModel,
    batch_tensor,
    code,
    delta,
    ego_distance,
    ego_distance_sq,
    encode,
    load_checkpoint,
    safe_sqrt,
    save_checkpoint,
    weights_digest,
)
from defret.geometry import make_record, normalize
from shapes import icosphere

SMALL = Architecture(k=16, point_widths=(16, 32), head_widths=(32,), input_points=256)


@pytest.fixture(scope="module")
def model():
    return EmbeddingModel(SMALL, seed=3)


@pytest.fixture(scope="module")
def shape():
    return make_record(4, normalize(icosphere(2)), 9, n_train=512, n_eval=0)


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(k=0)
    with pytest.raises(ValueError):
        Architecture(point_widths=())
    with pytest.raises(ValueError):
        Architecture(input_points=0)


def test_default_layer_sizes():
    m = EmbeddingModel()
    sizes = [(l.in_features, l.out_features) for l in m.point_mlp if isinstance(l, torch.nn.Linear)]
    assert sizes == [(3, 64), (64, 128), (128, 256)]
    heads = [(l.in_features, l.out_features) for l in m.head_f if isinstance(l, torch.nn.Linear)]
    assert heads == [(256, 256), (256, 256)]


def test_seeded_init_is_reproducible():
    a, b = EmbeddingModel(SMALL, 5), EmbeddingModel(SMALL, 5)
    assert weights_digest(a) == weights_digest(b)
    assert weights_digest(a) != weights_digest(EmbeddingModel(SMALL, 6))


def test_encode_permutation_bitwise(model, rng):
    pts = rng.uniform(-0.5, 0.5, size=(300, 3))
    a = encode(model, pts)
    for _ in range(5):
        assert encode(model, pts[rng.permutation(300)]).tobytes() == a.tobytes()


def test_encode_duplicates_ignored(model, rng):
    pts = rng.uniform(-0.5, 0.5, size=(100, 3))
    assert encode(model, np.concatenate([pts, pts])).tobytes() == encode(model, pts).tobytes()


def test_single_point_feature(model):
    p = np.array([[0.1, -0.2, 0.3]], dtype=np.float32)
    with torch.no_grad():
        direct = model.point_mlp(torch.from_numpy(p))[0].numpy()
    np.testing.assert_array_equal(encode(model, p), direct.astype(np.float64))


def test_encode_empty_raises(model):
    with pytest.raises(ValueError):
        encode(model, np.zeros((0, 3)))


def test_code_field_range_and_flag(model, shape):
    c = code(model, shape)
    assert c.z.shape == (16,) and c.g.shape == (16,)
    assert np.all(c.g > EPS_FIELD) and np.all(c.g < 1 + EPS_FIELD)
    assert code(model, shape, with_field=False).g is None
    again = code(model, shape)
    assert again.z.tobytes() == c.z.tobytes() and again.g.tobytes() == c.g.tobytes()


def test_code_uses_cloud_prefix(model, shape):
    c = code(model, shape)
    head = shape.cloud_train.points[:256]
    with torch.no_grad():
        z, _ = model(torch.from_numpy(np.unique(head.astype(np.float32), axis=0)))
    np.testing.assert_array_equal(c.z, z.numpy().astype(np.float64))


def test_batch_matches_single(model, rng):
    clouds = [rng.uniform(size=(n, 3)).astype(np.float32) for n in (10, 40, 25)]
    with torch.no_grad():
        feat = model.features(batch_tensor(model, clouds)).numpy()
    for f, c in zip(feat, clouds):
        np.testing.assert_allclose(f, encode(model, c), rtol=1e-6, atol=1e-7)


def test_field_strictly_positive_even_when_saturated(model):
    feat = torch.full((1, 32), -1e4)
    with torch.no_grad():
        g = model.field(feat)
    assert torch.all(g >= EPS_FIELD)


# distance

def test_ego_distance_examples():
    s = EgocentricCode(np.array([0.0, 0.0]), np.array([4.0, 1.0]))
    t = EgocentricCode(np.array([1.0, 0.0]))
    assert ego_distance(t, s) == 2.0
    assert ego_distance(s, s) == 0.0
    ones = EgocentricCode(np.array([0.3, -1.2]), np.ones(2))
    other = EgocentricCode(np.array([1.0, 2.0]))
    assert ego_distance(other, ones) == pytest.approx(np.linalg.norm(other.z - ones.z), rel=1e-15)


def test_ego_distance_errors():
    with pytest.raises(ValueError):
        ego_distance(EgocentricCode(np.zeros(2)), EgocentricCode(np.zeros(2)))
    with pytest.raises(ValueError):
        ego_distance(EgocentricCode(np.zeros(3)), EgocentricCode(np.zeros(2), np.ones(2)))
    with pytest.raises(ValueError):
        EgocentricCode(np.zeros(2), np.array([1.0, 0.0]))


def test_asymmetry_is_possible():
    a = EgocentricCode(np.array([0.0, 0.0]), np.array([1.0, 0.01]))
    b = EgocentricCode(np.array([1.0, 1.0]), np.array([0.01, 1.0]))
    c = EgocentricCode(np.array([2.0, 0.0]), np.array([0.5, 0.5]))
    assert ego_distance(a, b) == ego_distance(b, a) == pytest.approx(np.sqrt(1.01))
    assert ego_distance(a, c) != ego_distance(c, a)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_distance_fuzz(k, seed):
    r = np.random.default_rng(seed)
    s = EgocentricCode(r.normal(size=k), r.uniform(EPS_FIELD, 1, size=k))
    t = EgocentricCode(r.normal(size=k), r.uniform(EPS_FIELD, 1, size=k))
    assert ego_distance(t, s) >= 0 and ego_distance(s, s) == 0
    assert ego_distance(t, s) == pytest.approx(np.sqrt(ego_distance_sq(t, s)))


def test_torch_delta_matches_numpy(rng):
    z_t, z_s, g = rng.normal(size=(3, 5)), rng.normal(size=(3, 5)), rng.uniform(0.1, 1, size=(3, 5))
    d = delta(torch.from_numpy(z_t), torch.from_numpy(z_s), torch.from_numpy(g)).numpy()
    for i in range(3):
        assert d[i] == pytest.approx(ego_distance(EgocentricCode(z_t[i]), EgocentricCode(z_s[i], g[i])), rel=1e-14)


def test_safe_sqrt_gradient_at_zero():
    x = torch.tensor([0.0, 4.0], dtype=torch.float64, requires_grad=True)
    y = safe_sqrt(x)
    y.sum().backward()
    assert y.tolist() == [0.0, 2.0]
    assert x.grad.tolist() == [0.0, 0.25]


def test_delta_weight_gradient_fd(rng):
    m = EmbeddingModel(Architecture(k=6, point_widths=(8, 12), head_widths=(10,)), seed=1).double()
    pts_t = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(30, 3)))
    pts_s = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(30, 3)))

    def value():
        z_t, _ = m(pts_t)
        z_s, g_s = m(pts_s)
        return delta(z_t, z_s, g_s)

    m.zero_grad()
    value().backward()
    eps = 1e-6
    worst = 0.0
    for name, p in m.named_parameters():
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + eps
                up = float(value())
                flat[i] = old - eps
                down = float(value())
                flat[i] = old
            fd = (up - down) / (2 * eps)
            g = float(grad[i])
            if abs(g) > 1e-7 or abs(fd) > 1e-7:
                worst = max(worst, abs(fd - g) / max(abs(g), abs(fd)))
    assert worst < 1e-4


# checkpoints

def test_checkpoint_roundtrip(tmp_path, model, shape):
    p = tmp_path / "m.demb"
    side = save_checkpoint(p, model, {"epoch": 7, "config_hash": "abc"})
    assert side.name == "m.demb.json"
    meta = json.loads(side.read_text())
    assert meta["epoch"] == 7 and meta["init_seed"] == 3 and meta["architecture"]["k"] == 16
    n_params = sum(t.numel() for t in model.state_dict().values())
    descriptor = 4 + 4 * 2 + 4 + 4 * 1 + 4
    assert p.stat().st_size == 4 + 2 + 4 + descriptor + 4 * n_params
    raw = p.read_bytes()
    assert raw[:4] == MAGIC and struct.unpack_from("<HI", raw, 4) == (1, 16)
    loaded, lmeta = load_checkpoint(p)
    assert loaded.arch == SMALL and lmeta["config_hash"] == "abc"
    for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)
    assert code(loaded, shape).z.tobytes() == code(model, shape).z.tobytes()


def test_checkpoint_errors(tmp_path, model):
    p = tmp_path / "m.demb"
    save_checkpoint(p, model)
    raw = p.read_bytes()
    (tmp_path / "bad.demb").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.demb")
    (tmp_path / "short.demb").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="weight bytes"):
        load_checkpoint(tmp_path / "short.demb")
    v = bytearray(raw)
    v[4] = 2
    (tmp_path / "ver.demb").write_bytes(v)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.demb")
