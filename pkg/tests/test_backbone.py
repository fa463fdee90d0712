import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from anyseg import backbone as bb
from anyseg.config import ModelConfig

from helpers import fd_check, tiny_cfg


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16))
def test_pixel_shuffle_roundtrip(c, h, w, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, c, 2 * h, 2 * w, generator=g)
    y = bb.pixel_shuffle(x, 0.5)
    assert y.shape == (2, 4 * c, h, w)
    assert torch.equal(bb.pixel_shuffle(y, 2.0), x)
    z = torch.randn(2, 4 * c, h, w, generator=g)
    assert torch.equal(bb.pixel_shuffle(bb.pixel_shuffle(z, 2.0), 0.5), z)
    assert torch.equal(y.flatten().sort().values, x.flatten().sort().values)


def test_pixel_shuffle_examples():
    assert bb.pixel_shuffle(torch.zeros(8, 4, 4), 0.5).shape == (32, 2, 2)
    x = torch.arange(16.0).reshape(4, 2, 2)
    y = bb.pixel_shuffle(x, 2.0)
    assert y.shape == (1, 4, 4)
    assert sorted(y.flatten().tolist()) == list(range(16))
    with pytest.raises(bb.ShapeError):
        bb.pixel_shuffle(torch.zeros(1, 3, 3), 0.5)
    with pytest.raises(bb.ShapeError):
        bb.pixel_shuffle(torch.zeros(6, 2, 2), 2.0)
    with pytest.raises(bb.ShapeError):
        bb.pixel_shuffle(torch.zeros(4, 2, 2), 3.0)


def test_image_encoder_shape_and_sensitivity():
    torch.manual_seed(0)
    enc = bb.ImageEncoder(ModelConfig()).eval()
    x = torch.rand(1, 3, 64, 64)
    z = enc(x)
    assert z.shape == (1, 64, 8, 8)
    x2 = x.clone()
    x2[..., :8, :8] += 0.5
    assert not torch.allclose(enc(x2), z)
    with pytest.raises(bb.ShapeError):
        enc(torch.rand(1, 1, 64, 64))


def test_zero_image_bias_free_embedding():
    enc = bb.ImageEncoder(ModelConfig(bias=False))
    assert torch.count_nonzero(enc.embed(torch.zeros(1, 3, 64, 64))) == 0


@pytest.mark.parametrize("depth", [1, 2])
def test_seg_encoder_shape_and_determinism(depth):
    cfg = ModelConfig(seg_stem_depth=depth)
    torch.manual_seed(3)
    a = bb.SegEncoder(cfg)
    torch.manual_seed(3)
    b = bb.SegEncoder(cfg)
    x = torch.rand(2, 3, 64, 64)
    za = a(x)
    assert za.shape == (2, cfg.seg_width, 4, 4)
    assert torch.equal(za, b(x))
    with pytest.raises(bb.ShapeError):
        a(torch.rand(1, 3, 40, 40))


def test_seg_encoder_translation():
    # zero background, zero padding and no biases make the conv stem exactly shift-equivariant
    cfg = ModelConfig(image_size=128, seg_blocks=0, bias=False)
    torch.manual_seed(1)
    enc = bb.SegEncoder(cfg).eval()
    x = torch.zeros(1, 3, 128, 128)
    x[0, 0, 40:52, 36:50] = 1.0
    shifted = torch.roll(x, shifts=(16, 16), dims=(2, 3))
    with torch.no_grad():
        a = enc(x)[0].norm(dim=0)
        b = enc(shifted)[0].norm(dim=0)
    ia, ib = divmod(int(a.argmax()), a.shape[1]), divmod(int(b.argmax()), b.shape[1])
    assert (ib[0] - ia[0], ib[1] - ia[1]) == (1, 1)


def test_connector_shapes_and_ablations():
    z = torch.randn(1, 64, 4, 4)
    conn = bb.SegConnector(ModelConfig(seg_width=64, dec_width=32))
    out = conn(z)
    assert {k: tuple(v.shape[1:]) for k, v in out.items()} == {
        "1/32": (32, 2, 2), "1/16": (32, 4, 4), "1/8": (32, 8, 8)}
    assert conn(z)["1/16"].shape[-2:] == z.shape[-2:]
    assert set(bb.SegConnector(ModelConfig(connector_multiscale=False))(torch.randn(1, 128, 4, 4))) == {"1/16"}
    none = bb.SegConnector(ModelConfig(connector_kind="none", seg_width=64, dec_width=64))
    assert torch.equal(none(z)["1/16"], z)
    assert set(bb.SegConnector(ModelConfig(connector_kind="mlp"))(torch.randn(1, 128, 4, 4))) == {"1/32", "1/16", "1/8"}


def test_identity_bottleneck_is_linear():
    br = bb.Bottleneck(8, 8, 8)
    br.init_identity()
    x = torch.randn(1, 8, 4, 4)
    y = torch.randn(1, 8, 4, 4)
    with torch.no_grad():
        assert torch.allclose(br(x + 2 * y), br(x) + 2 * br(y), atol=1e-5)


def test_connector_gradient_fd():
    torch.manual_seed(0)
    conn = bb.SegConnector(tiny_cfg()).double()
    z = torch.randn(1, 16, 2, 2, dtype=torch.float64, requires_grad=True)
    w = {k: torch.randn_like(v) for k, v in conn(z).items()}

    def f():
        return sum((v * w[k]).sum() for k, v in conn(z).items())

    assert fd_check(f, [z], 16, torch.Generator().manual_seed(0)) < 1e-4


def test_projector_shapes():
    cfg = ModelConfig()
    assert bb.ImageProjector(cfg)(torch.randn(1, 64, 8, 8)).shape == (1, 64, cfg.lm_width)
    assert bb.SegProjector(cfg)(torch.randn(1, 128, 4, 4)).shape == (1, 4, cfg.lm_width)
    p = bb.ImageProjector(ModelConfig(bias=False))
    assert torch.count_nonzero(p(torch.zeros(1, 64, 8, 8))) == 0


def test_region_cells_rules():
    r = np.zeros((64, 64), bool)
    r[20:23, 20:23] = True
    assert bb.region_cells(r, (4, 4)).tolist() == [5]
    assert bb.region_cells(np.ones((64, 64), bool), (4, 4)).tolist() == list(range(16))
    assert bb.region_cells(np.zeros((64, 64), bool), (4, 4)).size == 1
    with pytest.raises(bb.ShapeError):
        bb.region_cells(np.zeros((10, 10), bool), (4, 4))


def test_region_feature_examples():
    torch.manual_seed(0)
    cfg = ModelConfig()
    proj = bb.RegionProjector(cfg)
    z = torch.randn(128, 4, 4)
    one = np.zeros((64, 64), bool)
    one[16:32, 32:48] = True
    rng = np.random.default_rng(0)
    got = bb.sample_region_feature(z, one, proj, rng)
    assert torch.allclose(got, proj(z[:, 1, 2]))
    full = bb.sample_region_feature(z, np.ones((64, 64), bool), proj, None)
    assert torch.allclose(full, proj(z.mean((1, 2))), atol=1e-6)


def test_region_two_tone_distinct():
    torch.manual_seed(0)
    cfg = ModelConfig()
    enc, proj = bb.SegEncoder(cfg).eval(), bb.RegionProjector(cfg)
    img = torch.zeros(1, 3, 64, 64)
    img[0, 0, :, :32] = 1.0
    img[0, 2, :, 32:] = 1.0
    left = np.zeros((64, 64), bool)
    left[:, :16] = True
    right = np.zeros((64, 64), bool)
    right[:, 48:] = True
    with torch.no_grad():
        z = enc(img)[0]
        a = bb.sample_region_feature(z, left, proj, np.random.default_rng(0))
        b = bb.sample_region_feature(z, right, proj, np.random.default_rng(0))
    assert not torch.allclose(a, b)


@given(st.permutations(list(range(6))))
def test_region_pool_order_invariant(perm):
    z = torch.arange(96.0).reshape(4, 4, 6)
    pts = np.array([0, 3, 7, 11, 13, 20])
    assert torch.allclose(bb.pool_region(z, pts), bb.pool_region(z, pts[list(perm)]))
