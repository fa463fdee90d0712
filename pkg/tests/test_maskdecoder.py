import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from anyseg import maskdecoder as md
from anyseg.backbone import SegConnector
from anyseg.config import LossConfig, ModelConfig

from helpers import fd_check, tiny_cfg


def brute_force_min(cost: np.ndarray) -> float:
    q, g = cost.shape
    return min(sum(cost[p[k], k] for k in range(g)) for p in itertools.permutations(range(q), g))


def _decoder(cfg=None):
    torch.manual_seed(0)
    return md.MaskDecoder(cfg or tiny_cfg()).double()


def _feats(cfg, b=1, grid=4, gen=None):
    d = cfg.dec_width
    return {"1/32": torch.randn(b, d, grid // 2, grid // 2, generator=gen, dtype=torch.float64),
            "1/16": torch.randn(b, d, grid, grid, generator=gen, dtype=torch.float64),
            "1/8": torch.randn(b, d, 2 * grid, 2 * grid, generator=gen, dtype=torch.float64)}


def test_decoder_shapes():
    cfg = tiny_cfg(n_queries=5)
    dec = _decoder(cfg)
    cond = [torch.randn(2, 16, dtype=torch.float64)]
    pred = dec(_feats(cfg), cond, cond)
    sp = pred.sample(0)
    assert sp.masks.shape == (7, 8, 8)
    assert sp.class_logits.shape == (7, 3)
    with pytest.raises(md.DecoderError):
        dec({"1/16": torch.zeros(1, 8, 4, 4, dtype=torch.float64)}, cond, cond)


def test_decoder_padding_columns():
    cfg = tiny_cfg()
    dec = _decoder(cfg)
    c1, c2 = torch.randn(1, 16, dtype=torch.float64), torch.randn(3, 16, dtype=torch.float64)
    pred = dec(_feats(cfg, b=2), [c1, c2], [c1, c2])
    assert torch.isinf(pred.class_logits[0, :, 1:3]).all()
    assert pred.sample(0).class_logits.shape == (cfg.n_queries + 1, 2)
    assert pred.sample(1).class_logits.shape == (cfg.n_queries + 3, 4)
    assert torch.isfinite(pred.sample(0).class_logits).all()


def test_zero_features_zero_heads():
    cfg = tiny_cfg()
    dec = _decoder(cfg)
    dec.zero_heads()
    feats = {k: torch.zeros_like(v) for k, v in _feats(cfg).items()}
    cond = [torch.randn(2, 16, dtype=torch.float64)]
    m = dec(feats, cond, cond).masks
    assert torch.count_nonzero(m) == 0
    assert torch.allclose(m.sigmoid(), torch.full_like(m, 0.5))


def test_decoder_gradient_through_connector():
    cfg = tiny_cfg()
    torch.manual_seed(0)
    conn = SegConnector(cfg).double()
    dec = _decoder(cfg)
    z = torch.randn(1, 16, 2, 2, dtype=torch.float64, requires_grad=True)
    cond = [torch.randn(2, 16, dtype=torch.float64)]

    def f():
        p = dec(conn(z), cond, cond)
        return p.masks.sigmoid().sum() + p.class_logits.log_softmax(-1).sum()

    assert fd_check(f, [z], 24, torch.Generator().manual_seed(0)) < 1e-4


def test_class_logit_scaling_argmax():
    cfg = tiny_cfg()
    dec = _decoder(cfg)
    feats = _feats(cfg, gen=torch.Generator().manual_seed(1))
    cond = torch.randn(1, 3, 16, dtype=torch.float64)
    base = dec(feats, cond, cond).class_logits[0]
    with torch.no_grad():
        dec.background.mul_(2.5)
    scaled = dec(feats, cond * 2.5, cond).class_logits[0]
    # SEG-derived queries see the unscaled SEG inputs; compare the learned queries only
    n = cfg.n_queries
    assert torch.allclose(scaled[:n], 2.5 * base[:n])
    assert torch.equal(scaled[:n].argmax(-1), base[:n].argmax(-1))


def _sp(masks, logits):
    return md.SamplePrediction(torch.as_tensor(masks, dtype=torch.float64), torch.as_tensor(logits, dtype=torch.float64))


def test_matching_cost_perfect_is_minimal():
    gt = torch.zeros(2, 4, 4, dtype=torch.float64)
    gt[0, :2] = 1
    gt[1, 2:] = 1
    masks = torch.stack([20 * (2 * gt[0] - 1), torch.zeros(4, 4, dtype=torch.float64), 20 * (2 * gt[1] - 1)])
    logits = torch.tensor([[10.0, -10, -10], [0, 0, 0], [-10, 10, -10]], dtype=torch.float64)
    c = md.matching_cost(_sp(masks, logits), gt, [0, 1])
    assert c[0, 0] < c[1:, 0].min() and c[0, 0] < c[0, 1]
    assert c[2, 1] < c[:2, 1].min() and c[2, 1] < c[2, 0]
    same = md.matching_cost(_sp(torch.stack([masks[1], masks[1]]), logits[[1, 1]]), gt, [0, 1])
    assert torch.equal(same[0], same[1])


def test_matching_cost_hand_terms():
    g = torch.Generator().manual_seed(5)
    masks = torch.randn(3, 2, 2, generator=g, dtype=torch.float64)
    logits = torch.randn(3, 3, generator=g, dtype=torch.float64)
    gt = (torch.rand(3, 2, 2, generator=g) > 0.5).double()
    labels = [1, 0, 1]
    w = LossConfig(cls_weight=2.0, mask_weight=5.0, dice_weight=5.0)
    c = md.matching_cost(_sp(masks, logits), gt, labels, w)
    for q in range(3):
        prob = [math.exp(v) for v in logits[q].tolist()]
        prob = [v / sum(prob) for v in prob]
        for k in range(3):
            xs, ys = masks[q].flatten().tolist(), gt[k].flatten().tolist()
            sig = [1 / (1 + math.exp(-x)) for x in xs]
            bce = -sum(y * math.log(s) + (1 - y) * math.log(1 - s) for s, y in zip(sig, ys)) / 4
            dice = 1 - (2 * sum(s * y for s, y in zip(sig, ys)) + 1) / (sum(sig) + sum(ys) + 1)
            want = -2 * prob[labels[k]] + 5 * bce + 5 * dice
            assert c[q, k].item() == pytest.approx(want, abs=1e-12)


def test_hungarian_small_cases():
    assert md.hungarian_match(np.array([[3.0]])) == [0]
    d = np.full((3, 3), 5.0) - 4 * np.eye(3)
    assert md.hungarian_match(d) == [0, 1, 2]
    with pytest.raises(md.DecoderError):
        md.hungarian_match(np.zeros((2, 3)))
    assert md.hungarian_match(np.zeros((3, 0))) == []


def test_hungarian_lexicographic_ties():
    assert md.hungarian_match(np.zeros((4, 2))) == [0, 1]
    c = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    # optimum 0 reachable as (1, 0), (1, 2), (2, 0); the smallest tuple is (1, 0)
    assert md.hungarian_match(c) == [1, 0]


def test_hungarian_exhaustive_5x5():
    rng = np.random.default_rng(0)
    values = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
    for _ in range(200):
        c = rng.choice(values, size=(5, 5))
        a = md.hungarian_match(c)
        assert len(set(a)) == 5
        assert sum(c[a[k], k] for k in range(5)) == brute_force_min(c)


@given(st.integers(1, 6), st.data())
def test_hungarian_property(q, data):
    g = data.draw(st.integers(0, q))
    c = np.array(data.draw(st.lists(st.lists(st.integers(0, 4), min_size=g, max_size=g), min_size=q, max_size=q)),
                 dtype=float).reshape(q, g)
    a = md.hungarian_match(c)
    assert len(a) == g and len(set(a)) == g
    if g:
        assert sum(c[a[k], k] for k in range(g)) == brute_force_min(c)


def test_dice_bce_examples():
    gt = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    sat = 40 * (2 * gt - 1)
    assert md.dice_loss(sat, gt).item() < 1e-12
    assert md.bce_mask_loss(sat, gt).item() < 1e-12
    half = torch.zeros(2, 2, dtype=torch.float64)
    assert md.bce_mask_loss(half, gt).item() == pytest.approx(math.log(2), abs=1e-12)
    # hand case: sigma = 0.5 everywhere, two positives
    assert md.dice_loss(half, gt).item() == pytest.approx(1 - (2 * 1.0 + 1) / (2.0 + 2 + 1), abs=1e-12)
    with pytest.raises(md.DecoderError):
        md.dice_loss(half, torch.zeros(3, 2))


def test_loss_no_gt_is_background_ce():
    logits = torch.tensor([[0.5, 1.0], [2.0, -1.0]], dtype=torch.float64)
    sl = md.segmentation_loss(_sp(torch.zeros(2, 4, 4), logits), torch.zeros(0, 4, 4), [], [])
    want = -logits.log_softmax(-1)[:, 1].mean()
    assert sl.mask.item() == 0 and sl.dice.item() == 0
    assert sl.cls.item() == pytest.approx(want.item(), abs=1e-12)


def test_loss_perfect_prediction():
    gt = torch.zeros(1, 4, 4, dtype=torch.float64)
    gt[0, 1:3, 1:3] = 1
    masks = 60 * (2 * gt - 1)
    logits = torch.tensor([[60.0, -60.0]], dtype=torch.float64)
    assert md.segmentation_loss(_sp(masks, logits), gt, [0], [0]).total.item() < 1e-12


def test_loss_two_query_hand_case():
    gt = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)
    masks = torch.tensor([[[1.0, -1.0], [0.0, 2.0]], [[0.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)
    logits = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    w = LossConfig(cls_weight=2.0, mask_weight=5.0, dice_weight=5.0, bg_weight=0.1)
    sl = md.segmentation_loss(_sp(masks, logits), gt, [0], [0], w)
    ce0 = -(1.0 - math.log(math.e + 1))
    ce1 = -(2.0 - math.log(1 + math.exp(2)))
    cls = (1.0 * ce0 + 0.1 * ce1) / 1.1
    xs, ys = [1.0, -1.0, 0.0, 2.0], [1, 0, 0, 0]
    sig = [1 / (1 + math.exp(-x)) for x in xs]
    bce = -sum(y * math.log(s) + (1 - y) * math.log(1 - s) for s, y in zip(sig, ys)) / 4
    dice = 1 - (2 * sig[0] + 1) / (sum(sig) + 1 + 1)
    assert sl.cls.item() == pytest.approx(cls, abs=1e-12)
    assert sl.mask.item() == pytest.approx(bce, abs=1e-12)
    assert sl.dice.item() == pytest.approx(dice, abs=1e-12)
    assert sl.total.item() == pytest.approx(2 * cls + 5 * bce + 5 * dice, abs=1e-12)


def test_predict_instances_cases():
    masks = torch.full((3, 4, 4), -5.0)
    masks[0, :2] = 5.0
    masks[2, 2:] = 5.0
    bg = torch.tensor([[-9.0, 9.0]] * 3)
    assert md.predict_instances(_sp(masks, bg), (4, 4)) == []
    logits = torch.tensor([[3.0, 0.0], [-9.0, 9.0], [0.0, 1.0]])
    inst = md.predict_instances(_sp(masks, logits), (4, 4))
    assert [(i.label, i.query) for i in inst] == [(0, 0)]
    assert inst[0].confidence == pytest.approx(torch.tensor([3.0, 0.0]).softmax(0)[0].item(), abs=1e-6)
    assert inst[0].mask.sum() == 8
    logits[2] = torch.tensor([2.0, 0.0])
    inst = md.predict_instances(_sp(masks, logits), (4, 4))
    assert [(i.label, i.query) for i in inst] == [(0, 0), (0, 2)]


def test_panoptic_merge_cases():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[2:] = True
    _, kept = md.panoptic_merge([md.Instance(0, a, 0.6), md.Instance(1, b, 0.9)], (4, 4))
    assert sorted(k.label for k in kept) == [0, 1]
    assert all(np.array_equal(k.mask, a if k.label == 0 else b) for k in kept)
    c = np.zeros((4, 4), bool)
    c[1:3] = True
    seg, kept = md.panoptic_merge([md.Instance(0, a, 0.6), md.Instance(1, c, 0.9)], (4, 4))
    assert kept[0].label == 1 and np.array_equal(kept[0].mask, c)
    assert np.array_equal(kept[1].mask, a & ~c)


@given(st.integers(0, 10_000))
def test_panoptic_merge_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    insts = [md.Instance(int(rng.integers(3)), rng.random((5, 5)) < 0.4, float(rng.random()), k) for k in range(n)]
    seg, kept = md.panoptic_merge(insts, (5, 5))
    for y in range(5):
        for x in range(5):
            owners = [k for k, i in enumerate(insts) if i.mask[y, x]]
            if not owners:
                assert seg[y, x] == -1
                continue
            best = max(owners, key=lambda k: (insts[k].confidence, -k))
            assert kept[seg[y, x]].query == best
    total = sum(k.mask.astype(int) for k in kept) if kept else np.zeros((5, 5), int)
    assert total.max() <= 1
