
import numpy as np
import pytest
import torch

from anpr.annotation_io import ccpd_schema, decode_plate, indian_schema
from anpr.errors import InvalidBox, LengthMismatch, ShapeMismatch
from anpr.network import (
    DetectorConfig,
    RecognizerConfig,
    build_model,
    center_to_corners,
    joint_loss,
    load_checkpoint,
    predict,
    prepare_batch,
    roi_pool,
    save_checkpoint,
    smooth_l1,
    trunk_output_shapes,
)

SMALL = DetectorConfig(input_size=(96, 96), channels=(8, 8, 8, 8, 8, 8, 8, 8, 8, 8), box_head=(16,))
IND = indian_schema()


def small_model(schema=IND, seed=0):
    rec = RecognizerConfig(schema, roi_pool_size=(2, 4), classifier_hidden=16) if schema else None
    return build_model(SMALL, rec, seed=seed)


def test_reference_config_has_ten_layers():
    cfg = DetectorConfig()
    assert cfg.conv_layer_count == 10
    assert cfg.input_size == (480, 480)
    assert trunk_output_shapes(cfg)[-1] == (192, 11, 11)


def test_detect_shape_and_range():
    model = small_model(None).eval()
    x = torch.randn(5, 3, 96, 96)
    out = model.detect(x)
    assert out.shape == (5, 4)
    assert ((out > 0) & (out < 1)).all()


def test_box_bounded_for_extreme_weights():
    model = small_model(None).eval()
    with torch.no_grad():
        for p in model.box_head.parameters():
            p.mul_(1e4)
    out = model.detect(torch.randn(4, 3, 96, 96) * 100)
    assert ((out > 0) & (out < 1)).all()


def test_eval_determinism():
    model = small_model().eval()
    x = torch.randn(3, 3, 96, 96)
    a_box, a_logits = model(x)
    b_box, b_logits = model(x)
    assert torch.equal(a_box, b_box)
    assert all(torch.equal(a, b) for a, b in zip(a_logits, b_logits))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        small_model().detect(torch.randn(2, 3, 64, 96))


def test_recognizer_shapes_indian_and_ccpd():
    model = small_model().eval()
    _, logits = model(torch.randn(2, 3, 96, 96))
    assert [l.shape for l in logits] == [(2, len(IND.lead_vocab))] + [(2, 34)] * 8
    ccpd = small_model(ccpd_schema()).eval()
    _, logits = ccpd(torch.randn(2, 3, 96, 96))
    assert len(logits) == 7
    # changing the schema leaves the trunk untouched
    t1 = {k: v.shape for k, v in model.state_dict().items() if not k.startswith("classifiers")}
    t2 = {k: v.shape for k, v in ccpd.state_dict().items() if not k.startswith("classifiers")}
    assert t1 == t2


def test_decoded_plates_always_valid():
    model = small_model().eval()
    images = [np.random.default_rng(i).integers(0, 255, (120, 80, 3), dtype=np.uint8) for i in range(4)]
    for p in predict(model, images):
        assert len(p.logits) == 9
        assert decode_plate([int(l.argmax()) for l in p.logits], IND) == p.decoded


def test_trunk_runs_once_per_image():
    model = small_model().eval()
    before = model.trunk.images_seen
    model(torch.randn(3, 3, 96, 96))
    assert model.trunk.images_seen - before == 3


def randomize_output_layers(model, seed=0):
    # training init zeroes the last box/classifier layers, which blocks
    # gradient flow at step 0; the property is about random weights
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in [model.box_head[-1]] + [head[-1] for head in model.classifiers]:
            layer.weight.normal_(0, 0.1, generator=gen)
    return model


def test_cls_gradient_reaches_every_trunk_block():
    model = randomize_output_layers(small_model()).eval()
    x = torch.randn(2, 3, 96, 96)
    nbox, logits = model(x)
    target = torch.zeros(2, 9, dtype=torch.int64)
    loss = joint_loss(nbox, logits, nbox.detach(), target)
    model.zero_grad()
    loss.cls_loss.backward()
    for i, block in enumerate(model.trunk.blocks):
        for name, p in block.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, f"block {i + 1} {name}"


def test_roi_pool_quantization():
    feat = torch.arange(16.0).reshape(1, 1, 4, 4)
    # box covering the right half, rows 1..2 (floor/ceil -> cols 2..3, rows 1..2)
    out = roi_pool(feat, torch.tensor([[0.55, 0.3, 0.95, 0.7]]), (1, 1))
    assert out.item() == 11.0
    # sliver narrower than a cell still gets one cell
    out = roi_pool(feat, torch.tensor([[0.0, 0.0, 0.01, 0.01]]), (1, 1))
    assert out.item() == 0.0
    with pytest.raises(InvalidBox):
        roi_pool(feat, torch.tensor([[1.2, 0.0, 1.5, 0.5]]), (1, 1))
    with pytest.raises(InvalidBox):
        roi_pool(feat, torch.tensor([[float("nan"), 0.0, 0.5, 0.5]]), (1, 1))


def test_smooth_l1_pieces():
    d = torch.tensor([-2.0, -0.5, 0.0, 0.5, 2.0])
    assert smooth_l1(d).tolist() == [1.5, 0.125, 0.0, 0.125, 1.5]


def test_joint_loss_zero_cases():
    gt = torch.tensor([[0.5, 0.5, 0.2, 0.1]])
    idx = torch.tensor([[3, 1, 2]])
    big = [torch.full((1, 5), -1e4).index_fill(1, torch.tensor([i]), 1e4) for i in (3, 1, 2)]
    out = joint_loss(gt.clone(), big, gt, idx)
    assert out.loc_loss.item() == 0
    assert out.cls_loss.item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(LengthMismatch):
        joint_loss(gt, big, gt, idx[:, :2])


def test_joint_loss_weights_and_nonnegative():
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(4, 4, generator=g)
    gt = torch.rand(4, 4, generator=g)
    logits = [torch.randn(4, 6, generator=g) for _ in range(3)]
    idx = torch.randint(0, 6, (4, 3), generator=g)
    out = joint_loss(pred, logits, gt, idx, weights=(2.5, 0.5))
    assert torch.equal(out.total, 2.5 * out.loc_loss + 0.5 * out.cls_loss)
    assert out.loc_loss >= 0 and out.cls_loss >= 0


def test_joint_loss_finite_difference():
    g = torch.Generator().manual_seed(1)
    pred = torch.rand(3, 4, generator=g, dtype=torch.float64) * 0.8 + 0.1
    gt = torch.rand(3, 4, generator=g, dtype=torch.float64)
    # push one residual beyond the elbow to exercise the linear branch
    gt[0, 0] = pred[0, 0] - 1.5
    logits = [torch.randn(3, 7, generator=g, dtype=torch.float64) for _ in range(2)]
    idx = torch.randint(0, 7, (3, 2), generator=g)
    pred.requires_grad_(True)
    joint_loss(pred, logits, gt, idx).total.backward()
    analytic = pred.grad.clone()
    h = 1e-5
    numeric = torch.zeros_like(pred)
    with torch.no_grad():
        for i in range(3):
            for j in range(4):
                p1, p2 = pred.detach().clone(), pred.detach().clone()
                p1[i, j] += h
                p2[i, j] -= h
                numeric[i, j] = (joint_loss(p1, logits, gt, idx).total - joint_loss(p2, logits, gt, idx).total) / (2 * h)
    rel = (analytic - numeric).abs().max() / analytic.abs().max()
    assert rel < 1e-4


def test_center_to_corners():
    c = center_to_corners(torch.tensor([[0.5, 0.5, 0.2, 0.4]]))
    assert torch.allclose(c, torch.tensor([[0.4, 0.3, 0.6, 0.7]]))


def test_prepare_batch_range_and_shape():
    img = np.zeros((50, 70, 3), np.uint8)
    img[..., 0] = 255
    x = prepare_batch([img, img], (32, 48))
    assert x.shape == (2, 3, 32, 48)
    assert x[:, 0].eq(1).all() and x[:, 1:].eq(-1).all()


def test_checkpoint_round_trip(tmp_path):
    model = small_model().eval()
    path = tmp_path / "m.pt"
    save_checkpoint(path, model, step=7, history={"loss": [1.0, 0.5]}, seed=3)
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.seed == 3 and ck.history == {"loss": [1.0, 0.5]}
    assert ck.schema == IND
    x = torch.randn(2, 3, 96, 96)
    a, la = model(x)
    b, lb = ck.model(x)
    assert torch.equal(a, b) and all(torch.equal(u, v) for u, v in zip(la, lb))
    bad = torch.load(path, weights_only=True)
    bad["version"] = "other/0"
    torch.save(bad, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_training_init_is_neutral():
    model = small_model().eval()
    nbox, logits = model(torch.randn(2, 3, 96, 96))
    assert torch.allclose(nbox, torch.full_like(nbox, 0.5))
    for lg in logits:
        assert torch.allclose(lg, torch.zeros_like(lg))
