import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from anpr.annotation_io import ImageRecord, PixelBox, indian_schema
from anpr.dataset import synth_samples
from anpr.errors import DataError, MissingPrediction
from anpr.evaluate import (
    PlatePrediction,
    evaluate_dataset,
    format_accuracy_table,
    model_detector,
    plot_iou_histogram,
    plot_loss_curves,
    predict_samples,
    read_predictions,
    write_predictions,
)
from anpr.network import DetectorConfig, RecognizerConfig, build_model, save_checkpoint
from anpr.preprocess import filter_by_detector_iou
from anpr.synth import preset


def record(name, box, plate="HR11F7575"):
    return ImageRecord(f"img/{name}", 720, 1160, 3, plate, PixelBox(*box))


GT = (100.0, 500.0, 200.0, 510.0)  # 100 x 10


def four_image_case():
    # same height, overlapping from the left: IoU = width / 100 exactly
    recs = [record(f"{i}.jpg", GT) for i in range(4)]
    preds = {
        "0.jpg": PlatePrediction(PixelBox(100, 500, 180, 510), "HR11F7575"),
        "1.jpg": PlatePrediction(PixelBox(100, 500, 171, 510), "HR11F7575"),
        "2.jpg": PlatePrediction(PixelBox(100, 500, 169, 510), "HR11F7575"),
        "3.jpg": PlatePrediction(PixelBox(300, 600, 400, 610), "HR11F7575"),
    }
    return recs, preds


def test_four_image_case():
    recs, preds = four_image_case()
    rep = evaluate_dataset(preds, recs)
    assert [r.iou for r in rep.rows] == [0.8, 0.71, 0.69, 0.0]
    assert rep.detection_accuracy == 0.5
    assert rep.recognition_accuracy == 0.75
    assert rep.iou_above_recognition_threshold == 0.75


def test_ground_truth_predictions_score_perfectly():
    recs = [record(f"{i}.jpg", (10 * i, 20, 10 * i + 150, 70), plate=f"HR11F757{i}") for i in range(6)]
    preds = {r.name: PlatePrediction(r.box, r.plate) for r in recs}
    rep = evaluate_dataset(preds, recs)
    assert rep.detection_accuracy == 1.0
    assert rep.recognition_accuracy == 1.0
    assert rep.mean_iou == 1.0
    assert len(rep.rows) == len(recs)


def test_disjoint_wrong_predictions_score_zero():
    recs = [record(f"{i}.jpg", (0, 0, 100, 40)) for i in range(5)]
    preds = {r.name: PlatePrediction(PixelBox(200, 200, 300, 240), "DL0000000") for r in recs}
    rep = evaluate_dataset(preds, recs)
    assert rep.detection_accuracy == 0.0
    assert rep.recognition_accuracy == 0.0
    assert rep.mean_iou == 0.0


def test_right_box_wrong_string():
    recs = [record("a.jpg", GT)]
    rep = evaluate_dataset({"a.jpg": PlatePrediction(PixelBox(*GT), "HR11F7576")}, recs)
    assert rep.detection_accuracy == 1.0
    assert rep.recognition_accuracy == 0.0


def test_missing_prediction():
    recs, preds = four_image_case()
    del preds["2.jpg"]
    with pytest.raises(MissingPrediction, match="2.jpg"):
        evaluate_dataset(preds, recs)


def test_rows_follow_record_order():
    recs, preds = four_image_case()
    rep = evaluate_dataset(preds, recs[::-1])
    assert [r.name for r in rep.rows] == ["3.jpg", "2.jpg", "1.jpg", "0.jpg"]


box_st = st.tuples(st.integers(0, 600), st.integers(0, 1100), st.integers(1, 120), st.integers(1, 60)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@given(st.lists(st.tuples(box_st, box_st, st.booleans()), min_size=1, max_size=20))
def test_recognition_never_exceeds_overlap_fraction(cases):
    recs, preds = [], {}
    for i, (gt, pred, same) in enumerate(cases):
        r = record(f"{i}.jpg", gt)
        recs.append(r)
        preds[r.name] = PlatePrediction(PixelBox(*pred), r.plate if same else "XX")
    rep = evaluate_dataset(preds, recs)
    assert 0 <= rep.recognition_accuracy <= rep.iou_above_recognition_threshold <= 1
    assert 0 <= rep.detection_accuracy <= 1
    assert len(rep.rows) == len(recs)


# -- prediction files -------------------------------------------------------


def test_prediction_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    preds = {}
    for i in range(50):
        x, y = rng.uniform(0, 500, 2)
        preds[f"{i}.png"] = PlatePrediction(PixelBox(x, y, x + rng.uniform(1, 200), y + rng.uniform(1, 80)), "HR11F7575")
    preds["nodet.png"] = PlatePrediction(PixelBox(0.1, 0.2, 0.30000000000000004, 1 / 3), "")
    path = tmp_path / "p.csv"
    write_predictions(preds, path)
    assert read_predictions(path) == preds


def test_prediction_file_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a.jpg,1,2,3\n")
    with pytest.raises(DataError):
        read_predictions(p)
    p.write_text("a.jpg,1,2,x,4,P\n")
    with pytest.raises(DataError):
        read_predictions(p)
    p.write_text("a.jpg,1,2,3,4,P\na.jpg,1,2,3,4,P\n")
    with pytest.raises(DataError):
        read_predictions(p)
    p.write_text("a.jpg,5,2,3,4,P\n")
    with pytest.raises(DataError):
        read_predictions(p)


@pytest.fixture(scope="module")
def tiny_model():
    det = DetectorConfig(input_size=(64, 96), channels=(8,) * 10, box_head=(16,))
    rec = RecognizerConfig(indian_schema(), roi_pool_size=(2, 4), classifier_hidden=16)
    model = build_model(det, rec, seed=3)
    # move the head off its neutral init so predictions differ per image
    with torch.no_grad():
        g = torch.Generator().manual_seed(1)
        for layer in [model.box_head[-1]] + [h[-1] for h in model.classifiers]:
            layer.weight.normal_(0, 0.05, generator=g)
    return model.eval()


def test_model_and_exported_file_give_identical_reports(tiny_model, tmp_path):
    samples = synth_samples(preset("indian-like", seed=2), 6)
    direct = evaluate_dataset(tiny_model, samples)
    path = tmp_path / "preds.csv"
    write_predictions(predict_samples(tiny_model, samples), path)
    from_file = evaluate_dataset(str(path), [s.record for s in samples])
    assert direct.rows == from_file.rows
    assert direct.summary() == from_file.summary()

    ckpt = tmp_path / "m.pt"
    save_checkpoint(ckpt, tiny_model)
    assert evaluate_dataset(str(ckpt), samples).rows == direct.rows


def test_model_needs_images(tiny_model):
    with pytest.raises(TypeError):
        evaluate_dataset(tiny_model, [record("a.jpg", GT)])


def test_model_detector_feeds_filter(tiny_model):
    samples = synth_samples(preset("indian-like", seed=2), 4)
    detect = model_detector(tiny_model)
    kept, ious = filter_by_detector_iou([(s.image(), s.record) for s in samples], detect, threshold=0.0)
    rep = evaluate_dataset(tiny_model, samples)
    assert ious == pytest.approx([r.iou for r in rep.rows])
    assert len(kept) == sum(v > 0 for v in ious)


def test_reports_and_plots(tmp_path):
    recs, preds = four_image_case()
    rep = evaluate_dataset(preds, recs)
    table = format_accuracy_table({"toy": rep})
    assert table.splitlines()[1].split("\t") == ["toy", "50.00", "75.00", "0.5500", "4"]
    assert rep.rows_text().splitlines()[1].startswith("0.jpg,0.800000,1,1")
    plot_iou_histogram(rep, tmp_path / "h.png")
    plot_loss_curves({"epoch": [0, 1, 2], "loc": [1.0, 0.5, 0.2], "cls": [3, 2, 1], "total": [4, 2.5, 1.2]},
                     tmp_path / "l.png")
    assert (tmp_path / "h.png").stat().st_size > 0
    assert (tmp_path / "l.png").stat().st_size > 0


def test_pred_stats_cover_predicted_boxes():
    recs, preds = four_image_case()
    rep = evaluate_dataset(preds, recs)
    assert rep.pred_stats.count == 4
    assert rep.pred_stats.x_min.mean == pytest.approx((100 * 3 + 300) / 4)


def test_thresholds_are_strict():
    recs = [record("a.jpg", GT)]
    # IoU exactly 0.7 is not a detection
    rep = evaluate_dataset({"a.jpg": PlatePrediction(PixelBox(100, 500, 170, 510), "HR11F7575")}, recs)
    assert rep.rows[0].iou == 0.7
    assert rep.detection_accuracy == 0.0
    assert rep.recognition_accuracy == 1.0
    rep = evaluate_dataset({"a.jpg": PlatePrediction(PixelBox(100, 500, 160, 510), "HR11F7575")}, recs)
    assert rep.rows[0].iou == 0.6
    assert rep.recognition_accuracy == 0.0
