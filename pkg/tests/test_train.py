import pytest
from hypothesis import given
from hypothesis import strategies as st

from anpr.annotation_io import ccpd_schema, emit_voc
from anpr.dataset import Sample, hash_split, load_samples, synth_samples
from anpr.errors import EmptyDataset, InvalidAnnotation, MissingDetectorCheckpoint, SchemaMismatch
from anpr.network import load_checkpoint
from anpr.synth import generate_dataset, preset
from anpr.train import TrainConfig, gather_samples, load_config, pretrain_detector, train_e2e

TINY_DET = {"input_size": (64, 96), "channels": (8,) * 10, "box_head": (16,), "dropout": 0.0}


def tiny_cfg(**kw):
    base = dict(
        synth_preset="ccpd-like", synth_seed=5, synth_train_count=12, synth_val_count=4,
        epochs=2, batch_size=4, detector=TINY_DET, roi_pool_size=(2, 4), classifier_hidden=16,
        optimizer="adam", lr=1e-3, loss_weights=(10.0, 1.0),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def detector_ckpt():
    return pretrain_detector(tiny_cfg())


# -- config -----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})


def test_load_config_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('epochs = 3\nloss_weights = [2.0, 1.0]\n[detector]\ninput_size = [64, 96]\n')
    cfg = load_config(p)
    assert cfg.epochs == 3
    assert cfg.loss_weights == (2.0, 1.0)
    assert cfg.detector.input_size == (64, 96)
    assert cfg.detector.conv_layer_count == 10


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("toy_detector.toml", "toy_e2e.toml"):
        cfg = load_config(root / name)
        assert cfg.synth_preset == "ccpd-like"
        assert cfg.epochs <= 20


# -- data -------------------------------------------------------------------


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        gather_samples(TrainConfig())
    with pytest.raises(EmptyDataset):
        pretrain_detector(tiny_cfg(), train=[], val=[])


def test_invalid_annotations_listed_per_file(tmp_path):
    spec = preset("indian-like", seed=0)
    generate_dataset(spec, 3, tmp_path)
    (tmp_path / "annotations" / "0001.xml").write_text("<annotation>")
    (tmp_path / "annotations" / "0002.xml").write_text("<annotation><size/></annotation>")
    with pytest.raises(InvalidAnnotation) as info:
        load_samples(tmp_path)
    assert [p for p, _ in info.value.problems] == [
        str(tmp_path / "annotations" / "0001.xml"),
        str(tmp_path / "annotations" / "0002.xml"),
    ]
    with pytest.raises(InvalidAnnotation):
        pretrain_detector(tiny_cfg(synth_preset=None, train_dirs=[str(tmp_path)]))


def test_load_samples_sibling_layout(tmp_path):
    spec = preset("indian-like", seed=0)
    from anpr.synth import generate_sample
    from PIL import Image

    for i in range(3):
        img, rec = generate_sample(spec, i)
        Image.fromarray(img).save(tmp_path / f"car{i}.png")
        (tmp_path / f"car{i}.xml").write_text(emit_voc(rec))
    samples = load_samples(tmp_path)
    assert [s.source for s in samples] == [str(tmp_path / f"car{i}.png") for i in range(3)]
    assert samples[0].image().shape == (1160, 720, 3)


def _fake_samples(names):
    rec = synth_samples(preset("ccpd-like", seed=0), 1)[0].record
    from dataclasses import replace

    return [Sample(replace(rec, image_path=f"images/{n}"), lambda: None) for n in names]


@given(st.lists(st.text("abcdef0123456789", min_size=1, max_size=8), unique=True, max_size=40),
       st.floats(0.05, 0.95))
def test_hash_split_disjoint_and_covering(names, frac):
    samples = _fake_samples([n + ".png" for n in names])
    train, val = hash_split(samples, frac)
    a, b = {s.name for s in train}, {s.name for s in val}
    assert not a & b
    assert a | b == {s.name for s in samples}


@given(st.lists(st.text("abcdef0123456789", min_size=1, max_size=8), unique=True, min_size=2, max_size=30))
def test_hash_split_stable_under_growth(names):
    half = names[: len(names) // 2]
    _, val_small = hash_split(_fake_samples(half), 0.3)
    _, val_big = hash_split(_fake_samples(names), 0.3)
    assert {s.name for s in val_small} <= {s.name for s in val_big}


def test_synth_gather_holds_out_distinct_indices():
    train, val = gather_samples(tiny_cfg())
    assert len(train) == 12 and len(val) == 4
    assert not {s.source for s in train} & {s.source for s in val}


# -- training ---------------------------------------------------------------


def test_pretrain_history_and_determinism(detector_ckpt):
    again = pretrain_detector(tiny_cfg())
    h = detector_ckpt.history
    assert h["epoch"] == [0, 1, 2]
    assert len(h["val_mean_iou"]) == 3
    assert h["loss"] == again.history["loss"]
    assert h["val_mean_iou"] == again.history["val_mean_iou"]


def test_seed_recorded_in_checkpoint(tmp_path):
    out = tmp_path / "det.pt"
    pretrain_detector(tiny_cfg(epochs=1, seed=7, output=str(out)))
    ck = load_checkpoint(out)
    assert ck.seed == 7
    assert ck.extra["train_config"]["seed"] == 7


def test_e2e_requires_detector_checkpoint():
    with pytest.raises(MissingDetectorCheckpoint):
        train_e2e(tiny_cfg(), None)


def test_e2e_history_and_determinism(detector_ckpt):
    a = train_e2e(tiny_cfg(epochs=3), detector_ckpt)
    b = train_e2e(tiny_cfg(epochs=3), detector_ckpt)
    for key in ("loc", "cls", "total"):
        assert len(a.history[key]) == 4
        assert a.history[key] == b.history[key]
    assert a.history["final"]["total"] < a.history["total"][0]
    assert a.model.rec_cfg.num_classifiers == 9


def test_e2e_checkpoint_schema_mismatch(detector_ckpt):
    indian = train_e2e(tiny_cfg(epochs=1), detector_ckpt)
    with pytest.raises(SchemaMismatch):
        train_e2e(tiny_cfg(schema="ccpd"), indian)


def test_e2e_seven_slot_plates_against_nine_classifiers(detector_ckpt):
    indian = train_e2e(tiny_cfg(epochs=1), detector_ckpt)
    ccpd_data = synth_samples(preset("ccpd-like", seed=5, schema=ccpd_schema()), 8)
    with pytest.raises(SchemaMismatch):
        train_e2e(tiny_cfg(), indian, train=ccpd_data, val=[])


def test_e2e_drops_plates_outside_schema(detector_ckpt):
    good = synth_samples(preset("ccpd-like", seed=5), 8)
    bad = synth_samples(preset("ccpd-like", seed=5, schema=ccpd_schema()), 4, start=8)
    ck = train_e2e(tiny_cfg(epochs=1), detector_ckpt, train=good + bad, val=[])
    assert ck.extra["train_size"] == 8
