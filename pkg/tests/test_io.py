import json

import numpy as np
import pytest
from PIL import Image

from fusenet import io
from fusenet.data import SubjectVolume, balanced_sample, normalize_subject, stack_samples
from fusenet.evaluate import predict_labelmap
from fusenet.nets import BaseConfig, FusionScheme, train_arrays

SMALL = BaseConfig(conv1_filters=4, conv2_filters=6, dense_width=10, epochs=1, batch_size=16)


def test_mmimg_round_trip_and_header(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.standard_normal((135, 145))
    img[0, 0], img[0, 1] = -0.0, np.nextafter(1.0, 2.0)
    path = tmp_path / "x.mmimg"
    io.write_image(path, img)
    blob = path.read_bytes()
    header, _, payload = blob.partition(b"\n")
    assert header == b"MMIMG 1 145 135"
    assert len(payload) == 8 * 145 * 135
    assert io.read_image(path).tobytes() == img.tobytes()
    np.testing.assert_array_equal(np.frombuffer(payload, "<f8").reshape(135, 145), img)


def test_mmimg_errors_carry_offsets():
    blob = io.encode_image(np.zeros((3, 4)))
    header_len = blob.index(b"\n") + 1
    with pytest.raises(io.FormatError) as exc:
        io.decode_image(blob[:-5])
    assert exc.value.offset == header_len + 8 * 12 - 5
    with pytest.raises(io.FormatError) as exc:
        io.decode_image(b"XXIMG" + blob[5:])
    assert exc.value.offset == 0
    with pytest.raises(io.FormatError):
        io.decode_image(b"MMIMG 1 4 3")
    with pytest.raises(io.FormatError):
        io.decode_image(blob + b"\0")


def test_mask_values_are_checked(tmp_path):
    io.write_image(tmp_path / "m.mmimg", np.array([[0.0, 1.0], [0.5, 0.0]]))
    with pytest.raises(io.FormatError):
        io.read_mask(tmp_path / "m.mmimg")


def test_labelmap_graymap_against_pillow(tmp_path):
    rng = np.random.default_rng(1)
    lab = (rng.random((13, 17)) < 0.4).astype(np.uint8)
    path = tmp_path / "lab.pgm"
    io.write_labelmap(path, lab)
    with Image.open(path) as im:
        assert im.format == "PPM" and im.mode == "L" and im.size == (17, 13)
        ref = np.array(im)
    np.testing.assert_array_equal(ref, lab * 255)
    np.testing.assert_array_equal(io.read_labelmap(path), lab)
    assert path.stat().st_size == len(b"P5\n17 13\n255\n") + 13 * 17
    io.write_labelmap(tmp_path / "neg.pgm", np.zeros((4, 5)))
    assert np.all(io.read_pgm(tmp_path / "neg.pgm") == 0)


def test_heatmap_exports(tmp_path):
    heat = np.random.default_rng(2).random((6, 9))
    io.write_heatmap(tmp_path / "h.mmimg", heat, tmp_path / "h.pgm")
    assert io.read_image(tmp_path / "h.mmimg").tobytes() == heat.tobytes()
    with Image.open(tmp_path / "h.pgm") as im:
        np.testing.assert_array_equal(np.array(im), np.rint(heat * 255).astype(np.uint8))


def test_subject_round_trip(tmp_path, small_cohort):
    io.write_cohort(tmp_path, small_cohort[:2])
    back = io.read_cohort(tmp_path)
    for a, b in zip(small_cohort[:2], back):
        assert a.subject_id == b.subject_id and a.modality_names == b.modality_names
        assert a.mask.tobytes() == b.mask.tobytes()
        for m in a.modality_names:
            assert a.modalities[m].tobytes() == b.modalities[m].tobytes()
    manifest = tmp_path / small_cohort[0].subject_id / "subject.txt"
    manifest.write_text(manifest.read_text().replace("mask =", "maks ="))
    with pytest.raises(io.FormatError):
        io.read_subject(manifest.parent)


@pytest.fixture(scope="module")
def nets(small_cohort):
    vols = [normalize_subject(s) for s in small_cohort]
    x, y = stack_samples(balanced_sample(vols, 30, seed=1))
    mods = vols[0].modality_names
    schemes = [FusionScheme("type1", ("CT", "T2")), FusionScheme("type2", ("PET", "T1", "T2")),
               FusionScheme("type3", ("CT", "PET", "T2")), FusionScheme.single("T1")]
    return vols, [train_arrays(s, x, y, SMALL, mods) for s in schemes]


@pytest.mark.parametrize("i", range(4))
def test_model_round_trip_predicts_bitwise(tmp_path, nets, i):
    vols, trained = nets
    net = trained[i]
    path = tmp_path / "net.model"
    io.save_model(path, net)
    back = io.load_model(path)
    assert back.scheme == net.scheme and back.cfg == net.cfg
    for a, b in zip(net.param_stores(), back.param_stores()):
        assert a == b
    lab_a, heat_a = predict_labelmap(net, vols[0])
    lab_b, heat_b = predict_labelmap(back, vols[0])
    assert heat_a.values.tobytes() == heat_b.values.tobytes()
    assert np.array_equal(lab_a.values, lab_b.values)
    payload = path.read_bytes().split(b"\n", 2)[2]
    assert len(payload) == 8 * net.param_count()
    total = sum(store.size() for store in net.param_stores())
    assert len(payload) == 8 * total


def test_model_rejects_tampering(tmp_path, nets):
    net = nets[1][0]
    path = tmp_path / "net.model"
    io.save_model(path, net)
    magic, desc, payload = path.read_bytes().split(b"\n", 2)
    d = json.loads(desc)
    d["tensors"][0][1][-1] += 1
    path.write_bytes(magic + b"\n" + json.dumps(d).encode() + b"\n" + payload)
    with pytest.raises(io.FormatError, match="layout"):
        io.load_model(path)
    path.write_bytes(magic + b"\n" + desc + b"\n" + payload[:-8])
    with pytest.raises(io.FormatError, match="payload"):
        io.load_model(path)
    path.write_bytes(b"FUSENET-MODEL 2\n" + desc + b"\n" + payload)
    with pytest.raises(io.FormatError, match="version"):
        io.load_model(path)


def test_keyvalue_parsing():
    assert io.parse_keyvalue("a = 1  # note\n\n# whole line\nb=x y\n") == {"a": "1", "b": "x y"}
    with pytest.raises(io.FormatError):
        io.parse_keyvalue("a = 1\na = 2\n")
    with pytest.raises(io.FormatError):
        io.parse_keyvalue("just words\n")


def test_run_config_defaults_and_fields(tmp_path):
    rc = io.build_run_config({"modalities": "T2, CT", "schemes": "type1, single", "folds": "5",
                              "epochs": "3", "learning_rate": "0.05", "out": "o"}, tmp_path)
    assert rc.modalities == ("CT", "T2") and rc.folds == 5
    assert rc.base.epochs == 3 and rc.base.learning_rate == 0.05
    assert rc.out == (tmp_path / "o").resolve()
    assert [str(s) for s in rc.expand_schemes()] == ["type1[CT+T2]", "single:CT[CT]", "single:T2[T2]"]
    rc = io.build_run_config({"modalities": "CT,PET,T1,T2", "combinations": "CT+PET; T1+T2",
                              "schemes": "type2,single:T2"})
    assert [str(s) for s in rc.expand_schemes()] == ["type2[CT+PET]", "type2[T1+T2]", "single:T2[T2]"]


@pytest.mark.parametrize("entries,key", [
    ({"bogus": "1"}, "bogus"),
    ({"folds": "1"}, "folds"),
    ({"folds": "ten"}, "folds"),
    ({"epochs": "0"}, "epochs"),
    ({"learning_rate": "-1"}, "learning_rate"),
    ({"schemes": "type7"}, "schemes"),
    ({"modalities": "T2", "schemes": "type1"}, "modalities"),
    ({"modalities": "CT,T2", "combinations": "CT+PET"}, "combinations"),
    ({"modalities": "CT,T2", "schemes": "type2", "combinations": "CT"}, "combinations"),
    ({"modalities": "CT,T2", "schemes": "single:PET"}, "schemes"),
    ({"contrast.T2": "0,1,1"}, "contrast.T2"),
])
def test_run_config_errors_name_the_field(entries, key):
    with pytest.raises(io.ConfigError) as exc:
        io.build_run_config(entries)
    assert exc.value.key == key
    assert str(exc.value).startswith(key)
