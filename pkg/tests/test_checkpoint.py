import numpy as np
import pytest

from voxset.backbone import BackboneConfig
from voxset.checkpoint import SchemaError, config_from_text, config_to_text, load_checkpoint, save_checkpoint
from voxset.detect import DetectConfig
from voxset.model import DetectorModel
from voxset.pcio import gen_synthetic_scene, SceneSpec

RANGE = (0.0, -5.76, -3.0, 11.52, 5.76, 1.0)
CFG = BackboneConfig(point_range=RANGE, block_dims=(4, 6, 8, 10), latent_k=2, pe_bandwidth=4, bev_widths=(4, 4))


def model(dtype=np.float32, seed=0):
    m = DetectorModel.init(CFG, DetectConfig(), seed=seed, dtype=dtype)
    pc, _ = gen_synthetic_scene(0, SceneSpec(point_range=RANGE, box_count=(1, 1), clutter_points=50))
    m.forward(m.geometry(pc), train=True)   # move the batch-norm statistics off their defaults
    return m, pc


def test_config_text_round_trip():
    det = DetectConfig(score_thr=0.25)
    text = config_to_text(CFG, det)
    assert text.startswith("format = 1\n")
    assert config_from_text(text) == (CFG, det)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip(tmp_path, dtype):
    m, pc = model(dtype)
    path = tmp_path / "m.npz"
    save_checkpoint(path, m)
    back = load_checkpoint(path)
    assert back.backbone_cfg == CFG and back.dtype == dtype
    for name, arr in m.arrays().items():
        assert np.array_equal(arr.data, back.arrays()[name].data), name
    for name, st in m.bn_states().items():
        assert np.array_equal(st.running_mean, back.bn_states()[name].running_mean)
    b1, s1 = m.predict(pc)
    b2, s2 = back.predict(pc)
    assert np.array_equal(s1, s2) and np.array_equal(b1, b2)


def test_layout_names(tmp_path):
    m, _ = model()
    path = tmp_path / "m.npz"
    save_checkpoint(path, m)
    with np.load(path) as data:
        names = set(data.files)
    assert {"__config__", "stage0.mlp.w", "stage3.vsa.latent", "bev.b2.2.gamma", "head.w_cls",
            "stage1.vsa.bn.running_var", "bev.b1.0.bn.running_mean"} <= names


def test_missing_array(tmp_path):
    m, _ = model()
    path = tmp_path / "m.npz"
    save_checkpoint(path, m)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != "head.w_cls"}
    np.savez(path, **arrays)
    with pytest.raises(SchemaError, match="missing"):
        load_checkpoint(path)


def test_shape_mismatch(tmp_path):
    m, _ = model()
    path = tmp_path / "m.npz"
    save_checkpoint(path, m)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    arrays["head.b_cls"] = np.zeros(5, dtype=np.float32)
    np.savez(path, **arrays)
    with pytest.raises(SchemaError, match="head.b_cls"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"not a zip file")
    with pytest.raises(SchemaError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.npz")


def test_bad_config(tmp_path):
    with pytest.raises(SchemaError):
        config_from_text("format = 2\n")
    with pytest.raises(SchemaError):
        config_from_text("format = 1\nother.x = 1\n")
