import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tilscope.errors import ConfigurationError, OutOfBoundsError, ShapeError
from tilscope.predictors import (
    DETECTION_CLASSES,
    CallablePredictor,
    ConstantPredictor,
    FileBackedPredictor,
    IdentityPredictor,
    IntensityHeuristicPredictor,
    PredictionMaps,
    PredictorSpec,
    Window,
    ensemble_average,
    make_builtin_predictor,
)
from tilscope.raster import Raster, Resolution, save_raster

rgb_patches = hnp.arrays(np.uint8, st.tuples(st.integers(1, 16), st.integers(1, 16), st.just(3)))


def test_constant_predictor():
    out = ConstantPredictor(0.7).predict_patch(np.zeros((9, 5, 3), dtype=np.uint8))
    assert out.classes == ("tumor", "stroma")
    assert np.all(out["tumor"] == 0.7) and out["tumor"].shape == (9, 5)


def test_constant_range_checked():
    with pytest.raises(ConfigurationError):
        ConstantPredictor(1.2)


def test_identity_black_patch_is_zero():
    out = IdentityPredictor().predict_patch(np.zeros((4, 4, 3), dtype=np.uint8))
    assert not out["stroma"].any()


def test_identity_uses_green_channel():
    patch = np.zeros((2, 2, 3), dtype=np.uint8)
    patch[..., 1] = 51
    patch[..., 0] = 255
    assert np.all(IdentityPredictor().predict_patch(patch)["tumor"] == 0.2)


def _bump(size=128, cx=64, cy=64, sigma=6.0):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))


def test_file_backed_crop_reproduces_bump():
    bump = _bump()
    pred = FileBackedPredictor({"lymphocyte": Raster(bump)}, DETECTION_CLASSES)
    win = Window(32, 40, 64, 48, Resolution(), (128, 128))
    out = pred.predict_patch(np.zeros((48, 64, 3), dtype=np.uint8), win)
    assert np.array_equal(out["lymphocyte"], bump[40:88, 32:96])


def test_file_backed_zero_fills_padding_outside_level():
    src = Raster(np.ones((10, 10)))
    pred = FileBackedPredictor({"lymphocyte": src}, DETECTION_CLASSES)
    out = pred.predict_patch(np.zeros((6, 6, 3)), Window(-2, 7, 6, 6, Resolution(), (10, 10)))["lymphocyte"]
    expected = np.zeros((6, 6))
    expected[:3, 2:] = 1
    assert np.array_equal(out, expected)


def test_file_backed_window_outside_source_raises():
    pred = FileBackedPredictor({"lymphocyte": Raster(np.ones((10, 10)))}, DETECTION_CLASSES)
    with pytest.raises(OutOfBoundsError):
        pred.predict_patch(np.zeros((8, 8, 3)), Window(6, 6, 8, 8, Resolution(), (20, 20)))


def test_file_backed_serves_coarser_level():
    base = np.zeros((8, 8), dtype=np.uint8)
    base[:2, :2] = 255
    pred = FileBackedPredictor({"tumor": Raster(base), "stroma": Raster(base)})
    out = pred.predict_patch(np.zeros((4, 4, 3)), Window(0, 0, 4, 4, Resolution(1.0, 1.0), (4, 4)))
    assert out["tumor"][0, 0] == 1.0 and out["tumor"][1, 1] == 0.0


def test_file_backed_missing_path(tmp_path):
    with pytest.raises(ConfigurationError):
        make_builtin_predictor(PredictorSpec("file_backed", source=str(tmp_path / "nothing")))


def test_file_backed_from_prefix(tmp_path):
    save_raster(Raster(np.full((4, 4), 128, dtype=np.uint8)), tmp_path / "s.lymphocyte.png")
    pred = make_builtin_predictor(PredictorSpec("file_backed", DETECTION_CLASSES, source=str(tmp_path / "s")))
    out = pred.predict_patch(np.zeros((4, 4, 3)), Window(0, 0, 4, 4, Resolution(), (4, 4)))
    assert np.all(out["lymphocyte"] == 128 / 255)


def test_builtin_constant_full_ones():
    pred = make_builtin_predictor(PredictorSpec("constant", value=1.0))
    out = pred.predict_patch(np.zeros((128, 128, 3), dtype=np.uint8))
    assert out.shape == (128, 128) and np.all(out["tumor"] == 1.0)


def test_heuristic_marks_blob_pixels_exactly():
    patch = np.full((40, 40, 3), 230, dtype=np.uint8)
    yy, xx = np.mgrid[0:40, 0:40]
    blob = np.zeros((40, 40), dtype=bool)
    for cx, cy in [(10, 10), (28, 25)]:
        blob |= (xx - cx) ** 2 + (yy - cy) ** 2 <= 25
    patch[blob] = (40, 42, 125)
    out = make_builtin_predictor(PredictorSpec("intensity_heuristic", DETECTION_CLASSES)).predict_patch(patch)
    assert np.array_equal(out["lymphocyte"], blob.astype(float))


def test_heuristic_requires_lymphocyte_class():
    with pytest.raises(ConfigurationError):
        IntensityHeuristicPredictor(classes=("tumor", "stroma"))


def test_normalization_rejected_for_raw_intensity_kinds():
    with pytest.raises(ConfigurationError):
        make_builtin_predictor(PredictorSpec("identity", normalize=True))


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        make_builtin_predictor(PredictorSpec("resnet"))


def test_callable_predictor_normalizes():
    seen = {}

    def model(x):
        seen["x"] = x
        return np.full(x.shape[:2] + (2,), 0.25)

    pred = CallablePredictor(model, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
    patch = np.full((3, 3, 3), 255, dtype=np.uint8)
    out = pred.predict_patch(patch)
    assert np.allclose(seen["x"], 1.0)
    assert np.all(out["stroma"] == 0.25)


def test_callable_predictor_shape_checked():
    pred = CallablePredictor(lambda x: np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        pred.predict_patch(np.zeros((3, 3, 3), dtype=np.uint8))


def _maps(v):
    return PredictionMaps({"tumor": np.full((2, 2), v), "stroma": np.full((2, 2), v)})


def test_ensemble_examples():
    assert np.all(ensemble_average([_maps(0.3)])["tumor"] == 0.3)
    assert ensemble_average([_maps(0.0), _maps(0.6), _maps(0.9)])["tumor"][0, 0] == pytest.approx(0.5, abs=1e-15)
    assert np.all(ensemble_average([_maps(0.4)] * 3)["stroma"] == 0.4)


@given(st.lists(hnp.arrays(np.float64, (3, 3), elements=st.floats(0, 1)), min_size=1, max_size=5))
def test_ensemble_within_member_range(members):
    maps = [PredictionMaps({"tumor": m, "stroma": m}) for m in members]
    avg = ensemble_average(maps)["tumor"]
    stack = np.stack(members)
    assert np.all(avg >= stack.min(axis=0) - 1e-15) and np.all(avg <= stack.max(axis=0) + 1e-15)


@settings(max_examples=30)
@given(rgb_patches)
def test_builtins_deterministic(patch):
    for pred in (IdentityPredictor(), ConstantPredictor(0.4), IntensityHeuristicPredictor()):
        a, b = pred.predict_patch(patch), pred.predict_patch(patch.copy())
        for c in a.classes:
            assert np.array_equal(a[c], b[c])


def test_file_backed_reads_only_window():
    # a source that records every index it is sliced with
    class Probe(np.ndarray):
        touched = []

        def __getitem__(self, key):
            Probe.touched.append(key)
            return super().__getitem__(key)

    src = np.arange(400, dtype=np.float64).reshape(20, 20) / 400
    pred = FileBackedPredictor({"lymphocyte": Raster(src)}, DETECTION_CLASSES)
    raster = pred._levels["lymphocyte"][0.5]
    raster.data = src.view(Probe)
    pred.predict_patch(np.zeros((5, 5, 3)), Window(3, 4, 5, 5, Resolution(), (20, 20)))
    slices = [k for k in Probe.touched if isinstance(k, tuple)]
    assert slices == [(slice(4, 9), slice(3, 8))]
