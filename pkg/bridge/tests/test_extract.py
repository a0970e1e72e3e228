import numpy as np
import pytest
import torch

from conftest import write_png
from cxrbridge.extract import (
    DEFAULT_GRADIENT_TASKS,
    export_gradients,
    extract_rows,
    input_gradients,
    write_feature_csv,
)
from cxrbridge.formats import TASKS, raster_filename
from cxrbridge.metadata import MetadataEntry
from cxrbridge.preprocess import preprocess


def entry(i, patient="p1", timepoint=None):
    return MetadataEntry(
        image_id=f"img{i}.png",
        patient_id=patient,
        timepoint=i if timepoint is None else timepoint,
        sex="male",
        age=50.0,
        survival="survived",
        filename=f"img{i}.png",
    )


@pytest.fixture
def images(tmp_path):
    rng = np.random.default_rng(7)
    out = []
    for i in range(3):
        path = tmp_path / f"img{i}.png"
        write_png(path, rng.integers(0, 256, (64, 64)))
        out.append(preprocess(path))
    return out


class TestExtractRows:
    def test_shapes_and_finiteness(self, standin, images):
        entries = [entry(i) for i in range(3)]
        rows = extract_rows(standin, entries, images)
        assert len(rows) == 3
        for row in rows:
            assert row.outputs.shape == (18,)
            assert row.intermediate.shape == (1024,)
            assert np.all(np.isfinite(row.outputs))
            assert np.all(np.isfinite(row.intermediate))

    def test_sigmoid_of_outputs_in_unit_interval(self, standin, images):
        rows = extract_rows(standin, [entry(i) for i in range(3)], images)
        for row in rows:
            probabilities = 1.0 / (1.0 + np.exp(-row.outputs))
            assert np.all(probabilities > 0.0)
            assert np.all(probabilities < 1.0)

    def test_bit_stable_across_reruns(self, standin, images):
        entries = [entry(i) for i in range(3)]
        first = extract_rows(standin, entries, images, batch_size=2)
        second = extract_rows(standin, entries, images, batch_size=2)
        for a, b in zip(first, second):
            assert np.array_equal(a.outputs, b.outputs)
            assert np.array_equal(a.intermediate, b.intermediate)

    def test_batching_matches_single(self, standin, images):
        entries = [entry(i) for i in range(3)]
        batched = extract_rows(standin, entries, images, batch_size=3)
        singles = extract_rows(standin, entries, images, batch_size=1)
        for a, b in zip(batched, singles):
            assert np.allclose(a.outputs, b.outputs, atol=1e-6)

    def test_length_mismatch_rejected(self, standin, images):
        with pytest.raises(ValueError, match="entries"):
            extract_rows(standin, [entry(0)], images)


class TestFeatureCsvCompatibility:
    """The emitted file must parse through the analysis toolkit unchanged."""

    def test_parses_and_round_trips(self, standin, images, tmp_path):
        cxrseverity = pytest.importorskip("cxrseverity.core_data")
        rows = extract_rows(standin, [entry(i) for i in range(3)], images)
        path = tmp_path / "features.csv"
        write_feature_csv(rows, path)
        table = cxrseverity.parse_features(path)
        assert len(table) == 3
        assert table.has_intermediate
        parsed = table.get("img1.png")
        assert parsed.features.outputs["lung_opacity"] == pytest.approx(
            float(rows[1].outputs[TASKS.index("lung_opacity")])
        )
        assert parsed.features.intermediate == pytest.approx(
            tuple(float(v) for v in rows[1].intermediate)
        )

    def test_without_intermediate_block(self, standin, images, tmp_path):
        cxrseverity = pytest.importorskip("cxrseverity.core_data")
        rows = extract_rows(standin, [entry(i) for i in range(3)], images)
        path = tmp_path / "features.csv"
        write_feature_csv(rows, path, include_intermediate=False)
        table = cxrseverity.parse_features(path)
        assert not table.has_intermediate


class TestGradients:
    def test_default_tasks_and_shape(self, standin, sample_image):
        grads = input_gradients(standin, sample_image)
        assert set(grads) == set(DEFAULT_GRADIENT_TASKS)
        for raster in grads.values():
            assert raster.shape == (224, 224)
            assert raster.dtype == np.float32
            assert np.all(np.isfinite(raster))

    def test_deterministic_for_identical_input(self, standin, sample_image):
        a = input_gradients(standin, sample_image, tasks=("pneumonia",))
        b = input_gradients(standin, sample_image, tasks=("pneumonia",))
        assert np.array_equal(a["pneumonia"], b["pneumonia"])

    def test_matches_central_finite_differences(self, standin, sample_image):
        task = "lung_opacity"
        raster = input_gradients(standin, sample_image, tasks=(task,))[task]
        index = TASKS.index(task)

        def score(pixels: np.ndarray) -> float:
            x = torch.from_numpy(pixels[None, None].astype(np.float32))
            with torch.no_grad():
                return float(standin(x)[0, index])

        rng = np.random.default_rng(3)
        for _ in range(5):
            i, j = int(rng.integers(0, 224)), int(rng.integers(0, 224))
            plus, minus = sample_image.pixels.copy(), sample_image.pixels.copy()
            plus[i, j] += 1.0
            minus[i, j] -= 1.0
            fd = (score(plus) - score(minus)) / 2.0
            scale = max(abs(fd), abs(float(raster[i, j])), 1e-9)
            assert abs(float(raster[i, j]) - fd) / scale < 5e-2

    def test_unknown_task_rejected(self, standin, sample_image):
        with pytest.raises(ValueError, match="unknown tasks"):
            input_gradients(standin, sample_image, tasks=("bogus",))

    def test_export_loads_through_toolkit(self, standin, sample_image, tmp_path):
        saliency = pytest.importorskip("cxrseverity.saliency")
        written = export_gradients(
            standin, sample_image, "img0.png", tmp_path, tasks=("lung_opacity",)
        )
        assert written == [tmp_path / raster_filename("img0.png", "lung_opacity")]
        raster = saliency.load_gradient_raster(written[0])
        assert raster.image_id == "img0.png"
        assert raster.task == "lung_opacity"
        assert raster.values.shape == (224, 224)
        direct = input_gradients(standin, sample_image, tasks=("lung_opacity",))
        assert np.array_equal(raster.values, direct["lung_opacity"])
