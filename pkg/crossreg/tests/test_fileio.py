"""Tests for on-disk formats: PLY, PGM, meta.txt, records, weights and INI configs."""

import os

import numpy as np
import pytest

from errors import ConfigError, FormatError, StorageError
from models import DatasetConfig, MaskSource, PairRecord, PipelineConfig, PointCloud, RunManifest, ScenePair, ViewImage
from stages import core, fileio


# ── PLY ─────────────────────────────────────────────────────────────────

class TestPly:

    def test_round_trip_is_byte_stable(self, tmp_path, rng):
        cloud = PointCloud(points=rng.normal(scale=30.0, size=(40, 3)), intensity=rng.uniform(size=40))
        path = str(tmp_path / "cloud.ply")
        fileio.write_ply(path, cloud)
        loaded = fileio.read_ply(path)
        np.testing.assert_allclose(loaded.points, cloud.points, rtol=1e-6)
        assert fileio.format_ply(loaded) == fileio.format_ply(cloud)

    def test_without_intensity(self, tmp_path):
        path = str(tmp_path / "cloud.ply")
        fileio.write_ply(path, PointCloud(points=[[1.0, 2.0, 3.0]]))
        loaded = fileio.read_ply(path)
        assert loaded.intensity is None
        assert loaded.points.tolist() == [[1.0, 2.0, 3.0]]

    def test_bad_vertex_reports_its_offset(self, tmp_path):
        text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n1 x 3\n"
        path = tmp_path / "bad.ply"
        path.write_text(text)
        with pytest.raises(FormatError) as info:
            fileio.read_ply(str(path))
        assert info.value.offset == text.index("1 x 3")
        assert info.value.exit_code == 4

    def test_missing_magic(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text("plx\n")
        with pytest.raises(FormatError, match="magic"):
            fileio.read_ply(str(path))

    def test_vertex_count_mismatch(self, tmp_path):
        path = tmp_path / "short.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                        "property float z\nend_header\n1 2 3\n")
        with pytest.raises(FormatError, match="declared 3 vertices, found 1"):
            fileio.read_ply(str(path))

    def test_binary_rejected(self, tmp_path):
        path = tmp_path / "binary.ply"
        path.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(FormatError, match="ASCII"):
            fileio.read_ply(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(StorageError):
            fileio.read_ply(str(tmp_path / "nope.ply"))


# ── PGM and meta ────────────────────────────────────────────────────────

class TestPgmAndMeta:

    def test_pgm_round_trip(self, tmp_path, rng):
        image = ViewImage(pixels=rng.uniform(size=(9, 12)))
        path = str(tmp_path / "view.pgm")
        fileio.write_pgm(path, image)
        loaded = fileio.read_pgm(path)
        assert (loaded.height, loaded.width) == (9, 12)
        np.testing.assert_allclose(loaded.pixels, image.pixels, atol=0.5 / fileio.PGM_MAXVAL + 1e-12)

    def test_pgm_pixel_count(self, tmp_path):
        path = tmp_path / "view.pgm"
        path.write_text("P2\n8 8\n255\n" + " ".join(["1"] * 63) + "\n")
        with pytest.raises(FormatError, match="expected 64 pixels"):
            fileio.read_pgm(str(path))

    def test_pgm_value_above_maxval(self, tmp_path):
        path = tmp_path / "view.pgm"
        path.write_text("P2\n8 8\n255\n" + " ".join(["1"] * 63 + ["256"]) + "\n")
        with pytest.raises(FormatError, match="invalid pixel value"):
            fileio.read_pgm(str(path))

    def test_meta_round_trip(self, tmp_path, rng):
        gt = core.random_transform(rng)
        cloud = PointCloud(points=rng.normal(size=(5, 3)))
        pair = ScenePair(source=cloud, target=cloud, gt=gt, overlap=0.625, seeds={"scene": 3, "pair": 9}, name="pair_007")
        path = str(tmp_path / "meta.txt")
        fileio.write_text(path, fileio.format_meta(pair))
        meta = fileio.read_meta(path)
        assert meta["name"] == "pair_007"
        assert meta["overlap"] == 0.625
        assert meta["seeds"] == {"pair": 9, "scene": 3}
        np.testing.assert_array_equal(meta["gt"].rotation, gt.rotation)
        np.testing.assert_array_equal(meta["gt"].translation, gt.translation)

    def test_meta_rejects_reflection(self, tmp_path):
        path = tmp_path / "meta.txt"
        path.write_text("gt: 1 0 0 0 1 0 0 0 -1 0 0 0\n")
        with pytest.raises(FormatError, match="invalid gt transform"):
            fileio.read_meta(str(path))

    def test_meta_needs_twelve_numbers(self, tmp_path):
        path = tmp_path / "meta.txt"
        path.write_text("name: x\ngt: 1 0 0\n")
        with pytest.raises(FormatError) as info:
            fileio.read_meta(str(path))
        assert info.value.offset == len("name: x\n")


# ── Pair directories ────────────────────────────────────────────────────

class TestPairDirectories:

    def test_write_read_and_discover(self, tmp_path, rng):
        cloud = PointCloud(points=rng.normal(size=(20, 3)))
        image = ViewImage(pixels=rng.uniform(size=(8, 8)))
        for k, img in enumerate([image, None]):
            pair = ScenePair(source=cloud, target=cloud, image=img, gt=core.identity(), overlap=0.5,
                             name=fileio.pair_dir_name(k))
            fileio.write_pair(str(tmp_path / fileio.pair_dir_name(k)), pair)
        (tmp_path / "notes").mkdir()

        found = fileio.find_pair_dirs(str(tmp_path))
        assert [os.path.basename(path) for path in found] == ["pair_000", "pair_001"]
        assert fileio.find_pair_dirs(found[0]) == [found[0]]
        assert fileio.read_pair(found[0]).image is not None
        assert fileio.read_pair(found[1]).image is None

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(StorageError):
            fileio.find_pair_dirs(str(tmp_path / "missing"))


# ── Records ─────────────────────────────────────────────────────────────

class TestRecords:

    def test_round_trip(self, tmp_path):
        records = [
            PairRecord(pair="pair_000", estimator="LGR", rre=0.5, rte=0.05, success=True, ir=0.4,
                       superpoint_correspondences=120, dense_correspondences=900),
            PairRecord(pair="pair_001", estimator="LGR", error="stage 'encode' failed: degenerate cloud"),
        ]
        path = str(tmp_path / "records.tsv")
        fileio.write_records(path, records)
        loaded = fileio.read_records(path)
        assert loaded[0] == records[0]
        assert loaded[1].rre is None and loaded[1].error == records[1].error
        assert not loaded[1].success

    def test_six_decimals(self):
        text = fileio.format_records([PairRecord(pair="p", estimator="LGR", rre=1.0 / 3.0)])
        assert "\t0.333333\t" in text

    def test_bad_header(self, tmp_path):
        path = tmp_path / "records.tsv"
        path.write_text("pair\testimator\n")
        with pytest.raises(FormatError, match="unexpected header"):
            fileio.read_records(str(path))

    def test_short_row(self, tmp_path):
        path = tmp_path / "records.tsv"
        path.write_text("\t".join(fileio.RECORD_COLUMNS) + "\npair_000\tLGR\n")
        with pytest.raises(FormatError, match="columns"):
            fileio.read_records(str(path))


# ── Weight containers ───────────────────────────────────────────────────

class TestWeightContainer:

    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "w.bin")
        arrays = [np.arange(6.0).reshape(2, 3), np.array([0.5])]
        fileio.write_weight_container(path, b"TEST", (2, 3), arrays)
        assert fileio.read_weight_header(path, b"TEST") == (2, 3)
        loaded = fileio.read_weight_container(path, b"TEST", [(2, 3), (1,)])
        np.testing.assert_array_equal(loaded[0], arrays[0])
        np.testing.assert_array_equal(loaded[1], arrays[1])

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"TEST")
        with pytest.raises(FormatError, match="truncated header"):
            fileio.read_weight_header(str(path), b"TEST")

    def test_truncated_array_offset(self, tmp_path):
        path = str(tmp_path / "w.bin")
        fileio.write_weight_container(path, b"TEST", (1,), [np.zeros(4)])
        with pytest.raises(FormatError) as info:
            fileio.read_weight_container(path, b"TEST", [(4,), (2,)])
        assert info.value.offset == 16 + 16


# ── INI configuration ───────────────────────────────────────────────────

class TestIniConfig:

    def test_nested_sections_and_lists(self, tmp_path):
        path = tmp_path / "pipeline.ini"
        path.write_text(
            "[pipeline]\nuse_omp = false\nworkers = 3\n\n"
            "[encoder]\nvoxel_sizes = 0.3, 0.6, 1.2\n\n"
            "[vgam]\ntop_k = none\n\n"
            "[estimator]\nvariant = ransac\nransac_iterations = 1000\n"
        )
        cfg = fileio.load_config(str(path), PipelineConfig, "pipeline")
        assert cfg.use_omp is False and cfg.workers == 3
        assert cfg.encoder.voxel_sizes == [0.3, 0.6, 1.2]
        assert cfg.vgam.top_k is None
        assert cfg.estimator.variant.value == "ransac"

    def test_unknown_key_names_line(self, tmp_path):
        path = tmp_path / "pipeline.ini"
        path.write_text("[pipeline]\nworkers = 2\n\n[omp]\nthreshold = 0.5\nthresh = 0.4\n")
        with pytest.raises(ConfigError, match=r"pipeline\.ini:6: \[omp\] thresh: unknown key"):
            fileio.load_config(str(path), PipelineConfig, "pipeline")

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "pipeline.ini"
        path.write_text("[pipeline]\n[decoder]\nx = 1\n")
        with pytest.raises(ConfigError, match=r":2: \[decoder\]: unknown section"):
            fileio.load_config(str(path), PipelineConfig, "pipeline")

    def test_invalid_value_names_line(self, tmp_path):
        path = tmp_path / "dataset.ini"
        path.write_text("[dataset]\nseed = 4\n\n[pair]\nmin_overlap = 0.4\nmax_overlap = 1.5\n")
        with pytest.raises(ConfigError, match=r":6: \[pair\] max_overlap"):
            fileio.load_config(str(path), DatasetConfig, "dataset")

    def test_vector_groups(self, tmp_path):
        path = tmp_path / "dataset.ini"
        path.write_text("[degradation]\noutlier_bounds = -1, -2, -3, 1, 2, 3\n")
        cfg = fileio.load_config(str(path), DatasetConfig, "dataset")
        assert [list(v) for v in cfg.degradation.outlier_bounds] == [[-1.0, -2.0, -3.0], [1.0, 2.0, 3.0]]

    def test_shipped_configs_load(self):
        root = os.path.join(os.path.dirname(os.path.dirname(__file__)), "configs")
        shipped = fileio.load_config(os.path.join(root, "pipeline.ini"), PipelineConfig, "pipeline")
        assert shipped.use_omp
        assert shipped.omp.mask_source == MaskSource.GROUND_TRUTH
        assert shipped.estimator.inlier_threshold == 0.5
        assert shipped.vgam.mutual_rank == 3
        assert fileio.load_config(os.path.join(root, "standard_suite.ini"), DatasetConfig, "dataset").seed == 2024


# ── Manifest ────────────────────────────────────────────────────────────

def test_manifest_written_as_json(tmp_path):
    path = fileio.write_manifest(str(tmp_path), RunManifest(command="gen", seeds={"dataset": 1}))
    assert os.path.basename(path) == "manifest.json"
    assert '"command": "gen"' in open(path).read()
