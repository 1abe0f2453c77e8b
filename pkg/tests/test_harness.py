import dataclasses
import json
import random

import numpy as np
import pytest

from lumen import cli
from lumen import dataset as ds
from lumen import evaluation as ev
from lumen import overlay as ov
from lumen.annotations import AnnotationRecord, read_annotations, write_annotations
from lumen.lightmath import LightColor, planckian_rgb, rgb_angular_error_deg
from lumen.probe import DIFFUSE_PROBE, SPECULAR_PROBE, CircleAnnotation, ProbeRig
from lumen.renderer import tonemap_encode
from lumen.scenegen import LightGT

N = 12
SIZE = 16


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    ds.generate_dataset(ds.DatasetConfig(n=N, seed=7, size=SIZE), out, threads=1)
    return out


@pytest.fixture(scope="module")
def checkpoint(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = cli.main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "1", "--batch", "4"])
    assert rc == 0
    return out / "model.lpckpt"


class TestDataset:
    def test_byte_identical_across_threads(self, tmp_path, data_dir):
        ds.generate_dataset(ds.DatasetConfig(n=N, seed=7, size=SIZE), tmp_path, threads=4)
        assert tree_bytes(tmp_path) == tree_bytes(data_dir)

    def test_records_check_out(self, data_dir):
        m = ds.read_manifest(data_dir)
        assert len(m.records) == N
        for rec in m.records:
            assert ds.check_record(rec, data_dir, SIZE) == []

    def test_tampered_gt_detected(self, data_dir):
        rec = ds.read_manifest(data_dir).records[0]
        bad = dataclasses.replace(rec, gt=dataclasses.replace(rec.gt, delta_pan=rec.gt.delta_pan + 1e-6))
        assert any("GT" in p for p in ds.check_record(bad, data_dir))

    def test_missing_image(self, data_dir):
        rec = dataclasses.replace(ds.read_manifest(data_dir).records[0], image="images/nope.png")
        assert ds.check_record(rec, data_dir)[0].startswith("missing image")

    def test_single_object_mode(self, tmp_path):
        m = ds.generate_dataset(ds.DatasetConfig(n=4, seed=1, size=16, single_object=True), tmp_path)
        assert all(len(r.scene.objects) == 1 for r in m.records)

    def test_manifest_roundtrip(self, data_dir, tmp_path):
        m = ds.read_manifest(data_dir)
        ds.write_manifest(tmp_path / "m.jsonl", m.records, m.meta)
        again = ds.read_manifest(tmp_path / "m.jsonl")
        assert again.records == m.records and again.meta == m.meta

    def test_manifest_header(self, data_dir):
        header = json.loads((data_dir / ds.MANIFEST_NAME).read_text().splitlines()[0])
        assert header["format"] == ds.MANIFEST_FORMAT and header["version"] == ds.MANIFEST_VERSION

    def test_split_fractions(self):
        splits = [ds.split_for(0, i) for i in range(5000)]
        for name, frac in zip(ds.SPLITS, (0.8, 0.1, 0.1)):
            assert abs(splits.count(name) / 5000 - frac) < 0.02

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ds.DatasetError, match="file"):
            ds.generate_dataset(ds.DatasetConfig(n=1, size=16), blocker / "sub")


def stub(offset_pan=0.0, offset_tilt=0.0, color=None):
    def run(images, _gts):
        return [(g.delta_pan + offset_pan, g.delta_tilt + offset_tilt, color or g.color) for g in _gts]

    return run


def report_for(manifest, root, predictor_fn, split=None):
    recs = manifest.records if split is None else manifest.split(split)
    by_index = iter(recs)

    def predictor(images):
        return predictor_fn(images, [next(by_index).gt for _ in range(len(images))])

    return ev.evaluate(predictor, manifest, split, root, batch_size=5)


class TestEvaluation:
    def test_perfect(self, data_dir):
        r = report_for(ds.read_manifest(data_dir), data_dir, stub())
        assert all(r.mean(c) == 0.0 for c in ev.COLUMNS)

    def test_constant_pan_offset(self, data_dir):
        r = report_for(ds.read_manifest(data_dir), data_dir, stub(offset_pan=10.0))
        assert r.mean("pan") == pytest.approx(10.0, abs=1e-9)
        assert r.mean("tilt") == 0.0

    def test_direction_at_horizon(self):
        s = ev.sample_error(0, (10.0, 0.0, (1, 1, 1)), LightGT(0.0, 0.0, LightColor(1, 1, 1)))
        assert s.direction == pytest.approx(10.0, abs=1e-9)

    def test_empty_split(self, data_dir):
        m = ds.read_manifest(data_dir)
        with pytest.raises(ValueError):
            ev.evaluate(stub(), ds.Manifest([], m.meta), "test", data_dir)

    @pytest.mark.parametrize(
        "tilt, level", [(30.0, 1), (49.9, 1), (50.0, 2), (69.0, 2), (70.0, 3), (75.0, 3), (90.0, 3), (25.0, None)]
    )
    def test_tilt_level(self, tilt, level):
        assert ev.tilt_level(tilt) == level

    @pytest.mark.parametrize(
        "dpan, quadrant", [(0.0, "front"), (44.0, "front"), (-44.0, "front"), (90.0, "right"), (180.0, "back"), (-90.0, "left")]
    )
    def test_pan_quadrant(self, dpan, quadrant):
        assert ev.pan_quadrant(dpan) == quadrant

    def test_front_back(self):
        assert ev.front_or_back(180.0) == "back" and ev.front_or_back(-90.0) == "front"

    def _synthetic_report(self, n=200, seed=0):
        rng = np.random.default_rng(seed)
        samples = [
            ev.SampleError(i, *rng.uniform(0, 30, 4), float(rng.uniform(-180, 180)), float(rng.choice(np.arange(30, 91, 5))))
            for i in range(n)
        ]
        return ev.EvalReport(samples)

    def test_pan_table_filters_tilt(self):
        r = self._synthetic_report()
        rows = ev.stratify(r, "pan")
        expected = sum(1 for s in r.samples if 30 <= s.light_tilt <= 70)
        assert sum(row.count for row in rows) == expected < len(r.samples)

    @pytest.mark.parametrize("scheme", ev.SCHEMES)
    @pytest.mark.parametrize("stat", ["mean", "median"])
    def test_order_independent(self, scheme, stat):
        r = self._synthetic_report()
        shuffled = list(r.samples)
        random.Random(3).shuffle(shuffled)
        assert ev.stratify(r, scheme, stat) == ev.stratify(ev.EvalReport(shuffled), scheme, stat)

    def test_table_cells_match_samples(self):
        r = self._synthetic_report()
        rows = {row.label: row for row in ev.stratify(r, "tilt")}
        members = [s.direction for s in r.samples if 70 <= s.light_tilt <= 90]
        assert rows["level 3 [70,90]"].direction == ev.aggregate(members)

    def test_format_table(self):
        text = ev.format_table(ev.stratify(self._synthetic_report(), "frontback"), "Light")
        lines = text.splitlines()
        assert lines[0].split()[:2] == ["Light", "N"] and len(lines) >= 3


class TestOverlay:
    def test_identical_spheres(self):
        base = np.zeros((64, 64, 3), dtype=np.uint8)
        pred = (30.0, -45.0, (1.0, 0.8, 0.6))
        img = ov.render_overlay(pred, pred, base)
        d = max(6, 64 // 5)
        m = max(1, d // 8)
        gt_patch = img[m : m + d, 64 - m - d : 64 - m]
        pr_patch = img[m : m + d, 64 - 2 * (m + d) : 64 - 2 * (m + d) + d]
        np.testing.assert_array_equal(gt_patch, pr_patch)

    def test_zenith_shadow_collapses(self):
        assert ov.pole_shadow_tip((10.0, 20.0), 8.0, 37.0, -90.0) == (10.0, 20.0)

    def test_lower_light_longer_shadow(self):
        def length(t):
            x, y = ov.pole_shadow_tip((0.0, 0.0), 8.0, 90.0, -t)
            return np.hypot(x, y)

        assert length(30.0) > length(60.0) > 0.0

    def test_same_dimensions_and_base_untouched(self):
        base = np.full((40, 50, 3), 90, dtype=np.uint8)
        out = ov.render_overlay((0.0, -60.0, (1, 1, 1)), None, base)
        assert out.shape == base.shape and out.dtype == np.uint8
        assert (base == 90).all() and not (out == 90).all()

    def test_light_vector_camera_frame(self):
        np.testing.assert_allclose(ov.light_vector(90.0, 0.0), (1, 0, 0), atol=1e-12)
        np.testing.assert_allclose(ov.light_vector(0.0, -90.0), (0, 1, 0), atol=1e-12)


class TestAnnotations:
    def test_roundtrip(self, tmp_path):
        recs = [
            AnnotationRecord("a.png", CircleAnnotation(10.5, 12.25, 5.0), CircleAnnotation(30.0, 12.0, 6.0, "diffuse"), "ref.png"),
            AnnotationRecord("b.png", CircleAnnotation(9.0, 9.0, 4.0), CircleAnnotation(20.0, 9.0, 4.0, "diffuse")),
        ]
        write_annotations(tmp_path / "ann.jsonl", recs)
        assert read_annotations(tmp_path / "ann.jsonl") == recs

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.jsonl").write_text('{"format": "other", "version": 1}\n')
        with pytest.raises(ValueError):
            read_annotations(tmp_path / "x.jsonl")


class TestCli:
    def test_gen(self, tmp_path, capsys):
        assert cli.main(["gen", "--n", "3", "--seed", "2", "--out", str(tmp_path), "--size", "16"]) == 0
        assert len(list((tmp_path / "images").glob("*.png"))) == 3
        assert (tmp_path / ds.MANIFEST_NAME).exists()
        assert "wrote 3 images" in capsys.readouterr().out

    def test_train_outputs(self, checkpoint):
        log_lines = (checkpoint.parent / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 1 and "train_loss" in json.loads(log_lines[0])
        assert (checkpoint.parent / "last.lpckpt").exists()

    def test_predict_line(self, data_dir, checkpoint, tmp_path, capsys):
        img = data_dir / "images" / "00000.png"
        overlay = tmp_path / "ov.png"
        assert cli.main(["predict", str(img), "--checkpoint", str(checkpoint), "--overlay", str(overlay)]) == 0
        line = capsys.readouterr().out.strip()
        pan, tilt, rgb = line.split()
        assert pan.startswith("pan=") and tilt.startswith("tilt=") and rgb.startswith("rgb=")
        float(pan[4:]), float(tilt[5:])
        assert len(rgb[4:].split(",")) == 3
        assert ds.load_png(overlay).shape == (SIZE, SIZE, 3)

    def test_eval_stratified(self, data_dir, checkpoint, capsys):
        rc = cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(checkpoint), "--split", "train", "--stratify", "tilt"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("Tilt range")
        assert sum(ln.startswith("level") for ln in lines) == 3

    def test_eval_median(self, data_dir, checkpoint, capsys):
        assert cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(checkpoint), "--split", "train", "--median"]) == 0
        assert "Direction" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        assert cli.main(["gen", "--bogus"]) == 2

    def test_no_command(self, capsys):
        assert cli.main([]) == 2

    def test_runtime_error(self, tmp_path, capsys):
        assert cli.main(["eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "none.lpckpt")]) == 1
        assert "error" in capsys.readouterr().err

    def test_predict_wrong_resolution(self, checkpoint, tmp_path, capsys):
        ds.save_png(tmp_path / "big.png", np.zeros((SIZE * 2, SIZE * 2, 3), dtype=np.uint8))
        assert cli.main(["predict", str(tmp_path / "big.png"), "--checkpoint", str(checkpoint)]) == 1

    def test_gradcheck_ops(self, capsys):
        assert cli.main(["gradcheck", "--ops-only"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "PASS conv2d" in out


@pytest.fixture(scope="module")
def probe_scene(tmp_path_factory):
    """Two-panel probe photo: chrome ball on the left, matte ball on the right."""
    root = tmp_path_factory.mktemp("probe")
    rig = ProbeRig(size=96)
    color = planckian_rgb(3000.0)
    spec = tonemap_encode(rig.render(30.0, 40.0, SPECULAR_PROBE, tuple(color)))
    diff = tonemap_encode(rig.render(30.0, 40.0, DIFFUSE_PROBE, tuple(color)))
    ref = tonemap_encode(rig.render(0.0, 10.0, SPECULAR_PROBE))
    blank = np.zeros_like(ref)
    ds.save_png(root / "scene.png", np.hstack([spec, diff]))
    ds.save_png(root / "ref.png", np.hstack([ref, blank]))
    c = rig.circle()
    ann = AnnotationRecord(
        "scene.png",
        c,
        CircleAnnotation(c.cx + rig.size, c.cy, c.radius, "diffuse"),
        "ref.png",
    )
    write_annotations(root / "ann.jsonl", [ann])
    return root, color


class TestProbeCli:
    @pytest.mark.parametrize("mask", [False, True])
    def test_probe_command(self, probe_scene, tmp_path, mask):
        root, color = probe_scene
        argv = ["probe", str(root / "ann.jsonl"), "--out", str(tmp_path)]
        rc = cli.main(argv + (["--mask-spheres"] if mask else []))
        assert rc == 0
        res = json.loads((tmp_path / "probe_results.jsonl").read_text().splitlines()[0])
        assert abs(res["pan"] - 30.0) < 3.0 and abs(res["tilt"] - 40.0) < 3.0
        assert rgb_angular_error_deg(res["color"], color) < 5.0
        m = ds.read_manifest(tmp_path)
        assert m.records[0].gt.delta_pan == res["pan"] and m.records[0].gt.delta_tilt == -res["tilt"]
        out_img = ds.load_png(tmp_path / m.records[0].image)
        original = ds.load_png(root / "scene.png")
        assert (out_img == original).all() != mask

    def test_masked_differs_only_in_circles(self, probe_scene, tmp_path):
        root, _ = probe_scene
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["probe", str(root / "ann.jsonl"), "--out", str(a)])
        cli.main(["probe", str(root / "ann.jsonl"), "--out", str(b), "--mask-spheres"])
        assert (a / "probe_results.jsonl").read_bytes() == (b / "probe_results.jsonl").read_bytes()
        ann = read_annotations(root / "ann.jsonl")[0]
        ia, ib = ds.load_png(a / "images/00000.png"), ds.load_png(b / "images/00000.png")
        h, w = ia.shape[:2]
        inside = ann.specular.pixel_mask(h, w, 1.1) | ann.diffuse.pixel_mask(h, w, 1.1)
        np.testing.assert_array_equal(ia[~inside], ib[~inside])
