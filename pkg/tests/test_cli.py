import json
import math
import os

import numpy as np
import pytest
from PIL import Image

from fewdet.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def build_tiny_dataset(tmp_path):
    """Tiny DOTA-style dataset: 2 images, 3 categories, axis-aligned quads."""
    root = tmp_path / "data"
    (root / "labelTxt").mkdir(parents=True)
    (root / "images").mkdir()
    rng = np.random.default_rng(0)

    def quad(cx, cy, w, h):
        return (
            f"{cx - w / 2} {cy - h / 2} {cx + w / 2} {cy - h / 2} "
            f"{cx + w / 2} {cy + h / 2} {cx - w / 2} {cy + h / 2}"
        )

    labels = {
        "img1": [
            (40, 40, "plane"), (100, 40, "plane"), (160, 40, "plane"),
            (40, 100, "ship"), (100, 100, "ship"), (160, 100, "ship"),
            (40, 160, "harbor"), (100, 160, "harbor"),
        ],
        "img2": [
            (60, 60, "plane"), (120, 60, "ship"), (180, 60, "harbor"),
            (60, 120, "harbor"),
        ],
    }
    for image_id, objs in labels.items():
        lines = [f"{quad(cx, cy, 24, 16)} {cat} 0" for cx, cy, cat in objs]
        (root / "labelTxt" / f"{image_id}.txt").write_text("\n".join(lines) + "\n")
        img = rng.integers(0, 256, size=(220, 220, 3), dtype=np.uint8)
        Image.fromarray(img).save(root / "images" / f"{image_id}.png")

    split = tmp_path / "split.json"
    split.write_text(json.dumps({"base": ["plane", "ship"], "novel": ["harbor"]}))
    return str(root), str(split)


@pytest.fixture
def dataset(tmp_path):
    return build_tiny_dataset(tmp_path)


class TestIou:
    def test_identical(self, capsys):
        code, out, _ = run(capsys, "iou", "--a", "0,0,2,2,0", "--b", "0,0,2,2,0")
        assert code == 0 and out.strip() == "1.000000"

    def test_disjoint(self, capsys):
        code, out, _ = run(capsys, "iou", "--a", "0,0,2,2,0", "--b", "50,0,2,2,0")
        assert code == 0 and out.strip() == "0.000000"

    def test_45_degree_pair(self, capsys):
        code, out, _ = run(
            capsys, "iou", "--a", "0,0,2,2,0", "--b", f"0,0,2,2,{math.pi / 4}"
        )
        assert code == 0 and out.strip().startswith("0.7071")

    def test_hbb_mode(self, capsys):
        code, out, _ = run(
            capsys, "iou", "--mode", "hbb", "--a", "0,0,2,2", "--b", "1,0,3,2"
        )
        assert code == 0 and out.strip() == "0.333333"

    def test_malformed_box(self, capsys):
        code, _, err = run(capsys, "iou", "--a", "0,0,2", "--b", "0,0,2,2,0")
        assert code == 2 and "malformed" in err


class TestTile:
    def test_stride_arithmetic(self, capsys):
        code, out, _ = run(capsys, "tile", "--width", "2000", "--height", "1024")
        assert code == 0
        payload = json.loads(out)
        xs = sorted({w["x"] for w in payload["windows"]})
        assert xs == [0, 824, 976]
        assert payload["tool_version"]
        assert payload["resolved_config"]["stride"] == 824


class TestSampleShots:
    def test_manifest_and_determinism(self, dataset, tmp_path, capsys):
        root, split = dataset
        out1 = tmp_path / "ep1.json"
        out2 = tmp_path / "ep2.json"
        for out in (out1, out2):
            code, _, _ = run(
                capsys, "sample-shots", "--dataset", root, "--k", "2",
                "--seed", "7", "--split", split, "--output", str(out),
            )
            assert code == 0
        assert out1.read_bytes() == out2.read_bytes()
        manifest = json.loads(out1.read_text())
        assert manifest["k"] == 2 and manifest["seed"] == 7
        assert len(manifest["selected"]) == 6  # 3 categories x 2 shots
        assert manifest["masked"]

    def test_infeasible_exit_code(self, dataset, capsys):
        root, split = dataset
        code, _, err = run(
            capsys, "sample-shots", "--dataset", root, "--k", "50",
            "--seed", "1", "--split", split,
        )
        assert code == 3 and "instances" in err

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "sample-shots", "--dataset", str(tmp_path / "nope"),
            "--k", "1", "--seed", "0",
        )
        assert code == 4


class TestMask:
    def test_masking_pipeline(self, dataset, tmp_path, capsys):
        root, split = dataset
        manifest = tmp_path / "ep.json"
        code, _, _ = run(
            capsys, "sample-shots", "--dataset", root, "--k", "1",
            "--seed", "3", "--split", split, "--output", str(manifest),
        )
        assert code == 0
        out_dir = tmp_path / "masked"
        code, _, _ = run(
            capsys, "mask", "--manifest", str(manifest),
            "--image-root", os.path.join(root, "images"),
            "--output-dir", str(out_dir), "--sigma", "4",
        )
        assert code == 0
        entry = json.loads(manifest.read_text())["masked"][0]
        src = np.asarray(Image.open(os.path.join(root, "images", entry["image"] + ".png")))
        dst = np.asarray(Image.open(out_dir / (entry["image"] + ".png")))
        assert not np.array_equal(src, dst)
        # pixels far from any region are untouched
        assert np.array_equal(src[210:, 210:], dst[210:, 210:])

    def test_missing_image(self, dataset, tmp_path, capsys):
        manifest = tmp_path / "m.json"
        manifest.write_text(json.dumps({"masked": [{"image": "ghost", "regions": []}]}))
        code, _, err = run(
            capsys, "mask", "--manifest", str(manifest),
            "--image-root", str(tmp_path), "--output-dir", str(tmp_path / "o"),
        )
        assert code == 4 and "missing image" in err


class TestEval:
    def make_detections(self, root, path, perfect=True):
        # detections mirror the ground truth boxes exactly
        from fewdet.cli import load_dataset

        index = load_dataset(root)
        lines = []
        for inst in index.instances:
            b = inst.box
            cx = b.cx if perfect else b.cx + 500
            lines.append(
                json.dumps(
                    {
                        "image": inst.image_id,
                        "category": index.categories[inst.category_id],
                        "box": [cx, b.cy, b.w, b.h, b.angle],
                        "score": 0.9,
                    }
                )
            )
        path.write_text("\n".join(lines) + "\n")

    def test_perfect_detector(self, dataset, tmp_path, capsys):
        root, split = dataset
        dets = tmp_path / "dets.jsonl"
        self.make_detections(root, dets)
        out = tmp_path / "report.json"
        code, _, err = run(
            capsys, "eval", "--dataset", root, "--detections", str(dets),
            "--split", split, "--output", str(out),
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report["all_map"] == pytest.approx(1.0)
        assert report["novel_map"] == pytest.approx(1.0)
        assert "plane" in report["per_class"]
        assert "mAP" in err  # table on stderr

    def test_all_misses(self, dataset, tmp_path, capsys):
        root, split = dataset
        dets = tmp_path / "dets.jsonl"
        self.make_detections(root, dets, perfect=False)
        out = tmp_path / "report.json"
        code, _, _ = run(
            capsys, "eval", "--dataset", root, "--detections", str(dets),
            "--split", split, "--output", str(out),
        )
        assert code == 0
        assert json.loads(out.read_text())["all_map"] == 0.0

    def test_schema_violation(self, dataset, tmp_path, capsys):
        root, split = dataset
        dets = tmp_path / "bad.jsonl"
        dets.write_text('{"image": "img1", "category": "plane"}\n')
        code, _, err = run(
            capsys, "eval", "--dataset", root, "--detections", str(dets),
            "--split", split,
        )
        assert code == 2 and ":1:" in err


class TestTrainToy:
    def config(self, tmp_path, **overrides):
        cfg = {
            "synthetic": {"seed": 0, "batch_size": 8},
            "contrastive": {"tau": 0.2, "lam": 0.3, "capacity": 64},
            "iterations": 30,
        }
        cfg.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    def test_artifacts_written(self, tmp_path, capsys):
        cfg = self.config(tmp_path)
        out_dir = tmp_path / "run"
        code, _, _ = run(capsys, "train-toy", "--config", cfg, "--output-dir", str(out_dir))
        assert code == 0
        for name in ("loss_curve.csv", "metrics.json", "embeddings.csv", "bank.json"):
            assert (out_dir / name).exists()
        metrics = json.loads((out_dir / "metrics.json").read_text())
        assert metrics["bank_occupancy"] == 64
        assert metrics["resolved_config"]["iterations"] == 30

    def test_deterministic_artifacts(self, tmp_path, capsys):
        cfg = self.config(tmp_path)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        for d in (d1, d2):
            code, _, _ = run(capsys, "train-toy", "--config", cfg, "--output-dir", str(d))
            assert code == 0
        for name in ("loss_curve.csv", "embeddings.csv", "bank.json"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_zero_iterations(self, tmp_path, capsys):
        cfg = self.config(tmp_path, iterations=0)
        code, _, _ = run(capsys, "train-toy", "--config", cfg, "--output-dir", str(tmp_path / "z"))
        assert code == 0

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"contrastive": {"tau": -1}}')
        code, _, err = run(capsys, "train-toy", "--config", str(path), "--output-dir", str(tmp_path / "o"))
        assert code == 2

    def test_missing_config(self, tmp_path, capsys):
        code, _, _ = run(
            capsys, "train-toy", "--config", str(tmp_path / "none.json"),
            "--output-dir", str(tmp_path / "o"),
        )
        assert code == 4


class TestGradcheck:
    def test_small_pass(self, tmp_path, capsys):
        out = tmp_path / "g.json"
        code, _, _ = run(
            capsys, "gradcheck", "--instances", "5", "--seed", "0", "--output", str(out)
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report["pass"] and report["max_rel_err"] < 1e-5

    def test_vacuous_pass(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--instances", "0", "--seed", "0")
        assert code == 0 and json.loads(out)["pass"]

    def test_corrupt_self_test_fails(self, capsys):
        code, out, _ = run(
            capsys, "gradcheck", "--instances", "3", "--seed", "0", "--self-test-corrupt"
        )
        assert code == 5 and not json.loads(out)["pass"]

    def test_deterministic_output(self, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            run(capsys, "gradcheck", "--instances", "3", "--seed", "9", "--output", str(out))
        assert a.read_bytes() == b.read_bytes()
