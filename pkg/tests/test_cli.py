"""Dataset ingest, flat config handling, and end-to-end command tests."""

import json
from pathlib import Path

import numpy as np
import pytest

from conftest import write_dataset
from lesionpipe.cli import (CONFIG_KEYS, _parse_grid, build_run_config, ingest,
                            load_manifest, main, resolve_config, save_manifest)
from lesionpipe.errors import ConfigError, EmptyDataset

FAST = ["--set", "canvas_rows=64", "--set", "canvas_cols=64",
        "--set", "epochs=1", "--set", "batch_size=4",
        "--set", "augment_multiplier=0", "--set", "folds=2"]


class TestIngest:
    def test_counts_and_entries(self, dataset_dir):
        manifest = ingest(dataset_dir)
        assert manifest.counts() == {"melanoma": 5, "nevus": 5}
        assert manifest.skipped == 0
        assert len(manifest.fingerprint) == 64
        assert all(e.label in (0, 1) for e in manifest.entries)

    def test_entries_sorted_by_path(self, dataset_dir):
        manifest = ingest(dataset_dir)
        per_class = {}
        for e in manifest.entries:
            per_class.setdefault(e.label, []).append(e.path)
        for paths in per_class.values():
            assert paths == sorted(paths)

    def test_unreadable_file_skipped(self, tmp_path):
        write_dataset(tmp_path, n_per_class=2)
        (tmp_path / "melanoma" / "broken.jpg").write_bytes(b"not an image")
        manifest = ingest(tmp_path)
        assert manifest.skipped == 1
        assert manifest.counts() == {"melanoma": 2, "nevus": 2}

    def test_non_image_suffix_ignored(self, tmp_path):
        write_dataset(tmp_path, n_per_class=2)
        (tmp_path / "melanoma" / "notes.txt").write_text("hello")
        manifest = ingest(tmp_path)
        assert manifest.skipped == 0
        assert manifest.counts()["melanoma"] == 2

    def test_alternate_class_spelling(self, tmp_path):
        write_dataset(tmp_path, n_per_class=2)
        (tmp_path / "naevus").rename(tmp_path / "nevus")
        manifest = ingest(tmp_path)
        assert manifest.counts() == {"melanoma": 2, "nevus": 2}

    def test_missing_class_rejected(self, tmp_path):
        write_dataset(tmp_path, n_per_class=2)
        for f in (tmp_path / "naevus").iterdir():
            f.unlink()
        with pytest.raises(EmptyDataset):
            ingest(tmp_path)

    def test_fingerprint_tracks_content(self, tmp_path):
        write_dataset(tmp_path, n_per_class=2)
        before = ingest(tmp_path).fingerprint
        some_file = next((tmp_path / "melanoma").glob("*.png"))
        write_dataset(tmp_path / "other", n_per_class=2, seed=99)
        moved = next((tmp_path / "other" / "melanoma").glob("*.png"))
        some_file.write_bytes(moved.read_bytes())
        assert ingest(tmp_path).fingerprint != before

    def test_manifest_roundtrip(self, dataset_dir, tmp_path):
        manifest = ingest(dataset_dir)
        path = tmp_path / "manifest.json"
        save_manifest(manifest, path)
        assert load_manifest(path) == manifest


class TestConfig:
    def test_defaults(self):
        values = resolve_config()
        assert values["canvas_rows"] == 256
        assert values["gaussian_sigma"] == 1.35
        assert values["epochs"] == 40
        assert set(values) == set(CONFIG_KEYS)

    def test_file_and_overrides(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "canvas_rows = 64  # reduced input\n"
            "\n"
            "canvas_cols=64\n"
            "variant = canny\n")
        values = resolve_config(cfg_file, ["variant=ive", "epochs=2"])
        assert values["canvas_rows"] == 64
        assert values["variant"] == "ive"  # override wins over the file
        assert values["epochs"] == 2

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            resolve_config(None, ["no_such_knob=1"])

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            resolve_config(None, ["epochs=soon"])
        with pytest.raises(ConfigError):
            resolve_config(None, ["variant=sobel"])
        with pytest.raises(ConfigError):
            resolve_config(None, ["invert_mask=perhaps"])

    def test_override_needs_equals(self):
        with pytest.raises(ConfigError):
            resolve_config(None, ["epochs"])

    def test_malformed_file_line(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("this line has no assignment\n")
        with pytest.raises(ConfigError):
            resolve_config(bad)

    def test_build_run_config_maps_values(self):
        values = resolve_config(None, ["canvas_rows=64", "canvas_cols=64",
                                       "rng_seed=7", "zoom_min=0.9",
                                       "zoom_max=1.1", "learning_rate=0.01"])
        cfg = build_run_config(values)
        assert cfg.pipeline.canvas_rows == 64
        assert cfg.root_seed == 7
        assert cfg.augment.zoom_range == (0.9, 1.1)
        assert cfg.train.learning_rate == 0.01
        assert cfg.augment.rng_seed == 7 and cfg.train.rng_seed == 7

    def test_invalid_combination_reported_as_config_error(self):
        with pytest.raises(ConfigError):
            build_run_config(resolve_config(None, ["zoom_min=0"]))


class TestGrid:
    def test_inclusive_range(self):
        assert _parse_grid("0:1:0.5") == [0.0, 0.5, 1.0]

    def test_single_point(self):
        assert _parse_grid("127:127:1") == [127.0]

    def test_bad_shapes(self):
        for text in ("1:2", "a:b:c", "0:1:0", "5:1:1"):
            with pytest.raises(ConfigError):
                _parse_grid(text)


class TestCommands:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0

    def test_ingest_command(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "manifest.json"
        rc = main(["ingest", str(dataset_dir), "--out", str(out)])
        assert rc == 0
        assert "ingested 10 images" in capsys.readouterr().out
        assert len(load_manifest(out).entries) == 10

    def test_ingest_error_path(self, tmp_path, capsys):
        (tmp_path / "melanoma").mkdir()
        rc = main(["ingest", str(tmp_path), "--out", str(tmp_path / "m.json")])
        assert rc == 1
        assert "error: EmptyDataset" in capsys.readouterr().err

    def test_preprocess_dumps_stages(self, dataset_dir, tmp_path):
        image = str(next((Path(dataset_dir) / "melanoma").glob("*.png")))
        out = tmp_path / "run"
        rc = main(["preprocess", "--image", image, "--out", str(out)] + FAST)
        assert rc == 0
        names = {p.name for p in out.glob("*.png")}
        assert names == {"decode.png", "enhance.png", "gray.png", "filter.png",
                         "mask.png", "resize_gfi.png", "resize_mask.png",
                         "open.png", "sla.png", "ive.png", "canny.png"}
        payload = json.loads((out / "run_manifest.json").read_text())
        assert payload["command"] == "preprocess"
        assert 0 <= payload["otsu_threshold"] <= 255

    def test_train_then_predict(self, dataset_dir, tmp_path, capsys):
        manifest_path = tmp_path / "manifest.json"
        main(["ingest", str(dataset_dir), "--out", str(manifest_path)])
        run = tmp_path / "train-run"
        rc = main(["train", "--manifest", str(manifest_path),
                   "--out", str(run)] + FAST)
        assert rc == 0
        assert (run / "weights.bin").exists()
        assert (run / "holdout_metrics.csv").exists()
        assert (run / "holdout_metrics.svg").exists()
        history = (run / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,loss,accuracy"
        assert len(history) == 2  # header + one epoch

        image = str(next((Path(dataset_dir) / "naevus").glob("*.png")))
        capsys.readouterr()
        rc = main(["predict", "--weights", str(run / "weights.bin"),
                   "--image", image] + FAST)
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("prediction: ")
        assert "melanoma=" in out and "nevus=" in out

    def test_predict_rejects_mismatched_canvas(self, dataset_dir, tmp_path, capsys):
        manifest_path = tmp_path / "manifest.json"
        main(["ingest", str(dataset_dir), "--out", str(manifest_path)])
        run = tmp_path / "train-run"
        main(["train", "--manifest", str(manifest_path), "--out", str(run)] + FAST)
        image = str(next((Path(dataset_dir) / "melanoma").glob("*.png")))
        rc = main(["predict", "--weights", str(run / "weights.bin"),
                   "--image", image])  # defaults to the 256 canvas
        assert rc == 1
        assert "error: SpecMismatch" in capsys.readouterr().err

    def test_crossval_command(self, dataset_dir, tmp_path, capsys):
        manifest_path = tmp_path / "manifest.json"
        main(["ingest", str(dataset_dir), "--out", str(manifest_path)])
        run = tmp_path / "cv-run"
        rc = main(["crossval", "--manifest", str(manifest_path),
                   "--out", str(run)] + FAST)
        assert rc == 0
        assert (run / "metrics_ive.csv").exists()
        assert (run / "metrics_ive.svg").exists()
        payload = json.loads((run / "run_manifest.json").read_text())
        assert payload["command"] == "crossval"
        assert len(payload["fold_assignments"]) == 2
        assert len(payload["confusions"]) == 2
        header = (run / "metrics_ive.csv").read_text().splitlines()[0]
        assert header == "Metric,Fold-1,Fold-2,Average"

    def test_histogram_command(self, dataset_dir, tmp_path):
        image = str(next((Path(dataset_dir) / "melanoma").glob("*.png")))
        run = tmp_path / "hist-run"
        rc = main(["histogram", "--image", image, "--out", str(run)] + FAST)
        assert rc == 0
        text = (run / "histograms.csv").read_text()
        labels = {line.split(",")[0] for line in text.splitlines()[1:]}
        stem = Path(image).stem
        assert labels == {f"{stem}:gray", f"{stem}:edges",
                          f"{stem}:normalized", f"{stem}:high-intensity"}
        assert (run / "histograms.svg").exists()

    def test_sweep_threshold_command(self, dataset_dir, tmp_path):
        manifest_path = tmp_path / "manifest.json"
        main(["ingest", str(dataset_dir), "--out", str(manifest_path)])
        run = tmp_path / "sweep-run"
        rc = main(["sweep-threshold", "--manifest", str(manifest_path),
                   "--grid", "127:127:1", "--out", str(run)] + FAST)
        assert rc == 0
        lines = (run / "threshold_sweep.csv").read_text().splitlines()
        assert lines[0] == "Threshold,Fold-1,Fold-2,Average"
        assert lines[1].startswith("127,")

    def test_run_dir_env_variable(self, dataset_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("LESIONPIPE_RUNS", str(tmp_path / "all-runs"))
        image = str(next((Path(dataset_dir) / "melanoma").glob("*.png")))
        rc = main(["preprocess", "--image", image] + FAST)
        assert rc == 0
        created = list((tmp_path / "all-runs").iterdir())
        assert len(created) == 1
        assert created[0].name.startswith("preprocess-seed0-")
