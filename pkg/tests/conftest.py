"""Shared fixtures: deterministic synthetic lesion images and on-disk datasets."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lesionpipe.imgcore import RasterImage, encode_png

ACCEPTANCE_LINES: list[str] = []


def record_verdict(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)


def synth_lesion(seed: int, size: int = 96, melanoma: bool = True) -> RasterImage:
    """Textured dark blob on a skin-toned background; deterministic in seed."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-size * 0.08, size * 0.08)
    cx = size / 2 + rng.uniform(-size * 0.08, size * 0.08)
    ry = size * (0.30 if melanoma else 0.20) * rng.uniform(0.85, 1.15)
    rx = size * (0.26 if melanoma else 0.17) * rng.uniform(0.85, 1.15)
    blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    px = np.empty((size, size, 3), dtype=np.float64)
    base = np.array([205.0, 172.0, 150.0])
    px[:] = base + rng.normal(0, 5, (size, size, 3))
    tone = np.array([95.0, 62.0, 45.0]) if melanoma else np.array([140.0, 100.0, 80.0])
    texture = rng.normal(0, 14 if melanoma else 8, (size, size, 3))
    grad = (yy - cy)[..., None] * 0.35
    px[blob] = (tone + texture + grad)[blob]
    return RasterImage(np.clip(px, 0.0, 255.0))


def write_dataset(root: Path, n_per_class: int = 5, size: int = 64,
                  seed: int = 0) -> Path:
    """A class-per-directory dataset of PNG files, deterministic in seed."""
    for name, melanoma in (("melanoma", True), ("naevus", False)):
        subdir = root / name
        subdir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = synth_lesion(seed + i + (1000 if melanoma else 2000),
                               size=size, melanoma=melanoma)
            (subdir / f"{name}_{i:02d}.png").write_bytes(encode_png(img))
    return root


@pytest.fixture
def lesion_image() -> RasterImage:
    return synth_lesion(7, size=96, melanoma=True)


@pytest.fixture
def dataset_dir(tmp_path) -> Path:
    return write_dataset(tmp_path / "data", n_per_class=5, size=64, seed=3)
