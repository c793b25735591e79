import numpy as np
import pytest

import dsrnet.layers
from dsrnet.data import Image, save_png


def natural_photos() -> list[np.ndarray]:
    """Bundled photographs (uint8 RGB), no network access needed."""
    from skimage import data as skdata

    return [skdata.astronaut(), skdata.coffee(), skdata.chelsea()]


def make_tiles(tile: int = 96, limit: int | None = None) -> list[np.ndarray]:
    """Cut the sample photos into distinct natural-image tiles."""
    tiles = []
    for photo in natural_photos():
        h, w = photo.shape[:2]
        for y in range(0, h - tile + 1, tile):
            for x in range(0, w - tile + 1, tile):
                tiles.append(photo[y:y + tile, x:x + tile])
    if limit is not None:
        tiles = tiles[:limit]
    return tiles


def write_tile_dataset(directory, tiles) -> list[str]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, arr in enumerate(tiles):
        path = directory / f"tile_{i:03d}.png"
        save_png(Image.from_uint8(arr), path)
        paths.append(str(path))
    return paths


@pytest.fixture(scope="session")
def hr_dir_16(tmp_path_factory):
    """16 HR training tiles (96x96) from the bundled photos."""
    d = tmp_path_factory.mktemp("hr16")
    write_tile_dataset(d, make_tiles(96, limit=16))
    return d


@pytest.fixture(scope="session")
def hr_dir_4(tmp_path_factory):
    """4 held-out tiles, disjoint from hr_dir_16."""
    d = tmp_path_factory.mktemp("hr4")
    tiles = make_tiles(96, limit=24)[16:20]
    assert len(tiles) == 4
    write_tile_dataset(d, tiles)
    return d


def relu_preact_margin(m, x) -> float:
    """Smallest |pre-activation| seen by any ReLU during a forward pass."""
    vals = []
    orig = dsrnet.layers.relu

    def spy(t, tape=None):
        vals.append(np.abs(t.data).min())
        return orig(t, tape)

    dsrnet.layers.relu = spy
    try:
        m.forward(x)
    finally:
        dsrnet.layers.relu = orig
    return min(vals)
