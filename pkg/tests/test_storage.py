import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ganaug.data import Label, Patch, PatchPool, Source
from ganaug.errors import InvalidInputError
from ganaug.storage import load_patch_directory, read_pgm, save_patch_directory, tile_grid, write_pgm


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_pgm_round_trip_exact_on_8bit_values(tmp_path_factory, raw):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(path, raw / 255.0)
    assert np.array_equal(np.rint(read_pgm(path) * 255).astype(np.uint8), raw)


def test_pgm_quantization_error_bounded(tmp_path):
    x = np.random.default_rng(0).random((16, 16))
    write_pgm(tmp_path / "x.pgm", x)
    assert np.abs(read_pgm(tmp_path / "x.pgm") - x).max() <= 0.5 / 255 + 1e-7


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made elsewhere\n2 1\n255\n\x00\xff")
    assert read_pgm(path).tolist() == [[0.0, 1.0]]


def test_pgm_rejects_ascii_and_truncated(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(InvalidInputError):
        read_pgm(tmp_path / "a.pgm")
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(InvalidInputError):
        read_pgm(tmp_path / "t.pgm")


def test_tile_grid_places_images_row_major():
    imgs = np.arange(3, dtype=np.float32)[:, None, None] * np.ones((3, 2, 2), np.float32)
    grid = tile_grid(imgs, rows=2, cols=2)
    assert grid.shape == (4, 4)
    assert grid[0, 2] == 1 and grid[2, 0] == 2 and grid[3, 3] == 0


def _pool():
    rng = np.random.default_rng(1)
    q = lambda: np.rint(rng.random((8, 8)) * 255) / 255
    return PatchPool([
        Patch(q(), Label.MASS, Source.REAL, "m0"),
        Patch(q(), Label.MASS, Source.SYNTHETIC, "s0"),
        Patch(q(), Label.NORMAL, Source.REAL, "n0"),
    ])


def test_patch_directory_round_trip(tmp_path):
    pool = _pool()
    save_patch_directory(pool, tmp_path)
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert lines[0] == "id,label,source,path"
    assert lines[2] == "s0,mass,synthetic,mass/s0.pgm"
    back = load_patch_directory(tmp_path)
    assert back.same_as(pool)


def test_patch_directory_without_manifest(tmp_path):
    save_patch_directory(_pool(), tmp_path)
    (tmp_path / "manifest.csv").unlink()
    back = load_patch_directory(tmp_path)
    assert list(back.ids) == ["m0", "s0", "n0"]
    assert {p.source for p in back} == {Source.REAL}


def test_missing_directory(tmp_path):
    with pytest.raises(InvalidInputError):
        load_patch_directory(tmp_path / "nope")
