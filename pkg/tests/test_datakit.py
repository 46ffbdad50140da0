import numpy as np
import pytest

from ktraj.datakit import (curves_svg, dataset_split, heatmap_svg, load_pgm, load_raw, make_coils,
                           make_dataset, make_phantom, polyline_svg, save_pgm, save_raw,
                           simulate_coil_images)
from ktraj.errors import ParseError, ShapeError


def test_phantom_deterministic_and_normalized():
    a = make_phantom(64, seed=4)
    b = make_phantom(64, seed=4)
    assert np.array_equal(a.image, b.image)
    assert a.image.min() >= 0 and a.image.max() == 1.0
    assert not np.array_equal(a.image, make_phantom(64, seed=5).image)


def test_phantom_without_random_ellipses_is_base():
    a = make_phantom(32, seed=1, n_ellipses=0)
    b = make_phantom(32, seed=2, n_ellipses=0)
    assert np.array_equal(a.image, b.image)
    assert len(a.descriptor) == 10


def test_phantom_grid_minimum():
    with pytest.raises(ValueError):
        make_phantom(8)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_coils_unit_sum_of_squares(n):
    cs = make_coils(32, n, seed=3)
    assert cs.coils == n
    assert np.abs(np.sum(np.abs(cs.maps) ** 2, axis=0) - 1).max() <= 1e-12


def test_single_coil_is_unit_constant():
    assert np.array_equal(make_coils(16, 1).maps, np.ones((1, 16, 16), complex))


def test_coils_deterministic():
    assert np.array_equal(make_coils(16, 4, seed=9).maps, make_coils(16, 4, seed=9).maps)


def test_simulate_coil_images_properties(rng):
    cs = make_coils(16, 3, seed=0)
    p, q = rng.random((16, 16)), rng.random((16, 16))
    assert np.array_equal(simulate_coil_images(np.zeros((16, 16)), cs), np.zeros((3, 16, 16)))
    assert np.allclose(simulate_coil_images(2 * p + q, cs),
                       2 * simulate_coil_images(p, cs) + simulate_coil_images(q, cs))
    one = make_coils(16, 1)
    assert np.array_equal(simulate_coil_images(p, one)[0], p)
    with pytest.raises(ShapeError):
        simulate_coil_images(np.ones((8, 8)), cs)


def test_split_counts_and_disjointness():
    tr, va, te = dataset_split(80, seed=0)
    assert (len(tr), len(va), len(te)) == (60, 5, 15)
    assert sorted(tr + va + te) == list(range(80))
    assert dataset_split(80, seed=0) == [tr, va, te]
    with pytest.raises(ValueError):
        dataset_split(10, (0.5, 0.2, 0.2))


def test_make_dataset_shares_coils():
    data = make_dataset(3, 16, 2, seed=1)
    assert len(data) == 3
    assert data[0].maps is data[1].maps
    assert not np.array_equal(data[0].image, data[1].image)


def test_raw_round_trip(tmp_path, rng):
    x = rng.standard_normal((5, 7)).astype(np.float32)
    save_raw(tmp_path / "x.raw", x)
    assert np.array_equal(load_raw(tmp_path / "x.raw"), x)
    (tmp_path / "x.raw").write_bytes(x.tobytes()[:-4])
    with pytest.raises(ParseError):
        load_raw(tmp_path / "x.raw")


def test_pgm_quantization_bound(tmp_path):
    ramp = np.tile(np.linspace(0, 1, 301), (3, 1))
    save_pgm(tmp_path / "r.pgm", ramp)
    back = load_pgm(tmp_path / "r.pgm")
    # rounding to 16 bits: at most half a step
    assert np.abs(back - ramp).max() <= 0.5 / 65535 + 1e-15


def test_pgm_header_and_errors(tmp_path):
    save_pgm(tmp_path / "a.pgm", np.zeros((2, 3)))
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n65535\n") and len(raw) == 13 + 12
    (tmp_path / "t.pgm").write_bytes(raw[:-1])
    with pytest.raises(ParseError, match="offset"):
        load_pgm(tmp_path / "t.pgm")
    (tmp_path / "m.pgm").write_bytes(b"P2\n" + raw[3:])
    with pytest.raises(ParseError) as exc:
        load_pgm(tmp_path / "m.pgm")
    assert exc.value.offset == 0
    (tmp_path / "h.pgm").write_bytes(b"P5\n3 x\n65535\n")
    with pytest.raises(ParseError):
        load_pgm(tmp_path / "h.pgm")


def test_pgm_comment_in_header(tmp_path):
    data = np.array([[0, 65535]], dtype=">u2").tobytes()
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n65535\n" + data)
    assert np.array_equal(load_pgm(tmp_path / "c.pgm"), [[0.0, 1.0]])


def test_svg_writers(tmp_path):
    heatmap_svg(tmp_path / "h.svg", np.eye(3), title="a < b")
    polyline_svg(tmp_path / "p.svg", [[np.array([[0, 0], [0.2, 0.1]])]], labels=["x"])
    curves_svg(tmp_path / "c.svg", {"loss": [3, 2, 1], "nan": [np.nan, 1, 2]})
    for name in ("h", "p", "c"):
        text = (tmp_path / f"{name}.svg").read_text()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
    assert "a &lt; b" in (tmp_path / "h.svg").read_text()
    assert (tmp_path / "h.svg").read_text().count("<rect") == 9
