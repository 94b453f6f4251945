import struct

import numpy as np
import pytest

from brite.fields import VectorField2D
from brite.phantom import (bspline_deformation, default_tag_params, desk_geometry, fading_preset, gen_oval_anatomy,
                           synthesize_sequence)
from brite.tagseq import (TagSeqFormatError, UnsupportedVersionError, load_displacements, load_sequence,
                          read_raster, save_displacements, save_sequence, write_raster)


@pytest.fixture
def sequence():
    an = gen_oval_anatomy(0, 40, 40)
    motion = bspline_deformation(1, 40, 40).frames(4)
    return synthesize_sequence(an, default_tag_params(12, 0.3, 1.2), fading_preset("FA10"), motion,
                               desk_geometry(4).times_s, noise_sigma=0.01, seed=5)


def test_raster_header_layout(tmp_path):
    arr = np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5)
    write_raster(tmp_path / "a.tgsq", arr)
    raw = (tmp_path / "a.tgsq").read_bytes()
    assert raw[:4] == b"TGSQ"
    assert struct.unpack("<IIIIB", raw[4:21]) == (1, 2, 4, 5, 3)
    assert len(raw) == 21 + arr.size * 4
    np.testing.assert_array_equal(np.frombuffer(raw[21:], "<f4"), arr.ravel())
    np.testing.assert_array_equal(read_raster(tmp_path / "a.tgsq"), arr)


def test_sequence_roundtrip_is_bit_exact(tmp_path, sequence):
    path = save_sequence(sequence, tmp_path / "s.tgsq")
    back = load_sequence(path)
    np.testing.assert_array_equal(back.frames_h, sequence.frames_h)
    np.testing.assert_array_equal(back.frames_v, sequence.frames_v)
    np.testing.assert_array_equal(back.times_s, sequence.times_s)
    np.testing.assert_array_equal(back.anatomy.data, sequence.anatomy.data)
    for a, b in zip(back.motion, sequence.motion):
        np.testing.assert_array_equal(a.forward.dx, b.forward.dx)
        np.testing.assert_array_equal(a.inverse.dy, b.inverse.dy)
    assert back.tag_params == sequence.tag_params
    assert back.fading_preset == "FA10" and back.seed == 5
    assert back.spacing_mm == sequence.spacing_mm
    # a second write reproduces the same bytes
    save_sequence(back, tmp_path / "t.tgsq")
    assert (tmp_path / "t.tgsq").read_bytes() == path.read_bytes()


def test_displacement_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    fields = [VectorField2D(rng.normal(size=(6, 7)).astype(np.float32), rng.normal(size=(6, 7)).astype(np.float32))
              for _ in range(3)]
    save_displacements(fields, tmp_path / "d.tgsq")
    back = load_displacements(tmp_path / "d.tgsq")
    for a, b in zip(fields, back):
        np.testing.assert_array_equal(a.dx, b.dx)


def test_bad_magic_version_and_truncation(tmp_path):
    p = tmp_path / "x.tgsq"
    write_raster(p, np.zeros((1, 2, 3, 3)))
    raw = bytearray(p.read_bytes())
    bad = bytes(b"XXXX" + raw[4:])
    (tmp_path / "m.tgsq").write_bytes(bad)
    with pytest.raises(TagSeqFormatError):
        read_raster(tmp_path / "m.tgsq")
    raw[4] = 2
    (tmp_path / "v.tgsq").write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError):
        read_raster(tmp_path / "v.tgsq")
    (tmp_path / "t.tgsq").write_bytes(p.read_bytes()[:-4])
    with pytest.raises(TagSeqFormatError):
        read_raster(tmp_path / "t.tgsq")
    (tmp_path / "s.tgsq").write_bytes(b"TG")
    with pytest.raises(TagSeqFormatError):
        read_raster(tmp_path / "s.tgsq")


def test_missing_sidecar_and_wrong_channels(tmp_path):
    write_raster(tmp_path / "a.tgsq", np.zeros((2, 2, 4, 4)))
    with pytest.raises(TagSeqFormatError):
        load_sequence(tmp_path / "a.tgsq")
    write_raster(tmp_path / "b.tgsq", np.zeros((2, 1, 4, 4)))
    with pytest.raises(TagSeqFormatError):
        load_sequence(tmp_path / "b.tgsq")
    with pytest.raises(TagSeqFormatError):
        load_displacements(tmp_path / "b.tgsq")
    with pytest.raises(ValueError):
        write_raster(tmp_path / "c.tgsq", np.zeros((2, 4, 4)))
