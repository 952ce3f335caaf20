import numpy as np
import pytest

from cohetseg.volume_io import (
    IGNORE_LABEL,
    HeaderError,
    LabelMask,
    PayloadSizeError,
    Study,
    Volume,
    VolumeIOError,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)


def test_volume_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.random((4, 5, 6)).astype(np.float32), spacing=(2.0, 0.7, 0.7))
    write_volume(tmp_path / "v.vol", vol)
    back = read_volume(tmp_path / "v.vol")
    assert isinstance(back, Volume)
    assert back.voxels.dtype == np.float32
    assert np.array_equal(back.voxels, vol.voxels)
    assert back.spacing == vol.spacing


def test_float64_volume_roundtrip(tmp_path):
    vol = Volume(np.linspace(0, 1, 24, dtype=np.float64).reshape(2, 3, 4))
    write_volume(tmp_path / "v.vol", vol)
    back = read_volume(tmp_path / "v.vol")
    assert back.voxels.dtype == np.float64
    assert np.array_equal(back.voxels, vol.voxels)


def test_mask_roundtrip(tmp_path):
    labels = np.zeros((3, 4, 4), dtype=np.uint8)
    labels[1, 1, 1] = 1
    labels[1, 2, 2] = 2
    labels[0, 0, 0] = IGNORE_LABEL
    mask = LabelMask(labels, spacing=(1.0, 1.0, 1.0))
    write_volume(tmp_path / "m.vol", mask)
    back = read_volume(tmp_path / "m.vol")
    assert isinstance(back, LabelMask)
    assert np.array_equal(back.labels, labels)


def test_labelmask_rejects_invalid_values():
    bad = np.full((2, 2, 2), 7, dtype=np.uint8)
    with pytest.raises(ValueError, match="invalid labels"):
        LabelMask(bad)


def test_volume_rejects_nonfinite_and_bad_shape():
    with pytest.raises(ValueError, match="finite"):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError, match="3D"):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError, match="spacing"):
        Volume(np.zeros((2, 2, 2)), spacing=(0.0, 1.0, 1.0))


def test_missing_header_raises(tmp_path):
    p = tmp_path / "v.vol"
    p.write_bytes(b"\x00" * 8)
    with pytest.raises(HeaderError, match="not found"):
        read_volume(p)


def test_corrupt_header_raises(tmp_path):
    p = tmp_path / "v.vol"
    write_volume(p, Volume(np.zeros((2, 2, 2), dtype=np.float32)))
    hdr = p.parent / "v.vol.hdr"
    hdr.write_text(hdr.read_text().replace("cohetseg-volume v1", "something-else"))
    with pytest.raises(HeaderError, match="unrecognized format"):
        read_volume(p)


def test_truncated_payload_raises(tmp_path):
    p = tmp_path / "v.vol"
    write_volume(p, Volume(np.zeros((2, 2, 2), dtype=np.float32)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(PayloadSizeError):
        read_volume(p)


def test_header_field_validation(tmp_path):
    p = tmp_path / "v.vol"
    write_volume(p, Volume(np.zeros((2, 2, 2), dtype=np.float32)))
    hdr = p.parent / "v.vol.hdr"
    good = hdr.read_text()
    hdr.write_text(good.replace("shape: 2 2 2", "shape: 2 2"))
    with pytest.raises(HeaderError, match="bad shape"):
        read_volume(p)
    hdr.write_text(good.replace("dtype: float32", "dtype: int32"))
    with pytest.raises(HeaderError, match="bad dtype"):
        read_volume(p)


def test_study_invariants():
    v = Volume(np.zeros((2, 3, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="at least one phase"):
        Study(id="s", phases={})
    other = Volume(np.zeros((2, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="disagree"):
        Study(id="s", phases={"NC": v, "V": other})
    with pytest.raises(ValueError, match="bad domain"):
        Study(id="s", phases={"V": v}, domain="elsewhere")
    s = Study(id="s", phases={"D": v, "NC": v})
    assert s.available == ("NC", "D")
    assert s.shape == (2, 3, 3)


def test_manifest_roundtrip(tmp_path):
    rows = [
        {"id": "a", "domain": "source", "split": "source/train",
         "phases": ("V",), "paths": ("studies/a/V.vol", "studies/a/mask.vol")},
        {"id": "b", "domain": "target", "split": "target/train",
         "phases": ("NC", "D"), "paths": ("studies/b/NC.vol",)},
    ]
    write_manifest(rows, tmp_path)
    assert read_manifest(tmp_path) == rows


def test_manifest_bad_columns(tmp_path):
    (tmp_path / "manifest.tsv").write_text("a\tb\n1\t2\n")
    with pytest.raises(VolumeIOError, match="columns"):
        read_manifest(tmp_path)
