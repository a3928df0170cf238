import csv
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtmorph import data as vd
from vtmorph import faces, spatial


def _pairs(tmp_path, n=6, subjects=3, write=True):
    pairs = []
    for k in range(n):
        v, t = tmp_path / f"P{k}_vis.png", tmp_path / f"P{k}_thr.png"
        if write:
            img = np.random.default_rng(k).random((16, 16))
            vd.write_image(v, img)
            vd.write_image(t, 1 - img)
        pairs.append(vd.ImagePair(f"P{k}", f"S{k % subjects}", v, t))
    return pairs


def _digest(folder):
    h = hashlib.sha256()
    for f in sorted(folder.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# image io


def test_png_round_trip_within_quantization(tmp_path):
    img = np.random.default_rng(0).random((20, 30))
    back = vd.read_image(vd.write_image(tmp_path / "x.png", img))
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(back, vd.quantize(img))


def test_read_image_rejects_rgb(tmp_path):
    from PIL import Image
    Image.new("RGB", (4, 4)).save(tmp_path / "c.png")
    with pytest.raises(ValueError, match="mode"):
        vd.read_image(tmp_path / "c.png")


def test_network_range_round_trip():
    x = np.linspace(0, 1, 11)
    assert np.allclose(vd.from_network(vd.to_network(x)), x)
    assert vd.to_network(np.array([0.0, 1.0])).tolist() == [-1.0, 1.0]


# manifest


def test_manifest_round_trip_with_theta(tmp_path):
    pairs = _pairs(tmp_path)
    th = spatial.make_theta(0.1234567891234, -0.05, 7.3, 1.01)
    pairs[0].theta_true = th
    pairs[1].pain_class = 3
    man = vd.split_subjects(pairs, 0.34, seed=0)
    path = vd.write_manifest(tmp_path / "manifest.csv", man)
    header = open(path).readline().strip().split(",")
    assert header == vd.MANIFEST_COLUMNS
    back = vd.load_manifest(path)
    assert [p.pair_id for p in back] == [p.pair_id for p in man]
    assert np.array_equal(back.pairs[0].theta_true, th)
    assert back.pairs[1].theta_true is None
    assert back.pairs[1].pain_class == 3
    assert back.pairs[0].visible_path == tmp_path / "P0_vis.png"
    assert [p.split for p in back] == [p.split for p in man]


def test_manifest_accepts_single_theta_field(tmp_path):
    _pairs(tmp_path, 1)
    (tmp_path / "m.csv").write_text(
        "pair_id,subject_id,visible_path,thermal_path,split,pain_class,theta_true\n"
        "P0,S0,P0_vis.png,P0_thr.png,train,,1 0 0.1 0 1 0\n")
    man = vd.load_manifest(tmp_path / "m.csv")
    assert np.array_equal(man.pairs[0].theta_true, [1, 0, 0.1, 0, 1, 0])


def test_parse_theta_errors():
    with pytest.raises(ValueError, match="6 values"):
        vd.parse_theta("1 2 3")
    with pytest.raises(ValueError, match="blank"):
        vd.parse_theta(["1", "", "0", "0", "1", "0"])
    assert vd.parse_theta(["", "", "", "", "", ""]) is None


def test_manifest_missing_files_listed(tmp_path):
    pairs = _pairs(tmp_path, 2, write=False)
    vd.write_manifest(tmp_path / "m.csv", pairs)
    with pytest.raises(vd.ManifestError, match="missing") as err:
        vd.load_manifest(tmp_path / "m.csv")
    assert "P0_vis.png" in str(err.value)


def test_manifest_validation_errors(tmp_path):
    pairs = _pairs(tmp_path, 4, 2)
    with pytest.raises(vd.ManifestError, match="empty"):
        vd.validate_pairs([])
    dup = pairs + [pairs[0]]
    with pytest.raises(vd.ManifestError, match="duplicate"):
        vd.validate_pairs(dup)
    bad = [vd.ImagePair("X", "S0", pairs[0].visible_path, pairs[0].thermal_path, split="val")]
    with pytest.raises(vd.ManifestError, match="split"):
        vd.validate_pairs(bad)
    bad = [vd.ImagePair("X", "S0", pairs[0].visible_path, pairs[0].thermal_path, pain_class=7)]
    with pytest.raises(vd.ManifestError, match="pain class"):
        vd.validate_pairs(bad)
    leak = [vd.ImagePair("A", "S9", pairs[0].visible_path, pairs[0].thermal_path, split="train"),
            vd.ImagePair("B", "S9", pairs[1].visible_path, pairs[1].thermal_path, split="test")]
    with pytest.raises(vd.ManifestError, match="S9"):
        vd.validate_pairs(leak)


def test_manifest_size_mismatch(tmp_path):
    vd.write_image(tmp_path / "a.png", np.zeros((8, 8)))
    vd.write_image(tmp_path / "b.png", np.zeros((8, 9)))
    with pytest.raises(vd.ManifestError, match="differ"):
        vd.validate_pairs([vd.ImagePair("A", "S", tmp_path / "a.png", tmp_path / "b.png")])


def test_manifest_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("id,foo\n1,2\n")
    with pytest.raises(vd.ManifestError, match="header"):
        vd.load_manifest(tmp_path / "m.csv")


def test_manifest_not_found(tmp_path):
    with pytest.raises(vd.ManifestError, match="cannot open"):
        vd.load_manifest(tmp_path / "nope.csv")


# splits


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=2, max_size=60), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_split_subject_disjoint(subject_ids, fraction, seed):
    pairs = [vd.ImagePair(f"P{i}", f"S{s}", "v", "t") for i, s in enumerate(subject_ids)]
    if len(set(subject_ids)) < 2:
        with pytest.raises(ValueError):
            vd.split_subjects(pairs, fraction, seed)
        return
    man = vd.split_subjects(pairs, fraction, seed)
    train, test = man.subjects("train"), man.subjects("test")
    assert not train & test
    assert train and test
    assert len(man) == len(pairs)
    vd.validate_pairs(man.pairs, check_files=False)


def test_split_deterministic_and_count():
    pairs = [vd.ImagePair(f"P{i}", f"S{i % 10}", "v", "t") for i in range(40)]
    a = vd.split_subjects(pairs, 0.2, 5)
    b = vd.split_subjects(pairs, 0.2, 5)
    assert [p.split for p in a] == [p.split for p in b]
    assert len(a.subjects("test")) == 2


def test_split_fraction_bounds():
    pairs = [vd.ImagePair("a", "S1", "v", "t"), vd.ImagePair("b", "S2", "v", "t")]
    with pytest.raises(ValueError):
        vd.split_subjects(pairs, 1.0)


# threshold crop


def _blob_image(rng, size=32):
    img = np.zeros((size, size))
    r0, c0 = rng.integers(0, size // 2, 2)
    h, w = rng.integers(6, size // 2, 2)
    img[r0:r0 + h, c0:c0 + w] = rng.uniform(0.4, 1.0, (h, w))
    img[rng.integers(0, size), rng.integers(0, size)] = 0.9  # isolated speck
    return img


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_threshold_crop_idempotent(seed):
    img = _blob_image(np.random.default_rng(seed))
    once = vd.threshold_crop(img)
    assert np.array_equal(vd.threshold_crop(once), once)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1, allow_nan=False)))
def test_threshold_crop_idempotent_arbitrary(img):
    try:
        once = vd.threshold_crop(img, min_component=1)
    except vd.EmptyForegroundError:
        return
    assert np.array_equal(vd.threshold_crop(once, min_component=1), once)


def test_threshold_crop_keeps_largest_component():
    img = np.zeros((20, 20))
    img[2:12, 3:9] = 0.8
    img[15:17, 15:17] = 0.9
    out = vd.threshold_crop(img, out_size=(10, 6))
    assert out.shape == (10, 6)
    assert np.allclose(out, 0.8)


def test_threshold_crop_empty_foreground_suggests_otsu():
    with pytest.raises(vd.EmptyForegroundError, match="Otsu"):
        vd.threshold_crop(np.full((10, 10), 0.05))


def test_otsu_bimodal():
    img = np.r_[np.full(500, 0.1), np.full(500, 0.8)]
    t = vd.otsu_threshold(img)
    assert 0.1 < t < 0.8


# synthesis


def test_warp_range_parse_format():
    wr = vd.WarpRange.parse("0.15,10,0.9,1.1,0")
    assert wr == vd.WarpRange(0.15, 10.0, (0.9, 1.1), 0.0)
    assert vd.WarpRange.parse(wr.format()) == wr
    assert vd.WarpRange.parse("0") == vd.WarpRange.zero()
    with pytest.raises(ValueError):
        vd.WarpRange.parse("1,2")


def test_warp_range_samples_within_bounds():
    rng = np.random.default_rng(0)
    wr = vd.WarpRange(0.15, 10.0, (0.9, 1.1), 0.0)
    for _ in range(200):
        th = wr.sample(rng)
        assert abs(th[2]) <= 0.15 and abs(th[5]) <= 0.15
        det = th[0] * th[4] - th[1] * th[3]
        assert 0.81 - 1e-9 <= det <= 1.21 + 1e-9


def test_pseudo_thermal_seeded_and_dark_background():
    base = faces.render_face(faces.FaceParams.sample(np.random.default_rng(0)))
    t = vd.pseudo_thermal(base, 3)
    assert np.array_equal(t, vd.pseudo_thermal(base, 3))
    assert t[0, 0] == 0.0 and t.max() <= 1.0


def test_synth_pair_zero_range_identity():
    base = faces.render_face(faces.FaceParams.sample(np.random.default_rng(0)))
    vis, thr, th = vd.synth_pair(base, vd.WarpRange.zero(), style_seed=4)
    assert np.array_equal(th, spatial.IDENTITY)
    assert np.array_equal(thr, vd.pseudo_thermal(base, 4))
    assert np.array_equal(vis, base)


def test_synth_pair_ground_truth_consistent():
    base = faces.render_face(faces.FaceParams.sample(np.random.default_rng(1)))
    vis, thr, th = vd.synth_pair(base, vd.WarpRange(), style_seed=9)
    assert spatial.corner_error(th, th, 64, 64) == 0.0
    again = np.clip(spatial.warp_array(vd.pseudo_thermal(base, 9), th), 0, 1)
    assert np.array_equal(again, thr)
    back = spatial.warp_array(thr, spatial.invert(th))
    assert np.abs(back - vd.pseudo_thermal(base, 9))[12:-12, 12:-12].mean() < 0.02


def test_synth_corpus_deterministic(tmp_path):
    bases = [(s, img) for s, _, img in faces.render_subjects(4, 1, 32, seed=0)]
    wr = vd.WarpRange(0.1, 5.0, (0.95, 1.05), 0.0)
    m1 = vd.synth_corpus(bases, 10, tmp_path / "a", wr, seed=3)
    vd.synth_corpus(bases, 10, tmp_path / "b", wr, seed=3)
    assert len(m1) == 10
    assert len(list((tmp_path / "a").glob("*.png"))) == 20
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    man = vd.load_manifest(tmp_path / "a" / "manifest.csv")
    for p, q in zip(man, m1):
        assert np.array_equal(p.theta_true, q.theta_true)
    assert not man.subjects("train") & man.subjects("test")


def test_synth_corpus_zero_range_identity(tmp_path):
    bases = [(s, img) for s, _, img in faces.render_subjects(2, 1, 32, seed=0)]
    man = vd.synth_corpus(bases, 4, tmp_path, vd.WarpRange.zero(), seed=0)
    rows = list(csv.DictReader(open(tmp_path / "manifest.csv")))
    assert all(float(r["theta_a"]) == 1.0 and float(r["theta_tx"]) == 0.0 for r in rows)
    assert all(np.array_equal(p.theta_true, spatial.IDENTITY) for p in man)


def test_synth_corpus_empty_bases(tmp_path):
    with pytest.raises(ValueError, match="no base images"):
        vd.synth_corpus([], 3, tmp_path, vd.WarpRange())


def test_load_arrays_and_subject_of(tmp_path):
    assert vd.subject_of(tmp_path / "S007_002.png") == "S007"
    man = vd.Manifest(_pairs(tmp_path, 3))
    vis, thr = vd.load_arrays(man)
    assert vis.shape == thr.shape == (3, 16, 16)
