import csv
import hashlib
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wticket import pnm
from wticket.data import (
    Artifact,
    Dataset,
    DatasetError,
    SynthConfig,
    apply_artifact,
    artifact_sensitivity,
    directory_digest,
    load_dataset,
    parse_catalog,
    survival_bias_report,
    synth_generate,
    synth_sample,
    wilson_half_width,
)

SMALL = SynthConfig(size=32, train_samples=20, test_samples=10, seed=5)


# ---------------------------------------------------------------------------
# pixmaps
# ---------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), colour=st.booleans(), seed=st.integers(0, 999))
def test_pixmap_round_trip(h, w, colour, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(h, w, 3) if colour else (h, w), dtype=np.uint8)
    data = pnm.encode(img)
    assert data[:2] == (b"P6" if colour else b"P5")
    assert np.array_equal(pnm.decode(data), img)


def test_pixmap_header_comments_and_whitespace():
    raster = bytes(range(6))
    buf = b"P5 # comment\n3\t# more\n 2\n255\n" + raster
    assert pnm.decode(buf).tolist() == [[0, 1, 2], [3, 4, 5]]


@pytest.mark.parametrize(
    "buf",
    [
        b"P3\n1 1\n255\n\x00\x00\x00",
        b"P5\n2 2\n65535\n" + bytes(8),
        b"P5\n2 2\n255\n" + bytes(3),
        b"P5\n2 2\n255\n" + bytes(5),
        b"P6\n2 x\n255\n",
        b"P5\n2 2",
    ],
)
def test_pixmap_rejects_malformed(buf):
    with pytest.raises(pnm.PnmError):
        pnm.decode(buf)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def test_generation_is_deterministic(tmp_path):
    a = directory_digest(synth_generate(SMALL, tmp_path / "a"))
    b = directory_digest(synth_generate(SMALL, tmp_path / "b"))
    assert a == b
    other = directory_digest(synth_generate(SynthConfig(32, 3, 20, 10, seed=6), tmp_path / "c"))
    assert other != a


def test_generation_is_stable_across_processes(tmp_path):
    synth_generate(SMALL, tmp_path / "here")
    code = (
        "import sys; from wticket.data import SynthConfig, synth_generate, directory_digest;"
        "print(directory_digest(synth_generate(SynthConfig(32, 3, 20, 10, seed=5), sys.argv[1])))"
    )
    out = subprocess.run([sys.executable, "-c", code, str(tmp_path / "there")], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == directory_digest(tmp_path / "here")


def test_layout_balance_and_manifest(tmp_path):
    root = synth_generate(SMALL, tmp_path / "d")
    rows = list(csv.DictReader(open(root / "manifest.csv")))
    assert list(rows[0]) == ["path", "split", "label", "artifact_id", "amplitude", "sha256"]
    for split, n in (("train", 20), ("test", 10)):
        for label in ("real", "fake"):
            assert len(list((root / split / label).glob("*.ppm"))) == n // 2
    for r in rows:
        assert hashlib.sha256((root / r["path"]).read_bytes()).hexdigest() == r["sha256"]
        if r["label"] == "real":
            assert r["artifact_id"] == "" and r["amplitude"] == ""
        else:
            assert r["artifact_id"] in ("seam", "checker", "noise", "tint") and float(r["amplitude"]) > 0


def test_grayscale_datasets_use_graymaps(tmp_path):
    root = synth_generate(SynthConfig(32, 1, 4, 2, seed=0), tmp_path / "g")
    assert len(list(root.rglob("*.pgm"))) == 6
    assert load_dataset(root).train.input_shape == (1, 32, 32)


def test_zero_amplitude_fakes_equal_their_base():
    cat = tuple(Artifact(a, 1.0, 0.0, 0.0) for a in ("seam", "checker", "noise", "tint"))
    cfg = SynthConfig(size=32, catalog=cat, seed=1)
    for i in range(12):
        fake, spec, base = synth_sample(cfg, "train", "fake", i)
        assert np.array_equal(fake, base)
        real, _, _ = synth_sample(cfg, "train", "real", i)
        assert real.dtype == np.uint8


def test_artifact_frequencies_within_three_sigma():
    cfg = SynthConfig(size=32, seed=3)
    counts = {a: 0 for a in ("seam", "checker", "noise", "tint")}
    n = 4000
    for i in range(n):
        _, spec, _ = synth_sample(cfg, "train", "fake", i)
        counts[spec.artifact_id] += 1
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert all(abs(c - 1000) <= 3 * sigma for c in counts.values()), counts


def test_skewed_catalog_normalizes_weights():
    cat = parse_catalog("seam:10:0.1-0.2;checker:10:0.1-0.2;noise:1:0.1-0.2;tint:1:0.1-0.2")
    f = SynthConfig(catalog=cat).frequencies()
    assert f["seam"] == pytest.approx(10 / 22) and f["tint"] == pytest.approx(1 / 22)
    with pytest.raises(ValueError):
        parse_catalog("glitch:1:0.1-0.2")


@settings(max_examples=40, deadline=None)
@given(
    artifact=st.sampled_from(["seam", "checker", "noise", "tint"]),
    amp=st.floats(0.05, 0.5),
    seed=st.integers(0, 10_000),
    size=st.sampled_from([32, 64]),
    channels=st.sampled_from([1, 3]),
)
def test_artifacts_stay_inside_their_region(artifact, amp, seed, size, channels):
    rng = np.random.default_rng(seed)
    from wticket.data import render_face

    base = render_face(rng, size, channels)
    fake, (y0, y1, x0, x1) = apply_artifact(base, artifact, amp, rng)
    diff = fake.astype(int) - np.round(base * 255).astype(int)
    outside = diff.copy()
    outside[y0:y1, x0:x1] = 0
    assert not outside.any()
    assert 0 <= y0 < y1 <= size and 0 <= x0 < x1 <= size


def test_config_validation():
    for bad in (SynthConfig(size=48), SynthConfig(channels=2), SynthConfig(train_samples=0), SynthConfig(test_samples=3)):
        with pytest.raises(ValueError):
            bad.validate()


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


@pytest.fixture
def small_root(tmp_path):
    return synth_generate(SMALL, tmp_path / "ds")


def test_load_reproduces_pixels(small_root):
    b = load_dataset(small_root)
    assert len(b.train) == 20 and len(b.test) == 10
    for i, path in enumerate(b.train.paths):
        assert np.array_equal(b.train.images[i].transpose(1, 2, 0), pnm.read(small_root / path))
    fake, _, _ = synth_sample(SMALL, "train", "fake", 3)
    j = b.train.paths.index("train/fake/000003.ppm")
    assert np.array_equal(b.train.images[j].transpose(1, 2, 0), fake)
    assert b.train.x().max() <= 1.0 and b.train.x().min() >= 0.0
    assert b.fingerprint == hashlib.sha256((small_root / "manifest.csv").read_bytes()).hexdigest()


def test_shuffles_differ_by_epoch_and_replay(small_root):
    d = load_dataset(small_root).train
    e0, e1 = d.permutation(7, 0), d.permutation(7, 1)
    assert not np.array_equal(e0, e1)
    assert np.array_equal(e0, d.permutation(7, 0))
    seen = np.concatenate([y for _, y in d.batches(6, seed=7, epoch=0)])
    assert np.array_equal(seen, d.labels[e0])


def test_validation_split_is_stratified(small_root):
    fit, val = load_dataset(small_root).train.split_validation(0.2, 0)
    assert len(val) == 4 and (val.labels == 1).sum() == 2
    assert set(fit.paths).isdisjoint(val.paths)


def test_empty_or_missing_directory(tmp_path):
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path / "empty")


def _edit_manifest(root, fn):
    path = root / "manifest.csv"
    rows = list(csv.DictReader(open(path)))
    fields = list(rows[0])
    rows = fn(rows)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def test_missing_file(small_root):
    (small_root / "train/real/000000.ppm").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_dataset(small_root)


def test_checksum_mismatch(small_root):
    p = small_root / "test/fake/000001.ppm"
    data = bytearray(p.read_bytes())
    data[-1] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(DatasetError, match="checksum"):
        load_dataset(small_root)


def test_corrupt_pixmap_with_matching_checksum(small_root):
    p = small_root / "train/fake/000002.ppm"
    bad = p.read_bytes()[:-7]
    p.write_bytes(bad)

    def fix(rows):
        for r in rows:
            if r["path"] == "train/fake/000002.ppm":
                r["sha256"] = hashlib.sha256(bad).hexdigest()
        return rows

    _edit_manifest(small_root, fix)
    with pytest.raises(DatasetError, match="corrupt"):
        load_dataset(small_root)


def test_manifest_metadata_disagreement(small_root):
    def relabel(rows):
        rows[0]["artifact_id"] = "seam"
        return rows

    _edit_manifest(small_root, relabel)
    with pytest.raises(DatasetError, match="disagree"):
        load_dataset(small_root)


def test_empty_split(small_root):
    _edit_manifest(small_root, lambda rows: [r for r in rows if r["split"] == "train"])
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(small_root)


# ---------------------------------------------------------------------------
# sensitivity and survival bias
# ---------------------------------------------------------------------------


class Constant:
    def __init__(self, cls):
        self.cls = cls

    def __call__(self, x):
        out = np.zeros((len(x), 2), np.float32)
        out[:, self.cls] = 1.0
        return out


class FirstPixel:
    """Predicts fake when the first pixel is bright."""

    def __call__(self, x):
        fake = x[:, 0, 0, 0] > 0.5
        return np.stack([~fake, fake], axis=1).astype(np.float32)


def _toy_fakes(n, detected):
    images = np.zeros((n, 1, 4, 4), np.uint8)
    images[:detected, 0, 0, 0] = 255
    return Dataset(images, np.ones(n, np.int64), ["noise"] * n)


def test_sensitivity_extremes(tiny_bundle):
    for art in ("seam", "checker", "noise", "tint"):
        assert artifact_sensitivity(Constant(1), tiny_bundle.test, art, min_samples=1).value == 1.0
        assert artifact_sensitivity(Constant(0), tiny_bundle.test, art, min_samples=1).value == 0.0


def test_sensitivity_direct_count():
    s = artifact_sensitivity(FirstPixel(), _toy_fakes(10, 7), "noise", min_samples=1)
    assert s.value == 0.7 and s.n == 10
    assert s.half_width == pytest.approx(wilson_half_width(7, 10))


def test_sensitivity_needs_thirty_samples():
    with pytest.raises(ValueError, match="at least 30"):
        artifact_sensitivity(FirstPixel(), _toy_fakes(29, 3), "noise")
    assert artifact_sensitivity(FirstPixel(), _toy_fakes(30, 3), "noise").value == pytest.approx(0.1)


def test_wilson_half_width_reference_value():
    # the 95% Wilson interval for 7/10 is [0.3968, 0.8922]
    assert wilson_half_width(7, 10) == pytest.approx((0.8922 - 0.3968) / 2, abs=1e-4)


LEVELS = (0.0, 0.5, 0.8)


def test_bias_report_constant_sensitivities():
    series = {a: [(s, 0.9) for s in LEVELS] for a in ("seam", "noise")}
    r = survival_bias_report(series, {"seam": 0.9, "noise": 0.1})
    assert r.retention == {"seam": 1.0, "noise": 1.0}
    assert r.correlation is None and r.correlation_status == "undefined"


def test_bias_report_flags_rare_loss():
    series = {
        "seam": [(0.0, 0.95), (0.5, 0.93), (0.8, 0.90)],  # common, loses 0.05
        "noise": [(0.0, 0.90), (0.5, 0.75), (0.8, 0.60)],  # rare, loses 0.3
    }
    r = survival_bias_report(series, {"seam": 10 / 11, "noise": 1 / 11})
    assert r.correlation_status == "ok" and r.correlation == pytest.approx(1.0)
    assert r.negative_bias is True
    assert r.retention["noise"] == pytest.approx(0.6 / 0.9)
    assert len(r.rows()) == 6


def test_bias_report_equal_frequencies():
    series = {a: [(0.0, 0.9), (0.5, 0.8), (0.8, v)] for a, v in (("seam", 0.7), ("tint", 0.5))}
    r = survival_bias_report(series, {"seam": 0.5, "tint": 0.5})
    assert r.correlation_status == "not-applicable" and r.negative_bias is None


def test_bias_report_degenerate_inputs():
    with pytest.raises(ValueError, match="two artifacts"):
        survival_bias_report({"seam": [(s, 0.9) for s in LEVELS]}, {"seam": 1.0})
    with pytest.raises(ValueError, match="levels"):
        survival_bias_report({"seam": [(0, 1), (1, 1)], "tint": [(0, 1), (1, 1)]}, {"seam": 0.5, "tint": 0.5})


def test_bias_correlation_matches_rank_oracle():
    from _oracles import pearson, spearman_ranks

    rng = np.random.default_rng(0)
    arts = ("seam", "checker", "noise", "tint")
    freqs = dict(zip(arts, (0.4, 0.3, 0.2, 0.1)))
    series = {a: [(s, float(rng.uniform(0.3, 1.0))) for s in LEVELS] for a in arts}
    r = survival_bias_report(series, freqs)
    ret = [r.retention[a] for a in arts]
    expected = pearson(spearman_ranks([freqs[a] for a in arts]), spearman_ranks(ret))
    assert r.correlation == pytest.approx(expected, abs=1e-12)
