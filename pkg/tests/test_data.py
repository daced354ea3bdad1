import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvebench.data import (BadMagicError, CheckpointError, CountMismatchError, Dataset, ResampleUnit,
                             TruncatedFileError, apply_mean, cubic_weights, format_cell, interpolation_matrix,
                             load_checkpoint, load_idx, mean_normalize, resample, save_checkpoint,
                             synth_blobs, synth_split, write_csv)
from curvebench.models import build_model, logits_batch


def idx_images(images: np.ndarray) -> bytes:
    n, h, w = images.shape
    return struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes()


def idx_labels(labels) -> bytes:
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.array([[[0, 255], [128, 64]], [[1, 2], [3, 4]], [[255, 255], [255, 255]], [[0, 0], [0, 0]]])
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(idx_images(imgs))
    lp.write_bytes(idx_labels([0, 1, 2, 1]))
    return ip, lp, imgs


# --------------------------------------------------------------------------
# IDX


def test_load_idx_fixture(idx_pair):
    ip, lp, imgs = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (4, 1, 2, 2)
    assert ds.labels.tolist() == [0, 1, 2, 1]
    assert ds.num_classes == 3
    assert ds.images[2].max() == 1.0  # byte 255
    np.testing.assert_array_equal(ds.images[:, 0], imgs / 255.0)


def test_load_idx_bad_magic(idx_pair, tmp_path):
    ip, _, _ = idx_pair
    with pytest.raises(BadMagicError, match="bad magic"):
        load_idx(ip, ip)  # image magic passed as labels


def test_load_idx_truncated(idx_pair, tmp_path):
    ip, lp, _ = idx_pair
    short = tmp_path / "short.idx"
    short.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(TruncatedFileError):
        load_idx(short, lp)
    with pytest.raises(TruncatedFileError):
        short.write_bytes(b"\x00\x00")
        load_idx(short, lp)


def test_load_idx_count_mismatch(idx_pair, tmp_path):
    ip, _, _ = idx_pair
    lp = tmp_path / "three.idx"
    lp.write_bytes(idx_labels([0, 1, 0]))
    with pytest.raises(CountMismatchError):
        load_idx(ip, lp)


MNIST_DIR = Path(os.environ.get("CURVEBENCH_MNIST_DIR", "/root/data/mnist"))


@pytest.mark.skipif(not (MNIST_DIR / "t10k-images-idx3-ubyte").exists(), reason="MNIST test files not present")
def test_mnist_test_split_counts():
    ds = load_idx(MNIST_DIR / "t10k-images-idx3-ubyte", MNIST_DIR / "t10k-labels-idx1-ubyte")
    assert len(ds) == 10000
    assert np.bincount(ds.labels).tolist() == [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]


# --------------------------------------------------------------------------
# normalization


def raw(images, labels=None, c=2):
    images = np.asarray(images, dtype=float)
    labels = np.zeros(len(images), int) if labels is None else labels
    return Dataset(images=images, labels=np.asarray(labels), num_classes=c)


def test_mean_normalize_zero_mean_pair_unchanged():
    x = np.random.default_rng(0).standard_normal((1, 3, 3))
    ds = mean_normalize(raw([x, -x]))
    np.testing.assert_array_equal(ds.images, [x, -x])
    np.testing.assert_array_equal(ds.mean_image, 0.0)


def test_mean_normalize_constant_set():
    ds = mean_normalize(raw(np.full((2, 1, 2, 2), 0.3)))
    np.testing.assert_array_equal(ds.images, 0.0)
    np.testing.assert_array_equal(ds.mean_image, 0.3)


def test_mean_normalize_random_set_means_zero_and_inverts():
    base = np.random.default_rng(1).uniform(size=(5, 1, 4, 4))
    ds = mean_normalize(raw(base))
    assert np.max(np.abs(ds.images.mean(axis=0))) <= 1e-12
    np.testing.assert_array_equal(ds.images + ds.mean_image, ds.raw_images())
    np.testing.assert_allclose(ds.raw_images(), base, atol=1e-15)


def test_mean_normalize_empty_raises():
    with pytest.raises(ValueError):
        mean_normalize(raw(np.zeros((0, 1, 2, 2))))


def test_apply_mean_uses_reference():
    tr = mean_normalize(raw(np.ones((2, 1, 2, 2))))
    te = apply_mean(raw(np.full((3, 1, 2, 2), 3.0)), tr)
    np.testing.assert_array_equal(te.images, 2.0)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        raw(np.zeros((2, 1, 2, 2)), labels=[0, 5])


def test_dataset_does_not_freeze_caller_arrays():
    x = np.zeros((2, 1, 2, 2))
    ds = raw(x)
    x[0] = 1.0
    assert not ds.images.flags.writeable


# --------------------------------------------------------------------------
# synthetic blobs


def test_synth_blobs_deterministic():
    a, b = synth_blobs(2, 10, 8, 42), synth_blobs(2, 10, 8, 42)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_blobs_counts_balanced():
    ds = synth_blobs(3, 50, 8, 1)
    assert len(ds) == 150
    assert np.bincount(ds.labels).tolist() == [50, 50, 50]


def test_synth_blobs_nearest_template_oracle():
    ds = synth_blobs(4, 100, 8, 3, sigma=0.1, separation=8.0)
    t = ds.meta["templates"].reshape(4, -1) + 0.5
    x = ds.images.reshape(len(ds), -1)
    d = ((x[:, None, :] - t[None]) ** 2).sum(-1)
    assert np.mean(np.argmin(d, axis=1) == ds.labels) == 1.0
    gaps = np.linalg.norm(t[:, None] - t[None], axis=-1)[np.triu_indices(4, 1)]
    np.testing.assert_allclose(gaps, 8.0 * 0.1, rtol=1e-12)


def test_synth_blobs_small_side_rejected():
    with pytest.raises(ValueError):
        synth_blobs(2, 5, 3, 0)


def test_synth_split_shares_templates_and_train_mean():
    tr, te = synth_split(3, 20, 10, 8, 5)
    assert np.max(np.abs(tr.images.mean(axis=0))) <= 1e-12
    np.testing.assert_array_equal(tr.mean_image, te.mean_image)
    np.testing.assert_array_equal(tr.meta["templates"], te.meta["templates"])
    assert not np.array_equal(tr.images[:10], te.images[:10])


# --------------------------------------------------------------------------
# resampling


def test_catmull_rom_kernel_values():
    np.testing.assert_allclose(cubic_weights(np.array([0.0, 1.0, 2.0, 0.5, 1.5])),
                               [1.0, 0.0, 0.0, 0.5625, -0.0625], atol=1e-15)


@pytest.mark.parametrize("n_in,n_out", [(8, 4), (4, 8), (7, 3), (5, 5), (3, 11)])
def test_interpolation_rows_partition_unity(n_in, n_out):
    m = interpolation_matrix(n_in, n_out)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-14)


def test_interpolation_matrix_same_size_is_identity():
    np.testing.assert_allclose(interpolation_matrix(6, 6), np.eye(6), atol=1e-15)


def test_identity_unit_exact():
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    np.testing.assert_array_equal(resample(ResampleUnit(8, 8), x), x)


@pytest.mark.parametrize("method", ["lsq", "direct"])
def test_constant_image_preserved(method):
    x = np.full((1, 8, 8), 0.7)
    np.testing.assert_allclose(ResampleUnit(3, 8, method=method).apply(x), x, atol=1e-12)


@pytest.mark.parametrize("method", ["lsq", "direct"])
def test_resample_linearity(method):
    rng = np.random.default_rng(7)
    unit = ResampleUnit(4, 8, method=method)
    x, y = rng.standard_normal((2, 1, 8, 8))
    a, b = 1.7, -0.4
    np.testing.assert_allclose(unit.apply(a * x + b * y), a * unit.apply(x) + b * unit.apply(y), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_lsq_round_trip_idempotent_and_symmetric(d_low, seed):
    unit = ResampleUnit(d_low, 10)
    x = np.random.default_rng(seed).standard_normal((2, 10, 10))
    once = unit.apply(x)
    np.testing.assert_allclose(unit.apply(once), once, atol=1e-9)
    r = unit.round_trip_1d()
    np.testing.assert_allclose(r, r.T, atol=1e-12)


def test_resample_side_mismatch():
    with pytest.raises(ValueError):
        ResampleUnit(4, 8).apply(np.zeros((1, 6, 6)))
    with pytest.raises(ValueError):
        ResampleUnit(9, 8)


def test_matrix_matches_apply():
    unit = ResampleUnit(3, 6)
    x = np.random.default_rng(2).standard_normal((2, 6, 6))
    np.testing.assert_allclose(unit.matrix(2) @ x.reshape(-1), unit.apply(x).reshape(-1), atol=1e-12)


def test_down_then_up_shapes():
    unit = ResampleUnit(3, 8)
    x = np.zeros((4, 1, 8, 8))
    assert unit.downscale(x).shape == (4, 1, 3, 3)
    assert unit.upscale(unit.downscale(x)).shape == x.shape


# --------------------------------------------------------------------------
# checkpoints and CSV


@pytest.mark.parametrize("arch", ["linear", "mlp-2x64", "cnn-small"])
def test_checkpoint_round_trip(tmp_path, arch):
    m = build_model(arch, (1, 8, 8), 3, seed=4)
    p = tmp_path / "m.cbnet"
    save_checkpoint(m, p)
    assert p.read_bytes()[:6] == b"CBNET1"
    back = load_checkpoint(p)
    for a, b in zip(m.params, back.params):
        np.testing.assert_array_equal(a, b)
    x = np.random.default_rng(0).standard_normal((10, 1, 8, 8))
    np.testing.assert_array_equal(logits_batch(m, x), logits_batch(back, x))


def test_checkpoint_truncated_payload(tmp_path):
    p = tmp_path / "m.cbnet"
    save_checkpoint(build_model("mlp-2x64", (1, 4, 4), 2), p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="payload length"):
        load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.cbnet"
    p.write_bytes(b"NOTNET" + b"\x00" * 10)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_edited_width_fails_before_tensor_read(tmp_path):
    p = tmp_path / "m.cbnet"
    save_checkpoint(build_model("mlp-2x64", (1, 4, 4), 2), p)
    raw = p.read_bytes()
    (n,) = struct.unpack("<I", raw[6:10])
    desc = raw[10:10 + n].replace(b"\"arch\": \"mlp-2x64\"", b"\"arch\": \"mlp-2x32\"")
    # drop the payload entirely: the error must come from the descriptor check
    p.write_bytes(raw[:6] + struct.pack("<I", len(desc)) + desc)
    with pytest.raises(CheckpointError, match="descriptor"):
        load_checkpoint(p)


def test_csv_format(tmp_path):
    p = write_csv(tmp_path / "x.csv", ["a", "b,c", "d"], [[1, 0.1234567891234, True], ["q\"x", 2.0, False]])
    text = p.read_bytes().decode("utf-8")
    assert text == 'a,"b,c",d\r\n1,0.123456789,true\r\n"q""x",2,false\r\n'


def test_format_cell_significant_digits():
    assert format_cell(np.float64(1 / 3)) == "0.333333333"
    assert format_cell(np.int64(7)) == "7"
