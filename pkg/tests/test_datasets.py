import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feduhb.datasets import (MNIST_IMAGE_MAGIC, MNIST_LABEL_MAGIC, Dataset, TriggerSpec, encode_idx,
                             gen_quadratic, inject_backdoor, load_idx, load_mnist, parse_idx, partition_iid,
                             stamp_trigger, write_idx)
from feduhb.errors import ConfigError, FormatError
from feduhb.models import ModelSpec, grad, loss
from feduhb.numerics import rng_stream
from feduhb.theory import extreme_eigenvalues


def _idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


class TestIdx:
    def test_image_magic_accepted(self):
        raw = _idx_bytes(MNIST_IMAGE_MAGIC, (2, 2, 2), [0, 255, 51, 102, 0, 0, 0, 255])
        arr = parse_idx(raw, MNIST_IMAGE_MAGIC)
        assert arr.shape == (2, 2, 2)
        assert arr[0, 0, 1] == 255

    def test_label_magic_on_image_file_rejected(self):
        raw = _idx_bytes(MNIST_IMAGE_MAGIC, (1, 1, 1), [7])
        with pytest.raises(FormatError, match="offset 0"):
            parse_idx(raw, MNIST_LABEL_MAGIC)

    def test_label_file_count(self):
        raw = _idx_bytes(MNIST_LABEL_MAGIC, (5,), [3, 1, 4, 1, 5])
        np.testing.assert_array_equal(parse_idx(raw, MNIST_LABEL_MAGIC), [3, 1, 4, 1, 5])

    def test_truncated_payload_reports_offset(self):
        raw = _idx_bytes(MNIST_LABEL_MAGIC, (10,), range(9))
        with pytest.raises(FormatError) as err:
            parse_idx(raw, MNIST_LABEL_MAGIC)
        assert err.value.offset == len(raw)
        assert "found 9" in str(err.value)

    @pytest.mark.parametrize("raw", [b"\x00\x00", b"\x01\x00\x08\x01" + b"\x00" * 8,
                                     b"\x00\x00\x07\x01\x00\x00\x00\x00", b"\x00\x00\x08\x02\x00\x00"])
    def test_malformed_headers(self, raw):
        with pytest.raises(FormatError):
            parse_idx(raw)

    def test_trailing_bytes_rejected(self):
        with pytest.raises(FormatError):
            parse_idx(_idx_bytes(MNIST_LABEL_MAGIC, (2,), [1, 2, 3]))

    def test_images_scaled_to_unit_interval(self, tmp_path):
        imgs = np.array([[[0, 255], [128, 1]]], dtype=np.uint8)
        write_idx(tmp_path / "x-images.gz", imgs)
        out = load_idx(tmp_path / "x-images.gz", MNIST_IMAGE_MAGIC)
        np.testing.assert_allclose(out, imgs / 255.0)
        assert out.max() == 1.0

    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
    def test_roundtrip(self, dtype, tmp_path):
        arr = (np.arange(24).reshape(2, 3, 4) % 7).astype(dtype)
        raw = encode_idx(arr.reshape(6, 4))
        np.testing.assert_array_equal(parse_idx(raw), arr.reshape(6, 4))
        (tmp_path / "plain.idx").write_bytes(raw)
        with gzip.open(tmp_path / "comp.idx.gz", "wb") as fh:
            fh.write(raw)
        np.testing.assert_array_equal(load_idx(tmp_path / "plain.idx"), load_idx(tmp_path / "comp.idx.gz"))


class TestPackagedMnist:
    def test_shapes_and_balance(self, mnist_train, mnist_test):
        assert mnist_train.X.shape == (4000, 784)
        assert len(mnist_test) == 1000
        assert mnist_train.image_shape == (28, 28)
        np.testing.assert_array_equal(np.bincount(mnist_train.y), [400] * 10)
        np.testing.assert_array_equal(np.bincount(mnist_test.y), [100] * 10)
        assert 0.0 <= mnist_train.X.min() and mnist_train.X.max() == 1.0

    def test_env_var_directory(self, tmp_path, monkeypatch):
        write_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "train-labels-idx1-ubyte", np.array([0, 1, 2], dtype=np.uint8))
        monkeypatch.setenv("FEDUHB_DATA_DIR", str(tmp_path))
        ds = load_mnist()
        assert len(ds) == 3 and ds.image_shape == (2, 2)

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "train-images-idx3-ubyte.gz", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "train-labels-idx1-ubyte.gz", np.array([0, 1], dtype=np.uint8))
        with pytest.raises(FormatError):
            load_mnist(tmp_path)


class TestPartition:
    def test_exact_division(self):
        plan = partition_iid(100, 20, rng_stream(0, "partition"))
        assert plan.shard_sizes() == [5] * 20

    def test_pigeonhole(self):
        sizes = sorted(partition_iid(101, 20, rng_stream(0, "partition")).shard_sizes())
        assert sizes == [5] * 19 + [6]

    def test_deterministic(self):
        a = partition_iid(57, 4, rng_stream(3, "partition"))
        b = partition_iid(57, 4, rng_stream(3, "partition"))
        for c in range(4):
            np.testing.assert_array_equal(a.client_shards[c], b.client_shards[c])

    @pytest.mark.parametrize("n, c", [(10, 0), (3, 4)])
    def test_invalid(self, n, c):
        with pytest.raises(ConfigError):
            partition_iid(n, c, rng_stream(0, "partition"))

    @settings(max_examples=60)
    @given(st.integers(1, 300), st.integers(1, 25), st.integers(0, 1000))
    def test_disjoint_cover(self, n, c, seed):
        if n < c:
            return
        plan = partition_iid(n, c, rng_stream(seed, "partition"))
        allidx = np.concatenate([plan.client_shards[i] for i in range(c)])
        np.testing.assert_array_equal(np.sort(allidx), np.arange(n))
        sizes = plan.shard_sizes()
        assert min(sizes) >= 1 and max(sizes) - min(sizes) <= 1


def _image_shard(n=10, seed=0):
    r = np.random.default_rng(seed)
    return Dataset(r.uniform(0, 0.5, (n, 28 * 28)), r.integers(1, 10, n), 10, (28, 28))


class TestBackdoor:
    def test_full_poisoning(self):
        shard, chosen = inject_backdoor(_image_shard(), TriggerSpec(poison_fraction=1.0), rng_stream(0, "poison"))
        assert np.all(shard.y == 0)
        assert len(chosen) == 10

    def test_ceiling(self):
        _, chosen = inject_backdoor(_image_shard(), TriggerSpec(poison_fraction=1e-6), rng_stream(0, "poison"))
        assert len(chosen) == 1
        _, chosen = inject_backdoor(_image_shard(), TriggerSpec(poison_fraction=0.7), rng_stream(0, "poison"))
        assert len(chosen) == 7

    def test_patch_values_and_untouched_rest(self):
        clean = _image_shard(20, seed=4)
        spec = TriggerSpec(row=24, col=24, height=4, width=4, value=1.0, target_label=3, poison_fraction=0.5)
        dirty, chosen = inject_backdoor(clean, spec, rng_stream(1, "poison"))
        imgs = dirty.X.reshape(-1, 28, 28)
        assert np.all(imgs[chosen, 24:28, 24:28] == 1.0)
        mask = np.zeros(20, bool)
        mask[chosen] = True
        # bitwise: unselected examples unchanged, selected changed only inside the patch
        assert dirty.X[~mask].tobytes() == clean.X[~mask].tobytes()
        np.testing.assert_array_equal(dirty.y[~mask], clean.y[~mask])
        outside = np.ones((28, 28), bool)
        outside[24:28, 24:28] = False
        assert imgs[chosen][:, outside].tobytes() == clean.X.reshape(-1, 28, 28)[chosen][:, outside].tobytes()
        assert np.all(dirty.y[chosen] == 3)

    def test_seed_determinism(self):
        a = inject_backdoor(_image_shard(), TriggerSpec(), rng_stream(9, "poison", 1))[1]
        b = inject_backdoor(_image_shard(), TriggerSpec(), rng_stream(9, "poison", 1))[1]
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("kw", [dict(row=26), dict(col=-1), dict(height=0), dict(poison_fraction=1.5),
                                    dict(poison_fraction=0.0)])
    def test_out_of_bounds(self, kw):
        with pytest.raises(ConfigError):
            inject_backdoor(_image_shard(), TriggerSpec(**kw), rng_stream(0, "poison"))

    def test_stamp_does_not_mutate(self):
        X = _image_shard().X
        before = X.copy()
        stamp_trigger(X, (28, 28), TriggerSpec())
        np.testing.assert_array_equal(X, before)


class TestQuadratic:
    def test_scalar_case(self):
        p = gen_quadratic(1, 1, 1.0, 1.0, rng_stream(0, "q"))
        np.testing.assert_array_equal(p.shards[0].A, [[1.0]])
        spec = ModelSpec("quadratic", 1)
        b = p.shards[0].b
        np.testing.assert_array_equal(grad(spec, b, p.shards[0]).gradient, [0.0])
        w = b + 0.3
        np.testing.assert_allclose(loss(spec, w, p.shards[0]), 0.5 * 0.09)

    def test_condition_number_against_eigensolver(self):
        p = gen_quadratic(5, 30, 1.0, 100.0, rng_stream(0, "q"))
        eig = np.linalg.eigvalsh(p.hessian)
        np.testing.assert_allclose(eig[-1] / eig[0], 100.0, rtol=0.01)
        np.testing.assert_allclose([p.mu, p.L], [eig[0], eig[-1]], rtol=1e-12)

    def test_power_iteration_agrees(self):
        p = gen_quadratic(3, 15, 0.2, 8.0, rng_stream(2, "q"))
        lo, hi = extreme_eigenvalues(p.hessian, rng_stream(0, "spectrum"))
        assert lo <= hi
        np.testing.assert_allclose([lo, hi], [p.mu, p.L], rtol=1e-6)

    def test_clients_positive_definite(self):
        p = gen_quadratic(8, 12, 0.1, 50.0, rng_stream(5, "q"), heterogeneity=0.9)
        for s in p.shards:
            np.testing.assert_allclose(s.A, s.A.T, atol=1e-10)
            assert np.linalg.eigvalsh(s.A)[0] > 0

    @pytest.mark.parametrize("mu, L", [(0.0, 1.0), (2.0, 1.0), (-1.0, 1.0), (1.0, np.inf)])
    def test_invalid_spectrum(self, mu, L):
        with pytest.raises(ConfigError):
            gen_quadratic(2, 3, mu, L, rng_stream(0, "q"))

    def test_strong_convexity_and_smoothness(self):
        p = gen_quadratic(4, 10, 0.5, 20.0, rng_stream(11, "q"))
        r = np.random.default_rng(0)
        for _ in range(1000):
            w1, w2 = r.standard_normal(10) * 3, r.standard_normal(10) * 3
            f1, f2 = p.loss(w1), p.loss(w2)
            g1, g2 = p.gradient(w1), p.gradient(w2)
            d = w2 - w1
            lower = f1 + g1 @ d + 0.5 * p.mu * d @ d
            assert f2 >= lower - 1e-8 * max(1.0, abs(f2))
            assert np.linalg.norm(g2 - g1) <= p.L * np.linalg.norm(d) * (1 + 1e-8)

    def test_restrict_subset(self, small_quadratic):
        sub = small_quadratic.restrict([1, 3])
        assert len(sub.shards) == 2
        eig = np.linalg.eigvalsh(sub.hessian)
        np.testing.assert_allclose([sub.mu, sub.L], [eig[0], eig[-1]])
        np.testing.assert_allclose(sub.gradient(sub.optimum), 0.0, atol=1e-10)
