import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from octvq.model import PRESETS, ModelConfig, PatchDiscriminator, VQModel, nearest_indices, quantize, straight_through


def brute_force_nn(flat: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Lowest index among the minimal squared distances, by explicit loops."""
    out = np.empty(len(flat), dtype=np.int64)
    for i, z in enumerate(flat):
        best, best_d = 0, None
        for m, e in enumerate(codebook):
            d = float(np.sum((z - e) ** 2))
            if best_d is None or d < best_d:
                best, best_d = m, d
        out[i] = best
    return out


def random_instance(rng):
    m = int(rng.integers(2, 65))
    d = int(rng.integers(1, 9))
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    n = int(rng.integers(1, 3))
    if rng.random() < 0.3:
        # small integers force exact distance ties
        cb = rng.integers(-2, 3, size=(m, d)).astype(np.float64)
        grid = rng.integers(-2, 3, size=(n, d, h, w)).astype(np.float64)
    else:
        cb = rng.normal(size=(m, d))
        grid = rng.normal(size=(n, d, h, w))
    return grid, cb


class TestQuantize:
    def test_hand_nearest(self):
        cb = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        g = torch.tensor([0.1, 0.2], dtype=torch.float64).view(1, 2, 1, 1)
        assert quantize(g, cb).indices.item() == 0

    def test_tie_lowest_index(self):
        cb = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
        g = torch.tensor([0.5, 0.5], dtype=torch.float64).view(1, 2, 1, 1)
        assert quantize(g, cb).indices.item() == 0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            grid, cb = random_instance(rng)
            q = quantize(torch.from_numpy(grid), torch.from_numpy(cb))
            flat = grid.transpose(0, 2, 3, 1).reshape(-1, cb.shape[1])
            expect = brute_force_nn(flat, cb).reshape(q.indices.shape)
            np.testing.assert_array_equal(q.indices.numpy(), expect)

    def test_vectors_are_codebook_rows(self):
        rng = np.random.default_rng(1)
        grid, cb = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(8, 4))
        q = quantize(torch.from_numpy(grid), torch.from_numpy(cb))
        vec = q.vectors.permute(0, 2, 3, 1).numpy()
        np.testing.assert_array_equal(vec, cb[q.indices.numpy()])

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        grid, cb = torch.from_numpy(rng.normal(size=(1, 3, 6, 6))), torch.from_numpy(rng.normal(size=(16, 3)))
        q = quantize(grid, cb)
        assert torch.equal(quantize(q.vectors, cb).indices, q.indices)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="codebook"):
            quantize(torch.zeros(1, 3, 2, 2), torch.zeros(4, 2))

    def test_chunking_is_transparent(self):
        rng = np.random.default_rng(3)
        flat, cb = torch.from_numpy(rng.normal(size=(1000, 4))), torch.from_numpy(rng.normal(size=(32, 4)))
        assert torch.equal(nearest_indices(flat, cb, chunk=7), nearest_indices(flat, cb))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quantize_matches_oracle_property(seed):
    grid, cb = random_instance(np.random.default_rng(seed))
    q = quantize(torch.from_numpy(grid), torch.from_numpy(cb))
    flat = grid.transpose(0, 2, 3, 1).reshape(-1, cb.shape[1])
    np.testing.assert_array_equal(q.indices.numpy().ravel(), brute_force_nn(flat, cb))


def test_straight_through_gradient():
    z_e = torch.randn(1, 2, 3, 3, requires_grad=True)
    z_q = torch.randn(1, 2, 3, 3, requires_grad=True)
    out = straight_through(z_e, z_q)
    assert torch.equal(out, z_q)
    (out * 3).sum().backward()
    assert torch.all(z_e.grad == 3)
    assert z_q.grad is None


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.input_resolution, c.codebook_size, c.codebook_dim, c.downsample_factor) == (64, 32, 16, 4)
        assert c.latent_size == 16

    @pytest.mark.parametrize("kw", [dict(input_resolution=66), dict(codebook_size=1), dict(codebook_dim=0),
                                    dict(downsample_factor=3), dict(channels=(8, 8))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_full_scale_preset(self):
        p = PRESETS["paper"]
        assert (p.input_resolution, p.codebook_size, p.codebook_dim) == (256, 256, 256)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return VQModel(ModelConfig()).eval()


class TestVQModel:
    def test_encode_shape(self, model):
        assert model.encode(torch.rand(2, 1, 64, 64)).shape == (2, 16, 16, 16)

    def test_encode_resolution_error(self, model):
        with pytest.raises(ValueError, match=r"\(N, 1, 64, 64\).*\(1, 1, 32, 32\)"):
            model.encode(torch.rand(1, 1, 32, 32))

    def test_deterministic(self, model):
        x = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            assert torch.equal(model.encode(x), model.encode(x.clone()))
            z = model.quantize(model.encode(x)).vectors
            assert torch.equal(model.decode(z), model.decode(z.clone()))
            assert torch.equal(model.embed(x), model.embed(x))

    def test_finite(self, model):
        with torch.no_grad():
            out = model(torch.rand(3, 1, 64, 64))
        assert all(torch.isfinite(v.float()).all() for v in out.values())

    def test_decode_shape_and_range(self, model):
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for _ in range(100):
                img = model.decode(torch.randn(1, 16, 16, 16, generator=g) * 5)
                assert img.shape == (1, 1, 64, 64)
                assert img.min() >= 0 and img.max() <= 1

    def test_decode_shape_error(self, model):
        with pytest.raises(ValueError):
            model.decode(torch.zeros(1, 16, 8, 8))

    def test_embed(self, model):
        x = torch.rand(2, 1, 64, 64)
        with torch.no_grad():
            e = model.embed(x)
            assert e.shape == (2, 16)
            torch.testing.assert_close(e, model.encode(x).mean(dim=(2, 3)))

    def test_embed_of_constant_grid(self):
        v = torch.arange(16, dtype=torch.float32)
        grid = v.view(1, 16, 1, 1).expand(1, 16, 16, 16)
        assert torch.equal(grid.mean(dim=(2, 3))[0], v)

    def test_usage_counts(self, model):
        with torch.no_grad():
            q = model.quantize(model.encode(torch.rand(3, 1, 64, 64)))
        before = model.usage.clone()
        counts = model.count_usage(q.indices[:1])
        assert counts.sum().item() == 16 * 16
        assert (model.usage - before).sum().item() == 256

    def test_reconstruct_numpy(self, model):
        x = np.random.default_rng(0).random((3, 64, 64))
        r = model.reconstruct(x)
        assert r.shape == (3, 64, 64) and r.dtype == np.float64
        assert model.reconstruct(x[0]).shape == (64, 64)

    def test_reseed_dead_codes(self):
        torch.manual_seed(0)
        m = VQModel(ModelConfig(codebook_size=4, codebook_dim=2, channels=(4, 4, 4)))
        m.usage.copy_(torch.tensor([5, 0, 3, 0]))
        before = m.codebook.detach().clone()
        z = torch.randn(1, 2, 4, 4)
        n = m.reseed_dead_codes(z, torch.Generator().manual_seed(0))
        assert n == 2
        assert torch.equal(m.codebook[0], before[0]) and not torch.equal(m.codebook[1], before[1])
        assert m.usage.sum() == 0


class TestDiscriminator:
    def test_shape(self):
        d = PatchDiscriminator(ModelConfig())
        with torch.no_grad():
            out = d(torch.rand(2, 1, 64, 64))
        assert out.shape == (2, 8, 8) and torch.isfinite(out).all()

    def test_deterministic(self):
        d = PatchDiscriminator(ModelConfig())
        x = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            assert torch.equal(d(x), d(x))

    def test_shape_error(self):
        with pytest.raises(ValueError):
            PatchDiscriminator(ModelConfig())(torch.rand(1, 1, 48, 48))
