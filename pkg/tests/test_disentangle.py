import numpy as np
import pytest

from flair_lab import datagen, disentangle
from flair_lab import numkernel as nk
from flair_lab.disentangle import MLP, EncoderParams
from flair_lab.errors import ContractError, DimensionError

from conftest import check_grads


def _batch(q=6, seed=0):
    train = datagen.make_benchmark(seed=seed, n=100, d=16).with_heldout(0).part("train")
    return datagen.sample_quartets(train, q, seed)


def test_zero_weights_give_zero_content():
    enc = EncoderParams.init(16, rng=np.random.default_rng(0))
    for p in enc.content.params():
        p.value = np.zeros_like(p.value)
    c = disentangle.encode_content(nk.const(np.random.default_rng(1).normal(size=(4, 16))), enc)
    assert np.array_equal(c.value, np.zeros((4, 8)))


def test_content_is_deterministic():
    enc = EncoderParams.init(16, rng=np.random.default_rng(0))
    x = np.random.default_rng(2).normal(size=(3, 16))
    assert np.array_equal(disentangle.encode_content(x, enc).value,
                          disentangle.encode_content(x, enc).value)
    assert np.array_equal(enc.content.numpy(x), disentangle.encode_content(x, enc).value)


def test_layer_shapes_chain():
    enc = EncoderParams.init(10, content_dim=5, style_dim=3, hidden=7, rng=np.random.default_rng(0))
    assert [p.shape for p in enc.decoder.params()] == [(8, 7), (7,), (7, 10), (10,)]
    assert enc.style.sizes == (10, 7, 3)


def test_untrained_transform_shape_and_finite():
    enc = EncoderParams.init(16, rng=np.random.default_rng(0))
    x = np.random.default_rng(3).normal(size=(5, 16))
    out = disentangle.transform(x, x[::-1], enc).value
    assert out.shape == (5, 16) and np.all(np.isfinite(out))


def test_transform_shape_errors():
    enc = EncoderParams.init(16, rng=np.random.default_rng(0))
    with pytest.raises(DimensionError):
        disentangle.transform(np.zeros((2, 16)), np.zeros((3, 16)), enc)
    with pytest.raises(DimensionError):
        disentangle.encode_content(np.zeros((2, 5)), enc)
    no_t = EncoderParams.init(16, rng=np.random.default_rng(0), with_transform=False)
    with pytest.raises(ContractError):
        disentangle.transform(np.zeros((2, 16)), np.zeros((2, 16)), no_t)


class _Linear:
    """Bias-free linear map, used to build an exact copy-the-style decoder."""

    def __init__(self, w):
        self.w = nk.const(w)

    def __call__(self, x):
        return nk.matmul(x if isinstance(x, nk.Node) else nk.const(x), self.w)


def test_r_inv_zero_for_style_copying_decoder():
    d, c = 16, 3
    enc = EncoderParams(content=_Linear(np.zeros((d, c))), style=_Linear(np.eye(d)),
                        decoder=_Linear(np.vstack([np.zeros((c, d)), np.eye(d)])))
    batch = _batch()
    same = np.stack([batch.x[:, 0], batch.x[:, 0], batch.x[:, 2], batch.x[:, 2]], axis=1)
    batch.x = same  # pairs (r1, r1) and (r3, r3)
    assert float(disentangle.r_inv(batch, enc).value) == 0.0


def test_r_inv_nonnegative_for_random_weights():
    for seed in range(5):
        enc = EncoderParams.init(16, rng=np.random.default_rng(seed))
        assert float(disentangle.r_inv(_batch(seed=seed), enc).value) >= 0.0


def test_r_inv_gradients_match_finite_differences():
    batch = _batch(q=3)
    enc = EncoderParams.init(16, content_dim=3, style_dim=2, hidden=4, rng=np.random.default_rng(5))
    errs = check_grads(lambda: disentangle.r_inv(batch, enc), enc.params())
    assert max(errs.values()) < 1e-4, errs


def test_r_inv_with_shared_codes_equals_fresh_graph():
    batch = _batch()
    enc = EncoderParams.init(16, rng=np.random.default_rng(1))
    codes = [enc.content(batch.x[:, j]) for j in range(4)]
    assert float(disentangle.r_inv(batch, enc, codes).value) == float(disentangle.r_inv(batch, enc).value)


def test_invariance_pairs_share_domain_and_differ_in_label():
    train = datagen.make_benchmark(seed=0, n=200).with_heldout(2).part("train")
    batch = datagen.sample_quartets(train, 500, 0)
    for src, ref in disentangle.INV_PAIRS:
        assert np.all(batch.domain[:, src] == batch.domain[:, ref])
        assert np.all(batch.y[:, src] != batch.y[:, ref])


def test_mlp_input_check():
    mlp = MLP((4, 3, 2), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        mlp(np.zeros((1, 5)))


def test_checkpoint_round_trip(tmp_path):
    enc = EncoderParams.init(16, rng=np.random.default_rng(0))
    path = tmp_path / "ckpt.txt"
    named = disentangle.encoder_tensors(enc) + [("scalar", np.float64(2.5))]
    disentangle.save_tensors(named, path)
    back = disentangle.load_tensors(path)
    assert list(back) == [n for n, _ in named]
    for name, value in named:
        assert np.array_equal(back[name], value)
    assert path.read_text().splitlines()[0] == disentangle.CHECKPOINT_HEADER


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.txt"
    path.write_text("hello\n")
    with pytest.raises(ContractError):
        disentangle.load_tensors(path)


def test_reconstruction_training_reproduces_inputs():
    """transform(x, x) trained as an autoencoder gets below 0.1 mean absolute error per feature."""
    ds = datagen.make_benchmark(seed=0, n=200, noise_sigma=0.02)
    enc = EncoderParams.init(16, rng=np.random.default_rng(0))
    opt = nk.Adam(enc.params(), lr=0.01)
    rng = np.random.default_rng(1)
    for _ in range(400):
        x = ds.x[rng.integers(len(ds), size=64)]
        loss = nk.mean(nk.l1_distance(nk.const(x), disentangle.transform(x, x, enc)))
        opt.zero_grad()
        nk.backward(loss)
        opt.step()
    out = disentangle.transform(ds.x, ds.x, enc).value
    assert np.abs(out - ds.x).sum(1).mean() / 16 < 0.1
