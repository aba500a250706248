import numpy as np
import pytest

from dtgvae import ad, model, nn
from dtgvae.ad import Tensor
from dtgvae.data import DataError, EmbeddingDataset, SynthConfig, synth_generate

from helpers import central_diff, max_rel_err

SMALL = model.Architecture(input_dim=8, n_speakers=3, n_emotions=2,
                           hidden_dim=6, latent_dim=4, decoder_dim=6)


def _small_data(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 8)), np.arange(n) % 3, np.arange(n) % 2


def _tiny_synth(seed=0, **kw):
    cfg = dict(n_speakers=4, n_emotions=2, per_cell=10, dim=16, seed=seed)
    cfg.update(kw)
    return synth_generate(SynthConfig(**cfg))


def _tiny_train(**kw):
    cfg = dict(epochs=20, lr=1e-3, batch_size=16, hidden_dim=16, latent_dim=8, decoder_dim=16)
    cfg.update(kw)
    return model.TrainConfig(**cfg)


# ------------------------------------------------------------ forward pass

def test_encoder_and_decoder_shapes():
    p = model.bind(model.init_model(SMALL, 0))
    x, _, _ = _small_data()
    post = model.encode(p, x, rng=np.random.default_rng(0))
    for t in (post.mu_spk, post.logvar_spk, post.mu_emo, post.logvar_emo, post.z_spk, post.z_emo):
        assert t.shape == (6, 4)
    assert model.decode(p, post.z_spk, post.z_emo).shape == (6, 8)
    with pytest.raises(ad.ShapeError):
        model.encode(p, np.ones((2, 7)), mode="mean")


def test_mean_mode_and_seeded_sampling_are_deterministic():
    p = model.bind(model.init_model(SMALL, 0))
    x, _, _ = _small_data()
    a = model.encode(p, x, mode="mean")
    b = model.encode(p, x, mode="mean")
    assert a.z_spk.data.tobytes() == b.z_spk.data.tobytes()
    np.testing.assert_array_equal(a.z_spk.data, a.mu_spk.data)
    s1 = model.encode(p, x, rng=np.random.default_rng(5))
    s2 = model.encode(p, x, rng=np.random.default_rng(5))
    assert s1.z_emo.data.tobytes() == s2.z_emo.data.tobytes()


def test_decoder_gradient_reaches_both_latents():
    p = model.bind(model.init_model(SMALL, 1))
    rng = np.random.default_rng(2)
    zs = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ze = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    gs, ge = ad.backward(ad.sum(model.decode(p, zs, ze)), [zs, ze])
    assert np.abs(gs).sum() > 0 and np.abs(ge).sum() > 0


# ----------------------------------------------------------------- losses

def test_reconstruction_values():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert model.loss_reconstruction(x, x).item() == 0.0
    # 0.5 * |2| + 0.5 * 2^2
    assert model.loss_reconstruction([[0.0]], [[2.0]]).item() == 3.0


def _post(mu, lv):
    mu, lv = Tensor(mu), Tensor(lv)
    zero = Tensor(np.zeros_like(mu.data))
    return model.LatentPosterior(mu, lv, zero, zero, mu, zero)


def test_kl_values():
    assert model.loss_kl(_post(np.zeros((2, 3)), np.zeros((2, 3)))).item() == 0.0
    assert model.loss_kl(_post([[1.0]], [[0.0]])).item() == pytest.approx(0.5)
    assert model.loss_kl(_post([[1.0]], [[0.0]]), beta=4.0).item() == pytest.approx(2.0)


def test_kl_non_negative_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        mu, lv = rng.normal(0, 2, size=(2, 3)), rng.normal(0, 2, size=(2, 3))
        assert model.loss_kl(_post(mu, lv)).item() >= 0.0


def test_kl_rejects_non_finite_logvar():
    with pytest.raises(ad.NonFiniteError):
        model.loss_kl(_post([[0.0]], [[np.inf]]))


def test_mi_independent_and_copy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2000, 3)), rng.normal(size=(2000, 3))
    assert model.loss_mutual_information(a, b).item() < 0.05
    near_copy = a + 1e-3 * rng.normal(size=a.shape)
    assert model.loss_mutual_information(a, near_copy).item() > 1.0


def test_mi_bivariate_gaussian_closed_form():
    rng = np.random.default_rng(1)
    rho = 0.5
    cov = np.array([[1.0, rho], [rho, 1.0]])
    z = rng.multivariate_normal(np.zeros(2), cov, size=20000)
    expected = -0.5 * np.log(1 - rho ** 2)
    assert expected == pytest.approx(0.1438, abs=1e-4)
    assert model.loss_mutual_information(z[:, :1], z[:, 1:]).item() == pytest.approx(expected, abs=0.03)


def test_mi_small_batch_rejected_and_nonnegative():
    with pytest.raises(ValueError):
        model.loss_mutual_information(np.ones((3, 2)), np.ones((3, 2)))
    rng = np.random.default_rng(2)
    for n in (4, 7, 40):
        val = model.loss_mutual_information(rng.normal(size=(n, 5)), rng.normal(size=(n, 5))).item()
        assert val >= -1e-6


def test_mi_gram_route_matches_covariance_route():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    direct = 0.5 * sum(
        s * np.linalg.slogdet(np.cov(z, rowvar=False) + model.MI_RIDGE * np.eye(z.shape[1]))[1]
        for s, z in ((1, a), (1, b), (-1, np.hstack([a, b]))))
    assert model.loss_mutual_information(a, b).item() == pytest.approx(direct, rel=1e-8, abs=1e-8)


def _clf_params(w):
    w = np.asarray(w, dtype=float)
    return {"clf_spk.weight": Tensor(w), "clf_spk.bias": Tensor(np.zeros(w.shape[1])),
            "clf_emo.weight": Tensor(w), "clf_emo.bias": Tensor(np.zeros(w.shape[1]))}


def test_cross_entropy_values():
    p = _clf_params(np.zeros((1, 2)))
    assert model.loss_speaker_ce(p, [[1.0]], [0]).item() == pytest.approx(np.log(2))
    p5 = _clf_params(np.zeros((1, 5)))
    assert model.loss_emotion_ce(p5, [[3.0]], [4]).item() == pytest.approx(np.log(5))
    big = _clf_params([[1000.0, 0.0]])
    assert model.loss_speaker_ce(big, [[1.0]], [0]).item() == pytest.approx(0.0, abs=1e-12)
    assert model.loss_speaker_ce(big, [[1.0]], [1]).item() == pytest.approx(1000.0)
    with pytest.raises(ValueError):
        model.loss_speaker_ce(p, [[1.0]], [2])


def test_cross_entropy_permutation_invariant():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    perm = rng.permutation(4)
    inv = np.argsort(perm)
    a = ad.cross_entropy(logits, labels).item()
    b = ad.cross_entropy(logits[:, perm], inv[labels]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_total_sums_and_masks():
    parts = {t: Tensor(1.0) for t in model.TERMS}
    total, br = model.loss_total(parts)
    assert total.item() == 5.0 and br.total == 5.0
    total, br = model.loss_total(parts, model.LossMask.parse("no-mi"))
    assert total.item() == 4.0 and br.mi == 1.0
    total, br = model.loss_total(parts, beta=3.0)
    assert total.item() == 7.0 and br.kl == 3.0


def test_mask_parsing():
    assert model.LossMask.parse("full").active() == model.TERMS
    assert model.LossMask.parse("no-spk,no-mi").active() == ("rec", "kl", "emo")
    assert model.LossMask.parse("rec,kl").active() == ("rec", "kl")
    assert model.LossMask.parse("no-emo").label() == "no-emo"
    with pytest.raises(ValueError):
        model.LossMask.parse("no-foo")


def test_masked_heads_receive_zero_gradient():
    params = model.init_model(SMALL, 0)
    x, ys, ye = _small_data()
    _, grads = model.loss_and_grads(params, x, ys, ye, model.LossMask.parse("no-spk"),
                                    rng=np.random.default_rng(0))
    assert not grads["clf_spk.weight"].any() and not grads["clf_spk.bias"].any()
    assert grads["clf_emo.weight"].any()
    _, grads = model.loss_and_grads(params, x, ys, ye, model.LossMask.parse("no-emo"),
                                    rng=np.random.default_rng(0))
    assert not grads["clf_emo.weight"].any()


def test_full_loss_gradient_finite_difference():
    arch = model.Architecture(8, 3, 2, hidden_dim=5, latent_dim=4, decoder_dim=5)
    params = model.init_model(arch, 3)
    rng = np.random.default_rng(4)
    x, ys, ye = rng.normal(size=(4, 8)), np.array([0, 1, 2, 0]), np.array([0, 1, 1, 0])
    eps = (rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    _, grads = model.loss_and_grads(params, x, ys, ye, eps=eps)

    def f():
        total, _ = model.compute_losses(model.bind(params), x, ys, ye, eps=eps)
        return total.item()

    names = sorted(params)
    numeric = central_diff(f, [params[k] for k in names], h=1e-4, order=4)
    assert max_rel_err([grads[k] for k in names], numeric, floor=1e-4) < 1e-4


# --------------------------------------------------------------- training

def test_training_loss_decreases():
    result = model.train(_tiny_synth(), _tiny_train(epochs=20))
    first, last = result.log[0].total, result.log[-1].total
    assert last < first


def test_training_is_deterministic():
    ds = _tiny_synth()
    a = model.train(ds, _tiny_train(epochs=3, seed=9))
    b = model.train(ds, _tiny_train(epochs=3, seed=9))
    assert nn._encode(a.checkpoint) == nn._encode(b.checkpoint)
    assert [r.total for r in a.log] == [r.total for r in b.log]


def test_plain_autoencoder_reduces_reconstruction_error():
    cfg = _tiny_train(epochs=30, beta=0.0, mask=model.LossMask.parse("rec"))
    result = model.train(_tiny_synth(), cfg)
    assert result.log[-1].val_rec_mse < result.log[0].val_rec_mse


def test_degenerate_labels_rejected():
    ds = _tiny_synth()
    one_spk = EmbeddingDataset(ds.ids, np.zeros(ds.n, dtype=int), ds.emotions, ds.x,
                               ["s0"], ds.emotion_names)
    with pytest.raises(DataError):
        model.train(one_spk, _tiny_train(epochs=1))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        model.train(_tiny_synth(), _tiny_train(epochs=0))


def test_early_stopping_restores_best():
    result = model.train(_tiny_synth(), _tiny_train(epochs=40, patience=2))
    assert result.stopped_early
    assert len(result.log) == result.best_epoch + 2
    assert result.checkpoint.meta["best_epoch"] == result.best_epoch


# -------------------------------------------------------------- inference

def test_extract_bottleneck_shapes_and_determinism():
    ds = _tiny_synth()
    ckpt = model.train(ds, _tiny_train(epochs=2)).checkpoint
    a = model.extract_bottleneck(ckpt, ds.x)
    b = model.extract_bottleneck(ckpt, ds.x, chunk=7)
    assert a.shape == (ds.n, 8)
    assert a.tobytes() == b.tobytes()
    spk, emo = model.extract_bottleneck(ckpt, ds.x, with_emotion=True)
    assert spk.shape == emo.shape
    with pytest.raises(ad.ShapeError):
        model.extract_bottleneck(ckpt, ds.x[:, :5])
