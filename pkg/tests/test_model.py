import numpy as np
import pytest

from encore_bench.autodiff import tensor as T
from encore_bench.autodiff.gradcheck import check_gradients
from encore_bench.autodiff.tensor import Tape
from encore_bench.dataset import PedestrianAgent, SceneScript, generate_synthetic_corpus, random_scripts
from encore_bench.errors import ConfigError, DisabledBranch, MissingFuture, TooFewModalities
from encore_bench.model import ABLATIONS, Encore, ModelConfig, gaussian_kld, make_batch, predict, total_loss, train
from encore_bench.model.bundle import build_bundle
from encore_bench.model.encore import Encoder, StepwiseFusion, parameter_groups
from encore_bench.model.train import best_of_many

from conftest import make_sample

O, TAU = 4, 6


@pytest.fixture(scope="module")
def short_corpus():
    return generate_synthetic_corpus(random_scripts(8, seed=1, duration=30), o=O, tau=TAU, stride=5)


def tiny(**kw):
    return ModelConfig.tiny(obs_len=O, pred_len=TAU, **kw)


def test_bundle_static_and_first_frame():
    box = np.tile([100.0, 200.0, 134.0, 300.0], (10, 1))
    b = build_bundle(make_sample(box[:4], box[4:]))
    assert np.all(b.velocity == 0)
    assert np.all(b.location[0] == 0)


def test_bundle_velocity_normalization():
    t = np.arange(10)[:, None]
    box = np.array([100.0, 200.0, 134.0, 300.0]) + t * [3.0, 0.0, 3.0, 0.0]
    b = build_bundle(make_sample(box[:4], box[4:]))
    np.testing.assert_allclose(b.velocity[1:, 0], 3 / 1920, rtol=1e-12)
    np.testing.assert_allclose(b.velocity[1:, 2], 3 / 1920, rtol=1e-12)
    assert np.all(b.velocity[0] == 0)


def test_fusion_group_counts():
    names = [n for n, _ in Encore(tiny()).named_parameters()]
    assert len(parameter_groups(names, "fusion.units")) == 3
    pair = [n for n, _ in Encore(tiny(use_hsf=False)).named_parameters()]
    assert len(parameter_groups(pair, "fusion.units")) == 12
    two = [n for n, _ in Encore(tiny(modality_order=("location", "ego"))).named_parameters()]
    assert len(parameter_groups(two, "fusion.units")) == 1


def test_stepwise_has_fewer_parameters_than_pairwise():
    step = sum(p.data.size for n, p in Encore(tiny()).named_parameters() if n.startswith("fusion."))
    pair = sum(p.data.size for n, p in Encore(tiny(use_hsf=False)).named_parameters() if n.startswith("fusion."))
    assert step < pair


def test_two_modality_fusion_is_projected_unit():
    rng = np.random.default_rng(0)
    fusion = StepwiseFusion(2, 8, 16, 2, rng)
    a, b = rng.normal(size=(2, 4, 8)), rng.normal(size=(2, 4, 8))
    expected = fusion.proj(fusion.units[0](a, b)).data
    np.testing.assert_array_equal(fusion([T.as_tensor(a), T.as_tensor(b)]).data, expected)


def test_too_few_modalities():
    with pytest.raises(TooFewModalities):
        StepwiseFusion(1, 8, 16, 2, np.random.default_rng(0))


def test_encoder_contract():
    rng = np.random.default_rng(1)
    enc = Encoder(16, 2, 1, 2, rng)
    x = rng.normal(size=(2, 5, 16))
    y = enc(x).data
    assert y.shape == x.shape
    np.testing.assert_array_equal(enc(x).data, y)
    perm = [4, 2, 0, 1, 3]
    # attention alone is permutation-equivariant; positions break that
    assert not np.allclose(enc(x[:, perm]).data, y[:, perm])


def test_shared_encoder():
    model = Encore(tiny())
    names = [n for n, _ in model.named_parameters()]
    assert len(parameter_groups(names, "encoder.blocks")) == 1
    assert not any(".encoder." in n for n in names)
    ids = [id(p) for _, p in model.named_parameters()]
    assert len(ids) == len(set(ids))


def test_reconstruction_reaches_shared_encoder(short_corpus):
    model = Encore(tiny())
    batch = make_batch(short_corpus.samples[:3], short_corpus.visible_aspect_ratio)
    with Tape() as tape:
        loss = T.sum(model.reconstruct_observation(batch))
    tape.backward(loss)
    enc_grads = [p.grad for n, p in model.named_parameters() if n.startswith("encoder.")]
    assert all(g is not None and np.any(g != 0) for g in enc_grads)
    assert all(p.grad is None for n, p in model.named_parameters() if n.startswith("fusion."))


def test_kld_identities():
    rng = np.random.default_rng(2)
    mu, lv = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert np.all(gaussian_kld(mu, lv, mu, lv).data == 0.0)
    np.testing.assert_allclose(gaussian_kld(mu, np.zeros((5, 4)), np.zeros((5, 4)), np.zeros((5, 4))).data,
                               0.5 * np.sum(mu * mu, axis=1), rtol=1e-14)


def test_kld_non_negative():
    rng = np.random.default_rng(3)
    args = [rng.normal(0, 2, size=(10_000, 4)) for _ in range(4)]
    assert np.all(gaussian_kld(*args).data >= 0)


def test_causal_decoder(short_corpus):
    model = Encore(tiny(deterministic=True))
    batch = make_batch(short_corpus.samples[:3], short_corpus.visible_aspect_ratio)
    base = model.forward(batch, training=False).trajectory.data
    t = 3
    batch.future_ego = batch.future_ego.copy()
    batch.future_ego[:, t:] += 5.0
    moved = model.forward(batch, training=False).trajectory.data
    assert np.array_equal(moved[:, :, :t], base[:, :, :t])
    assert not np.allclose(moved[:, :, t:], base[:, :, t:])


def test_output_shapes(short_corpus):
    model = Encore(tiny())
    batch = make_batch(short_corpus.samples[:3], short_corpus.visible_aspect_ratio)
    out = model.forward(batch, k=4, rng=np.random.default_rng(0), training=True)
    assert out.trajectory.shape == (4, 3, TAU, 4)
    assert out.scaled.shape == (4, 3, TAU, 4)
    assert out.aux.shape == (3, O, 4)
    assert out.kld.shape == (3,)
    poft = Encore(tiny(use_poft=True)).forward(batch, k=2, training=True)
    assert poft.aux.shape == (3, TAU, 4)


def test_branch_toggles(short_corpus):
    cfg = tiny().replace(use_poft=True)
    assert cfg.use_poft and not cfg.use_rot
    with pytest.raises(ConfigError):
        ModelConfig(use_rot=True, use_poft=True)
    batch = make_batch(short_corpus.samples[:2], short_corpus.visible_aspect_ratio)
    with pytest.raises(DisabledBranch):
        Encore(cfg).reconstruct_observation(batch)
    with pytest.raises(DisabledBranch):
        Encore(tiny()).poft_variant(batch)


def test_training_forward_needs_future(short_corpus):
    batch = make_batch(short_corpus.samples[:2], with_targets=False)
    with pytest.raises(MissingFuture):
        Encore(tiny()).forward(batch, training=True)


def _np_logcosh_loss(pred, target):
    # independent of the tape: log(cosh(x)) directly, sum over steps, mean over coords
    return float(np.mean(np.sum(np.mean(np.log(np.cosh(pred - target)), axis=-1), axis=-1)))


def test_composition_oracle(short_corpus):
    cfg = tiny(alpha=0.0, beta=0.0, gamma=0.0, deterministic=True)
    model = Encore(cfg)
    batch = make_batch(short_corpus.samples[:5], short_corpus.visible_aspect_ratio)
    loss, _ = total_loss(model.forward(batch, k=1, mode="prior_mean", training=True), batch, cfg)

    embeds = model.embed_modalities(batch)
    enc = model.encode(model.stepwise_hierarchical_fuse(embeds))
    mu_p, _ = model.prior(T.mean(enc, axis=1), cfg.logvar_clamp)
    traj, _ = model.decode_future(enc, mu_p, batch.future_ego)
    expected = _np_logcosh_loss(traj.data[0], batch.target)
    assert abs(float(loss.data) - expected) <= 1e-12 * max(1.0, abs(expected))


def test_gamma_zero_drops_kld(short_corpus):
    batch = make_batch(short_corpus.samples[:4], short_corpus.visible_aspect_ratio)
    model = Encore(tiny(gamma=0.0))
    out = model.forward(batch, k=3, rng=np.random.default_rng(0), training=True)
    loss, parts = total_loss(out, batch, model.config)
    assert parts["KLD"] > 0
    manual = parts["L_FT"] + 10.0 * parts["L_sFT"] + 2.0 * parts["L_ROT"]
    assert abs(float(loss.data) - manual) <= 1e-12 * manual


def test_perfect_prediction_zero_loss(short_corpus):
    batch = make_batch(short_corpus.samples[:3], short_corpus.visible_aspect_ratio)
    pred = T.as_tensor(np.broadcast_to(batch.target, (2, *batch.target.shape)).copy())
    loss, mat = best_of_many(pred, batch.target)
    assert float(loss.data) == 0.0 and np.all(mat == 0)


def test_best_of_many_k1_equals_plain():
    rng = np.random.default_rng(4)
    target = rng.normal(size=(3, TAU, 4))
    pred = rng.normal(size=(1, 3, TAU, 4))
    loss, _ = best_of_many(T.as_tensor(pred), target)
    assert float(loss.data) == pytest.approx(_np_logcosh_loss(pred[0], target), rel=1e-12)


def test_best_of_many_gradient_uses_argmin_only():
    rng = np.random.default_rng(5)
    target = rng.normal(size=(2, TAU, 4))
    pred = T.Tensor(rng.normal(size=(3, 2, TAU, 4)), requires_grad=True)
    with Tape() as tape:
        loss, mat = best_of_many(pred, target)
    tape.backward(loss)
    best = mat.argmin(axis=0)
    for j in range(2):
        for i in range(3):
            assert np.any(pred.grad[i, j] != 0) == (i == best[j])


def test_tiny_model_gradcheck(short_corpus):
    cfg = tiny()
    model = Encore(cfg)
    batch = make_batch(short_corpus.samples[:3], short_corpus.visible_aspect_ratio)

    def loss_fn():
        out = model.forward(batch, k=2, mode="posterior_mean", training=True)
        return total_loss(out, batch, cfg)[0]

    errs = check_gradients(loss_fn, model.parameters(), max_entries=4, floor="auto")
    assert max(errs) < 1e-4


def test_training_deterministic(short_corpus):
    a = train(short_corpus, tiny(), steps=3)
    b = train(short_corpus, tiny(), steps=3)
    for (na, pa), (nb, pb) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    assert a.history_csv() == b.history_csv()
    assert a.history_csv().splitlines()[0] == "epoch,L_FT,L_sFT,L_ROT,KLD,total"


def test_predict_deterministic_and_ordered(short_corpus):
    model = Encore(tiny(deterministic=True))
    p1 = predict(model, short_corpus.samples[:5])
    p2 = predict(model, short_corpus.samples[:5])
    assert p1.shape == (5, 1, TAU, 4)
    assert np.array_equal(p1, p2)
    stoch = predict(Encore(tiny()), short_corpus.samples[:5], seed=3)
    assert stoch.shape == (5, 5, TAU, 4)
    for p in (p1, stoch):
        assert np.all(p[..., 2] >= p[..., 0]) and np.all(p[..., 3] >= p[..., 1])


def test_checkpoint_round_trip(tmp_path, short_corpus):
    model = train(short_corpus, tiny(), steps=2).model
    model.save(tmp_path / "m.enc")
    back = Encore.load(tmp_path / "m.enc")
    assert back.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)


def test_defaults():
    cfg = ModelConfig()
    assert (cfg.embed_dim, cfg.model_dim, cfg.heads) == (64, 128, 2)
    assert cfg.cvae_hidden == (256, 128)
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (10.0, 2.0, 0.1)
    assert (cfg.lr, cfg.batch_size, cfg.epochs) == (4e-4, 128, 100)
    assert cfg.k_samples == 20
    assert list(ABLATIONS) == ["none", "HSF", "HSF+sFT", "HSF+sFT+POFT", "HSF+sFT+ROT"]


def test_standing_reconstruction_overfits():
    # a standing pedestrian seen from a parked car: the observation is one constant box
    n = 20
    peds = tuple(
        PedestrianAgent(f"p{i}", lateral=2.0 + i, depth=12.0 + 3 * i, heading=0.0, walk_speed=0.0,
                        walking=np.zeros(n, bool))
        for i in range(3)
    )
    script = SceneScript("still", n, 0.0, np.zeros(n), np.zeros(n), peds, seed=0)
    corpus = generate_synthetic_corpus([script], o=O, tau=TAU, stride=2)
    # a larger step size so Adam settles inside the logcosh quadratic basin quickly
    cfg = tiny(deterministic=True, batch_size=64, lr=2e-2)
    model = train(corpus, cfg, steps=600).model
    batch = make_batch(corpus.samples, corpus.visible_aspect_ratio)
    recon = model.reconstruct_observation(batch).data
    assert np.all(batch.location == 0)
    assert float(np.max(np.abs(recon - batch.location))) < 1e-3
