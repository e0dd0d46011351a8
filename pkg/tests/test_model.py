import dataclasses
import math

import numpy as np
import numpy.testing as npt
import pytest

from magnet import checkpoint, model
from magnet import tensor as tz
from magnet.data import make_labels, split_and_normalize, synth_panel
from magnet.model import AdamW, ModelConfig, TrainConfig
from magnet.tensor import Tensor, named_tensors

LN2 = 0.6931471805599453


def _tiny_config(**overrides):
    base = dict(
        n_stocks=2, n_features=3, window=4, d=8, state=4, experts=2, heads=2,
        channels=2, m1=3, m2=3, k=4, fusion_hidden=8, gph_hidden=8,
        dropout=0.0, seed=5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _gelu_np(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


# -- config ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        _tiny_config(d=9)
    with pytest.raises(ValueError, match="k="):
        _tiny_config(k=9)  # window * n_stocks = 8
    with pytest.raises(ValueError, match="m1"):
        _tiny_config(m1=0)
    with pytest.raises(ValueError, match="dropout"):
        _tiny_config(dropout=1.0)
    with pytest.raises(ValueError, match="positive"):
        _tiny_config(n_stocks=0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


# -- embedding ----------------------------------------------------------------


def test_embed_zero_input_zero_bias():
    w = Tensor(np.ones((3, 4)))
    b = Tensor(np.zeros(4))
    out = model.embed(Tensor(np.zeros((2, 5, 3))), w, b)
    npt.assert_array_equal(out.data, np.zeros((2, 5, 4)))


def test_embed_identity_weights_is_gelu(rng):
    x = rng.normal(size=(2, 3, 4))
    out = model.embed(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    npt.assert_allclose(out.data, _gelu_np(x), rtol=0, atol=1e-15)


def test_embed_shape_and_errors(rng):
    cfg = _tiny_config()
    params = model.init_params(cfg)
    x = rng.normal(size=(2, 4, 3))
    assert model.embed(Tensor(x), params.embed_w, params.embed_b).data.shape == (2, 4, 8)
    with pytest.raises(ValueError):
        model.embed(Tensor(rng.normal(size=(2, 4, 5))), params.embed_w, params.embed_b)


# -- forward --------------------------------------------------------------------


def test_forward_rows_sum_to_one(rng):
    cfg = _tiny_config()
    params = model.init_params(cfg)
    probs = model.forward(rng.normal(size=(2, 4, 3)), cfg, params)
    assert probs.data.shape == (2, 2)
    npt.assert_allclose(probs.data.sum(axis=1), np.ones(2), rtol=0, atol=1e-9)
    assert np.all(probs.data > 0)


def test_forward_all_stages_disabled_is_embed_head(rng):
    cfg = _tiny_config(use_mage=False, use_f2d=False, use_tch=False, use_gph=False)
    params = model.init_params(cfg)
    x = rng.normal(size=(2, 4, 3))
    probs = model.forward(x, cfg, params).data

    z = _gelu_np(x @ params.embed_w.data + params.embed_b.data)
    g = z.reshape(2, 4 * 8)
    hidden = _gelu_np(g @ params.head_w1.data + params.head_b1.data)
    logits = hidden @ params.head_w2.data + params.head_b2.data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    npt.assert_allclose(probs, e / e.sum(axis=1, keepdims=True), rtol=0, atol=1e-12)


@pytest.mark.parametrize("flag", ["use_mage", "use_f2d", "use_tch", "use_gph"])
def test_forward_each_ablation_valid(rng, flag):
    cfg = _tiny_config(**{flag: False})
    params = model.init_params(cfg)
    probs = model.forward(rng.normal(size=(2, 4, 3)), cfg, params).data
    npt.assert_allclose(probs.sum(axis=1), np.ones(2), rtol=0, atol=1e-9)


def test_forward_shape_mismatch(rng):
    cfg = _tiny_config()
    with pytest.raises(ValueError, match="does not match config"):
        model.forward(rng.normal(size=(3, 4, 3)), cfg, model.init_params(cfg))


def test_forward_permutation_consistent(rng):
    # Holds exactly for the stages whose parameters are shared across
    # stocks. The feature-wise fusion FFN and the TCH incidence W1 index
    # stock positions directly, so those stages are excluded by design.
    cfg = _tiny_config(n_stocks=3, k=6, use_f2d=False, use_tch=False)
    params = model.init_params(cfg)
    x = rng.normal(size=(3, 4, 3))
    perm = np.array([2, 0, 1])
    base = model.forward(x, cfg, params).data
    permuted = model.forward(x[perm], cfg, params).data
    npt.assert_allclose(permuted, base[perm], rtol=0, atol=1e-9)


def test_forward_stock_positional_stages_break_permutation(rng):
    # The complement: with the positional stages on, equivariance is
    # structurally absent (this guards against silently weight-tying them).
    cfg = _tiny_config(n_stocks=3, k=6)
    params = model.init_params(cfg)
    x = rng.normal(size=(3, 4, 3))
    perm = np.array([2, 0, 1])
    base = model.forward(x, cfg, params).data
    permuted = model.forward(x[perm], cfg, params).data
    assert not np.allclose(permuted, base[perm], atol=1e-9)


def test_forward_training_dropout_changes_output(rng):
    cfg = _tiny_config(dropout=0.3)
    params = model.init_params(cfg)
    x = rng.normal(size=(2, 4, 3))
    eval_probs = model.forward(x, cfg, params).data
    train_probs = model.forward(
        x, cfg, params, training=True, rng=np.random.default_rng(0)
    ).data
    assert not np.allclose(eval_probs, train_probs)
    # and evaluation itself is dropout-free, hence reproducible
    npt.assert_array_equal(eval_probs, model.forward(x, cfg, params).data)


def test_forward_gradients_flow_to_input(rng):
    cfg = _tiny_config()
    params = model.init_params(cfg)
    x = Tensor(rng.normal(size=(2, 4, 3)))
    err = tz.grad_check(
        lambda t: model.loss(model.forward(t, cfg, params), np.array([1, 0])),
        x, sample=8, rng=np.random.default_rng(3),
    )
    assert err < 1e-4


def test_forward_sampled_parameter_gradients(rng):
    cfg = _tiny_config()
    params = model.init_params(cfg)
    x = rng.normal(size=(2, 4, 3))
    labels = np.array([1, 0])

    def build():
        return model.loss(model.forward(x, cfg, params), labels)

    check_rng = np.random.default_rng(17)
    named = dict(named_tensors(params))
    for name in ["embed_w", "mage[0].moe.w_g", "tch[0].inner.p1",
                 "gph[0].inner.w2", "head_w2", "f2d[0].inner.out_w"]:
        err = tz.grad_check_param(build, named[name], sample=4, rng=check_rng)
        assert err < 1e-4, f"{name}: grad error {err}"


# -- loss -----------------------------------------------------------------------


def test_loss_perfect_prediction_is_zero():
    probs = Tensor([[0.0, 1.0], [1.0, 0.0]])
    assert model.loss(probs, np.array([1, 0])).data == 0.0


def test_loss_uniform_prediction_is_ln2():
    probs = Tensor([[0.5, 0.5], [0.5, 0.5]])
    npt.assert_allclose(model.loss(probs, np.array([0, 1])).data, LN2, rtol=0, atol=1e-12)


def test_loss_zero_probability_is_clamped():
    probs = Tensor([[1.0, 0.0]])
    npt.assert_allclose(
        model.loss(probs, np.array([1])).data, -math.log(1e-12), rtol=0, atol=1e-9
    )


def test_loss_label_validation():
    probs = Tensor([[0.5, 0.5]])
    with pytest.raises(ValueError):
        model.loss(probs, np.array([2]))
    with pytest.raises(ValueError):
        model.loss(probs, np.array([0, 1]))


# -- optimizer -------------------------------------------------------------------


def test_adamw_skips_gradless_params():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    a.grad = np.full(3, 0.5)
    opt = AdamW([("a", a), ("b", b)], lr=0.1)
    opt.step()
    assert not np.array_equal(a.data, np.ones(3))
    npt.assert_array_equal(b.data, np.ones(3))


def test_adamw_single_step_matches_hand_update():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.4])
    opt = AdamW([("p", p)], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    opt.step()
    m_hat = 0.4  # bias correction cancels on step 1
    v_hat = 0.4**2
    expected = 2.0 - 0.01 * (m_hat / (math.sqrt(v_hat) + 1e-8) + 0.1 * 2.0)
    npt.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)


def test_adamw_zero_grad_is_pure_decay():
    p = Tensor(np.array([5.0]), requires_grad=True)
    p.grad = np.array([0.0])
    opt = AdamW([("p", p)], lr=0.01, weight_decay=0.5)
    opt.step()
    npt.assert_allclose(p.data, [5.0 * (1 - 0.01 * 0.5)], rtol=0, atol=1e-15)


# -- windows ----------------------------------------------------------------------


def test_day_windows_count_and_alignment():
    panel = synth_panel(n_stocks=3, n_days=12, n_features=4, seed=0)
    labels = make_labels(panel.closes)
    samples = list(model.day_windows(panel, window=5))
    assert len(samples) == 12 - 5
    t0, x0, y0 = samples[0]
    assert t0 == 4 and x0.shape == (3, 5, 4)
    npt.assert_array_equal(x0, panel.features[:, 0:5])
    npt.assert_array_equal(y0, labels[:, 4])
    t_last, x_last, y_last = samples[-1]
    assert t_last == 10  # last day serves only as label source
    npt.assert_array_equal(y_last, labels[:, 10])


def test_day_windows_too_short():
    panel = synth_panel(n_stocks=2, n_days=5, n_features=3, seed=0)
    with pytest.raises(ValueError, match="need >"):
        list(model.day_windows(panel, window=5))


# -- training ----------------------------------------------------------------------


def _toy_splits(seed=11):
    panel = synth_panel(n_stocks=4, n_days=60, n_features=4, seed=seed)
    return split_and_normalize(panel)


def test_train_deterministic_same_seed():
    cfg = _tiny_config(n_stocks=4, n_features=4, window=5, k=6, dropout=0.1)
    tcfg = TrainConfig(lr=1e-3, max_epochs=2, patience=5)
    splits = _toy_splits()
    params_a, hist_a = model.train(splits, cfg, tcfg)
    params_b, hist_b = model.train(splits, cfg, tcfg)
    assert hist_a == hist_b
    for (name, a), (_, b) in zip(named_tensors(params_a), named_tensors(params_b)):
        npt.assert_array_equal(a.data, b.data, err_msg=name)


def test_train_history_and_learning():
    cfg = _tiny_config(n_stocks=4, n_features=4, window=5, k=6)
    tcfg = TrainConfig(lr=1e-3, max_epochs=3, patience=5)
    params, history = model.train(_toy_splits(), cfg, tcfg)
    assert [h["epoch"] for h in history] == [1, 2, 3]
    assert all(set(h) == {"epoch", "train_loss", "val_accuracy"} for h in history)
    assert history[-1]["train_loss"] < history[0]["train_loss"]


def test_train_patience_one_stops_after_one_extra_epoch():
    cfg = _tiny_config(n_stocks=4, n_features=4, window=5, k=6)
    # lr tiny enough that validation accuracy cannot improve after epoch 1
    tcfg = TrainConfig(lr=1e-12, max_epochs=10, patience=1)
    _, history = model.train(_toy_splits(), cfg, tcfg)
    assert len(history) == 2


def test_train_restores_best_validation_params():
    cfg = _tiny_config(n_stocks=4, n_features=4, window=5, k=6)
    tcfg = TrainConfig(lr=1e-3, max_epochs=4, patience=10)
    splits = _toy_splits()
    params, history = model.train(splits, cfg, tcfg)
    best = max(h["val_accuracy"] for h in history)
    assert model.evaluate_accuracy(splits.val, cfg, params) == best


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = _tiny_config()
    params = model.init_params(cfg)
    path = str(tmp_path / "model.ckpt")
    checkpoint.save_checkpoint(path, cfg, params)
    loaded_cfg, loaded = checkpoint.load_checkpoint(path)
    assert loaded_cfg == cfg
    for (name, a), (_, b) in zip(named_tensors(params), named_tensors(loaded)):
        npt.assert_array_equal(a.data, b.data, err_msg=name)


def test_checkpoint_resave_bit_identical(tmp_path):
    cfg = _tiny_config()
    params = model.init_params(cfg)
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    checkpoint.save_checkpoint(p1, cfg, params)
    checkpoint.save_checkpoint(p2, cfg, params)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_refuses_config_mismatch(tmp_path):
    cfg = _tiny_config()
    path = str(tmp_path / "model.ckpt")
    checkpoint.save_checkpoint(path, cfg, model.init_params(cfg))
    other = dataclasses.replace(cfg, seed=99)
    with pytest.raises(ValueError, match="refusing to resume"):
        checkpoint.load_checkpoint(path, expected_config=other)


def test_checkpoint_manifest_lists_tensors(tmp_path):
    cfg = _tiny_config()
    params = model.init_params(cfg)
    path = str(tmp_path / "model.ckpt")
    checkpoint.save_checkpoint(path, cfg, params)
    lines = open(path + ".manifest.txt", encoding="utf-8").read().splitlines()
    assert lines[0].startswith("config sha256:")
    assert len(lines) == 1 + len(named_tensors(params))
    assert any(line.startswith("embed_w 3x8 sha256:") for line in lines)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        checkpoint.read_checkpoint(str(path))
