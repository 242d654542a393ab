import numpy as np
import pytest

from sentorder.errors import FatalError
from sentorder.gradcheck import tiny_batch, tiny_config
from sentorder.model import (
    COUNTERS,
    ModelConfig,
    clone_params,
    forward,
    init_params,
    load_checkpoint,
    loss,
    pad_batch,
    param_shapes,
    predict_order,
    save_checkpoint,
)
from sentorder.vocab import PAD_ID


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(2024)
    batch = tiny_batch(37, rng)
    padded = pad_batch(batch)
    cfg = tiny_config(37, max_position=padded.ids.shape[1] + 4)
    params = init_params(cfg, np.random.default_rng(7))
    return cfg, params, batch, padded


def test_config_validates_head_divisibility():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, hidden=10, heads=3)


def test_param_shapes_cover_tied_head(setup):
    cfg, params, *_ = setup
    shapes = param_shapes(cfg)
    assert set(params.tensors) == set(shapes)
    # the masked-word output projection is the token embedding itself
    assert "mlm.output.weight" not in shapes
    assert shapes["embed.token"] == (cfg.vocab_size, cfg.hidden)
    assert shapes["order.weight"] == (cfg.hidden, cfg.num_order_classes)


def test_forward_is_deterministic_without_dropout(setup):
    _, params, batch, _ = setup
    a = forward(params, batch, train=False)
    b = forward(params, batch, train=False)
    assert np.array_equal(a.order_logits.data, b.order_logits.data)
    assert np.array_equal(a.mlm_logits.data, b.mlm_logits.data)


def test_zero_order_head_gives_uniform_classes(setup):
    _, params, batch, _ = setup
    zeroed = clone_params(params)
    zeroed.tensors["order.weight"].data[:] = 0.0
    zeroed.tensors["order.bias"].data[:] = 0.0
    out = forward(zeroed, batch, train=False)
    assert np.array_equal(out.order_logits.data, np.zeros_like(out.order_logits.data))
    cls, probs = predict_order(zeroed, batch[0])
    assert cls == 0  # ties break to the lowest index
    assert np.allclose(probs, 1.0 / 3.0)


def test_predict_order_argmax_and_tie_break(setup):
    _, params, batch, _ = setup
    rigged = clone_params(params)
    rigged.tensors["order.weight"].data[:] = 0.0
    rigged.tensors["order.bias"].data[:] = [2.0, 1.0, 0.0]
    assert predict_order(rigged, batch[0])[0] == 0
    rigged.tensors["order.bias"].data[:] = [1.0, 1.0, 0.0]
    assert predict_order(rigged, batch[0])[0] == 0
    rigged.tensors["order.bias"].data[:] = [0.0, 1.0, 1.0]
    assert predict_order(rigged, batch[0])[0] == 1


def test_batch_permutation_permutes_outputs(setup):
    _, params, batch, _ = setup
    perm = [1, 0]
    straight = forward(params, pad_batch(batch), train=False)
    shuffled = forward(params, pad_batch([batch[i] for i in perm]), train=False)
    assert np.array_equal(shuffled.order_logits.data, straight.order_logits.data[perm])


def test_padding_does_not_leak_into_real_positions(setup):
    _, params, batch, _ = setup
    alone = forward(params, pad_batch([batch[0]]), train=False)
    together = forward(params, pad_batch(batch), train=False)  # batch[1] is longer
    assert np.allclose(alone.order_logits.data[0], together.order_logits.data[0],
                       atol=1e-12, rtol=0.0)


def test_dropout_training_changes_outputs_but_is_seeded(setup):
    cfg, _, batch, padded = setup
    import dataclasses

    dropping = dataclasses.replace(cfg, dropout=0.2)
    params = init_params(dropping, np.random.default_rng(7))
    run = lambda seed: forward(params, padded, train=True,
                               rng=np.random.default_rng(seed)).order_logits.data
    assert np.array_equal(run(3), run(3))
    assert not np.array_equal(run(3), run(4))


def test_mlm_weight_tying_is_structural(setup):
    _, params, batch, _ = setup
    before = forward(params, batch, train=False).mlm_logits.data.copy()
    poked = clone_params(params)
    # A single-component poke; a uniform row shift would be cancelled by the
    # zero-mean normalization feeding the tied projection.
    poked.tensors["embed.token"].data[20, 3] += 0.5
    after = forward(poked, batch, train=False).mlm_logits.data
    # column 20 of the masked-word logits moves with the embedding row
    assert not np.allclose(before[:, 20], after[:, 20])


def test_golden_loss_frozen(setup):
    _, params, batch, padded = setup
    out = forward(params, padded, train=False)
    total, _, _ = loss(out.mlm_logits, padded.mlm_labels, out.order_logits, padded.targets)
    # frozen from the first verified run (seed 2024 batch, seed 7 params)
    assert abs(total.item() - 4.731586248309368) < 1e-10


def test_loss_is_additive(setup):
    _, params, batch, padded = setup
    out = forward(params, batch, train=False)
    total, mlm_v, order_v = loss(out.mlm_logits, padded.mlm_labels,
                                 out.order_logits, padded.targets)
    assert total.item() == mlm_v + order_v


def test_loss_uniform_logits_with_smoothed_target():
    import math

    from sentorder.autodiff import Tensor

    total, mlm_v, order_v = loss(None, None, Tensor([[0.0, 0.0, 0.0]]),
                                 np.asarray([[0.8, 0.1, 0.1]]))
    assert abs(order_v - math.log(3.0)) < 1e-12


def test_loss_without_masked_positions_counts(setup):
    _, params, batch, _ = setup
    import dataclasses

    bare = [dataclasses.replace(ex, mlm_positions=np.empty(0, dtype=np.int64),
                                mlm_labels=np.empty(0, dtype=np.int64)) for ex in batch]
    padded = pad_batch(bare)
    out = forward(params, padded, train=False)
    before = COUNTERS["mlm_empty_batches"]
    total, mlm_v, order_v = loss(out.mlm_logits, padded.mlm_labels,
                                 out.order_logits, padded.targets)
    assert out.mlm_logits is None
    assert mlm_v == 0.0
    assert total.item() == order_v
    assert COUNTERS["mlm_empty_batches"] == before + 1


def test_sequence_longer_than_max_position_is_fatal(setup):
    cfg, params, batch, _ = setup
    import dataclasses

    long = dataclasses.replace(
        batch[0],
        tokens=np.concatenate([batch[0].tokens,
                               np.full(cfg.max_position, PAD_ID, dtype=np.int64)]),
        segment_ids=np.concatenate([batch[0].segment_ids,
                                    np.ones(cfg.max_position, dtype=np.int64)]),
    )
    with pytest.raises(FatalError, match="max_position"):
        forward(params, [long], train=False)


def test_pad_batch_rejects_mixed_schemes(setup):
    import dataclasses

    _, _, batch, _ = setup
    other = dataclasses.replace(batch[0], target=np.asarray([0.5, 0.5]))
    with pytest.raises(ValueError, match="mixed target widths"):
        pad_batch([batch[0], other])


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, setup):
    _, params, *_ = setup
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.config == params.config
    for name, tensor in params.tensors.items():
        assert np.array_equal(loaded.tensors[name].data, tensor.data), name
    # saving the loaded params reproduces the file byte for byte
    second = tmp_path / "model2.ckpt"
    save_checkpoint(second, loaded)
    assert path.read_bytes() == second.read_bytes()


def test_checkpoint_rejects_tampered_tensor_set(tmp_path, setup):
    _, params, *_ = setup
    trimmed = clone_params(params)
    del trimmed.tensors["pooler.bias"]
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, trimmed)
    with pytest.raises(FatalError, match="pooler.bias"):
        load_checkpoint(path)
