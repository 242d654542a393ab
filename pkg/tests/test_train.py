import numpy as np
import pytest

from sentorder.autodiff import Tensor
from sentorder.errors import FatalError
from sentorder.gradcheck import tiny_config
from sentorder.model import ModelConfig, ModelParams, load_checkpoint
from sentorder.sampler import SCHEMES
from sentorder.train import (
    FULL_SCALE_PLAN,
    OptimizerConfig,
    SchedulePlan,
    TrainState,
    adamw_step,
    decay_exempt,
    init_train_state,
    lr_at,
    pretrain,
    single_phase,
)
from sentorder.vocab import build_vocab

from conftest import store_from

OPT = OptimizerConfig()


def toy_state(values: dict[str, list[float]]) -> TrainState:
    cfg = tiny_config(37)
    params = ModelParams(cfg, {name: Tensor(v) for name, v in values.items()})
    return init_train_state(params)


# ---------------------------------------------------------------------------
# Schedule


def test_lr_closed_form_over_full_range():
    plan = single_phase(1000, 128)
    assert lr_at(0, plan, OPT) == 0.0
    assert lr_at(1000, plan, OPT) == 0.0
    assert lr_at(100, plan, OPT) == OPT.lr_max
    assert lr_at(50, plan, OPT) == pytest.approx(0.5 * OPT.lr_max)
    assert lr_at(550, plan, OPT) == pytest.approx(OPT.lr_max * 450 / 900)
    for step in range(1001):
        if step <= 100:
            expected = OPT.lr_max * step / 100
        else:
            expected = OPT.lr_max * (1000 - step) / 900
        assert lr_at(step, plan, OPT) == pytest.approx(expected, abs=1e-18)


def test_lr_peaks_once_and_is_piecewise_linear():
    plan = single_phase(600, 64, warmup_fraction=0.25)
    values = [lr_at(s, plan, OPT) for s in range(601)]
    assert max(values) == values[150] == OPT.lr_max
    assert sum(1 for v in values if v == OPT.lr_max) == 1
    rising = np.diff(values[:151])
    falling = np.diff(values[150:])
    assert np.allclose(rising, rising[0]) and np.allclose(falling, falling[0])


def test_lr_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        lr_at(1001, single_phase(1000, 64), OPT)


def test_plan_validates_phase_sum():
    with pytest.raises(ValueError, match="do not sum"):
        SchedulePlan(100, 0.1, ((60, 128), (60, 512)))
    assert FULL_SCALE_PLAN.phases == ((50_000, 128), (40_000, 512))


# ---------------------------------------------------------------------------
# AdamW


def test_decay_exemptions():
    assert decay_exempt("layer0.attn.norm.bias")
    assert decay_exempt("embed.norm.gain")
    assert decay_exempt("pooler.bias")
    assert not decay_exempt("pooler.weight")
    assert not decay_exempt("embed.token")


def test_zero_gradient_shows_decoupled_decay():
    state = toy_state({"a.weight": [2.0], "a.bias": [2.0], "n.gain": [2.0]})
    zeros = {name: np.zeros(1) for name in state.params.tensors}
    lr = 0.5
    adamw_step(state, zeros, OPT, lr)
    shrink = 1.0 - lr * OPT.weight_decay
    assert state.params.tensors["a.weight"].data[0] == pytest.approx(2.0 * shrink)
    assert state.params.tensors["a.bias"].data[0] == 2.0
    assert state.params.tensors["n.gain"].data[0] == 2.0


def test_first_step_moves_by_about_lr():
    state = toy_state({"p.weight": [0.0]})
    adamw_step(state, {"p.weight": np.asarray([1.0])}, OPT, lr=1e-3)
    # bias-corrected first step is lr / (1 + eps), decay acts on p = 0
    assert state.params.tensors["p.weight"].data[0] == pytest.approx(-1e-3, rel=1e-4)
    assert state.step == 1


def test_adamw_converges_on_quadratic():
    state = toy_state({"x.weight": [1.0]})
    opt = OptimizerConfig(lr_max=0.05, weight_decay=0.0)
    trace = []
    for _ in range(100):
        x = state.params.tensors["x.weight"].data
        adamw_step(state, {"x.weight": 2.0 * x}, opt, lr=opt.lr_max)
        trace.append(abs(float(x[0])))
    assert trace[-1] < 0.5
    assert trace[-1] < trace[0]


def test_non_finite_gradient_is_fatal():
    state = toy_state({"p.weight": [0.0]})
    with pytest.raises(FatalError, match=r"p\.weight at step 1"):
        adamw_step(state, {"p.weight": np.asarray([np.nan])}, OPT, lr=1e-3)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(weight_decay=-0.1)


# ---------------------------------------------------------------------------
# Pretrain loop


@pytest.fixture(scope="module")
def train_setup():
    rng = np.random.default_rng(123)
    words = [f"w{i}" for i in range(12)]
    docs = [[" ".join(rng.choice(words, size=3)) for _ in range(4)] for _ in range(6)]
    store = store_from(docs)
    vocab = build_vocab(store, max_size=32)
    cfg = ModelConfig(vocab_size=len(vocab), layers=1, heads=2, hidden=16, ffn=32,
                      max_position=32, num_order_classes=3, dropout=0.1)
    return store, vocab, cfg


def run_pretrain(store, vocab, cfg, out, phases, seed=9, **kw):
    plan = SchedulePlan(sum(s for s, _ in phases), 0.25, tuple(phases))
    return pretrain(store, vocab, SCHEMES["pn3"], cfg, OptimizerConfig(), plan,
                    seed, out, batch_size=4, metrics_every=kw.pop("metrics_every", 1), **kw)


def test_zero_steps_emits_initial_checkpoint_only(tmp_path, train_setup):
    store, vocab, cfg = train_setup
    final = run_pretrain(store, vocab, cfg, tmp_path, [(0, 24)])
    assert final.exists()
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows == ["step,lr,mlm_loss,order_loss,order_acc"]
    params = load_checkpoint(final)
    assert params.config == cfg


def test_same_seed_runs_are_byte_identical(tmp_path, train_setup):
    store, vocab, cfg = train_setup
    a = run_pretrain(store, vocab, cfg, tmp_path / "a", [(6, 24)])
    b = run_pretrain(store, vocab, cfg, tmp_path / "b", [(6, 24)])
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/checkpoint-final.train").read_bytes() == \
        (tmp_path / "b/checkpoint-final.train").read_bytes()


def test_different_seed_changes_metrics(tmp_path, train_setup):
    store, vocab, cfg = train_setup
    run_pretrain(store, vocab, cfg, tmp_path / "a", [(6, 24)], seed=1)
    run_pretrain(store, vocab, cfg, tmp_path / "b", [(6, 24)], seed=2)
    assert (tmp_path / "a/metrics.csv").read_text() != (tmp_path / "b/metrics.csv").read_text()


def test_phase_boundary_checkpoints_and_resume(tmp_path, train_setup):
    store, vocab, cfg = train_setup
    phases = [(4, 20), (4, 28)]
    run_pretrain(store, vocab, cfg, tmp_path / "full", phases)
    full_rows = (tmp_path / "full/metrics.csv").read_text().splitlines()

    run_pretrain(store, vocab, cfg, tmp_path / "half", phases)
    boundary = tmp_path / "half/checkpoint-step0000004.train"
    assert boundary.exists()

    final = run_pretrain(store, vocab, cfg, tmp_path / "resumed", phases,
                         resume_from=boundary)
    resumed_rows = (tmp_path / "resumed/metrics.csv").read_text().splitlines()
    assert resumed_rows[0] == full_rows[0]
    assert resumed_rows[1:] == full_rows[5:]
    assert final.read_bytes() == (tmp_path / "full/checkpoint-final.model").read_bytes()


def test_metrics_header_and_cadence(tmp_path, train_setup):
    store, vocab, cfg = train_setup
    run_pretrain(store, vocab, cfg, tmp_path, [(6, 24)], metrics_every=2)
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,lr,mlm_loss,order_loss,order_acc"
    assert [r.split(",")[0] for r in rows[1:]] == ["2", "4", "6"]
    acc = float(rows[1].split(",")[4])
    assert 0.0 <= acc <= 1.0


def test_pretrain_validates_vocab_size(tmp_path, train_setup):
    store, vocab, _ = train_setup
    bad = ModelConfig(vocab_size=7, layers=1, heads=2, hidden=16, ffn=32,
                      max_position=32, num_order_classes=3)
    with pytest.raises(FatalError, match="vocab_size"):
        run_pretrain(store, vocab, bad, tmp_path, [(2, 24)])


def test_pretrain_validates_order_classes(tmp_path, train_setup):
    store, vocab, cfg = train_setup
    import dataclasses

    bad = dataclasses.replace(cfg, num_order_classes=5)
    with pytest.raises(FatalError, match="order classes"):
        run_pretrain(store, vocab, bad, tmp_path, [(2, 24)])


def test_pretrain_validates_phase_length(tmp_path, train_setup):
    store, vocab, cfg = train_setup
    with pytest.raises(FatalError, match="max_position"):
        run_pretrain(store, vocab, cfg, tmp_path, [(2, 64)])
