import math

import numpy as np
import pytest
import torch

from lorra.data import Vocabulary
from lorra.errors import ConfigError, ContractError, NumericError
from lorra.evaluation import vqa_accuracy
from lorra.model import predict
from lorra.training import (
    TrainConfig,
    bce_with_logits,
    build_targets,
    lr_at,
    train,
)

from conftest import make_instance, micro_instances, micro_model


# -- targets -----------------------------------------------------------------

def test_targets_both_homes():
    vocab = Vocabulary([f"a{i}" for i in range(7)] + ["stop", "x"])
    inst = make_instance("stop", ocr_tokens=["no", "entry", "STOP"])
    t = build_targets(inst, vocab, n_slots=50)
    N = len(vocab)
    assert t.values[7] == 1.0 and t.values[N + 2] == 1.0
    assert t.values.sum() == 2.0
    assert t.mask[:N].all() and t.mask[N:N + 3].all() and not t.mask[N + 3:].any()


def test_targets_multi_token_answer_unreachable():
    inst = make_instance("fly emirates", ocr_tokens=["fly", "emirates"])
    t = build_targets(inst, Vocabulary(["yes"]), n_slots=50)
    assert not t.values.any()


def test_targets_duplicate_tokens():
    inst = make_instance("20", ocr_tokens=["20", "a", "b", "c", "20"])
    t = build_targets(inst, Vocabulary(["yes"]), n_slots=50)
    assert t.values[1 + 0] == 1.0 and t.values[1 + 4] == 1.0 and t.values.sum() == 2.0


def test_targets_soft_and_hard():
    inst = make_instance(["red"] * 2 + ["blue"] * 8, ocr_tokens=["red"])
    vocab = Vocabulary(["blue", "red"])
    soft = build_targets(inst, vocab, n_slots=2)
    assert soft.values.tolist() == pytest.approx([1.0, 0.6, 0.6, 0.0])
    hard = build_targets(inst, vocab, n_slots=2, mode="hard")
    assert hard.values.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_target_metric_consistency():
    inst = make_instance(["red"] * 4 + ["blue"] * 6, ocr_tokens=["x", "Red"])
    vocab = Vocabulary(["blue", "green"])
    t = build_targets(inst, vocab, n_slots=2)
    for idx in np.flatnonzero(t.values == 1.0):
        logits = torch.full((4,), -5.0, dtype=torch.float64)
        logits[idx] = 5.0
        from lorra.model import ModelOutput

        p = predict(ModelOutput(logits, torch.zeros(2), {}, None), inst.ocr_tokens, vocab)
        assert vqa_accuracy(p.normalized, inst.answers) == 1.0


# -- loss --------------------------------------------------------------------

def test_bce_half_at_zero():
    loss = bce_with_logits(torch.tensor([0.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64))
    assert float(loss) == pytest.approx(-(0.5 * math.log(0.5) * 2), abs=1e-15)
    assert float(loss) == pytest.approx(0.6931, abs=1e-4)


def test_bce_saturation():
    assert float(bce_with_logits(torch.tensor([30.0], dtype=torch.float64), torch.ones(1, dtype=torch.float64))) <= 1e-12


def test_bce_stable_for_large_negative():
    loss = float(bce_with_logits(torch.tensor([-30.0], dtype=torch.float64), torch.ones(1, dtype=torch.float64)))
    assert math.isfinite(loss)
    assert loss == pytest.approx(30.0, abs=1e-12)


def test_bce_extreme_logits_finite():
    z = torch.tensor([-1e4, 1e4, -800.0, 800.0], dtype=torch.float32)
    loss = bce_with_logits(z, torch.tensor([1.0, 0.0, 0.3, 0.7]))
    assert torch.isfinite(loss) and float(loss) >= 0


def test_bce_gradient_closed_form_and_fd():
    r = np.random.default_rng(0)
    z = torch.tensor(r.normal(size=6) * 3, dtype=torch.float64, requires_grad=True)
    t = torch.tensor(r.uniform(size=6), dtype=torch.float64)
    bce_with_logits(z, t).backward()
    closed = (torch.sigmoid(z) - t) / 6
    torch.testing.assert_close(z.grad, closed.detach(), rtol=1e-12, atol=1e-15)
    h = 1e-6
    for i in range(6):
        zp, zm = z.detach().clone(), z.detach().clone()
        zp[i] += h
        zm[i] -= h
        fd = (bce_with_logits(zp, t) - bce_with_logits(zm, t)) / (2 * h)
        assert float(fd) == pytest.approx(float(z.grad[i]), rel=1e-6, abs=1e-10)


def test_bce_masked_slots_zero_gradient():
    z = torch.tensor([0.3, -math.inf, 1.2, 0.7], dtype=torch.float64, requires_grad=True)
    t = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    mask = torch.tensor([True, True, True, False])
    loss = bce_with_logits(z, t, mask)
    loss.backward()
    assert z.grad[1] == 0 and z.grad[3] == 0
    expected = bce_with_logits(torch.tensor([0.3, 1.2], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert float(loss.detach()) == pytest.approx(float(expected), abs=1e-15)


def test_bce_shape_mismatch():
    with pytest.raises(ContractError):
        bce_with_logits(torch.zeros(3), torch.zeros(4))


def test_model_masked_slots_receive_no_gradient():
    m = micro_model(max_ocr=2)
    insts = micro_instances(n=3)
    b = m.prepare(insts)
    b.ocr_emb.requires_grad_(True)
    from lorra.training import stack_targets

    loss = bce_with_logits(m.forward_batch(b).logits, stack_targets(insts, m.vocab, 2).double())
    loss.backward()
    assert not b.ocr_emb.grad[~b.ocr_mask].any()


# -- schedule ----------------------------------------------------------------

def test_lr_full_scale_defaults():
    cfg = TrainConfig()
    assert lr_at(cfg, 0) == 5e-2
    assert lr_at(cfg, 13999) == 5e-2
    assert lr_at(cfg, 23999) == pytest.approx(5e-4, rel=1e-12)


def test_lr_midpoint():
    cfg = TrainConfig(iterations=24001, decay_start=14000)
    mid = 14000 + (24000 - 14000) // 2
    assert lr_at(cfg, mid) == pytest.approx((5e-2 + 5e-4) / 2, rel=1e-12)


def test_lr_monotone_and_continuous():
    cfg = TrainConfig()
    lrs = [lr_at(cfg, s) for s in range(cfg.iterations)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lr_at(cfg, cfg.decay_start) == lr_at(cfg, cfg.decay_start - 1)
    assert abs(lr_at(cfg, cfg.decay_start + 1) - lr_at(cfg, cfg.decay_start)) < 1e-5


def test_lr_out_of_range():
    with pytest.raises(ContractError):
        lr_at(TrainConfig(), 24000)
    with pytest.raises(ContractError):
        lr_at(TrainConfig(), -1)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(iterations=100, decay_start=200).validate()
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"iterations": 3, "bogus": 1})


# -- loop --------------------------------------------------------------------

def _small_cfg(**kw):
    base = dict(iterations=40, batch_size=4, decay_start=20, val_every=10, log_every=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_is_noop():
    m = micro_model(dtype=torch.float32)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    res = train(m, micro_instances(), TrainConfig(iterations=0, decay_start=0))
    assert res.history == []
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_single_instance_overfits():
    m = micro_model(dtype=torch.float32)
    inst = micro_instances(n=3)[2]
    res = train(m, [inst], TrainConfig(iterations=200, batch_size=1, decay_start=200, log_every=1,
                                       base_lr=1e-2))
    assert res.history[-1]["loss"] < res.history[0]["loss"]


def test_identical_seeds_identical_history(tmp_path):
    runs = []
    for k in range(2):
        m = micro_model(dtype=torch.float32)
        res = train(m, micro_instances(n=6), _small_cfg(), val_data=micro_instances(seed=1, n=3),
                    log_path=tmp_path / f"log{k}.jsonl")
        runs.append(res)
    assert runs[0].history == runs[1].history
    assert (tmp_path / "log0.jsonl").read_bytes() == (tmp_path / "log1.jsonl").read_bytes()


def test_history_records_validation():
    m = micro_model(dtype=torch.float32)
    res = train(m, micro_instances(n=6), _small_cfg(), val_data=micro_instances(seed=1, n=3))
    vals = [h for h in res.history if "val_accuracy" in h]
    assert [h["step"] for h in vals] == [10, 20, 30, 40]
    assert res.best_val_accuracy == max(h["val_accuracy"] for h in vals)


def test_resume_reproduces_history(tmp_path):
    cfg = _small_cfg()
    full = train(micro_model(dtype=torch.float32), micro_instances(n=6), cfg,
                 val_data=micro_instances(seed=1, n=3))
    _run_until(micro_model(dtype=torch.float32), cfg, 20, tmp_path / "s20.pt")
    state = torch.load(tmp_path / "s20.pt", weights_only=False)
    assert state["step"] == 20
    m = micro_model(dtype=torch.float32)
    m.load_state_dict(state["model"])
    resumed = train(m, micro_instances(n=6), cfg, val_data=micro_instances(seed=1, n=3), state=state)
    assert resumed.history == full.history
    assert resumed.best_step == full.best_step


def _run_until(model, cfg, stop, path):
    """Train the first ``stop`` steps of ``cfg`` and keep the state written at ``stop``."""

    class Stop(Exception):
        pass

    saved = {}
    orig = torch.save

    def spy(obj, p):
        orig(obj, p)
        if obj["step"] == stop:
            saved["ok"] = True
            raise Stop

    torch.save = spy
    try:
        train(model, micro_instances(n=6), cfg, val_data=micro_instances(seed=1, n=3), state_path=path)
    except Stop:
        pass
    finally:
        torch.save = orig
    assert saved


def test_non_finite_loss_names_step():
    m = micro_model(dtype=torch.float32)
    with torch.no_grad():
        m.head_out.bias.fill_(math.nan)
    with pytest.raises(NumericError, match="step 0"):
        train(m, micro_instances(), _small_cfg())
