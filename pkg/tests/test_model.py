import json
import math

import numpy as np
import pytest
import torch

from kbgnn import model as model_mod
from kbgnn.consistency import MemoryBank
from kbgnn.data import CtrExample
from kbgnn.model import (TrainConfig, TrainingDiverged, joint_loss, load_checkpoint, predict_ctr, rec_loss,
                         save_checkpoint, score, train)

from helpers import first_batch, tiny_config, tiny_model, tiny_split
from oracles import central_difference


@pytest.fixture(scope="module")
def data():
    return tiny_split()


def test_zeroed_mlp_predicts_one_half(data):
    split, g = data
    m = tiny_model(split, g)
    with torch.no_grad():
        for p in m.mlp.parameters():
            p.zero_()
    probs = m(first_batch(m, split.train))
    assert torch.all(probs == 0.5)


def test_output_bias_is_monotone(data):
    split, g = data
    m = tiny_model(split, g)
    batch = first_batch(m, split.train)
    with torch.no_grad():
        before = m(batch)
        m.mlp[2].bias += 0.5
        after = m(batch)
    assert torch.all(after > before)


def test_disabled_seq_equals_mlp_without_seq_slice(data):
    split, g = data
    m = tiny_model(split, g, disable_seq=True)
    batch = first_batch(m, split.train)
    enc = m.encode(batch)
    assert torch.all(enc.e_s == 0)
    d = m.config.dim
    w1 = m.mlp[0].weight
    reduced = torch.cat([w1[:, :d], w1[:, 2 * d:]], dim=1)
    hidden = torch.nn.functional.leaky_relu(torch.cat([enc.e_g, enc.h_t], 1) @ reduced.T + m.mlp[0].bias, 0.01)
    logit = (hidden @ m.mlp[2].weight.T + m.mlp[2].bias)[:, 0]
    assert torch.allclose(logit, enc.logit, atol=1e-7)


def test_disabled_geo_uses_raw_embedding(data):
    split, g = data
    m = tiny_model(split, g, disable_geo=True)
    enc = m.encode(first_batch(m, split.train))
    assert torch.all(enc.e_g == 0)
    assert torch.equal(enc.h_t, m.embedding[first_batch(m, split.train).target])


def test_rec_loss_values():
    assert rec_loss(torch.tensor([0.5]), torch.tensor([1.0])).item() == pytest.approx(math.log(2))
    got = rec_loss(torch.tensor([0.9, 0.2], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert got.item() == pytest.approx(0.16425203348601893, abs=1e-12)
    assert math.isfinite(rec_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0])).item())


def _active_bank(model, split):
    bank = MemoryBank(model.config.bank_size, model.config.dim, model.embedding.dtype)
    with torch.no_grad():
        enc = model.encode(first_batch(model, split.train, 32))
    bank.push(enc.e_g, enc.e_s)
    return bank


def test_loss_decomposition(data):
    split, g = data
    m = tiny_model(split, g, beta=0.3, dtype="float64")
    bank = _active_bank(m, split)
    total, rec, con, active, _ = joint_loss(m, first_batch(m, split.train), bank)
    assert active and con.item() > 0
    assert total.item() == pytest.approx(rec.item() + 0.3 * con.item(), abs=1e-12)


def test_beta_zero_is_pure_recommendation_loss(data):
    split, g = data
    m = tiny_model(split, g, beta=0.0)
    total, rec, con, active, _ = joint_loss(m, first_batch(m, split.train), _active_bank(m, split))
    assert not active and total.item() == rec.item()


@pytest.mark.parametrize("variant", ["infonce", "mse"])
def test_alternative_consistency_variants_run(data, variant):
    split, g = data
    m = tiny_model(split, g, consistency_variant=variant)
    total, rec, con, active, _ = joint_loss(m, first_batch(m, split.train), None)
    assert active and torch.isfinite(total)


def _total_loss_fd_check(m, split):
    bank = _active_bank(m, split)
    batch = first_batch(m, split.train, 6)

    def f():
        return joint_loss(m, batch, bank)[0]

    m.zero_grad()
    f().backward()
    for name, p in m.named_parameters():
        grad = p.grad.clone()
        # the largest entries sit far above the ~1e-10 noise floor of central differences
        flat = grad.abs().reshape(-1)
        picks = [tuple(int(i) for i in np.unravel_index(int(k), grad.shape))
                 for k in torch.topk(flat, min(3, flat.numel())).indices]
        for idx in picks:
            num = central_difference(f, p.data, idx, eps=1e-4)
            ana = grad[idx].item()
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana)), (name, idx, num, ana)


def test_total_loss_gradients_match_finite_differences(data):
    split, g = data
    m = tiny_model(split, g, beta=0.5, dtype="float64")
    _total_loss_fd_check(m, split)


def test_every_parameter_group_receives_gradient(data):
    split, g = data
    m = tiny_model(split, g, beta=0.5)
    total = joint_loss(m, first_batch(m, split.train, 16), _active_bank(m, split))[0]
    total.backward()
    for name, p in m.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_checkpoint_round_trip(data, tmp_path):
    split, g = data
    m = tiny_model(split, g)
    save_checkpoint(tmp_path / "m.pt", m, extra={"note": "x"})
    m2, payload = load_checkpoint(tmp_path / "m.pt", g)
    assert payload["config_hash"] == m.config.hash() and payload["extra"] == {"note": "x"}
    assert np.array_equal(score(m, split.test), score(m2, split.test))


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"weights": 1}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")


def test_predict_ctr_and_unknown_poi(data):
    split, g = data
    m = tiny_model(split, g)
    ex = split.test[0]
    p = predict_ctr(m, ex)
    assert 0 < p < 1
    assert p == pytest.approx(float(score(m, split.test.subset(np.array([0])))[0]), abs=1e-6)
    with pytest.raises(IndexError):
        predict_ctr(m, CtrExample(ex.user_index, ex.history, split.num_pois + 5, 1))
    with pytest.raises(ValueError):
        predict_ctr(m, CtrExample(ex.user_index, [], 0, 1))


def test_config_validation_and_files(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"dim": 8, "heads": 4, "bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(beta=-1)
    with pytest.raises(ValueError):
        TrainConfig(consistency_variant="other")
    (tmp_path / "c.yaml").write_text("dim: 16\nbeta: 0.1\n")
    c = TrainConfig.from_file(tmp_path / "c.yaml")
    assert (c.dim, c.beta) == (16, 0.1)
    c.to_file(tmp_path / "c.json")
    assert TrainConfig.from_file(tmp_path / "c.json") == c
    assert c.hash() == TrainConfig.from_file(tmp_path / "c.json").hash() != TrainConfig().hash()


def test_training_log_is_bit_reproducible(data, tmp_path):
    split, g = data
    cfg = tiny_config(epochs=2)
    a = train(cfg, split, g, tmp_path / "a")
    b = train(cfg, split, g, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a.best_val_auc == b.best_val_auc
    rows = [json.loads(x) for x in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert {r["kind"] for r in rows} == {"step", "epoch"}
    assert any(r.get("con_active") for r in rows if r["kind"] == "step")
    assert (tmp_path / "a" / "best.pt").exists() and (tmp_path / "a" / "timing.jsonl").exists()


def test_early_stopping_restores_best(data):
    split, g = data
    res = train(tiny_config(epochs=6, patience=1, lr=0.05), split, g)
    epochs = [r for r in res.metrics if r["kind"] == "epoch"]
    assert res.best_val_auc == max(r["val_auc"] for r in epochs)
    assert len(epochs) <= res.best_epoch + 2
    val_auc = model_mod.quick_metrics(res.model, split.val)[0]
    assert val_auc == pytest.approx(res.best_val_auc, abs=1e-12)


def test_non_finite_loss_aborts_with_dump(data, tmp_path, monkeypatch):
    split, g = data
    real = model_mod.rec_loss
    monkeypatch.setattr(model_mod, "rec_loss", lambda p, y: real(p, y) * float("nan"))
    with pytest.raises(TrainingDiverged):
        train(tiny_config(), split, g, tmp_path)
    dumps = list(tmp_path.glob("diverged_*.json"))
    assert len(dumps) == 1 and json.loads(dumps[0].read_text())["example_indices"]
