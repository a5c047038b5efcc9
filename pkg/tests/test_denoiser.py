import numpy as np
import pytest
import torch
import torch.nn.functional as F
from conftest import fd_relative_errors, toy_model

from motifrl.denoiser import (
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from motifrl.diffusion import LossConfig, MaskPrior, NoiseSchedule, TransitionModel
from motifrl.errors import BadStep, CorruptFile, NonFiniteLoss, NotConvex, UnknownTask, VersionMismatch, VocabMismatch
from motifrl.kernel import Batch, masked_ce, run_model
from motifrl.oracle import TaskSpec
from motifrl.training import gradients


def batch(X, E, P, m):
    return Batch(*(torch.tensor(np.asarray(a), dtype=torch.long) for a in (X, E, P, m)))


def two_slot():
    """One active pair with a single bond attached at positions (1, 2)."""
    return batch([[1, 2]], [[[0, 1], [1, 0]]], [[[0, 1], [2, 0]]], [[1, 1]])


def three_slot(seed=0, n_active=3, n=4, d_X=3, d_P=3):
    rng = np.random.default_rng(seed)
    m = np.zeros(n, dtype=np.int64)
    m[:n_active] = 1
    X = rng.integers(0, d_X, n) * m
    E = np.triu(rng.integers(0, 4, (n, n)), 1)
    E = (E + E.T) * np.outer(m, m)
    P = rng.integers(1, d_P, (n, n)) * (E > 0)
    return batch([X], [E], [P], [m])


def cond(model, target=1.5):
    return model.encode_conditions([(0, target)])


# -- forward ----------------------------------------------------------------------


def test_zero_weights_give_one_hot_logits():
    model = toy_model(random=False)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    z = two_slot()
    out = run_model(model, z, torch.tensor([4]), cond(model))
    assert torch.equal(out.X, F.one_hot(z.X, 3).double())
    assert torch.equal(out.E, F.one_hot(z.E, 4).double())
    assert torch.equal(out.P, F.one_hot(z.P, 3).double())
    assert out.value.item() == 0.0


def test_fresh_model_starts_at_identity():
    model = toy_model(n_max=4, random=False)
    z = three_slot(n_active=2)
    out = run_model(model, z, torch.tensor([3]))
    assert torch.equal(out.X, F.one_hot(z.X, 3).double())


def test_bond_logits_are_symmetric():
    model = toy_model(n_max=4)
    out = run_model(model, three_slot(), torch.tensor([5]), cond(model))
    assert torch.equal(out.E, out.E.transpose(1, 2))


def test_inactive_slots_do_not_leak():
    model = toy_model(n_max=4)
    a = three_slot(n_active=2)
    b = Batch(a.X.clone(), a.E.clone(), a.P.clone(), a.m.clone())
    b.X[0, 2:] = torch.tensor([2, 1])
    b.E[0, 2, 3] = b.E[0, 3, 2] = 2
    b.P[0, 3, 2] = 1
    t = torch.tensor([6])
    oa, ob = run_model(model, a, t, cond(model)), run_model(model, b, t, cond(model))
    assert torch.equal(oa.X[0, :2], ob.X[0, :2])
    assert torch.equal(oa.E[0, :2, :2], ob.E[0, :2, :2])
    assert torch.equal(oa.P[0, :2, :2], ob.P[0, :2, :2])
    assert oa.value.item() == ob.value.item()


def test_swapping_inactive_slots_keeps_active_tokens():
    model = toy_model(n_max=4)
    z = three_slot(n_active=2)
    perm = [0, 1, 3, 2]
    w = Batch(z.X[:, perm], z.E[:, perm][:, :, perm], z.P[:, perm][:, :, perm], z.m[:, perm])
    ta, tb = model.build_tokens(z.X, z.E, z.P, z.m), model.build_tokens(w.X, w.E, w.P, w.m)
    assert torch.equal(ta[0, :2], tb[0, :2])


def test_bond_change_touches_only_its_rows():
    model = toy_model(n_max=4)
    z = three_slot(n_active=4)
    w = Batch(z.X, z.E.clone(), z.P.clone(), z.m)
    w.E[0, 0, 2] = w.E[0, 2, 0] = (int(z.E[0, 0, 2]) + 1) % 4
    ta, tb = model.build_tokens(z.X, z.E, z.P, z.m), model.build_tokens(w.X, w.E, w.P, w.m)
    changed = [i for i in range(4) if not torch.equal(ta[0, i], tb[0, i])]
    assert changed == [0, 2]


def test_conditioning_changes_output():
    model = toy_model(n_max=4)
    z, t = three_slot(), torch.tensor([5])
    a = run_model(model, z, t, cond(model, 0.0))
    b = run_model(model, z, t, cond(model, 3.0))
    c = run_model(model, z, t)
    assert not torch.equal(a.X, b.X) and not torch.equal(a.X, c.X)


def test_forward_errors():
    model = toy_model()
    with pytest.raises(BadStep):
        run_model(model, two_slot(), torch.tensor([11]))
    with pytest.raises(BadStep):
        run_model(model, two_slot(), torch.tensor([-1]))
    with pytest.raises(UnknownTask):
        model.encode_conditions([(3, 1.0)])


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        build_model(ModelConfig(n_max=2, d_X=3, d_P=3, T=5, e_x=3, e_e=2, e_p=2, heads=2))


# -- gradients ---------------------------------------------------------------------


def _ce_loss(model, cfg=LossConfig()):
    zt, z0, t = two_slot(), batch([[2, 0]], [[[0, 2], [2, 0]]], [[[0, 2], [1, 0]]], [[1, 1]]), torch.tensor([3])
    c = cond(model)
    return lambda: masked_ce(run_model(model, zt, t, c), z0, cfg)[0]


def test_masked_ce_gradients_match_finite_differences():
    model = toy_model()
    errors = fd_relative_errors(model, _ce_loss(model))
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_zero_weights_give_zero_gradients():
    model = toy_model()
    grads = gradients(model, _ce_loss(model, LossConfig(0.0, 0.0, 0.0)))
    assert all(not g.any() for g in grads.values())


def test_loss_gradients_are_linear_in_weights():
    model = toy_model()
    g1 = gradients(model, _ce_loss(model, LossConfig(1.0, 0.0, 0.0)))
    g2 = gradients(model, _ce_loss(model, LossConfig(2.0, 0.0, 0.0)))
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_gradients_are_deterministic():
    model = toy_model()
    a = gradients(model, _ce_loss(model))
    b = gradients(model, _ce_loss(model))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_non_finite_loss():
    model = toy_model()
    with pytest.raises(NonFiniteLoss):
        gradients(model, lambda: _ce_loss(model)() * float("nan"))


# -- task embeddings ------------------------------------------------------------------


def _tasks(n=3):
    return [TaskSpec(k, f"t{k}", mean=0.0, std=1.0) for k in range(n)]


def test_compose_copy_and_mixture():
    model = toy_model(tasks=_tasks())
    before = {k: v.clone() for k, v in model.state_dict().items() if k != "task_emb"}
    k = model.compose_task_embedding([(1, 1.0)], TaskSpec(0, "copy"))
    assert k == 3 and torch.equal(model.task_emb[3], model.task_emb[1])
    mix = model.compose_task_embedding([(0, 0.68), (1, 0.12), (2, 0.20)], TaskSpec(0, "mix"))
    want = 0.68 * model.task_emb[0] + 0.12 * model.task_emb[1] + 0.20 * model.task_emb[2]
    assert torch.allclose(model.task_emb[mix], want, atol=1e-15)
    assert model.task(mix).name == "mix" and model.task(mix).task_id == mix
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_compose_identical_rows():
    model = toy_model(tasks=_tasks(2))
    with torch.no_grad():
        model.task_emb[1] = model.task_emb[0]
    k = model.compose_task_embedding([(0, 0.5), (1, 0.5)], TaskSpec(0, "avg"))
    assert torch.allclose(model.task_emb[k], model.task_emb[0], atol=1e-15)


def test_compose_errors():
    model = toy_model(tasks=_tasks(2))
    with pytest.raises(NotConvex):
        model.compose_task_embedding([(0, 0.5), (1, 0.6)], TaskSpec(0, "x"))
    with pytest.raises(NotConvex):
        model.compose_task_embedding([(0, 1.5), (1, -0.5)], TaskSpec(0, "x"))
    with pytest.raises(UnknownTask):
        model.compose_task_embedding([(7, 1.0)], TaskSpec(0, "x"))


# -- checkpoints ------------------------------------------------------------------------


def _save(path, model, vocab_hash="abc"):
    tr = TransitionModel(np.ones(3) / 3, np.ones(4) / 4, np.ones(3) / 3)
    save_checkpoint(path, model, NoiseSchedule(10), tr, MaskPrior(np.array([0.5, 0.5])), vocab_hash, {"stage": "test"})


def test_checkpoint_roundtrip_is_byte_exact(tmp_path):
    model = toy_model()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    _save(a, model)
    ck = load_checkpoint(a, "abc")
    _save(b, ck.model)
    assert a.read_bytes() == b.read_bytes()
    assert ck.metadata == {"stage": "test"} and ck.schedule.T == 10
    z, t = two_slot(), torch.tensor([4])
    o1, o2 = run_model(model, z, t, cond(model)), run_model(ck.model, z, t, cond(ck.model))
    assert all(torch.equal(x, y) for x, y in zip(o1, o2))


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    _save(path, toy_model())
    with pytest.raises(VocabMismatch):
        load_checkpoint(path, "other")
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 5)
    with pytest.raises(CorruptFile):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-16])
    with pytest.raises(CorruptFile):
        load_checkpoint(bad)
    bad.write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(bad)
