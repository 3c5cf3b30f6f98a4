import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from restorl.diffusion import build_schedule
from restorl.model import (
    ArchConfig,
    Checkpoint,
    CheckpointVersionError,
    NonFiniteGradientError,
    apply_update,
    init_model,
    make_optimizer,
    model_digest,
    parameter_count,
    per_sample_sft_loss,
    sft_loss,
    timestep_embedding,
)

from conftest import TINY, randomize


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 3), w=st.integers(1, 8), d=st.integers(1, 3), e=st.sampled_from([2, 4, 8]))
def test_parameter_count_closed_form(c, w, d, e):
    arch = ArchConfig(c, w, d, e)
    model = init_model(arch, 0)
    assert parameter_count(arch) == sum(p.numel() for p in model.parameters())


def test_tiny_model_fits_gradient_check_budget():
    assert parameter_count(TINY) <= 500


@pytest.mark.parametrize("kw", [{"width": 0}, {"depth": -1}, {"emb_dim": 3}, {"dtype": "float16"}, {"channels": True}])
def test_arch_validation(kw):
    with pytest.raises(ValueError):
        ArchConfig(**kw).validate()


def test_init_is_deterministic_and_starts_at_zero():
    a, b = init_model(TINY, 3), init_model(TINY, 3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    assert torch.count_nonzero(a(x, x, torch.tensor([1, 5]))) == 0
    assert not torch.equal(init_model(TINY, 4).stem.weight, a.stem.weight)


def test_init_does_not_touch_global_rng():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    init_model(TINY, 7)
    assert torch.equal(torch.rand(1), before)


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(torch.tensor([0, 1, 50]), 8, torch.float64)
    assert e.shape == (3, 8)
    assert torch.all(e.abs() <= 1)
    assert torch.equal(e[0], torch.tensor([0, 0, 0, 0, 1, 1, 1, 1], dtype=torch.float64))


def test_sft_loss_at_zero_model_is_noise_energy():
    model = init_model(TINY, 0)
    sched = build_schedule(10)
    x0 = torch.rand(4, 1, 8, 8, dtype=torch.float64)
    g1, g2 = torch.Generator().manual_seed(1), torch.Generator().manual_seed(1)
    per = per_sample_sft_loss(model, x0, x0, sched, g1)
    assert per.shape == (4,)
    torch.randint(1, 11, (4,), generator=g2)
    eps = torch.randn(x0.shape, generator=g2, dtype=torch.float64)
    assert torch.allclose(per, (eps ** 2).flatten(1).mean(1))
    assert sft_loss(model, x0, x0, sched, torch.Generator().manual_seed(1)).item() == pytest.approx(per.mean().item())


def test_sft_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        per_sample_sft_loss(init_model(TINY, 0), torch.zeros(0, 1, 8, 8), torch.zeros(0, 1, 8, 8),
                            build_schedule(10), torch.Generator())


def test_sft_training_reduces_loss():
    model = randomize(init_model(TINY, 0), scale=0.1)
    sched = build_schedule(10)
    x0 = torch.rand(8, 1, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    opt = make_optimizer(model, "adam", 1e-2)
    fixed = lambda: sft_loss(model, x0, x0, sched, torch.Generator().manual_seed(123)).item()
    start = fixed()
    for i in range(60):
        loss = sft_loss(model, x0, x0, sched, torch.Generator().manual_seed(i))
        opt.zero_grad()
        loss.backward()
        apply_update(model, opt)
    assert fixed() < start


def test_apply_update_refuses_non_finite_gradients(tiny_model):
    opt = make_optimizer(tiny_model, "sgd", 0.1)
    before = [p.detach().clone() for p in tiny_model.parameters()]
    for p in tiny_model.parameters():
        p.grad = torch.zeros_like(p)
    tiny_model.head.bias.grad[0] = float("nan")
    with pytest.raises(NonFiniteGradientError, match="head.bias"):
        apply_update(tiny_model, opt)
    for p, q in zip(tiny_model.parameters(), before):
        assert torch.equal(p, q)


def test_apply_update_clips_and_reports_raw_norm(tiny_model):
    opt = make_optimizer(tiny_model, "sgd", 1.0)
    before = [p.detach().clone() for p in tiny_model.parameters()]
    for p in tiny_model.parameters():
        p.grad = torch.ones_like(p)
    n = sum(p.numel() for p in tiny_model.parameters())
    norm = apply_update(tiny_model, opt, max_grad_norm=1.0)
    assert norm == pytest.approx(np.sqrt(n))
    step = torch.cat([(q - p.detach()).ravel() for p, q in zip(tiny_model.parameters(), before)])
    assert torch.linalg.vector_norm(step).item() == pytest.approx(1.0, rel=1e-5)


def test_apply_update_without_gradients_is_noop(tiny_model):
    assert apply_update(tiny_model, make_optimizer(tiny_model)) == 0.0


def test_unknown_optimizer(tiny_model):
    with pytest.raises(ValueError):
        make_optimizer(tiny_model, "lbfgs")


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    opt = make_optimizer(tiny_model)
    ck = Checkpoint(tiny_model, opt.state_dict(), "abc", 7, {"x": 1}, {"seed": 0}, {"k": [1, 2]})
    ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert back.step == 7 and back.schedule_digest == "abc" and back.extra == {"k": [1, 2]}
    assert back.model.arch == tiny_model.arch
    assert model_digest(back.model) == model_digest(tiny_model)
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_version_mismatch(tmp_path, tiny_model):
    import io

    path = tmp_path / "m.ckpt"
    Checkpoint(tiny_model, None, "", 0, None, {}).save(path)
    payload = torch.load(io.BytesIO(path.read_bytes()), weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointVersionError):
        Checkpoint.load(path)


def test_model_digest_tracks_parameters(tiny_model):
    d = model_digest(tiny_model)
    with torch.no_grad():
        tiny_model.head.bias.add_(1e-12)
    assert model_digest(tiny_model) != d


class _NoiseOracle(torch.nn.Module):
    def __init__(self, x0, schedule):
        super().__init__()
        self.x0, self.schedule = x0, schedule
        self.dummy = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, x_t, cond, t):
        ab = torch.as_tensor(self.schedule.alpha_bars, dtype=torch.float64)[t - 1].view(-1, 1, 1, 1)
        return (x_t - ab.sqrt() * cond) / (1 - ab).sqrt() + 0 * self.dummy


def test_sft_loss_zero_for_exact_noise_prediction():
    sched = build_schedule(10)
    x0 = torch.rand(4, 1, 8, 8, dtype=torch.float64)
    per = per_sample_sft_loss(_NoiseOracle(x0, sched), x0, x0, sched, torch.Generator().manual_seed(0))
    assert torch.allclose(per, torch.zeros(4, dtype=torch.float64), atol=1e-20)


def test_sft_loss_order_invariant(tiny_model):
    """Same per-sample (t, eps) draws in permuted order give the same mean loss."""
    sched = build_schedule(10)
    x0 = torch.rand(4, 1, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    g = torch.Generator().manual_seed(1)
    t = torch.randint(1, 11, (4,), generator=g)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    from restorl.diffusion import forward_sample_batch

    def loss(perm):
        xt = forward_sample_batch(x0[perm], t[perm], eps[perm], sched)
        return ((tiny_model(xt, x0[perm], t[perm]) - eps[perm]) ** 2).mean()

    assert loss([0, 1, 2, 3]).item() == pytest.approx(loss([3, 1, 0, 2]).item(), rel=1e-12)


def test_plain_gradient_descent_step():
    p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    model = torch.nn.Module()
    model.p = p
    opt = torch.optim.SGD([p], lr=0.1)
    p.grad = torch.ones_like(p)
    apply_update(model, opt)
    assert p.item() == pytest.approx(1.9)


def test_zero_gradient_leaves_parameters(tiny_model):
    before = [p.detach().clone() for p in tiny_model.parameters()]
    opt = make_optimizer(tiny_model, "sgd", 0.5)
    for p in tiny_model.parameters():
        p.grad = torch.zeros_like(p)
    apply_update(tiny_model, opt)
    assert all(torch.equal(p, q) for p, q in zip(tiny_model.parameters(), before))


def test_forward_shape(tiny_model):
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    assert tiny_model(x, x, torch.tensor([1, 2])).shape == x.shape
