import pytest
import safetensors.torch
import torch
from torch import nn

from iter_sgg import utils


def test_step_decay_schedule():
    opt = torch.optim.SGD([nn.Parameter(torch.zeros(1))], lr=1.0)
    sched = utils.StepDecayLR(opt, step_size=2, gamma=0.5)
    lrs = []
    for _ in range(5):
        lrs.append(sched.get_last_lr()[0])
        opt.step()
        sched.step()
    assert lrs == [1.0, 1.0, 0.5, 0.5, 0.25]
    with pytest.raises(ValueError):
        utils.StepDecayLR(opt, step_size=0)


def test_constant_schedule_warmup():
    opt = torch.optim.SGD([nn.Parameter(torch.zeros(1))], lr=1.0)
    sched = utils.ConstantLRWithWarmup(opt, warmup=0.5)
    assert sched.get_last_lr()[0] == pytest.approx(0.5)
    opt.step()
    sched.step()
    assert sched.get_last_lr()[0] == pytest.approx(0.75)
    for _ in range(40):
        opt.step()
        sched.step()
    assert sched.get_last_lr()[0] == pytest.approx(1.0)
    flat = utils.ConstantLRWithWarmup(torch.optim.SGD([nn.Parameter(torch.zeros(1))], lr=0.3))
    assert flat.get_last_lr()[0] == pytest.approx(0.3)
    with pytest.raises(ValueError, match="warmup"):
        utils.ConstantLRWithWarmup(opt, warmup=1.0)


def test_optimizer_step_minimizes_quadratic():
    x = nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = torch.optim.SGD([x], lr=0.1)
    scale = torch.tensor([1.0, 4.0])
    for _ in range(200):
        (scale * x**2).sum().backward()
        utils.optimizer_step(opt, max_norm=10.0)
    assert x.detach().norm() < 1e-2


def test_optimizer_step_with_zero_gradient_keeps_parameters():
    p = nn.Parameter(torch.tensor([0.5, -1.5, 2.0]))
    opt = torch.optim.AdamW([p], lr=0.1, weight_decay=0.0)
    sched = utils.StepDecayLR(opt, step_size=1)
    for _ in range(3):
        p.grad = torch.zeros_like(p)
        utils.optimizer_step(opt, sched, max_norm=1.0)
    torch.testing.assert_close(p.detach(), torch.tensor([0.5, -1.5, 2.0]), rtol=0, atol=0)


def test_optimizer_step_clips_and_clears():
    p = nn.Parameter(torch.zeros(2))
    opt = torch.optim.SGD([p], lr=1.0)
    p.grad = torch.tensor([3.0, 4.0])
    norm = utils.optimizer_step(opt, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    torch.testing.assert_close(p.detach(), torch.tensor([-0.6, -0.8]))
    assert p.grad is None


def test_train_mode_restores():
    model = nn.Sequential(nn.Linear(2, 2), nn.Dropout())
    model.eval()
    with utils.train_mode(model):
        assert all(m.training for m in model.modules())
    assert not any(m.training for m in model.modules())
    model.train()
    with utils.eval_mode(model):
        assert not model[1].training
    assert model[1].training


def test_jsonl_logger_appends(tmp_path):
    path = tmp_path / "logs" / "log.jsonl"
    with utils.JSONLLogger(path) as logger:
        logger.write({"type": "header", "b": 1})
    with utils.JSONLLogger(path) as logger:
        logger.write({"type": "epoch", "epoch": 1})
    assert utils.read_jsonl(path) == [{"type": "header", "b": 1}, {"type": "epoch", "epoch": 1}]


def test_checkpoint_round_trip(tmp_path):
    model = nn.Linear(3, 2)
    path = utils.save_checkpoint(tmp_path / "m.safetensors", model, {"model": {"type": "x"}}, epoch=4, note="hi")
    state, config, metadata = utils.load_checkpoint(path)
    assert config == {"model": {"type": "x"}}
    assert metadata == {"epoch": 4, "note": "hi"}
    torch.testing.assert_close(state["weight"], model.weight.detach())
    half = utils.save_checkpoint(tmp_path / "h.safetensors", model, {}, dtype=torch.float16)
    assert utils.load_checkpoint(half)[0]["bias"].dtype == torch.float16


def test_checkpoint_without_config(tmp_path):
    path = tmp_path / "bare.safetensors"
    safetensors.torch.save_file({"x": torch.zeros(1)}, path)
    with pytest.raises(ValueError, match="no config"):
        utils.load_checkpoint(path)


def test_n_params():
    model = nn.Linear(3, 2)
    model.bias.requires_grad_(False)
    assert utils.n_params(model) == 6
