import numpy as np
import pytest
import torch

from blurdecomp import netcore as nc

torch.set_num_threads(1)


def tiny_stage(in_ch=3, out_ch=3, zero=False):
    stage = nc.EncoderDecoderStage(in_ch, out_ch, widths=(3, 4, 5),
                                   n_res_blocks=1, zero_init_output=zero)
    gen = torch.Generator().manual_seed(7)
    nc.init_parameters(stage, gen)
    return stage


# ---------------------------------------------------------------------------
# stage shape and init contracts


def test_stage_preserves_spatial_size():
    stage = tiny_stage(in_ch=5, out_ch=2)
    stage.eval()
    x = torch.randn(2, 5, 16, 12, generator=torch.Generator().manual_seed(0))
    y = stage(x)
    assert y.shape == (2, 2, 16, 12)


def test_stage_rejects_indivisible_sizes():
    stage = tiny_stage()
    with pytest.raises(ValueError, match="divisible by 4"):
        stage(torch.zeros(1, 3, 15, 16))
    with pytest.raises(ValueError, match="divisible by 4"):
        stage(torch.zeros(1, 3, 16, 18))


def test_stage_rejects_wrong_channels():
    stage = tiny_stage(in_ch=3)
    with pytest.raises(ValueError, match="stage input"):
        stage(torch.zeros(1, 4, 8, 8))


def test_zero_init_head_gives_zero_output():
    stage = tiny_stage(zero=True)
    stage.eval()
    x = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    assert torch.all(stage(x) == 0)


def test_init_is_deterministic_under_seed():
    a = nc.EncoderDecoderStage(3, 3, widths=(3, 4, 5), n_res_blocks=2)
    b = nc.EncoderDecoderStage(3, 3, widths=(3, 4, 5), n_res_blocks=2)
    nc.init_parameters(a, torch.Generator().manual_seed(11))
    nc.init_parameters(b, torch.Generator().manual_seed(11))
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb
        assert torch.equal(pa, pb)
    c = nc.EncoderDecoderStage(3, 3, widths=(3, 4, 5), n_res_blocks=2)
    nc.init_parameters(c, torch.Generator().manual_seed(12))
    assert not torch.equal(a.stem.weight, c.stem.weight)


def test_stage_config_validation():
    with pytest.raises(ValueError):
        nc.EncoderDecoderStage(3, 3, widths=(3, 4))
    with pytest.raises(ValueError):
        nc.EncoderDecoderStage(3, 3, widths=(3, 0, 5))
    with pytest.raises(ValueError):
        nc.EncoderDecoderStage(3, 3, n_res_blocks=0)


# ---------------------------------------------------------------------------
# gumbel softmax


def test_gumbel_soft_noise_free_uniform_logits():
    logits = torch.zeros(2, 5, 3, 3)
    y = nc.gumbel_softmax(logits, temperature=1.0, hard=False, noise=False)
    assert torch.allclose(y, torch.full_like(y, 1.0 / 5))


def test_gumbel_rows_on_simplex():
    gen = torch.Generator().manual_seed(0)
    logits = torch.randn(4, 7, 5, 5, generator=gen)
    y = nc.gumbel_softmax(logits, temperature=0.7, generator=gen)
    assert torch.all(y >= 0)
    assert torch.allclose(y.sum(dim=1), torch.ones(4, 5, 5), atol=1e-6)


def test_gumbel_hard_is_one_hot():
    gen = torch.Generator().manual_seed(3)
    logits = torch.randn(2, 5, 4, 4, generator=gen)
    y = nc.gumbel_softmax(logits, temperature=0.5, hard=True, generator=gen)
    assert set(y.unique().tolist()) <= {0.0, 1.0}
    assert torch.all(y.sum(dim=1) == 1)


def test_gumbel_hard_dominant_logit_wins_overwhelmingly():
    logits = torch.tensor([[10.0, 0.0, 0.0, 0.0, 0.0]]).view(1, 5, 1, 1)
    logits = logits.expand(1000, 5, 1, 1)
    gen = torch.Generator().manual_seed(0)
    y = nc.gumbel_softmax(logits, temperature=0.1, hard=True, generator=gen)
    wins = (y.argmax(dim=1) == 0).float().mean().item()
    assert wins >= 0.99


def test_gumbel_straight_through_gradients_flow():
    logits = torch.randn(1, 4, 2, 2, requires_grad=True,
                         generator=torch.Generator().manual_seed(5))
    y = nc.gumbel_softmax(logits, temperature=1.0, hard=True, noise=False)
    y.sum().backward()
    assert logits.grad is not None
    assert torch.isfinite(logits.grad).all()


def test_gumbel_rejects_bad_temperature():
    with pytest.raises(ValueError):
        nc.gumbel_softmax(torch.zeros(1, 3, 1, 1), temperature=0.0)
    with pytest.raises(ValueError):
        nc.gumbel_softmax(torch.zeros(1, 3, 1, 1), temperature=-1.0)


def test_gumbel_sampling_reproducible_with_generator():
    logits = torch.randn(2, 6, 3, 3, generator=torch.Generator().manual_seed(2))
    a = nc.gumbel_softmax(logits, generator=torch.Generator().manual_seed(9))
    b = nc.gumbel_softmax(logits, generator=torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


# ---------------------------------------------------------------------------
# gradient checker


def test_grad_check_quadratic_is_tight():
    w = torch.ones(6, dtype=torch.float64)
    err = nc.grad_check(lambda: (w * w).sum(), [w])
    assert err < 1e-7


def test_grad_check_catches_a_wrong_gradient():
    # forward computes w^2 but the backward is rigged to return 3w
    class Rigged(torch.autograd.Function):
        @staticmethod
        def forward(ctx, w):
            ctx.save_for_backward(w)
            return (w * w).sum()

        @staticmethod
        def backward(ctx, g):
            (w,) = ctx.saved_tensors
            return g * 3.0 * w

    w = torch.full((4,), 2.0, dtype=torch.float64)
    err = nc.grad_check(lambda: Rigged.apply(w), [w])
    assert err > 0.1


def test_grad_check_on_toy_stage():
    stage = nc.EncoderDecoderStage(2, 2, widths=(2, 3, 3), n_res_blocks=2)
    nc.init_parameters(stage, torch.Generator().manual_seed(0))
    stage.double().eval()
    x = torch.randn(1, 2, 8, 8, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(1))
    target = torch.randn(1, 2, 8, 8, dtype=torch.float64,
                         generator=torch.Generator().manual_seed(2))
    params = [p for p in stage.parameters()]

    def loss():
        return ((stage(x) - target) ** 2).mean()

    err = nc.grad_check(loss, params, max_evals=8)
    assert err < 1e-3


def test_grad_check_rejects_float32_and_nonfinite():
    w32 = torch.ones(3)
    with pytest.raises(ValueError, match="float64"):
        nc.grad_check(lambda: (w32 * w32).sum(), [w32])
    w = torch.ones(3, dtype=torch.float64)
    with pytest.raises(ValueError, match="finite"):
        nc.grad_check(lambda: (w / 0.0).sum(), [w])


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bitwise(tmp_path):
    stage = tiny_stage()
    path = tmp_path / "stage.ckpt"
    nc.save_checkpoint(path, stage, config={"widths": [3, 4, 5], "n_res_blocks": 1})
    state, config = nc.load_checkpoint(path)
    assert config["widths"] == [3, 4, 5]
    original = stage.state_dict()
    assert set(state) == set(original)
    for name, tensor in original.items():
        if tensor.dtype.is_floating_point:
            assert torch.equal(state[name], tensor.to(torch.float32))
        else:
            assert torch.equal(state[name], tensor.to(torch.int64))
    # and the loaded state must actually restore a working module
    other = nc.EncoderDecoderStage(3, 3, widths=(3, 4, 5), n_res_blocks=1)
    other.load_state_dict(state)
    other.eval()
    stage.eval()
    x = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(4))
    assert torch.allclose(other(x), stage(x), atol=1e-6)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        nc.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    stage = tiny_stage()
    path = tmp_path / "stage.ckpt"
    nc.save_checkpoint(path, stage)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 64])
    with pytest.raises(ValueError, match="truncated"):
        nc.load_checkpoint(path)


def test_expect_shape_messages():
    with pytest.raises(ValueError, match="guidance"):
        nc.expect_shape(torch.zeros(2, 3), (None, 4), "guidance")
    t = torch.zeros(2, 4)
    assert nc.expect_shape(t, (None, 4)) is t
