import pytest
import torch

from pedgan.config import ModelConfig, model_config
from pedgan.errors import ContractError, InputError, NumericError
from pedgan.generator import StagedGenerator, generate
from pedgan.text import ConditioningAugmentation, TextEncoder, Vocabulary, stack_tokens

from fdcheck import fd_relative_errors

CFG = model_config("tiny")


@pytest.fixture
def gen():
    torch.manual_seed(0)
    return StagedGenerator(CFG).eval()


def inputs(B=2, T=6, seed=0, cfg=CFG, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(B, cfg.z_dim, generator=g, dtype=dtype)
    c = torch.randn(B, cfg.cond_dim, generator=g, dtype=dtype)
    words = torch.randn(B, cfg.word_dim, T, generator=g, dtype=dtype)
    mask = torch.ones(B, T, dtype=torch.bool)
    return z, c, words, mask


def test_stage_shapes_and_attention(gen):
    z, c, words, mask = inputs()
    bundles, maps = gen(z, c, words, mask)
    assert [b.resolution for b in bundles] == CFG.resolutions == [8, 16, 32]
    assert [b.stage for b in bundles] == [0, 1, 2]
    for b in bundles:
        assert b.hidden.shape == (2, CFG.gf, b.resolution, b.resolution)
    for i, a in enumerate(maps):
        n = CFG.resolutions[i] ** 2
        assert a.shape == (2, n, 6)
        assert torch.allclose(a.sum(-1), torch.ones(2, n), atol=1e-5)


def test_deterministic(gen):
    a, _ = gen(*inputs())
    b, _ = gen(*inputs())
    assert all(torch.equal(x.image, y.image) for x, y in zip(a, b))


def test_images_in_range_over_many_draws(gen):
    for seed in range(100):
        z, c, words, mask = inputs(B=1, seed=seed)
        with torch.no_grad():
            bundles, _ = gen(z * 3, c * 3, words, mask)
        for b in bundles:
            assert b.image.min() >= -1 and b.image.max() <= 1


def test_noise_perturbation_changes_output(gen):
    z, c, words, mask = inputs()
    a, _ = gen(z, c, words, mask)
    z2 = z.clone()
    z2[:, 0] += 1e-2
    b, _ = gen(z2, c, words, mask)
    assert not torch.equal(a[0].image, b[0].image)
    assert not torch.equal(a[-1].image, b[-1].image)


def test_refine_doubles_resolution_and_final_stage_is_an_error(gen):
    z, c, words, mask = inputs()
    b0 = gen.g0_forward(z, c)
    b1, alpha = gen.refine_forward(b0, words, mask)
    assert b1.resolution == 2 * b0.resolution and b1.stage == 1
    b2, _ = gen.refine_forward(b1, words, mask)
    with pytest.raises(ContractError):
        gen.refine_forward(b2, words, mask)


def test_zero_projection_makes_refinement_caption_blind(gen):
    with torch.no_grad():
        gen.refine[0].attn.proj.weight.zero_()
    z, c, words, mask = inputs()
    b0 = gen.g0_forward(z, c)
    a, alpha = gen.refine_forward(b0, words, mask)
    b, _ = gen.refine_forward(b0, torch.randn_like(words), mask)
    assert torch.equal(a.image, b.image)
    assert torch.allclose(alpha, torch.full_like(alpha, 1 / 6))


def test_input_validation(gen):
    z, c, words, mask = inputs()
    with pytest.raises(InputError):
        gen.g0_forward(z[:, :5], c)
    z[0, 0] = float("inf")
    with pytest.raises(NumericError):
        gen.g0_forward(z, c)


def test_gradients_match_finite_differences():
    cfg = ModelConfig(base_res=8, stages=2, gf=4, df=4, word_dim=4, sent_dim=4, region_dim=4,
                      cond_dim=3, z_dim=3, max_len=4, emb_dim=4, match_res=8, match_grid=2)
    torch.manual_seed(0)
    g = StagedGenerator(cfg).double().eval()
    # non-trivial batch-norm statistics so eval mode is not the identity
    with torch.no_grad():
        for m in g.modules():
            if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                m.running_mean.uniform_(-0.2, 0.2)
                m.running_var.uniform_(0.5, 1.5)
    z, c, words, mask = inputs(B=2, T=3, cfg=cfg, dtype=torch.float64)
    probe = torch.randn(2, 3, 16, 16, dtype=torch.float64)

    def fn():
        bundles, _ = g(z, c, words, mask)
        return (bundles[-1].image * probe).sum()

    params = [g.init_stage.fc[0].weight, g.refine[0].attn.proj.weight,
              g.refine[0].residual[0].body[0].weight, g.heads[1].conv.weight]
    errs = fd_relative_errors(fn, params, max_entries=25, generator=torch.Generator().manual_seed(0))
    assert max(errs) < 1e-2


def test_generate_pipeline_distinguishes_noise_and_captions():
    vocab = Vocabulary.build(["a person with a red torso", "a person with a blue torso"])
    torch.manual_seed(0)
    te = TextEncoder(len(vocab), CFG.word_dim, CFG.emb_dim).eval()
    ca = ConditioningAugmentation(CFG.word_dim, CFG.cond_dim)
    gen = StagedGenerator(CFG).eval()
    ids, lengths = stack_tokens([vocab.encode("a person with a red torso", CFG.max_len),
                                 vocab.encode("a person with a blue torso", CFG.max_len)])
    zero = torch.zeros(2, CFG.cond_dim)
    z = torch.randn(1, CFG.z_dim).expand(2, -1)
    with torch.no_grad():
        bundles = generate(ids, lengths, z, te, ca, gen, ca_noise=zero)
        again = generate(ids, lengths, z, te, ca, gen, ca_noise=zero)
        other_z = generate(ids, lengths, torch.randn(2, CFG.z_dim), te, ca, gen, ca_noise=zero)
    final = bundles[-1].image
    assert torch.equal(final, again[-1].image)
    assert not torch.allclose(final[0], final[1])           # same z, different caption
    assert not torch.allclose(final, other_z[-1].image)     # same caption, different z
