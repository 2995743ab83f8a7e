import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualinject import tensor as T
from dualinject.attention import ReferenceKV
from dualinject.losses import adv_d
from dualinject.networks import MODES, ArchConfig, DualBranchModel, ForwardTrace, delatentize, latentize
from dualinject.synthdata import SUBJECT_TOKEN_INDEX, foreground_extract, make_sample
from dualinject.tensor import ContractError, ShapeError, Tensor

SMALL = ArchConfig(image_size=16, hidden=16, d=8, blocks=2, n_tok=2, lora_rank=2, lora_alpha=2.0, disc_blocks=1, seed=5)


@pytest.fixture(scope="module")
def model():
    return DualBranchModel(SMALL)


def _inputs(model, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    a = model.arch
    eps = rng.standard_normal((batch, a.latent_channels, a.latent_size, a.latent_size)).astype(np.float32)
    img = rng.uniform(0, 1, (batch, 3, a.image_size, a.image_size)).astype(np.float32)
    codes = np.array([[1, 2], [5, 0]][:batch])
    return eps, img, codes


def _kv(model, img, seed=1):
    eps_ref = np.random.default_rng(seed).standard_normal(latentize(img).shape).astype(np.float32)
    return model.reference_kv(img, eps_ref)


def test_latentize_example_shape_and_round_trip():
    x = np.arange(48, dtype=np.float32).reshape(3, 4, 4)
    z = latentize(x)
    assert z.shape == (1, 12, 2, 2)
    np.testing.assert_array_equal(delatentize(z).data[0], x)
    np.testing.assert_array_equal(z.data[0, :4, 0, 0], [0, 1, 4, 5])


def test_latentize_constant_image():
    z = latentize(np.full((3, 8, 8), 0.25, np.float32))
    assert np.all(z.data == 0.25)


@pytest.mark.parametrize("seed", range(100))
def test_latentize_round_trip_random(seed):
    rng = np.random.default_rng(seed)
    h, w = 2 * rng.integers(1, 9, size=2)
    x = rng.standard_normal((2, 3, h, w)).astype(np.float32)
    np.testing.assert_array_equal(delatentize(latentize(x)).data, x)


def test_latentize_rejects_odd_sizes():
    with pytest.raises(ShapeError):
        latentize(np.zeros((3, 5, 4)))
    with pytest.raises(ShapeError):
        delatentize(np.zeros((1, 6, 2, 2)))


def test_reference_shares_architecture(model):
    gen = [n for n, _ in model.generator.named_tensors() if "lora" not in n]
    ref = [n for n, _ in model.reference.named_tensors()]
    assert gen == ref
    for (n, g), (_, r) in zip([(n, t) for n, t in model.generator.named_tensors() if "lora" not in n],
                              model.reference.named_tensors()):
        assert g.shape == r.shape
    assert len(model.generator.blocks) == len(model.reference.blocks)


def test_empty_injections_equal_base_generator_bit_exact(model):
    eps, img, codes = _inputs(model)
    c_y = model.embed_context(codes)
    c_x = model.encode_image_tokens(img)
    with T.no_grad():
        out = model.generator_forward(eps, c_y, c_x, ReferenceKV.empty(), mode="full", s_x=0.0).data
        base = model.reference.forward(Tensor(eps), c_y).data
    np.testing.assert_array_equal(out, base)


def test_generator_is_deterministic(model):
    eps, img, codes = _inputs(model)
    c_y, c_x = model.embed_context(codes), model.encode_image_tokens(img)
    ref = _kv(model, img)
    with T.no_grad():
        a = model.generator_forward(eps, c_y, c_x, ref, masks="same-pass").data
        b = model.generator_forward(eps, c_y, c_x, ref, masks="same-pass").data
    np.testing.assert_array_equal(a, b)
    assert a.shape == eps.shape


def test_merged_weight_oracle_with_zero_lora(model):
    eps, img, codes = _inputs(model)
    c_y = model.embed_context(codes)
    blk = model.generator.blocks[0]
    lin = blk.selfattn.Wq
    assert np.all(lin.loraB.data == 0)
    x = np.random.default_rng(2).standard_normal((5, lin.d_in)).astype(np.float32)
    np.testing.assert_allclose(lin(Tensor(x)).data, x.astype(np.float64) @ lin.W.data.T.astype(np.float64),
                               atol=1e-6)
    with T.no_grad():
        out = model.generator.forward(Tensor(eps), c_y).data
        base = model.reference.forward(Tensor(eps), c_y).data
    np.testing.assert_allclose(out, base, atol=1e-6)


def test_lora_effective_weight_with_nonzero_factors():
    m = DualBranchModel(SMALL)
    lin = m.generator.blocks[1].crossattn.Wv
    lin.loraB.data = np.random.default_rng(3).standard_normal(lin.loraB.shape).astype(np.float32)
    merged = lin.W.data.astype(np.float64) + (SMALL.lora_alpha / SMALL.lora_rank) * (
        lin.loraB.data.astype(np.float64) @ lin.loraA.data.astype(np.float64))
    x = np.random.default_rng(4).standard_normal((3, lin.d_in)).astype(np.float32)
    np.testing.assert_allclose(lin(Tensor(x)).data, x @ merged.T, atol=1e-5)


def test_mode_branch_requirements(model):
    eps, img, codes = _inputs(model)
    c_y, c_x = model.embed_context(codes), model.encode_image_tokens(img)
    with pytest.raises(ContractError):
        model.generator_forward(eps, c_y, c_x, None, mode="full")
    with pytest.raises(ContractError):
        model.generator_forward(eps, c_y, None, ReferenceKV.empty(), mode="direct-ipa")
    with pytest.raises(ContractError):
        model.generator_forward(eps, c_y, c_x, ReferenceKV.empty(), mode="nope")


def test_modes_ignore_disabled_branches(model):
    eps, img, codes = _inputs(model)
    c_y, c_x = model.embed_context(codes), model.encode_image_tokens(img)
    ref = _kv(model, img)
    other_cx = model.encode_image_tokens(img[::-1].copy())
    with T.no_grad():
        a = model.generator_forward(eps, c_y, c_x, ref, mode="direct-ipa").data
        b = model.generator_forward(eps, c_y, c_x, None, mode="direct-ipa").data
        c = model.generator_forward(eps, c_y, c_x, ref, mode="single-refkv").data
        d = model.generator_forward(eps, c_y, other_cx, ref, mode="single-refkv").data
        e = model.generator_forward(eps, c_y, c_x, None, mode="finetune-ipa").data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(c, d)
    np.testing.assert_array_equal(a, e)  # same branches; they differ only in what trains


def test_mode_counters(model):
    eps, img, codes = _inputs(model)
    c_y = model.embed_context(codes)
    ref = _kv(model, img)
    model.counters.clear()
    with T.no_grad():
        model.generator_forward(eps, c_y, None, ref, mode="single-refkv")
    assert model.counters["adapter_branch"] == 0
    assert model.counters["adapter_encode"] == 0
    c_x = model.encode_image_tokens(img)
    with T.no_grad():
        model.generator_forward(eps, c_y, c_x, ref, mode="full")
    assert model.counters["adapter_branch"] == 1


def test_generator_parameters_per_mode(model):
    ids = lambda ps: {id(p) for p in ps}
    lora = ids(t for n, t in model.generator.named_tensors() if "lora" in n)
    adapter = ids(model.image_encoder.proj.parameters()) | ids(
        p for blk in model.generator.blocks for p in blk.adapter.parameters())
    assert ids(model.generator_parameters("single-refkv")) == lora
    assert ids(model.generator_parameters("direct-ipa")) == adapter
    assert ids(model.generator_parameters("full")) == lora | adapter
    assert ids(model.generator_parameters("finetune-ipa")) == lora | adapter
    assert not ids(model.discriminator_parameters()) & ids(model.generator_parameters("full"))


def test_reference_kv_deterministic_and_layered(model):
    _, img, _ = _inputs(model)
    a, b = _kv(model, img), _kv(model, img)
    assert len(a) == SMALL.blocks
    assert a.n_ref == SMALL.grid[0] * SMALL.grid[1]
    for l in range(len(a)):
        np.testing.assert_array_equal(a.keys[l].data, b.keys[l].data)
        np.testing.assert_array_equal(a.values[l].data, b.values[l].data)
        assert a.keys[l].shape == (2, a.n_ref, SMALL.d)


def test_reference_kv_perturbation_is_order_sigma1(model):
    # noised vs clean latent at t=1 differ by sigma_1 * eps; KV move proportionally
    _, img, _ = _inputs(model)
    zero = np.zeros(latentize(img).shape, np.float32)
    clean = model.reference_kv(img, zero)
    noisy = _kv(model, img)
    s1 = model.schedule.sigma(1)
    assert 0 < s1 < 0.01
    for l in range(len(clean)):
        diff = np.abs(noisy.keys[l].data - clean.keys[l].data).max()
        scale = np.abs(clean.keys[l].data).max()
        assert 0 < diff < 50 * s1 * scale


def test_reference_kv_unchanged_by_lora_updates():
    m = DualBranchModel(SMALL)
    _, img, _ = _inputs(m)
    before = _kv(m, img)
    for t in m.generator_parameters("full"):
        t.data = t.data + 0.1
    after = _kv(m, img)
    for l in range(len(before)):
        np.testing.assert_array_equal(before.keys[l].data, after.keys[l].data)


def test_gradient_isolation_and_freezing():
    m = DualBranchModel(SMALL)
    for blk in m.generator.blocks:
        blk.selfattn.Wq.loraB.data[:] = 0.01
    eps, img, codes = _inputs(m)
    ref = _kv(m, img)
    c_x = m.encode_image_tokens(img)
    out = m.generator_forward(eps, m.embed_context(codes), c_x, ref, masks="same-pass")
    T.mean(out * out).backward()
    for t in m.reference.tensors() + m.image_encoder.tensors()[:-2] + m.context.tensors():
        assert t.grad is None
    for t in m.base_tensors():
        assert not t.requires_grad and t.grad is None
    assert all(p.grad is not None for p in m.generator_parameters("full"))
    assert all(p.grad is None for p in m.discriminator_parameters())
    for k in ref.keys:
        assert k.grad is None


def test_image_encoder_contract(model):
    _, img, _ = _inputs(model)
    a, b = model.encode_image_tokens(img), model.encode_image_tokens(img)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.shape == (2, SMALL.n_tok, SMALL.hidden)
    assert model.encode_image_tokens(img[0]).shape == (1, SMALL.n_tok, SMALL.hidden)
    T.sum_(a * a).backward()
    assert model.image_encoder.proj.W.grad is not None
    assert all(c.W.grad is None for c in model.image_encoder.pyramid)
    model.image_encoder.proj.W.grad = model.image_encoder.proj.b.grad = None


def test_context_embedding_contract(model):
    e = model.embed_context([[1, 2], [1, 2], [3, 0]]).data
    assert e.shape == (3, 3, SMALL.hidden)
    np.testing.assert_array_equal(e[0], e[1])
    assert not np.array_equal(e[0, 0], e[2, 0]) and not np.array_equal(e[0, 1], e[2, 1])
    np.testing.assert_array_equal(e[0, SUBJECT_TOKEN_INDEX], e[2, SUBJECT_TOKEN_INDEX])
    assert SUBJECT_TOKEN_INDEX == 2
    with pytest.raises(IndexError):
        model.embed_context([[8, 0]])
    with pytest.raises(IndexError):
        model.embed_context([[0, 4]])
    with pytest.raises(ContractError):
        model.embed_context([[0, 1, 2]])


def test_discriminator_contract():
    m = DualBranchModel(SMALL)
    eps, img, _ = _inputs(m)
    c_x = m.discriminator.image_encoder(img)
    z = Tensor(eps)
    a = m.discriminator_forward(z, [0, 1000], c_x).data
    np.testing.assert_array_equal(a, m.discriminator_forward(z, [0, 1000], c_x).data)
    assert a.shape == (2,)
    assert not np.array_equal(m.discriminator_forward(z, [5, 5], c_x).data,
                              m.discriminator_forward(z, [900, 900], c_x).data)
    for bad in ([-1, 0], [0, 1001]):
        with pytest.raises(ContractError):
            m.discriminator_forward(z, bad, c_x)
    with pytest.raises(ContractError):
        m.discriminator_forward(z, [1], c_x)


def test_zero_head_gives_two_ln2():
    m = DualBranchModel(SMALL)
    m.discriminator.head.W.data[:] = 0
    m.discriminator.head.b.data[:] = 0
    eps, img, _ = _inputs(m)
    c_x = m.discriminator.image_encoder(img)
    logits = m.discriminator_forward(Tensor(eps), [3, 700], c_x)
    np.testing.assert_array_equal(logits.data, 0.0)
    np.testing.assert_allclose(float(adv_d(logits, logits).data), 2 * np.log(2), rtol=1e-6)


def test_gradients_reach_discriminator_and_generator():
    m = DualBranchModel(SMALL)
    eps, img, codes = _inputs(m)
    c_x = m.encode_image_tokens(img)
    z_rec = m.generator_forward(eps, m.embed_context(codes), c_x, _kv(m, img))
    logits = m.discriminator_forward(z_rec, [10, 20], m.discriminator.image_encoder(img))
    T.mean(logits).backward()
    assert m.discriminator.head.W.grad is not None
    assert any(p.grad is not None and np.any(p.grad != 0) for p in m.generator_parameters("full"))
    assert all(p.grad is not None for p in m.discriminator_parameters())


def test_same_pass_masks_are_recorded(model):
    eps, img, codes = _inputs(model)
    tr = ForwardTrace()
    with T.no_grad():
        model.generator_forward(eps, model.embed_context(codes), model.encode_image_tokens(img), _kv(model, img),
                                masks="same-pass", trace=tr)
    assert len(tr.masks) == SMALL.blocks
    np.testing.assert_array_equal(tr.masks[0].M, 1.0)  # no earlier map yet
    assert set(np.unique(tr.masks[1].M)) <= {0.0, 1.0}


def test_state_dict_round_trip_and_names():
    m = DualBranchModel(SMALL)
    m.generator.blocks[0].selfattn.Wq.loraB.data[:] = 0.5
    state = m.state_dict()
    assert "generator.block0.selfattn.Wq.loraA" in state
    assert "reference.block1.crossattn.Wout.W" in state
    m2 = DualBranchModel.from_state(state)
    assert m2.arch == SMALL
    for k, v in m2.state_dict().items():
        np.testing.assert_array_equal(v, state[k])
    broken = dict(state)
    del broken["generator.conv_in.W"]
    with pytest.raises(KeyError):
        DualBranchModel.from_state(broken)
    broken = dict(state)
    broken["generator.conv_in.W"] = np.zeros((1, 1), np.float32)
    with pytest.raises(ShapeError):
        DualBranchModel.from_state(broken)


def test_default_arch_inventory():
    m = DualBranchModel()
    assert m.arch.latent_channels == 12 and m.arch.latent_size == 16
    assert len(m.state_dict()) == 267  # 266 tensors plus the arch record


def test_reference_accepts_real_foreground():
    s = make_sample(7, "train", 0)
    fg = foreground_extract(s)
    assert fg.shape == (3, 32, 32)
    big = DualBranchModel(ArchConfig(hidden=16, d=8, blocks=1, n_tok=2, lora_rank=2, lora_alpha=2.0, disc_blocks=1))
    kv = big.reference_kv(fg, np.zeros((1, 12, 16, 16), np.float32))
    assert kv.n_ref == 64


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(MODES), st.integers(0, 2 ** 31 - 1))
def test_generator_output_finite_for_any_mode(model, mode, seed):
    eps, img, codes = _inputs(model, seed=seed % 1000)
    with T.no_grad():
        out = model.generator_forward(eps, model.embed_context(codes), model.encode_image_tokens(img),
                                      _kv(model, img), mode=mode, masks="same-pass")
    assert np.isfinite(out.data).all()
