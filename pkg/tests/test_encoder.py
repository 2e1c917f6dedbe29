import numpy as np
import pytest

from audalign import autodiff as ad
from audalign import encoder as enc
from audalign.alignment import AdamState, TrainConfig, adamw_step

SMALL = enc.EncoderConfig(patch_h=4, patch_w=4, embed_dim=16, blocks=2, heads=2, decoder_dim=8,
                          decoder_heads=2, n_mels=8, max_frames=16)


def test_patchify_grid_and_count():
    patches, grid = enc.patchify(np.zeros((32, 64)), enc.EncoderConfig())
    assert patches.shape == (8, 256)
    assert grid == (2, 4)


def test_patchify_constant_rows_identical():
    patches, _ = enc.patchify(np.full((32, 64), 3.5), enc.EncoderConfig())
    assert np.all(patches == patches[0])


def test_patchify_raster_order():
    cfg = enc.EncoderConfig(patch_h=2, patch_w=2, n_mels=4)
    spec = np.arange(16.0).reshape(4, 4)
    patches, grid = enc.patchify(spec, cfg)
    assert grid == (2, 2)
    assert patches[0].tolist() == [0, 1, 4, 5]
    assert patches[1].tolist() == [2, 3, 6, 7]
    assert patches[2].tolist() == [8, 9, 12, 13]


def test_unpatchify_inverse_with_padding():
    cfg = enc.EncoderConfig()
    spec = np.random.default_rng(0).normal(size=(37, 64))
    patches, grid = enc.patchify(spec, cfg)
    back = enc.unpatchify(patches, grid, cfg)
    assert back.shape == (48, 64)
    assert np.array_equal(back[:37], spec)
    assert np.all(back[37:] == 0)


def test_patchify_empty():
    with pytest.raises(ValueError):
        enc.patchify(np.zeros((0, 64)), enc.EncoderConfig())


def test_config_invariants():
    with pytest.raises(ValueError):
        enc.EncoderConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        enc.EncoderConfig(mask_ratio=1.0)


def test_random_mask_count():
    m = enc.random_mask(28, 0.7, np.random.default_rng(0))
    assert m.count_masked == round(0.7 * 28)
    m.validate()


def small_batch(seed=0, b=2):
    rng = np.random.default_rng(seed)
    specs = rng.normal(size=(b, 16, 8))
    return np.stack([enc.patchify(s, SMALL)[0] for s in specs])


def test_forward_rejects_degenerate_masks():
    params = enc.init_params(SMALL, 0)
    tape = ad.Tape()
    leaves = enc.param_leaves(tape, params)
    x = small_batch(b=1)
    with pytest.raises(ValueError):
        enc.forward(leaves, SMALL, x, [enc.PatchMask(np.ones(8, bool))])
    with pytest.raises(ValueError):
        enc.forward(leaves, SMALL, x, [enc.PatchMask(np.zeros(8, bool))])


def test_forward_deterministic_and_shapes():
    params = enc.init_params(SMALL, 0)
    x = small_batch()
    rng = np.random.default_rng(1)
    masks = [enc.random_mask(8, 0.5, rng) for _ in range(2)]

    def run():
        tape = ad.Tape()
        out = enc.forward(enc.param_leaves(tape, params), SMALL, x, masks)
        return out.pooled.value, out.recon.value

    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].shape == (2, 16)
    assert a[1].shape == (16, 16)


def test_default_pooled_dim_384():
    cfg = enc.EncoderConfig(max_frames=32)
    params = enc.init_params(cfg, 0)
    x = enc.patchify(np.zeros((32, 64)), cfg)[0]
    pooled = enc.embed(params, cfg, x)
    assert pooled.shape == (1, 384)


def test_block_hiddens_per_block():
    params = enc.init_params(SMALL, 0)
    hs = enc.embed(params, SMALL, small_batch(), all_blocks=True)
    assert len(hs) == SMALL.blocks
    assert np.array_equal(hs[-1], enc.embed(params, SMALL, small_batch()))


def test_ssm_loss_identity_and_offset():
    t = ad.Tape()
    target = np.random.default_rng(0).normal(size=(6, 4))
    masked = np.array([1, 0, 1, 0, 0, 1], bool)
    assert enc.ssm_loss(t.const(target), target, masked).item() == 0.0
    assert enc.ssm_loss(t.const(target + 1), target, masked).item() == pytest.approx(1.0, abs=1e-15)


def test_ssm_loss_loop_oracle():
    rng = np.random.default_rng(3)
    recon, target = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
    masked = rng.random(7) < 0.5
    masked[0] = True
    total, count = 0.0, 0
    for i in range(7):
        if masked[i]:
            for j in range(5):
                total += (recon[i, j] - target[i, j]) ** 2
                count += 1
    t = ad.Tape()
    assert abs(enc.ssm_loss(t.const(recon), target, masked).item() - total / count) < 1e-12


def test_ssm_loss_no_masked_rows():
    t = ad.Tape()
    with pytest.raises(ValueError):
        enc.ssm_loss(t.const(np.ones((2, 2))), np.ones((2, 2)), np.zeros(2, bool))


def test_init_deterministic_and_bounded():
    a, b = enc.init_params(SMALL, 5), enc.init_params(SMALL, 5)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    for name, w in a.items():
        if name.endswith(("pos", "mask_token")) or name.rsplit(".", 1)[-1].startswith("b"):
            continue
        assert np.max(np.abs(w)) <= 1 / np.sqrt(w.shape[0])


def test_checkpoint_roundtrip(tmp_path):
    params = enc.init_params(SMALL, 2)
    p = tmp_path / "enc.ckpt"
    enc.save_checkpoint(p, SMALL, params)
    assert p.read_bytes()[:8] == b"ACENC01\0"
    cfg, back = enc.load_checkpoint(p)
    assert cfg == SMALL
    assert all(np.array_equal(params[k], back[k]) for k in params)
    again = enc.init_params(SMALL, 99, mode="from_checkpoint", checkpoint=p)
    assert all(np.array_equal(params[k], again[k]) for k in params)


def test_checkpoint_shape_mismatch(tmp_path):
    p = tmp_path / "enc.ckpt"
    enc.save_checkpoint(p, SMALL, enc.init_params(SMALL, 0))
    other = enc.EncoderConfig(patch_h=4, patch_w=4, embed_dim=32, blocks=2, heads=2, decoder_dim=8,
                              decoder_heads=2, n_mels=8, max_frames=16)
    with pytest.raises(ValueError):
        enc.init_params(other, 0, mode="from_checkpoint", checkpoint=p)


def test_ssm_gradient_matches_finite_differences():
    params = enc.init_params(SMALL, 0)
    x = small_batch(4)
    masks = [enc.random_mask(8, 0.5, np.random.default_rng(i)) for i in range(2)]

    def fn(tape, leaves):
        out = enc.forward(leaves, SMALL, x, masks)
        return enc.ssm_loss(out.recon, out.target, out.masked_rows)

    # key biases shift every score of a query equally, which softmax ignores:
    # their exact-zero gradients are scored with a roundoff tolerance
    assert ad.grad_check(fn, params, max_coords=6, seed=0, zero_tol=1e-10) < 1e-4
    tape = ad.Tape()
    leaves = enc.param_leaves(tape, params)
    grads = ad.backward(tape, fn(tape, leaves)).grads
    assert all(np.max(np.abs(grads[k])) < 1e-14 for k in params if k.endswith(".bk"))


def test_positional_free_pooling_is_permutation_invariant():
    params = enc.init_params(SMALL, 0)
    params["pos"] = np.zeros_like(params["pos"])
    x = small_batch(b=1)[0]
    perm = np.random.default_rng(0).permutation(len(x))
    a = enc.embed(params, SMALL, x)
    b = enc.embed(params, SMALL, x[perm])
    assert np.allclose(a, b, atol=1e-12)


def test_ssm_training_halves_loss():
    params = enc.init_params(SMALL, 0)
    x = small_batch(7, b=4)
    masks = [enc.random_mask(8, 0.5, np.random.default_rng(i)) for i in range(4)]
    cfg = TrainConfig(weight_decay=0.0)
    state = AdamState()

    def step():
        tape = ad.Tape()
        leaves = enc.param_leaves(tape, params)
        out = enc.forward(leaves, SMALL, x, masks)
        loss = enc.ssm_loss(out.recon, out.target, out.masked_rows)
        return loss.item(), ad.backward(tape, loss).grads

    first, _ = step()
    for _ in range(200):
        value, grads = step()
        params, state = adamw_step(params, grads, state, 1e-3, cfg)
    assert value <= 0.5 * first
