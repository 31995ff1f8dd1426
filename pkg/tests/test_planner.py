import numpy as np
import pytest

from anyd import autodiff as ad
from anyd.autodiff import grad_check
from anyd.model_io import (ModelFormatError, arrays_from_bytes, load_model,
                           model_from_bytes, model_to_bytes, parse_manifest,
                           save_model, shared_to_bytes)
from anyd.planner import (Command, ModelConfig, forward_all_branches,
                          forward_batch, fuse, init_model, select_command)

MICRO = ModelConfig(image_h=8, image_w=8, image_ch=2, patch_h=4, patch_w=4,
                    channels=4, speed_dim=3, attn_dim=4, heads=2, regions=2,
                    branch_hidden1=6, branch_hidden2=6)


@pytest.fixture()
def model():
    return init_model(MICRO, seed=0, region_names=["a", "b"])


def onehot(i, n=2):
    g = np.zeros(n)
    g[i] = 1.0
    return g


def rand_image(seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (8, 8, 2))


def test_command_enum_values_and_names():
    assert (int(Command.LEFT), int(Command.FORWARD), int(Command.RIGHT)) \
        == (0, 1, 2)
    assert Command.from_name("left") is Command.LEFT
    assert Command.RIGHT.to_name() == "right"
    with pytest.raises(ValueError):
        Command.from_name("reverse")


def test_fuse_shape(model):
    rng = np.random.default_rng(1)
    grid = rng.standard_normal((2, 2, 4))
    speed = rng.standard_normal(3)
    out = fuse(grid, speed, model.planner)
    assert out.shape == (2, 2, 4)


def test_fuse_zero_inputs_give_relu_bias(model):
    model.planner.fusion_bias.value[...] = [-1.0, 0.2, 0.0, 3.0]
    out = fuse(np.zeros((2, 2, 4)), np.zeros(3), model.planner)
    expected = np.maximum(model.planner.fusion_bias.value, 0.0)
    for cell in out.value.reshape(-1, 4):
        assert np.array_equal(cell, expected)


def test_fuse_spatial_shift_equivariance(model):
    rng = np.random.default_rng(2)
    grid = rng.standard_normal((5, 6, 4))
    speed = rng.standard_normal(3)
    base = fuse(grid, speed, model.planner).value
    rolled = fuse(np.roll(grid, 1, axis=0), speed, model.planner).value
    assert np.abs(rolled[2:-1] - base[1:-2]).max() <= 1e-12


def test_forward_all_branches_shapes(model):
    branches, head_weights = forward_all_branches(rand_image(3), 4.0,
                                                  onehot(0), model)
    assert len(branches) == 3
    for b in branches:
        assert b.shape == (5, 2)
    assert head_weights.shape == (2,)


def test_forward_determinism(model):
    a = forward_all_branches(rand_image(4), 3.0, onehot(1), model)
    b = forward_all_branches(rand_image(4), 3.0, onehot(1), model)
    for x, y in zip(a[0], b[0]):
        assert np.array_equal(x, y)
    assert np.array_equal(a[1], b[1])


def test_forward_rejects_bad_region(model):
    with pytest.raises(ValueError):
        forward_all_branches(rand_image(5), 3.0, [0.5, 0.5], model)


def test_select_command_indexing(model):
    branches, _ = forward_all_branches(rand_image(6), 2.0, onehot(0), model)
    assert select_command(branches, Command.LEFT) is branches[0]
    assert select_command(branches, Command.RIGHT) is branches[2]
    picked = select_command(branches, Command.FORWARD)
    assert np.array_equal(picked, branches[1])


def test_branch_parameter_isolation(model):
    img, speed, g = rand_image(7), 5.0, onehot(1)
    before, _ = forward_all_branches(img, speed, g, model)
    model.planner.branches[2].b3.value[...] += 1.0
    after, _ = forward_all_branches(img, speed, g, model)
    assert np.array_equal(before[0], after[0])
    assert np.array_equal(before[1], after[1])
    assert not np.array_equal(before[2], after[2])


def test_region_conditioning_reaches_every_branch(model):
    img, speed = rand_image(8), 5.0
    out_a, _ = forward_all_branches(img, speed, onehot(0), model)
    out_b, _ = forward_all_branches(img, speed, onehot(1), model)
    for branch_a, branch_b in zip(out_a, out_b):
        assert not np.array_equal(branch_a, branch_b)


def test_end_to_end_branch_gradient(model):
    rng = np.random.default_rng(9)
    img = rng.uniform(0, 1, (1, 8, 8, 2))
    speeds = np.array([4.0])
    regions = np.array([1])
    target = rng.standard_normal((1, 3, 5, 2))

    def run():
        preds, _ = forward_batch(img, speeds, regions, model)
        return ad.mean_over(ad.abs_value(ad.add(preds, -target)))

    assert grad_check(run, model.parameters()) <= 1e-4


def test_parameter_names_unique(model):
    named = model.named_parameters()
    assert len(named) == len(model.parameters())
    assert model.table.embedding.name in named


def test_model_copy_independent(model):
    clone = model.copy()
    for name, p in clone.named_parameters().items():
        assert np.array_equal(p.value, model.named_parameters()[name].value)
    clone.encoder.patch_bias.value[...] += 1.0
    assert not np.array_equal(clone.encoder.patch_bias.value,
                              model.encoder.patch_bias.value)


def test_save_load_round_trip(tmp_path, model):
    path = tmp_path / "m.anyd"
    save_model(model, path)
    loaded = load_model(path)
    for name, p in loaded.named_parameters().items():
        assert np.array_equal(p.value, model.named_parameters()[name].value)
    assert loaded.config == model.config
    assert loaded.table.region_names == model.table.region_names


def test_serialization_magic_and_manifest(model):
    blob = model_to_bytes(model)
    assert blob.startswith(b"ANYD1")
    manifest, payload = parse_manifest(blob)
    region = manifest["table_region"]
    assert region["params"] == [model.table.embedding.name]
    table_bytes = model.table.embedding.value.astype("<f8").tobytes()
    assert payload[region["byte_start"]:region["byte_end"]] == table_bytes
    assert region["byte_end"] == len(payload)   # table is the last region


def test_shared_serialization_excludes_table(model):
    shared = {p.name: p.value for p in model.shared_parameters()}
    blob = shared_to_bytes(shared, model.config)
    manifest, arrays = arrays_from_bytes(blob)
    assert "table_region" not in manifest
    assert model.table.embedding.name not in arrays
    table_bytes = model.table.embedding.value.astype("<f8").tobytes()
    assert table_bytes not in blob


def test_model_from_bytes_bad_magic():
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"NOTANYD" + b"\x00" * 32)


def test_model_from_bytes_truncated(model):
    blob = model_to_bytes(model)
    with pytest.raises(ModelFormatError):
        model_from_bytes(blob[:-16])


def test_config_requires_divisible_heads():
    with pytest.raises(ValueError):
        ModelConfig(attn_dim=10, heads=3)
