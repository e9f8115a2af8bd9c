import math

import numpy as np
import pytest

from gtnet.attention import block_forward
from gtnet.checkpoint import CheckpointError, MAGIC, load_checkpoint, read_manifest, save_checkpoint
from gtnet.config import PROFILES, resolve
from gtnet.data import SynthSpec, normalize_unit_sphere, synth_generate
from gtnet.graph import knn_build
from gtnet.model import AlignmentNet, GTNet, ModelConfig, loss, predict_labels
from gtnet.numerics import OptimizerConfig, Tensor, finite_difference_check
from gtnet.train import evaluate, fit

from helpers import max_grad, split_params


def tiny(**kw):
    base = dict(blocks=[(3, 8), (8, 8)], k=4, num_classes=3, shape_width=16, cls_hidden=(16,),
                seg_hidden=(16,), label_width=4, dropout=0.0, epochs=10, batch_size=4)
    base.update(kw)
    return ModelConfig(**base)


def cloud(n, seed=0, c=3):
    return np.random.default_rng(seed).normal(size=(n, c))


# -- config ----------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="chain"):
        ModelConfig(blocks=[(3, 8), (16, 8)])
    with pytest.raises(ValueError):
        ModelConfig(use_local=False, use_global=False)
    with pytest.raises(ValueError):
        ModelConfig(aggregation="median")
    with pytest.raises(ValueError):
        ModelConfig(task="part_segmentation", num_parts=0)


def test_config_dict_round_trip():
    cfg = tiny(optimizer=OptimizerConfig(0.02, 0.8, 0.0))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_profile_block_widths():
    assert ModelConfig().blocks == [(3, 64), (64, 64), (64, 128), (128, 256)]
    shapenet = resolve({}, {"profile": "shapenet", "synth": "sphere"}).model
    assert shapenet.blocks == [(3, 96), (96, 96), (96, 96)] and shapenet.k == 20
    assert resolve({}, {"profile": "s3dis", "synth": "sphere"}).model.k == 15


# -- alignment -------------------------------------------------------------------


def test_fresh_alignment_is_identity():
    net = AlignmentNet(np.random.default_rng(0))
    x = cloud(20)[None]
    out, t = net(Tensor(x))
    np.testing.assert_array_equal(t.data[0], np.eye(3))
    np.testing.assert_array_equal(out.data, x)


def test_alignment_gradient():
    net = AlignmentNet(np.random.default_rng(1))
    net.offset.weight.data[...] = np.random.default_rng(2).normal(scale=0.1, size=net.offset.weight.shape)
    x = Tensor(cloud(10, 3)[None])
    proj = cloud(10, 4)[None]
    params, zero = split_params(net)
    fn = lambda: (net(x)[0] * proj).sum()
    assert finite_difference_check(fn, params) < 1e-4
    assert max_grad(fn, zero) < 1e-12


# -- backbone --------------------------------------------------------------------


def test_coincident_points():
    model = GTNet(tiny())
    outs, graphs = model.backbone_forward(Tensor(np.zeros((1, 6, 3))), np.zeros((1, 6, 3)))
    assert graphs[0][0].tolist() == [[0, 1, 2, 3]] * 6
    assert all(np.isfinite(o.data).all() for o in outs)
    assert np.isfinite(model(np.zeros((6, 3))).data).all()


def test_single_block_equals_block_forward():
    model = GTNet(tiny(blocks=[(3, 8)], use_alignment=False))
    x = cloud(12, 5)
    outs, _ = model.backbone_forward(Tensor(x[None]), x[None])
    ref = block_forward(Tensor(x), knn_build(x, 4), model.blocks[0])
    np.testing.assert_array_equal(outs[0].data[0], ref.data)


def test_always_coordinates_reuses_the_graph():
    model = GTNet(tiny(blocks=[(3, 8), (8, 8), (8, 8)], graph_basis="always_coordinates"))
    x = cloud(16, 6)[None]
    _, graphs = model.backbone_forward(Tensor(x), x)
    assert all((g == graphs[0]).all() for g in graphs[1:])


def test_dynamic_graph_follows_features():
    model = GTNet(tiny(blocks=[(3, 8), (8, 8)]))
    x = cloud(16, 7)[None]
    outs, graphs = model.backbone_forward(Tensor(x), x)
    np.testing.assert_array_equal(graphs[1][0], knn_build(outs[0].data[0], 4).indices)


# -- shape feature gathering -----------------------------------------------------


def test_f_agg_example():
    model = GTNet(tiny(blocks=[(3, 4), (4, 8)]))
    outs = [Tensor(np.ones((1, 5, 2))), Tensor(np.full((1, 5, 3), 2.0))]
    model.shape_mlp = type(model.shape_mlp)(5, 16, np.random.default_rng(0))
    _, agg = model.gather_shape_features(outs, return_agg=True)
    assert agg.data.tolist() == [[1, 1, 2, 2, 2]]


def test_f_agg_single_point():
    model = GTNet(tiny(blocks=[(3, 8)]))
    v = cloud(1, 8, 8)[None]
    _, agg = model.gather_shape_features([Tensor(v)], return_agg=True)
    np.testing.assert_array_equal(agg.data, v[:, 0])


def test_f_agg_permutation_invariant():
    model = GTNet(tiny())
    rng = np.random.default_rng(9)
    outs = [rng.normal(size=(2, 30, 8)), rng.normal(size=(2, 30, 8))]
    perm = rng.permutation(30)
    _, a = model.gather_shape_features([Tensor(o) for o in outs], return_agg=True)
    _, b = model.gather_shape_features([Tensor(o[:, perm]) for o in outs], return_agg=True)
    np.testing.assert_array_equal(a.data, b.data)


def test_label_only_for_part_segmentation():
    cls = GTNet(tiny())
    with pytest.raises(ValueError):
        cls.gather_shape_features([Tensor(np.ones((1, 4, 8)))], np.eye(3)[:1])
    with pytest.raises(ValueError):
        cls(cloud(8), category=[0])
    seg = GTNet(tiny(task="part_segmentation", num_parts=5))
    with pytest.raises(ValueError):
        seg(cloud(8))
    assert seg(cloud(8), category=[1]).shape == (1, 8, 5)


# -- heads -----------------------------------------------------------------------


@pytest.mark.slow
def test_modelnet40_logit_shape():
    cfg = resolve({}, {"profile": "modelnet40", "synth": "sphere"}).model
    model = GTNet(cfg).eval()
    out = model(cloud(1024, 10))
    assert out.shape == (1, 40) and np.isfinite(out.data).all()


@pytest.mark.slow
def test_shapenet_logit_shape():
    cfg = resolve({}, {"profile": "shapenet", "synth": "sphere"}).model
    model = GTNet(cfg).eval()
    out = model(cloud(2048, 11), category=[3])
    assert out.shape == (1, 2048, 50)


def test_semantic_head_has_no_label_branch():
    model = GTNet(tiny(task="semantic_segmentation", blocks=[(9, 8), (8, 8)], num_parts=13))
    assert model.label_mlp is None
    assert model(cloud(10, 12, 9)).shape == (1, 10, 13)


def _distinct(n, seed):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 3))


def test_classification_permutation_invariance():
    model = GTNet(tiny()).eval()
    x = _distinct(32, 13)
    perm = np.random.default_rng(14).permutation(32)
    np.testing.assert_allclose(model(x[perm]).data, model(x).data, rtol=0, atol=1e-9)


def test_segmentation_permutation_equivariance():
    model = GTNet(tiny(task="part_segmentation", num_parts=4)).eval()
    x = _distinct(32, 15)
    perm = np.random.default_rng(16).permutation(32)
    a = model(x, category=[2]).data
    b = model(x[perm], category=[2]).data
    np.testing.assert_allclose(b[0], a[0][perm], rtol=0, atol=1e-9)


@pytest.mark.parametrize("n", [20, 64, 1024])
def test_finite_outputs_with_zero_offsets(n):
    cfg = resolve({}, {"profile": "modelnet40", "synth": "sphere"}).model
    cfg = cfg.replace(blocks=[(3, 16), (16, 16)], zero_init_offset=True)
    out = GTNet(cfg).eval()(cloud(n, n))
    assert np.isfinite(out.data).all()


# -- loss and prediction ---------------------------------------------------------


def test_loss_uniform():
    assert loss(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(1.3863, abs=5e-5)
    assert loss(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-15)


def test_loss_large_margin_goes_to_zero():
    assert loss(Tensor(np.array([[0.0, 60.0]])), [1]).item() < 1e-25


def test_loss_two_samples_by_hand():
    # sample 1: softmax([0, ln 3])[1] = 3/4; sample 2: softmax([0, 0])[0] = 1/2
    logits = Tensor(np.array([[0.0, math.log(3)], [0.0, 0.0]]))
    expected = (math.log(4 / 3) + math.log(2)) / 2
    assert loss(logits, [1, 0]).item() == pytest.approx(expected, abs=1e-15)


def test_loss_rejects_bad_target():
    with pytest.raises((ValueError, IndexError)):
        loss(Tensor(np.zeros((1, 3))), [3])


def test_predict_labels_restricted_to_category():
    logits = np.array([[[5.0, 1.0, 2.0, 0.0]]])
    assert predict_labels(logits).tolist() == [[0]]
    assert predict_labels(logits, [1], [[0, 1], [2, 3]]).tolist() == [[2]]


# -- training variants -----------------------------------------------------------


def _synth(n_points=32, per_class=4):
    ds = synth_generate(SynthSpec(("sphere", "cube"), n_points, per_class, 0.01, 0))
    ds.items = [normalize_unit_sphere(c) for c in ds.items]
    return ds


@pytest.mark.parametrize("flags", [dict(use_global=False), dict(use_local=False)])
def test_ablated_transformers_train(flags):
    ds = _synth()
    cfg = tiny(num_classes=2, optimizer=OptimizerConfig(0.01), **flags)
    model = GTNet(cfg)
    before = [p.data.copy() for p in model.parameters()]
    hist = fit(model, ds, epochs=3)
    assert all(np.isfinite(h.loss) for h in hist)
    assert any(not np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


# -- checkpoints -----------------------------------------------------------------


def _trained(tmp_path):
    model = GTNet(tiny(num_classes=2))
    fit(model, _synth(), epochs=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    return model, path


def test_checkpoint_round_trip(tmp_path):
    model, path = _trained(tmp_path)
    loaded = load_checkpoint(path, model.config)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    for (_, b1), (_, b2) in zip(model.named_buffers(), loaded.named_buffers()):
        assert b1.tobytes() == b2.tobytes()
    x = cloud(16, 20)
    assert model.eval()(x).data.tobytes() == loaded.eval()(x).data.tobytes()


def test_checkpoint_header(tmp_path):
    _, path = _trained(tmp_path)
    assert path.read_bytes()[:8] == MAGIC
    manifest, blob = read_manifest(path)
    assert manifest["format_version"] == 1
    last = manifest["tensors"][-1]
    assert last["offset"] + last["length"] == len(blob)


def test_checkpoint_config_mismatch(tmp_path):
    model, path = _trained(tmp_path)
    other = model.config.replace(blocks=[(3, 8), (8, 16)])
    with pytest.raises(CheckpointError, match=r"blocks\[1\]"):
        load_checkpoint(path, other)


def test_checkpoint_truncated(tmp_path):
    _, path = _trained(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw[:12])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def _rewrite_manifest(path, edit):
    import json
    import struct
    manifest, blob = read_manifest(path)
    edit(manifest)
    head = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + blob)


def test_checkpoint_version_and_unknown_name(tmp_path):
    _, path = _trained(tmp_path)
    _rewrite_manifest(path, lambda m: m.update(format_version=99))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)
    _rewrite_manifest(path, lambda m: m.update(format_version=1))
    _rewrite_manifest(path, lambda m: m["tensors"][0].update(name="nope"))
    with pytest.raises(CheckpointError, match="unknown parameter name"):
        load_checkpoint(path)


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_profiles_are_valid():
    for name in PROFILES:
        resolve({}, {"profile": name, "synth": "sphere"})



def test_batch_norm_recalibration_averages_batch_statistics():
    from gtnet.numerics import BatchNorm
    from gtnet.train import batch_slices, recalibrate_batch_norm, stack_batch

    ds = _synth(16, 5)
    model = GTNet(tiny(num_classes=2, batch_size=4))
    norms = [m for _, m in model.named_modules() if isinstance(m, BatchNorm)]
    # oracle: momentum 1 makes each buffer hold exactly the last batch's statistics
    model.eval()
    for b in norms:
        b.training, b.momentum = True, 1.0
    per_batch = []
    for group in batch_slices(len(ds), 4, None):
        model(stack_batch([ds.items[i] for i in group], np.float64))
        per_batch.append([(b.running_mean.copy(), b.running_var.copy()) for b in norms])
    for b in norms:
        b.momentum = 0.1
    recalibrate_batch_norm(model, ds)
    assert len(per_batch) == 3  # 10 clouds in batches of 4, trailing pair kept
    for i, b in enumerate(norms):
        np.testing.assert_allclose(b.running_mean, np.mean([p[i][0] for p in per_batch], axis=0),
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(b.running_var, np.mean([p[i][1] for p in per_batch], axis=0),
                                   rtol=1e-12, atol=1e-12)
        assert not b.training and b.momentum == 0.1
