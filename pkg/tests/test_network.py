import numpy as np
import pytest
import torch

from wsmoco.network import (
    EncoderConfig,
    HeadConfig,
    ShapeError,
    build_bundle,
    encode,
    head_forward,
    load_checkpoint,
    project,
    save_checkpoint,
    set_trainable,
    trainable_parameters,
    with_task_head,
)


@pytest.fixture(scope="module")
def bundle():
    return build_bundle(EncoderConfig.tiny(32, 16), HeadConfig("projection", 32, 8), seed=0)


def test_projection_unit_norm(bundle):
    bundle.model.eval()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        norms = []
        for _ in range(10):
            x = torch.randn(100, 3, 32, 32, generator=g) * 3
            norms.append(project(bundle, encode(bundle, x)).norm(dim=1))
    norms = torch.cat(norms)
    assert norms.shape == (1000,)
    assert torch.all((norms - 1).abs() < 1e-5)


def test_shape_error(bundle):
    with pytest.raises(ShapeError):
        encode(bundle, torch.zeros(1, 3, 31, 32))
    with pytest.raises(ValueError):
        head_forward(bundle, torch.zeros(1, 16))


def test_seeded_init_is_reproducible():
    a = build_bundle(EncoderConfig.tiny(32, 16), HeadConfig(), seed=4)
    b = build_bundle(EncoderConfig.tiny(32, 16), HeadConfig(), seed=4)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)
    assert a.fingerprint == b.fingerprint


def test_task_head_keeps_encoder(bundle):
    cls = with_task_head(bundle, "classify", 1)
    assert cls.head_cfg.out_dim == 2
    for pa, pb in zip(bundle.encoder.parameters(), cls.encoder.parameters()):
        assert torch.equal(pa, pb)
    assert with_task_head(bundle, "regress", 1).head_cfg.out_dim == 1


def test_freeze_policy(bundle):
    b = with_task_head(bundle, "classify", 1)
    set_trainable(b, "last_block_and_head")
    names = {id(p) for p in trainable_parameters(b)}
    assert all(id(p) in names for p in b.head.parameters())
    assert all(id(p) in names for p in b.encoder.backbone.last_block.parameters())
    assert len(names) < len(list(b.model.parameters()))
    set_trainable(b, "all")
    assert len(trainable_parameters(b)) == len(list(b.model.parameters()))


def test_checkpoint_round_trip(bundle, tmp_path):
    path = tmp_path / "m.pt"
    save_checkpoint(bundle, path, {"note": "x"})
    back, extra = load_checkpoint(path)
    assert extra["note"] == "x"
    assert back.fingerprint == bundle.fingerprint
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32))
    bundle.model.eval()
    back.model.eval()
    with torch.no_grad():
        assert torch.equal(bundle.model(x), back.model(x))


def test_config_validation():
    with pytest.raises(ValueError, match="unknown backbone"):
        EncoderConfig("vgg")
    with pytest.raises(ValueError):
        EncoderConfig("resnet18", 64)
    with pytest.raises(ValueError):
        HeadConfig("classification", 8, 3)
    assert EncoderConfig("standard-18-layer-residual").backbone == "resnet18"
