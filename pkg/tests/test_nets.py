import json

import pytest
import torch

from defence.nets import (
    CheckpointMismatch,
    DiscriminatorSpec,
    FeatureExtractorSpec,
    GeneratorSpec,
    build_discriminator,
    build_feature_extractor,
    build_generator,
    extract_features,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    spec_hash,
)


@pytest.mark.parametrize("cin,cout", [(3, 1), (4, 3), (3, 3)])
@pytest.mark.parametrize("size", [64, 128, 96])
def test_generator_shape_round_trip(cin, cout, size):
    g = build_generator(GeneratorSpec(cin, cout, base_width=4))
    with torch.no_grad():
        out = g(torch.rand(2, cin, size, size))
    assert out.shape == (2, cout, size, size)
    assert float(out.min()) >= 0 and float(out.max()) <= 1


def test_generator_canonical_size():
    with torch.no_grad():
        assert build_generator(GeneratorSpec(3, 1, 8))(torch.rand(1, 3, 256, 256)).shape == (1, 1, 256, 256)
        assert build_generator(GeneratorSpec(4, 3, 8))(torch.rand(1, 4, 256, 256)).shape == (1, 3, 256, 256)


def test_generator_depth_is_seven_each_way():
    g = build_generator(GeneratorSpec(3, 1, 8))
    assert len(g.down) == 7 and len(g.up) == 7
    widths = [layer.block[0].out_channels for layer in g.down]
    assert widths == [8, 16, 32, 64, 64, 64, 64]


def test_generator_without_skips():
    g = build_generator(GeneratorSpec(3, 3, 4, skip_connections=False))
    assert g(torch.rand(1, 3, 64, 64)).shape == (1, 3, 64, 64)


def test_generator_rejects_bad_channels():
    with pytest.raises(ValueError):
        GeneratorSpec(5, 3)
    g = build_generator(GeneratorSpec(3, 1, 4))
    with pytest.raises(ValueError):
        g(torch.rand(1, 4, 64, 64))


def test_generator_seed_determinism():
    a = build_generator(GeneratorSpec(3, 1, 4), seed=7).state_dict()
    b = build_generator(GeneratorSpec(3, 1, 4), seed=7).state_dict()
    c = build_generator(GeneratorSpec(3, 1, 4), seed=8).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_generator(GeneratorSpec(3, 1, 4), seed=99)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("cand,cond", [(1, 3), (3, 3)])
def test_discriminator_grid(cand, cond):
    d = build_discriminator(DiscriminatorSpec(cand + cond, base_width=8))
    with torch.no_grad():
        s = d(torch.rand(1, cand, 256, 256), torch.rand(1, cond, 256, 256))
    assert s.shape == (1, 1, 16, 16)
    assert float(s.min()) > 0 and float(s.max()) < 1
    assert DiscriminatorSpec(cand + cond).output_grid(256, 256) == (16, 16)


def test_discriminator_channel_mismatch():
    d = build_discriminator(DiscriminatorSpec(4, base_width=4))
    with pytest.raises(ValueError):
        d(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64))


def test_standin_features():
    ext = build_feature_extractor()
    x = torch.rand(1, 3, 32, 32)
    a, b = extract_features(ext, x), extract_features(build_feature_extractor(), x)
    assert len(a) == 4
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    sides = [t.shape[-1] for t in a]
    assert sides == sorted(sides, reverse=True)
    assert not any(p.requires_grad for p in ext.parameters())


def test_standin_zero_input_zero_bias():
    # ReLU(W * 0 + 0) = 0 at every block.
    ext = build_feature_extractor(FeatureExtractorSpec(zero_bias=True))
    for act in extract_features(ext, torch.zeros(1, 3, 16, 16)):
        assert torch.count_nonzero(act) == 0


def test_gray_input_replicated():
    ext = build_feature_extractor()
    gray = torch.rand(1, 1, 16, 16)
    a = extract_features(ext, gray)
    b = extract_features(ext, gray.expand(-1, 3, -1, -1))
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    with pytest.raises(ValueError):
        extract_features(ext, torch.rand(1, 2, 16, 16))


def test_tap_subset():
    ext = build_feature_extractor(FeatureExtractorSpec(tap_layers=(1, 3)))
    assert len(extract_features(ext, torch.rand(1, 3, 16, 16))) == 2


def test_vgg_requires_local_weights(tmp_path):
    pytest.importorskip("torchvision")
    with pytest.raises(FileNotFoundError):
        build_feature_extractor(FeatureExtractorSpec(kind="pretrained_vgg19", weights_path=str(tmp_path / "none.pth")))


def test_checkpoint_round_trip(tmp_path):
    g = build_generator(GeneratorSpec(4, 3, 4), seed=3)
    g.eval()
    x = torch.rand(1, 4, 64, 64)
    with torch.no_grad():
        before = g(x)
    ck = save_checkpoint(g, tmp_path / "single", step=12, seed=3)
    assert ck.ckpt_path.name == "single.ckpt" and ck.manifest_path.name == "single.json"
    loaded, manifest = load_checkpoint(tmp_path / "single", expected_spec=GeneratorSpec(4, 3, 4))
    with torch.no_grad():
        after = loaded(x)
    assert torch.equal(before, after)
    assert manifest["step"] == 12 and manifest["spec_hash"] == spec_hash(GeneratorSpec(4, 3, 4))
    assert read_manifest(tmp_path / "single")["kind"] == "generator"


def test_checkpoint_rejects_mismatched_spec(tmp_path):
    save_checkpoint(build_generator(GeneratorSpec(3, 1, 4)), tmp_path / "m")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "m", expected_spec=GeneratorSpec(3, 1, 8))


def test_checkpoint_detects_tampered_manifest(tmp_path):
    save_checkpoint(build_discriminator(DiscriminatorSpec(4, 4)), tmp_path / "d")
    path = tmp_path / "d.json"
    manifest = json.loads(path.read_text())
    manifest["spec"]["in_channels"] = 6
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "d")
