import numpy as np
import pytest

from plantscan import models as M
from plantscan.models import (BadMagicError, ModelSpec, ParamCountMismatchError,
                              TruncatedDataError, VersionMismatchError,
                              build_cnn, build_hybrid, build_model, build_vit,
                              load_model, save_model, summarize)

SMALL_CNN = dict(kind="cnn", height=32, width=32)
SMALL_VIT = dict(kind="vit", height=32, width=32, patch_size=8,
                 embed_dim=16, num_heads=2, depth=2, mlp_hidden=32)
SMALL_HYBRID = dict(kind="hybrid", height=32, width=32, patch_size=8,
                    embed_dim=16, num_heads=2, depth=2, mlp_hidden=32)


# ----------------------------------------------------------------- ModelSpec

def test_spec_defaults():
    spec = ModelSpec()
    assert (spec.height, spec.width, spec.channels) == (256, 256, 3)
    assert spec.class_names == ["BIT", "Hydro", "Natural Gas", "Solar"]
    assert spec.num_classes == 4


def test_spec_class_name_count_checked():
    with pytest.raises(ValueError):
        ModelSpec(num_classes=3)


def test_spec_rejects_unknown_kind():
    with pytest.raises(ValueError):
        ModelSpec(kind="mlp")


def test_spec_from_dict_rejects_unknown_fields():
    with pytest.raises(ValueError) as exc:
        ModelSpec.from_dict({"kind": "cnn", "hidden_layers": 3})
    assert "hidden_layers" in str(exc.value)


def test_spec_mask_channel_extends_input():
    spec = ModelSpec(kind="hybrid", mask_channel=True)
    assert spec.input_channels == 4
    assert ModelSpec().input_channels == 3


def test_spec_roundtrip_dict():
    spec = ModelSpec(**SMALL_HYBRID)
    assert ModelSpec.from_dict(spec.to_dict()) == spec


# ----------------------------------------------------------------- CNN build

def test_cnn_table_param_counts():
    model = build_cnn(ModelSpec())
    per_layer = [count for _, _, count in model.rows()]
    assert per_layer == [448, 0, 4640, 0, 18496, 0, 0, 16777472, 1028]
    assert model.param_count() == 16_802_084


def test_cnn_table_output_shapes():
    model = build_cnn(ModelSpec())
    shapes = [shape for _, shape, _ in model.rows()]
    assert shapes == [
        (256, 256, 16), (128, 128, 16),
        (128, 128, 32), (64, 64, 32),
        (64, 64, 64), (32, 32, 64),
        (65536,), (256,), (4,),
    ]


def test_cnn_rejects_indivisible_input():
    with pytest.raises(ValueError):
        build_cnn(ModelSpec(kind="cnn", height=100, width=100))


def test_cnn_kind_checked():
    with pytest.raises(ValueError):
        build_cnn(ModelSpec(kind="vit"))


def test_cnn_forward_probabilities():
    model = build_cnn(ModelSpec(**SMALL_CNN), seed=1)
    x = np.random.default_rng(0).random((3, 32, 32, 3), dtype=np.float32)
    p = model.forward(x)
    assert p.shape == (3, 4)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p > 0)


def test_cnn_checks_input_shape():
    model = build_cnn(ModelSpec(**SMALL_CNN), seed=1)
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 16, 16, 3), dtype=np.float32))


def test_cnn_mask_channel_param_count():
    spec = ModelSpec(kind="cnn", mask_channel=True)
    model = build_cnn(spec)
    first = model.rows()[0]
    assert first[2] == 3 * 3 * 4 * 16 + 16 == 592


def test_build_determinism():
    a = build_cnn(ModelSpec(**SMALL_CNN), seed=7)
    b = build_cnn(ModelSpec(**SMALL_CNN), seed=7)
    for (na, pa), (nb, pb) in zip(a.params(), b.params()):
        assert na == nb
        assert np.array_equal(pa, pb)


# ----------------------------------------------------------------- ViT build

def _vit_expected_params(spec: ModelSpec) -> int:
    d = spec.embed_dim
    n_patches = (spec.height // spec.patch_size) * (spec.width // spec.patch_size)
    pe = (spec.patch_size ** 2 * spec.input_channels) * d + d + (n_patches + 1) * d + d
    block = 2 * d + 4 * (d * d + d) + 2 * d + (d * spec.mlp_hidden + spec.mlp_hidden
                                               + spec.mlp_hidden * d + d)
    head = d * spec.num_classes + spec.num_classes
    return pe + spec.depth * block + 2 * d + head


def test_vit_token_count():
    model = build_vit(ModelSpec(kind="vit", height=64, width=64))
    assert model._tokens == 17
    big = build_vit(ModelSpec(kind="vit"))
    assert big._tokens == 257


def test_vit_param_count_matches_closed_form():
    spec = ModelSpec(**SMALL_VIT)
    model = build_vit(spec)
    assert model.param_count() == _vit_expected_params(spec)
    # independent scalar count: walk every stored array
    assert sum(p.size for _, p in model.params()) == _vit_expected_params(spec)


def test_vit_zero_depth_is_embed_plus_head():
    spec = ModelSpec(**{**SMALL_VIT, "depth": 0})
    model = build_vit(spec)
    names = [n for n, _ in model._named]
    assert names == ["patch_embedding_1", "layer_norm_1", "dense_1"]
    x = np.random.default_rng(1).random((2, 32, 32, 3), dtype=np.float32)
    p = model.forward(x)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_vit_rejects_indivisible_patches():
    with pytest.raises(ValueError):
        build_vit(ModelSpec(kind="vit", height=60, width=60, patch_size=16))


def test_vit_forward_shape():
    model = build_vit(ModelSpec(**SMALL_VIT), seed=3)
    x = np.random.default_rng(2).random((2, 32, 32, 3), dtype=np.float32)
    assert model.forward(x).shape == (2, 4)


def test_vit_permutation_invariance_of_cls():
    # with positional embeddings zeroed, permuting patch blocks of the image
    # only permutes tokens, and attention pooling of CLS is order-blind
    spec = ModelSpec(**SMALL_VIT)
    model = build_vit(spec, seed=5)
    pe = model.layer("patch_embedding_1")
    pe.pos[:] = 0.0
    rng = np.random.default_rng(6)
    x = rng.random((1, 32, 32, 3), dtype=np.float32)

    p = spec.patch_size
    gh = spec.height // p
    blocks = x.reshape(1, gh, p, gh, p, 3).transpose(0, 1, 3, 2, 4, 5)
    blocks = blocks.reshape(1, gh * gh, p, p, 3)
    perm = rng.permutation(gh * gh)
    shuffled = blocks[:, perm].reshape(1, gh, gh, p, p, 3)
    x_perm = shuffled.transpose(0, 1, 3, 2, 4, 5).reshape(1, 32, 32, 3)

    out = model.forward(x)
    out_perm = model.forward(x_perm)
    assert np.allclose(out, out_perm, atol=1e-5)


# -------------------------------------------------------------- hybrid build

def test_hybrid_fusion_width():
    spec = ModelSpec(**SMALL_HYBRID)
    model = build_hybrid(spec)
    assert model._fusion.in_features == spec.dense_units + spec.embed_dim


def test_hybrid_mask_param_counts():
    spec = ModelSpec(**{**SMALL_HYBRID, "mask_channel": True})
    model = build_hybrid(spec)
    assert model.rows()[0][2] == 3 * 3 * 4 * 16 + 16 == 592


def test_hybrid_forward_and_probability_rows():
    spec = ModelSpec(**SMALL_HYBRID)
    model = build_hybrid(spec, seed=2)
    x = np.random.default_rng(3).random((2, 32, 32, 3), dtype=np.float32)
    p = model.forward(x)
    assert p.shape == (2, 4)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_hybrid_zeroed_mask_weights_match_maskless():
    """With the 4th-channel weights zeroed, an all-zero mask changes nothing."""
    base = build_hybrid(ModelSpec(**SMALL_HYBRID), seed=9)
    masked = build_hybrid(ModelSpec(**{**SMALL_HYBRID, "mask_channel": True}), seed=9)

    base_params = dict(base.params())
    for name, p in masked.params():
        if name == "conv2d_1/kernel":
            p[:, :, :3, :] = base_params[name]
            p[:, :, 3, :] = 0.0
        elif name == "patch_embedding_1/proj":
            ps = masked.spec.patch_size
            view = p.reshape(ps, ps, 4, masked.spec.embed_dim)
            view[:, :, :3, :] = base_params[name].reshape(ps, ps, 3, -1)
            view[:, :, 3, :] = 0.0
        else:
            np.copyto(p, base_params[name])

    x = np.random.default_rng(10).random((2, 32, 32, 3), dtype=np.float32)
    x4 = np.concatenate([x, np.zeros((2, 32, 32, 1), dtype=np.float32)], axis=3)
    assert np.allclose(base.forward(x), masked.forward(x4), atol=1e-6)


def test_build_model_dispatch():
    assert isinstance(build_model(ModelSpec(**SMALL_CNN)), M.CnnModel)
    assert isinstance(build_model(ModelSpec(**SMALL_VIT)), M.VitModel)
    assert isinstance(build_model(ModelSpec(**SMALL_HYBRID)), M.HybridModel)


# ------------------------------------------------------------------- summary

def test_summary_contains_table_columns():
    text = summarize(build_cnn(ModelSpec()))
    assert "Layer (type)" in text and "Output Shape" in text and "Param #" in text


def test_summary_cnn_matches_printed_table():
    text = summarize(build_cnn(ModelSpec()))
    for cell in ["(None, 256,256,16)", "(None, 128,128,16)", "(None, 128,128,32)",
                 "(None, 64,64,32)", "(None, 64,64,64)", "(None, 32,32,64)",
                 "(None, 65536)", "(None, 256)", "(None, 4)"]:
        assert cell in text, cell
    for count in ["448", "4,640", "18,496", "16,777,472", "1,028"]:
        assert count in text, count
    assert "Total params: 16,802,084" in text


def test_summary_rows_match_recount():
    model = build_vit(ModelSpec(**SMALL_VIT))
    by_name = dict(model._named)
    for name, _, count in model.rows():
        layer_key = name.split(" ")[0]
        if layer_key in by_name:
            assert count == by_name[layer_key].param_count()
        else:
            assert count == 0  # SelectToken / Concatenate style rows


def test_summary_empty_model():
    text = summarize(M.Model(ModelSpec()))
    assert "Layer (type)" in text
    assert "Total params: 0" in text


# -------------------------------------------------------------- serialization

def test_save_load_roundtrip_outputs(tmp_path):
    model = build_hybrid(ModelSpec(**SMALL_HYBRID), seed=4)
    x = np.random.default_rng(5).random((2, 32, 32, 3), dtype=np.float32)
    before = model.forward(x)
    path = tmp_path / "m.ppdm"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.spec == model.spec
    after = loaded.forward(x)
    assert np.array_equal(before, after)  # bit-identical


def test_save_load_save_byte_identical(tmp_path):
    model = build_vit(ModelSpec(**SMALL_VIT), seed=1)
    p1 = tmp_path / "a.ppdm"
    p2 = tmp_path / "b.ppdm"
    save_model(model, p1)
    save_model(load_model(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_bad_magic(tmp_path):
    path = tmp_path / "m.ppdm"
    save_model(build_cnn(ModelSpec(**SMALL_CNN)), path)
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        load_model(path)


def test_load_version_mismatch(tmp_path):
    path = tmp_path / "m.ppdm"
    save_model(build_cnn(ModelSpec(**SMALL_CNN)), path)
    data = bytearray(path.read_bytes())
    data[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatchError):
        load_model(path)


def test_load_truncated_tensor_data(tmp_path):
    path = tmp_path / "m.ppdm"
    save_model(build_cnn(ModelSpec(**SMALL_CNN)), path)
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(TruncatedDataError):
        load_model(path)


def test_load_param_count_mismatch(tmp_path):
    import json as json_mod
    import struct
    path = tmp_path / "m.ppdm"
    save_model(build_cnn(ModelSpec(**SMALL_CNN)), path)
    data = path.read_bytes()
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json_mod.loads(data[16:16 + hlen].decode("utf-8"))
    header["tensors"] = header["tensors"][:-1]  # drop one tensor from directory
    blob = json_mod.dumps(header, separators=(",", ":")).encode("utf-8")
    rebuilt = data[:8] + struct.pack("<Q", len(blob)) + blob + data[16 + hlen:]
    path.write_bytes(rebuilt)
    with pytest.raises(ParamCountMismatchError):
        load_model(path)


def test_full_cnn_load_reports_paper_total(tmp_path):
    path = tmp_path / "full.ppdm"
    save_model(build_cnn(ModelSpec()), path)
    assert load_model(path).param_count() == 16_802_084


def test_all_kinds_param_count_equals_scalar_walk():
    for kw in (SMALL_CNN, SMALL_VIT, SMALL_HYBRID):
        model = build_model(ModelSpec(**kw))
        assert model.param_count() == sum(p.size for _, p in model.params())
        assert model.param_count() == sum(c for _, _, c in model.rows())
