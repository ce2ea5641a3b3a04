from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest

from at3d import report as R
from at3d.errors import CheckpointError, ConfigError, ContainerError, NumericError, ShapeError
from at3d.models import (
    Backbone,
    ModelConfig,
    Variant,
    build_model,
    checkpoint_header,
    checkpoint_load,
    checkpoint_meta,
    checkpoint_save,
    forward,
    inserted_param_count,
    millions_2dp,
    param_audit,
)
from at3d.nn import cross_entropy
from at3d.tensor import Tape, Tensor, backward

# Parameter totals of the torchvision 18-layer video ResNets with the
# classifier resized to 101 outputs (400-class totals minus 513 * 299).
BACKBONE_TOTALS = {"r3d": 33_218_085, "mc3": 11_542_053, "r2plus1d": 31_351_938}


def tiny(backbone="r3d", variant="backbone", **kw):
    kw = {"classes": 4, "width_scale": Fraction(1, 8), "frames": 8, "side": 32, **kw}
    return ModelConfig(backbone, variant, **kw)


def reference_rows(family):
    _, rows = R.read_csv(R.reference_path(f"{family}_variants"))
    return {r["variant"]: r for r in rows}


def audit(family, variant, **kw):
    return param_audit(build_model(ModelConfig(family, variant, **kw), init=False), kw.pop("rounding", "half-up"))


@pytest.mark.parametrize("family", sorted(BACKBONE_TOTALS))
def test_backbone_totals_match_torchvision(family):
    assert param_audit(build_model(ModelConfig(family), init=False)).total == BACKBONE_TOTALS[family]


@pytest.mark.parametrize("family", sorted(BACKBONE_TOTALS))
def test_backbone_totals_against_torchvision_if_installed(family):
    tv = pytest.importorskip("torchvision.models.video")
    net = {"r3d": tv.r3d_18, "mc3": tv.mc3_18, "r2plus1d": tv.r2plus1d_18}[family](num_classes=101)
    assert sum(p.numel() for p in net.parameters()) == BACKBONE_TOTALS[family]


@pytest.mark.parametrize("family", R.FAMILIES)
def test_family_params_within_table_precision(family):
    refs = reference_rows(family)
    assert len(refs) == len(Variant)
    for v in Variant:
        cfg = ModelConfig(family, v)
        got = param_audit(build_model(cfg, init=False)).millions
        row = refs[cfg.name]
        known = dict(kv.split("=") for kv in row["known_discrepancy"].split(";") if kv)
        expected = Decimal(known.get("params_millions", row["params_millions"]))
        assert abs(got - expected) <= Decimal("0.01"), cfg.name


@pytest.mark.parametrize("family", R.FAMILIES)
def test_family_params_exact_with_layer_norm_and_truncation(family):
    refs = reference_rows(family)
    for v in Variant:
        cfg = ModelConfig(family, v, mha_layer_norm=True)
        got = param_audit(build_model(cfg, init=False), "truncate").millions
        row = refs[cfg.name]
        known = dict(kv.split("=") for kv in row["known_discrepancy"].split(";") if kv)
        expected = known.get("params_millions", row["params_millions"])
        assert got == Decimal(expected), cfg.name


@pytest.mark.parametrize("family", R.FAMILIES)
@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("ln", [False, True])
def test_delta_additivity(family, variant, ln):
    base = param_audit(build_model(ModelConfig(family, mha_layer_norm=ln), init=False)).total
    cfg = ModelConfig(family, variant, mha_layer_norm=ln)
    assert param_audit(build_model(cfg, init=False)).total - base == inserted_param_count(cfg)


def test_delta_examples():
    for fam in R.FAMILIES:
        assert inserted_param_count(ModelConfig(fam, "fc-spatial")) == 1_050_624
        assert inserted_param_count(ModelConfig(fam, "fc-temporal")) == 1_050_624
        assert inserted_param_count(ModelConfig(fam, "all-temporal")) - 1_050_624 == 345_856
    assert inserted_param_count(ModelConfig("mc3", "3-tcn")) == 1_050_624 + 196_864


def test_millions_rounding_modes():
    assert millions_2dp(11_545_000) == Decimal("11.55")
    assert millions_2dp(11_545_000, "truncate") == Decimal("11.54")
    assert millions_2dp(33_218_085) == Decimal("33.22")
    assert millions_2dp(33_218_085, "truncate") == Decimal("33.21")


def test_config_validation_and_roundtrip():
    cfg = tiny("mc3", "3-cbam", cbam_kernel=(1, 7, 7), mha_layer_norm=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.widths == (8, 16, 32, 64)
    assert cfg.name == "3-CBAM" and ModelConfig("r2plus1d").name == "M-R(2+1)D"
    with pytest.raises(ConfigError):
        ModelConfig("r3d", width_scale=Fraction(1, 16))
    with pytest.raises(ConfigError):
        ModelConfig("r3d", classes=0)
    with pytest.raises(ValueError):
        ModelConfig("r4d")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"backbone": "r3d", "colour": "red"})


def test_stage_shapes_at_full_resolution():
    r3d = build_model(ModelConfig("r3d"), init=False).stage_shapes
    assert r3d["stem"] == (1, 64, 16, 112, 112)
    assert r3d["layer2"] == (1, 128, 8, 56, 56)
    assert r3d["layer4"] == (1, 512, 2, 14, 14)
    assert r3d["attn_final"] == r3d["layer4"]
    mc3 = build_model(ModelConfig("mc3"), init=False).stage_shapes
    assert mc3["layer4"] == (1, 512, 16, 14, 14)
    r21 = build_model(ModelConfig("r2plus1d"), init=False).stage_shapes
    assert r21["layer4"] == r3d["layer4"]


@pytest.mark.parametrize("backbone", list(Backbone))
@pytest.mark.parametrize("variant", list(Variant))
def test_tiny_forward_all_variants(backbone, variant, gen):
    model = build_model(tiny(backbone, variant), seed=1)
    x = gen.normal(size=(2, 3, 8, 32, 32)).astype(np.float32)
    out = forward(model, x, "eval")
    assert out.shape == (2, 4) and np.isfinite(out.data).all()
    again = forward(model, x, "eval")
    np.testing.assert_array_equal(out.data, again.data)


def test_same_seed_same_weights_and_different_seed_differs():
    a = build_model(tiny(), seed=3).state_dict()
    b = build_model(tiny(), seed=3).state_dict()
    c = build_model(tiny(), seed=4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["fc.weight"], c["fc.weight"])


def test_every_parameter_receives_gradient(gen):
    # 16 frames keep two tokens for the final temporal attention
    model = build_model(tiny("r2plus1d", "all-together", frames=16), seed=2)
    model.train()
    x = Tensor(gen.normal(size=(2, 3, 16, 32, 32)).astype(np.float32))
    with Tape():
        backward(cross_entropy(model(x), [0, 3]))
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    zero = [n for n, p in model.named_parameters() if p.grad is not None and not np.any(p.grad)]
    assert missing == []
    # a key bias shifts every score of a query equally, so softmax cancels it
    assert all(n.endswith(".k.bias") for n in zero)


def test_bad_input_shape_and_mode():
    model = build_model(tiny(), seed=0)
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 3, 8, 16, 16), np.float32)))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((3, 8, 32, 32), np.float32)))
    with pytest.raises(ValueError):
        forward(model, np.zeros((1, 3, 8, 32, 32)), "predict")


def test_non_finite_activation_names_stage():
    model = build_model(tiny(), seed=0)
    model.state_dict()["layer3.0.conv1.0.weight"][...] = np.nan
    with pytest.raises(NumericError) as e:
        forward(model, np.zeros((1, 3, 8, 32, 32)))
    assert e.value.stage == "layer3"


def test_checkpoint_roundtrip(tmp_path, gen):
    cfg = tiny("mc3", "3-both")
    model = build_model(cfg, seed=5)
    model.state_dict()["layer1.0.conv1.1.running_mean"][...] = 0.25
    path = tmp_path / "m.at3d"
    checkpoint_save(model, path, {"best_epoch": 7})
    back = checkpoint_load(path)
    assert back.cfg == cfg
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[k], v)
    x = gen.normal(size=(1, 3, 8, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward(model, x).data, forward(back, x).data)
    assert checkpoint_header(path)["variant"] == "3-both"
    assert checkpoint_meta(path) == {"best_epoch": "7"}
    assert [p.name for p in tmp_path.iterdir()] == ["m.at3d"]


def test_checkpoint_topology_mismatch_names_head(tmp_path):
    path = tmp_path / "m.at3d"
    checkpoint_save(build_model(tiny(), seed=0), path)
    with pytest.raises(CheckpointError) as e:
        checkpoint_load(path, tiny(classes=5))
    assert e.value.offending == ["fc.bias", "fc.weight"]


def test_checkpoint_truncated_or_padded(tmp_path):
    path = tmp_path / "m.at3d"
    checkpoint_save(build_model(tiny(), seed=0), path)
    blob = path.read_bytes()
    for bad in (blob[: len(blob) // 2], blob[:20], blob + b"x", b"junk" + blob):
        path.write_bytes(bad)
        with pytest.raises(ContainerError):
            checkpoint_load(path)
