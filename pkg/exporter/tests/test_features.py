"""Feature export: shapes, determinism, manifest checksums, weight bundles."""
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from afe import dataset, tensorio
from afe.encoder import Encoder, EncoderSpec

from afe_export import backbones, cli, exporting


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    pin = dataset.PinboardConfig(grid=2, image_size=64, n_train=2, n_val=1,
                                 n_test_normal=1, n_test_logical=1, n_test_structural=1)
    dataset.generate_pinboard(root, pin, 5)
    return root / "pinboard"


@pytest.fixture(scope="module")
def export(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("feats")
    manifest_path = exporting.export_features(tiny_dataset, "pyramid", (1, 2, 3, 4, 5), out)
    return out, json.loads(manifest_path.read_text(encoding="utf-8"))


def test_one_tensor_per_image_and_level(export, tiny_dataset):
    out, manifest = export
    split = dataset.read_dataset(tiny_dataset)
    names = [s.name for s in split.train + split.validation + split.test]
    assert len(manifest["files"]) == len(names) * 5
    for name in names:
        for k in range(1, 6):
            assert f"{exporting.flat_name(name)}_k{k}.npft" in manifest["files"]


def test_exported_tensors_follow_the_halving_chain(export):
    out, manifest = export
    size = manifest["preprocess_size"]
    for rel in manifest["files"]:
        k = int(rel.rsplit("_k", 1)[1].split(".")[0])
        t = tensorio.read_tensor(out / rel)
        assert t.shape == (manifest["channels"][str(k)], size >> k, size >> k), rel
        assert np.isfinite(t).all(), rel


def test_manifest_checksums_match_files_on_disk(export):
    out, manifest = export
    for rel, digest in manifest["files"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest, rel


def test_repeated_export_is_byte_identical(tiny_dataset, export, tmp_path):
    out, manifest = export
    again = exporting.export_features(tiny_dataset, "pyramid", (1, 2, 3, 4, 5), tmp_path)
    assert json.loads(again.read_text())["files"] == manifest["files"]
    sample = next(iter(manifest["files"]))
    assert (tmp_path / sample).read_bytes() == (out / sample).read_bytes()


def test_black_image_yields_finite_maps_of_documented_shapes():
    enc = backbones.resolve_backbone("pyramid")
    feats = enc.extract_features(np.zeros((256, 256, 1), dtype=np.float32))
    for k, fmap in feats.items():
        assert fmap.shape == (enc.spec.level_channels[k - 1], 256 >> k, 256 >> k)
        assert np.isfinite(fmap).all()


def test_level_subset_exports_only_those_levels(tiny_dataset, tmp_path):
    manifest_path = exporting.export_features(tiny_dataset, "pyramid", ("2", "3"), tmp_path)
    manifest = json.loads(manifest_path.read_text())
    assert manifest["levels"] == [2, 3]
    assert all(rel.rsplit("_k", 1)[1][0] in "23" for rel in manifest["files"])


@pytest.mark.parametrize("levels", [(), (0,), (6,)])
def test_bad_level_selection_is_rejected(tiny_dataset, tmp_path, levels):
    with pytest.raises(ValueError):
        exporting.export_features(tiny_dataset, "pyramid", levels, tmp_path)


def test_missing_bundle_raises_setup_instructions(tmp_path):
    with pytest.raises(backbones.SetupError) as err:
        backbones.resolve_backbone("resnet101", tmp_path)
    message = str(err.value)
    assert "download" in message
    assert str(tmp_path / "resnet101") in message
    assert "encoder_stage" in message


def test_unknown_backbone_lists_known_names():
    with pytest.raises(ValueError, match="pyramid"):
        backbones.resolve_backbone("vgg16")


def test_installed_bundle_is_loaded_and_used(tiny_dataset, tmp_path):
    # a bundle is exactly the engine's saved encoder directory
    bundle = tmp_path / "weights" / "resnet101"
    enc = Encoder.build(EncoderSpec(seed=9))
    enc.save(bundle)
    spec = enc.spec
    (bundle / "encoder.meta").write_text(
        f"seed = {spec.seed}\nin_channels = {spec.in_channels}\n"
        f"level_channels = {','.join(str(c) for c in spec.level_channels)}\n",
        encoding="utf-8",
    )
    loaded = backbones.resolve_backbone("resnet101", tmp_path / "weights")
    assert loaded.weights_hash() == enc.weights_hash()
    manifest_path = exporting.export_features(
        tiny_dataset, "resnet101", (4,), tmp_path / "out", tmp_path / "weights"
    )
    assert json.loads(manifest_path.read_text())["backbone"] == "resnet101"


def test_cli_pinned_invocation_and_setup_exit(tiny_dataset, tmp_path, capsys):
    code = cli.main_features([
        "--data", str(tiny_dataset), "--backbone", "pyramid",
        "--levels", "1,2,3,4,5", "--out", str(tmp_path / "o"),
    ])
    assert code == 0
    assert (tmp_path / "o" / "manifest.json").is_file()
    code = cli.main_features([
        "--data", str(tiny_dataset), "--backbone", "resnext101",
        "--levels", "1", "--out", str(tmp_path / "o2"), "--weights", str(tmp_path / "w"),
    ])
    assert code == 1
    assert "setup error" in capsys.readouterr().err
