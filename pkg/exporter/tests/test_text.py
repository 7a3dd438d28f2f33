"""Caption embeddings: normalization, determinism, bundles, CLI errors."""
import numpy as np
import pytest

from afe import tensorio

from afe_export import backbones, cli, exporting


def test_caption_embeds_to_fixed_length_unit_vector(tmp_path):
    vec = exporting.export_text_embedding("breakfast box", tmp_path / "e.npft")
    assert vec.shape == (backbones.TEXT_DIM,)
    assert vec.dtype == np.float32
    assert float(np.linalg.norm(vec)) == pytest.approx(1.0, abs=1e-6)
    assert tensorio.read_tensor(tmp_path / "e.npft").tobytes() == vec.tobytes()


def test_identical_captions_embed_identically(tmp_path):
    a = exporting.export_text_embedding("screw bag", tmp_path / "a.npft")
    b = exporting.export_text_embedding("screw bag", tmp_path / "b.npft")
    assert a.tobytes() == b.tobytes()
    assert (tmp_path / "a.npft").read_bytes() == (tmp_path / "b.npft").read_bytes()


def test_distinct_captions_are_not_collinear():
    a = backbones.embed_caption("breakfast box")
    b = backbones.embed_caption("juice bottle")
    assert float(np.dot(a, b)) < 0.999


@pytest.mark.parametrize("caption", ["", "   "])
def test_empty_caption_is_rejected(caption, tmp_path, capsys):
    with pytest.raises(ValueError, match="non-empty"):
        backbones.embed_caption(caption)
    code = cli.main_text(["--caption", caption, "--out", str(tmp_path / "e.npft")])
    assert code == 1
    assert "non-empty" in capsys.readouterr().err


def test_missing_text_bundle_raises_setup_instructions(tmp_path):
    with pytest.raises(backbones.SetupError, match="download"):
        backbones.embed_caption("pushpins", "clip-text", tmp_path)


def test_installed_text_bundle_projects_byte_histograms(tmp_path):
    bundle = tmp_path / "clip-text"
    bundle.mkdir(parents=True)
    proj = np.random.default_rng(3).standard_normal((16, 256)).astype(np.float32)
    tensorio.write_tensor_atomic(bundle / "projection.npft", proj)
    vec = backbones.embed_caption("pushpins", "clip-text", tmp_path)
    assert vec.shape == (16,)
    assert float(np.linalg.norm(vec)) == pytest.approx(1.0, abs=1e-6)
    # anagrams share byte counts, so the projection cannot tell them apart
    same = backbones.embed_caption("shipspun", "clip-text", tmp_path)
    assert same.tobytes() == vec.tobytes()


def test_unknown_text_encoder_lists_known_names():
    with pytest.raises(ValueError, match="hashed"):
        backbones.embed_caption("cable", "bert")


def test_cli_writes_parseable_vector(tmp_path):
    out = tmp_path / "cap.npft"
    assert cli.main_text(["--caption", "breakfast box", "--out", str(out)]) == 0
    vec = tensorio.read_tensor(out)
    assert vec.shape == (backbones.TEXT_DIM,)
