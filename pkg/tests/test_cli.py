import numpy as np
import pytest
from PIL import Image

from tcsaformer.cli import main
from tcsaformer.config import config_to_text, toy_config
from tcsaformer.flops import parse_kv
from tcsaformer.imageio import read_image, read_mask


@pytest.fixture
def toy_cfg(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(config_to_text(toy_config()))
    return path


def write_png(path, arr):
    Image.fromarray(arr).save(path)
    return path


@pytest.fixture
def rgb(tmp_path):
    arr = (np.random.default_rng(0).random((50, 70, 3)) * 255).astype(np.uint8)
    return write_png(tmp_path / "in.png", arr)


def test_infer_writes_mask_at_configured_resolution(tmp_path):
    arr = (np.random.default_rng(0).random((224, 224, 3)) * 255).astype(np.uint8)
    src = write_png(tmp_path / "img.png", arr)
    out = tmp_path / "mask.pgm"
    assert main(["infer", str(src), "--out", str(out)]) == 0
    mask = read_mask(out)
    assert mask.shape == (224, 224) and mask.max() < 9
    assert out.read_bytes().startswith(b"P5")


def test_infer_probability_maps(tmp_path, rgb, toy_cfg):
    out = tmp_path / "mask.pgm"
    assert main(["infer", str(rgb), "--config", str(toy_cfg), "--out", str(out), "--probs"]) == 0
    probs = [read_mask(tmp_path / f"mask.class{c}.pgm") for c in range(3)]
    assert all(p.shape == (64, 64) for p in probs)
    assert np.abs(sum(probs) - 255).max() <= 2


def test_grayscale_replicated(tmp_path):
    gray = write_png(tmp_path / "g.png", np.arange(64, dtype=np.uint8).reshape(8, 8))
    img = read_image(gray)
    assert img.shape == (8, 8, 3)
    assert np.array_equal(img[..., 0], img[..., 2])


def test_grayscale_infer(tmp_path, toy_cfg):
    gray = write_png(tmp_path / "g.png", (np.random.default_rng(1).random((64, 64)) * 255).astype(np.uint8))
    assert main(["infer", str(gray), "--config", str(toy_cfg), "--out", str(tmp_path / "o.pgm")]) == 0


def test_corrupt_png_names_file(tmp_path, capsys):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    code = main(["infer", str(bad), "--out", str(tmp_path / "o.pgm")])
    assert code != 0
    assert "broken.png" in capsys.readouterr().err


def test_missing_input_fails_before_compute(tmp_path, capsys):
    assert main(["infer", str(tmp_path / "nope.png"), "--out", str(tmp_path / "o.pgm")]) == 1
    assert "nope.png" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, rgb, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("encoder.stage1.rho = 0.5\nencoder.stage1.bogus = 1\n")
    assert main(["infer", str(rgb), "--config", str(cfg), "--out", str(tmp_path / "o.pgm")]) == 1
    assert "encoder.stage1.bogus" in capsys.readouterr().err


def test_flops_kv(tmp_path, capsys):
    out = tmp_path / "flops.kv"
    assert main(["flops", "--out", str(out)]) == 0
    kv = parse_kv(out.read_text())
    assert 250_000 <= kv["reduction_ppm"] <= 450_000
    assert "reduction" in capsys.readouterr().out


def test_flops_mode_none_has_zero_reduction(tmp_path):
    out = tmp_path / "flops.kv"
    assert main(["flops", "--mode", "none", "--out", str(out)]) == 0
    assert parse_kv(out.read_text())["reduction_ppm"] == 0


def test_outputs_are_byte_identical(tmp_path, rgb, toy_cfg):
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}.pgm"
        assert main(["infer", str(rgb), "--config", str(toy_cfg), "--seed", "3", "--trace", "--out", str(out)]) == 0
        outs.append((out.read_bytes(), out.with_suffix(".trace").read_bytes()))
    assert outs[0] == outs[1]


def test_trace_toggle(tmp_path, rgb, toy_cfg):
    out = tmp_path / "plain.pgm"
    main(["infer", str(rgb), "--config", str(toy_cfg), "--out", str(out)])
    assert not out.with_suffix(".trace").exists()
    trace = tmp_path / "t.trace"
    assert main(["trace", str(rgb), "--config", str(toy_cfg), "--mode", "none", "--out", str(trace)]) == 0
    assert " r=0 " in trace.read_text()


def test_weights_round_trip_through_cli(tmp_path, rgb, toy_cfg):
    w = tmp_path / "w.tcsa"
    assert main(["overfit", "--config", str(toy_cfg), "--steps", "2", "--save-weights", str(w)]) == 0
    assert main(["infer", str(rgb), "--config", str(toy_cfg), "--weights", str(w),
                 "--out", str(tmp_path / "o.pgm")]) == 0


def test_metrics_command(tmp_path, capsys):
    gt = np.zeros((4, 4), np.uint8)
    gt[0:2, 0] = 1
    pred = np.zeros((4, 4), np.uint8)
    pred[1:3, 0] = 1
    code = main(["metrics", str(write_png(tmp_path / "p.png", pred)), str(write_png(tmp_path / "g.png", gt))])
    assert code == 0
    assert "class 1  dsc 0.500000" in capsys.readouterr().out


def test_selftest(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 6 and "[FAIL]" not in out


def test_non_finite_exit_code(tmp_path, rgb, toy_cfg, capsys):
    from tcsaformer.formats import dump_tensors, load_tensors
    from tcsaformer.network import init_model

    model = init_model(toy_config())
    tensors = {**model.params, **model.buffers}
    tensors["embed.conv.w"] = np.full_like(tensors["embed.conv.w"], np.inf)
    w = tmp_path / "bad.tcsa"
    w.write_bytes(dump_tensors(tensors))
    assert set(load_tensors(w.read_bytes())) == set(tensors)
    assert main(["infer", str(rgb), "--config", str(toy_cfg), "--weights", str(w),
                 "--out", str(tmp_path / "o.pgm")]) == 2
    assert "embed" in capsys.readouterr().err
