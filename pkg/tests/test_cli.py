import csv
import json
from pathlib import Path

import numpy as np
import pytest

from xunit import cli, data, models
from xunit.autodiff import PRIMITIVES

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus(tmp_path):
    """Three small synthetic PGMs and a manifest listing them."""
    paths = []
    for i, im in enumerate(data.synthetic_images(3, size=24, seed=11)):
        path = tmp_path / f"img{i}.pgm"
        data.save_image(im, path)
        paths.append(path.name)
    (tmp_path / "train.txt").write_text("\n".join(paths) + "\n")
    (tmp_path / "test.txt").write_text(paths[0] + "\n")
    return tmp_path


TINY = ["--arch", "xnet", "--depth", "2", "--width", "3", "--xkernel", "3",
        "--patch", "12", "--patches", "4", "--batch", "2", "--log-interval", "1"]


@pytest.fixture
def model(corpus, capsys):
    out = corpus / "m.xumd"
    code, _, _ = run(capsys, "train", *TINY, "--steps", "2", "--data", corpus / "train.txt", "--out", out)
    assert code == 0
    return out


@pytest.mark.parametrize("arch,total", [("xdncnn", 302720), ("srcnn", 57281), ("xsrcnnf", 32673),
                                        ("xsrcnnc", 44167), ("dncnn", 556097)])
def test_count_params(arch, total, capsys):
    code, out, err = run(capsys, "count-params", "--arch", arch)
    assert code == 0
    assert out.strip().splitlines()[-1] == str(total)
    assert '"arch"' in err  # resolved config echoed to the log


def test_count_params_json_golden(capsys):
    code, out, _ = run(capsys, "count-params", "--arch", "xsrcnnf", "--json")
    assert code == 0
    assert json.loads(out) == json.loads((GOLDEN / "count_params_xsrcnnf.json").read_text())


def test_usage_errors(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--arch", "xnet", "--out", str(tmp_path / "m.xumd")])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["sr", "--model", "m", "--factor", "5", "--in", "a", "--out", "b"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["count-params", "--bogus"])
    assert exc.value.code == 2
    code, _, _ = run(capsys, "count-params", "--arch", "xnet", "--depth", "1")
    assert code == 2
    code, _, _ = run(capsys, "count-params", "--arch", "xnet", "--stages", "BN+RL")
    assert code == 2


def test_train_writes_model_and_log(model):
    spec, params = models.load_model(model)
    assert spec.name == "xnet" and models.count_params(spec) == params.num_trainable()
    rows = list(csv.reader(open(model.with_suffix(".log.csv"))))
    assert rows[0] == ["step", "lr", "loss", "psnr"] and len(rows) == 3


def test_train_zero_steps_keeps_initialization(corpus, capsys):
    out = corpus / "init.xumd"
    code, _, _ = run(capsys, "train", *TINY, "--steps", "0", "--seed", "4",
                     "--data", corpus / "train.txt", "--out", out)
    assert code == 0
    spec, params = models.load_model(out)
    init = models.init_params(spec, seed=4)
    assert all(np.array_equal(a.value, b.value) for a, b in zip(params, init))


def test_train_data_error_exits_1(corpus, capsys):
    (corpus / "bad.txt").write_text("missing.pgm\n")
    code, _, err = run(capsys, "train", *TINY, "--steps", "1", "--data", corpus / "bad.txt",
                       "--out", corpus / "x.xumd")
    assert code == 1 and "missing.pgm" in err


def test_train_is_deterministic(corpus, capsys):
    outs = []
    for name in ("a", "b"):
        out = corpus / f"{name}.xumd"
        assert run(capsys, "train", *TINY, "--steps", "3", "--data", corpus / "train.txt",
                   "--eval", corpus / "test.txt", "--out", out)[0] == 0
        outs.append((out.read_bytes(), out.with_suffix(".log.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_denoise_and_psnr(model, corpus, capsys):
    out = corpus / "den.pgm"
    code, _, _ = run(capsys, "denoise", "--model", model, "--in", corpus / "img0.pgm", "--out", out)
    assert code == 0 and data.load_image(out).shape == (1, 24, 24)
    code, text, _ = run(capsys, "psnr", corpus / "img0.pgm", corpus / "img0.pgm")
    assert code == 0 and text.strip() == "inf"
    code, text, _ = run(capsys, "psnr", corpus / "img0.pgm", out)
    assert code == 0 and float(text) > 10


def test_denoise_channel_mismatch(corpus, capsys):
    spec = models.build_xnet(2, 2, xkernel=1, in_ch=3)
    models.save_model(spec, models.init_params(spec), corpus / "rgb.xumd")
    code, _, err = run(capsys, "denoise", "--model", corpus / "rgb.xumd", "--in", corpus / "img0.pgm",
                       "--out", corpus / "o.pgm")
    assert code == 1 and "channel" in err


def test_sr_shape(corpus, capsys):
    spec = models.build_srcnn()
    models.save_model(spec, models.init_params(spec), corpus / "sr.xumd")
    data.save_image(np.random.default_rng(0).uniform(size=(1, 100, 100)), corpus / "small.pgm")
    code, _, _ = run(capsys, "sr", "--model", corpus / "sr.xumd", "--factor", "3",
                     "--in", corpus / "small.pgm", "--out", corpus / "big.pgm")
    assert code == 0
    assert data.load_image(corpus / "big.pgm").shape == (1, 300, 300)


def test_grad_check_passes(capsys):
    code, out, _ = run(capsys, "grad-check")
    assert code == 0 and out.strip().endswith("PASS")
    for op in PRIMITIVES:
        assert op in out


def test_grad_check_flags_corrupted_backward(capsys, monkeypatch):
    prim = PRIMITIVES["relu"]
    monkeypatch.setitem(PRIMITIVES, "relu", type(prim)(
        "relu", prim.forward, lambda g, inputs, out, saved, needs: (g,)))
    code, out, _ = run(capsys, "grad-check")
    assert code == 1 and "FAIL" in out


def test_grad_check_non_finite_input(tmp_path, capsys):
    probe = np.zeros((1, 1, 6, 6))
    probe[0, 0, 2, 2] = np.nan
    np.save(tmp_path / "p.npy", probe)
    code, _, err = run(capsys, "grad-check", "--input", tmp_path / "p.npy")
    assert code == 1 and "NaN" in err


def test_sweep(corpus, capsys):
    out = corpus / "sweep.csv"
    args = ["sweep", "--depths", "2,3", "--xkernels", "3", "--width", "3", "--patch", "12",
            "--patches", "4", "--batch", "2", "--steps", "1", "--data", corpus / "train.txt",
            "--test", corpus / "test.txt", "--out", out]
    assert run(capsys, *args)[0] == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 4
    for r in rows:
        arch = ["count-params", "--arch", r["family"], "--depth", r["depth"], "--width", "3",
                "--xkernel", r["xkernel"] if r["family"] == "xnet" else "9"]
        assert run(capsys, *arch)[1].strip().splitlines()[-1] == r["params"]
    first = out.read_bytes()
    assert run(capsys, *args)[0] == 0
    assert out.read_bytes() == first
    assert run(capsys, "sweep", "--family", "resnet", *args[1:])[0] == 2


@pytest.mark.parametrize("arch", ["convnet", "xnet"])
def test_inspect(arch, corpus, capsys):
    spec = models.build(arch, depth=3, width=4, xkernel=3)
    path = corpus / f"{arch}.xumd"
    models.save_model(spec, models.init_params(spec, seed=2), path)
    outdir = corpus / f"maps-{arch}"
    code, _, _ = run(capsys, "inspect", "--model", path, "--in", corpus / "img1.pgm", "--layer", "2",
                     "--out-dir", outdir, "--sigma", "25")
    assert code == 0
    for name in "zgx":
        grid = data.load_image(outdir / f"layer2_{name}.pgm")
        assert grid.shape == (1, 2 * 24 + 1, 2 * 24 + 1)
    raw = np.load(outdir / "layer2_raw.npz")
    assert np.array_equal(raw["x"], raw["z"] * raw["g"])
    if arch == "convnet":
        assert set(np.unique(raw["g"])) <= {0.0, 1.0}
    else:
        assert raw["g"].min() > 0 and raw["g"].max() <= 1
    assert run(capsys, "inspect", "--model", path, "--in", corpus / "img1.pgm", "--layer", "9",
               "--out-dir", outdir)[0] == 2


def test_thread_cap(monkeypatch, capsys):
    monkeypatch.setenv("XUNIT_THREADS", "1")
    assert run(capsys, "count-params", "--arch", "srcnn")[0] == 0
    monkeypatch.setenv("XUNIT_THREADS", "many")
    assert run(capsys, "count-params", "--arch", "srcnn")[0] == 2
