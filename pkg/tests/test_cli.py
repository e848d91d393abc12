import numpy as np
import pytest
from matplotlib.colors import rgb_to_hsv

from brushwork import cli, imageio, training
from brushwork.inspiration import hsv_remap, style_transfer
from brushwork.training import load_checkpoint

SMALL = ["--resolution", "8", "--widths", "4,4", "--batch-size", "2", "--iterations", "1", "--strokes", "2",
         "--max-steps", "4", "--step-length", "1.0", "--sample-every", "0"]


@pytest.fixture
def photos(tmp_path):
    d = tmp_path / "photos"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        imageio.write_png(d / f"p{i}.png", rng.uniform(size=(20, 24, 3)))
    return d


@pytest.fixture
def manifest(photos, tmp_path):
    out = tmp_path / "manifest.txt"
    assert cli.main(["ingest", "--images", str(photos), "--resolution", "8", "--patches-per-image", "4",
                     "--out", str(out)]) == 0
    return out


@pytest.fixture
def checkpoint(manifest, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--manifest", str(manifest), "--out", str(out), "--steps", "2"] + SMALL) == 0
    return out / "checkpoint.aiap"


@pytest.fixture
def subject(tmp_path):
    path = tmp_path / "subject.png"
    imageio.write_png(path, np.random.default_rng(1).uniform(size=(16, 12, 3)))
    return path


class TestIngest:
    def test_writes_manifest_and_stats(self, photos, tmp_path, capsys):
        out = tmp_path / "m.txt"
        assert cli.main(["ingest", "--images", str(photos), "--resolution", "8", "--patches-per-image", "2",
                         "--out", str(out)]) == 0
        assert out.is_file() and "6 patches" in capsys.readouterr().out
        assert (tmp_path / "m.txt.run.txt").is_file()

    def test_empty_directory(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert cli.main(["ingest", "--images", str(tmp_path / "empty")]) == cli.USAGE
        assert "error" in capsys.readouterr().err

    def test_same_seed_same_bytes(self, photos, tmp_path):
        for name in ("a", "b"):
            cli.main(["ingest", "--images", str(photos), "--resolution", "8", "--seed", "4",
                      "--out", str(tmp_path / name)])
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


class TestTrain:
    def test_zero_steps_writes_initialisation(self, manifest, tmp_path):
        out = tmp_path / "zero"
        assert cli.main(["train", "--manifest", str(manifest), "--out", str(out), "--steps", "0"] + SMALL) == 0
        ck = load_checkpoint(out / "checkpoint.aiap")
        init = training.init_checkpoint(ck.config)
        assert ck.step == 0 and ck.parameter_hash() == init.parameter_hash()

    def test_missing_manifest(self, tmp_path):
        assert cli.main(["train", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o")]) == cli.USAGE

    def test_resume_matches_uninterrupted(self, manifest, tmp_path):
        full, part = tmp_path / "full", tmp_path / "part"
        cli.main(["train", "--manifest", str(manifest), "--out", str(full), "--steps", "4"] + SMALL)
        cli.main(["train", "--manifest", str(manifest), "--out", str(part), "--steps", "2"] + SMALL)
        assert cli.main(["train", "--manifest", str(manifest), "--out", str(part), "--steps", "4",
                         "--resume", str(part / "checkpoint.aiap")]) == 0
        assert (full / "checkpoint.aiap").read_bytes() == (part / "checkpoint.aiap").read_bytes()
        assert (full / "history.tsv").read_text().splitlines()[-1] == (part / "history.tsv").read_text().splitlines()[-1]

    def test_non_finite_exit_code(self, manifest, tmp_path, monkeypatch):
        real = training.total_loss
        monkeypatch.setattr(training, "total_loss", lambda *a: (lambda l, t: (l * float("nan"), t))(*real(*a)))
        assert cli.main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "nan"), "--steps", "1"]
                        + SMALL) == cli.NUMERIC


class TestConfig:
    def test_precedence(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# sweep\nresolution = 32\nbeta = 0.5\nseed = 7\n")
        monkeypatch.setenv("AIAP_SEED", "3")
        args = cli.build_parser().parse_args(["train", "--manifest", "m", "--out", "o", "--config", str(cfg),
                                              "--beta", "0.25"])
        opts = cli.resolve("train", args)
        assert opts["resolution"] == 32 and opts["beta"] == 0.25 and opts["seed"] == 7
        assert opts["learning_rate"] == 1e-3

    def test_environment_seed(self, monkeypatch):
        monkeypatch.setenv("AIAP_SEED", "11")
        args = cli.build_parser().parse_args(["paint", "--subject", "s", "--checkpoint", "c", "--out", "o"])
        assert cli.resolve("paint", args)["seed"] == 11

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("colour = red\n")
        assert cli.main(["gradcheck", "--config", str(cfg)]) == cli.USAGE

    def test_round_trip(self, tmp_path):
        opts = dict(cli.DEFAULTS["train"], manifest="m", out="o", widths=(3, 5), beta=0.125)
        cli.write_config(tmp_path / "r.txt", "train", opts)
        args = cli.build_parser().parse_args(["train", "--config", str(tmp_path / "r.txt")])
        assert cli.resolve("train", args) == opts


class TestPaint:
    def test_background_only(self, checkpoint, subject, tmp_path):
        out = tmp_path / "bg.png"
        assert cli.main(["paint", "--subject", str(subject), "--checkpoint", str(checkpoint), "--iterations", "0",
                         "--out", str(out)]) == 0
        img = imageio.read_image(out)
        assert img.shape == (16, 12, 3) and np.all(img == img[0, 0])

    def test_byte_identical_and_rerun_from_config(self, checkpoint, subject, tmp_path):
        flags = ["paint", "--subject", str(subject), "--checkpoint", str(checkpoint), "--seed", "5",
                 "--patch-size", "4", "--emit-reconstruction"]
        cli.main(flags + ["--out", str(tmp_path / "a.png")])
        cli.main(flags + ["--out", str(tmp_path / "b.png")])
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        assert (tmp_path / "a-reconstruction.png").is_file()
        cli.main(["paint", "--config", str(tmp_path / "a.png.run.txt"), "--out", str(tmp_path / "c.png")])
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "c.png").read_bytes()

    def test_unreadable_subject(self, checkpoint, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"junk")
        assert cli.main(["paint", "--subject", str(bad), "--checkpoint", str(checkpoint),
                         "--out", str(tmp_path / "x.png")]) == cli.USAGE

    def test_missing_checkpoint(self, subject, tmp_path):
        assert cli.main(["paint", "--subject", str(subject), "--checkpoint", str(tmp_path / "none.aiap"),
                         "--out", str(tmp_path / "x.png")]) == cli.USAGE


class TestInspire:
    def test_zero_steps_imagination_is_subject(self, subject, tmp_path):
        out = tmp_path / "insp"
        assert cli.main(["inspire", "--subject", str(subject), "--inspiration", str(subject), "--steps", "0",
                         "--strokes", "20", "--out", str(out)]) == 0
        assert imageio.read_image(out / "imagination.png").tobytes() == imageio.read_image(subject).tobytes()
        assert (out / "painting.png").is_file() and (out / "inspire-manifest.txt").is_file()

    def test_hsv_remap(self, subject, tmp_path):
        inspiration = tmp_path / "i.png"
        imageio.write_png(inspiration, np.random.default_rng(2).uniform(size=(20, 20, 3)))
        out = tmp_path / "hsv"
        assert cli.main(["inspire", "--subject", str(subject), "--inspiration", str(inspiration), "--steps", "3",
                         "--hsv-remap", "--strokes", "10", "--out", str(out)]) == 0
        s = imageio.read_image(subject)
        got = imageio.read_image(out / "imagination.png")
        # the PNG holds the 8-bit rounding of the exact remap
        ref = hsv_remap(style_transfer(s, imageio.read_image(inspiration), steps=3).image, s)
        assert np.array_equal(got, imageio.to_uint8(ref) / 255.0)
        # 8-bit rounding moves hue by at most 0.5/255 / (6 chroma); keep pixels where that is below 1/255
        hs, hg = rgb_to_hsv(s), rgb_to_hsv(got)
        ok = (hg[..., 1] > 0) & (hg[..., 2] > 0) & (np.ptp(got, axis=-1) >= 0.25)
        dh = np.abs(hs[..., 0] - hg[..., 0])
        assert ok.sum() > 20 and np.max(np.minimum(dh, 1 - dh)[ok]) <= 1 / 255

    def test_byte_identical(self, subject, tmp_path):
        for name in ("a", "b"):
            cli.main(["inspire", "--subject", str(subject), "--inspiration", str(subject), "--steps", "2",
                      "--strokes", "30", "--seed", "9", "--out", str(tmp_path / name)])
        for f in ("imagination.png", "painting.png"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_artist_without_checkpoint(self, subject, tmp_path):
        assert cli.main(["inspire", "--subject", str(subject), "--inspiration", str(subject), "--baseline", "artist",
                         "--out", str(tmp_path / "x")]) == cli.USAGE

    def test_artist_baseline(self, subject, checkpoint, tmp_path):
        assert cli.main(["inspire", "--subject", str(subject), "--inspiration", str(subject), "--steps", "1",
                         "--baseline", "artist", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "x")]) == 0
        assert imageio.read_image(tmp_path / "x" / "painting.png").shape == (16, 12, 3)


class TestGradcheck:
    def test_tensor_ops_pass(self, capsys):
        assert cli.main(["gradcheck", "--component", "tensor-ops"]) == cli.OK
        assert "tensor-ops" in capsys.readouterr().out

    def test_failure_exit_code(self):
        assert cli.main(["gradcheck", "--component", "tensor-ops", "--tolerance", "1e-30"]) == cli.VERIFY_FAILED

    def test_unknown_component(self, capsys):
        assert cli.main(["gradcheck", "--component", "everything"]) == cli.USAGE
        assert "usage" in capsys.readouterr().err
